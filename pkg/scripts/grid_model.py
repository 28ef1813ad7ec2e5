from __future__ import annotations

from dataclasses import dataclass
import json
import math
from pathlib import Path
import re
from typing import Any

import numpy as np
import requests
from scipy import sparse

from pipeline_utils import VERSION, CaseParseError


BUS_KINDS = ("slack", "load", "generator")
MATPOWER_BUS_KINDS = {1: "load", 2: "generator", 3: "slack"}
QUANTITY_KINDS = ("P_D", "Q_D", "V_M", "V_A", "P_G", "Q_G")

SCALAR_RE = re.compile(r"^\s*mpc\.(?P<name>\w+)\s*=\s*(?P<value>[^;\[]+?)\s*;?\s*$")
MATRIX_START_RE = re.compile(r"^\s*mpc\.(?P<name>\w+)\s*=\s*\[(?P<rest>.*)$")
MATRIX_TABLES = ("bus", "gen", "branch", "gencost")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    pd: float
    qd: float
    gs: float
    bs: float
    vm_min: float
    vm_max: float
    va_min: float
    va_max: float


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, float, float]
    vm_setpoint: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    tap: float = 1.0
    shift: float = 0.0
    s_max: float = math.inf


@dataclass(frozen=True)
class NetworkCase:
    """Static grid description in per-unit on ``base_mva`` with angles in radians."""

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_index(self) -> dict[int, int]:
        return {bus.id: index for index, bus in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        return next(index for index, bus in enumerate(self.buses) if bus.kind == "slack")

    @property
    def demand_buses(self) -> tuple[int, ...]:
        return tuple(index for index, bus in enumerate(self.buses) if bus.pd != 0.0 or bus.qd != 0.0)

    @property
    def generator_buses(self) -> tuple[int, ...]:
        lookup = self.bus_index
        return tuple(lookup[generator.bus] for generator in self.generators)


@dataclass(frozen=True)
class AdmittanceMatrix:
    matrix: sparse.csr_matrix

    @property
    def n_bus(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class SampleLayout:
    """Flat ordering P_D, Q_D, |V|, phase, P_G, Q_G of one power flow sample."""

    demand_buses: tuple[int, ...]
    n_bus: int
    n_gen: int

    @property
    def n_demand(self) -> int:
        return len(self.demand_buses)

    @property
    def dimension(self) -> int:
        return 2 * self.n_demand + 2 * self.n_bus + 2 * self.n_gen

    def block(self, kind: str) -> slice:
        sizes = {
            "P_D": self.n_demand,
            "Q_D": self.n_demand,
            "V_M": self.n_bus,
            "V_A": self.n_bus,
            "P_G": self.n_gen,
            "Q_G": self.n_gen,
        }
        if kind not in sizes:
            raise ValueError(f"Unknown quantity kind '{kind}'.")
        start = 0
        for name in QUANTITY_KINDS:
            if name == kind:
                return slice(start, start + sizes[name])
            start += sizes[name]
        raise AssertionError("unreachable")

    def index(self, kind: str, element: int) -> int:
        block = self.block(kind)
        if element < 0 or element >= block.stop - block.start:
            raise ValueError(f"{kind}: element {element} outside the block.")
        return block.start + element

    def labels(self, case: NetworkCase) -> list[str]:
        labels: list[str] = []
        for kind in ("P_D", "Q_D"):
            labels.extend(f"{kind}[bus {case.buses[index].id}]" for index in self.demand_buses)
        for kind in ("V_M", "V_A"):
            labels.extend(f"{kind}[bus {bus.id}]" for bus in case.buses)
        for kind in ("P_G", "Q_G"):
            labels.extend(f"{kind}[gen {index} @ bus {gen.bus}]" for index, gen in enumerate(case.generators))
        return labels


@dataclass(frozen=True)
class NormalizationBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("Bounds must be two 1-D arrays of equal length.")
        bad = np.flatnonzero(~(self.lo < self.hi))
        if bad.size:
            raise ValueError(f"Bounds require lo < hi; violated at dimensions {bad.tolist()}.")
        self.lo.setflags(write=False)
        self.hi.setflags(write=False)

    @property
    def dimension(self) -> int:
        return int(self.lo.shape[0])

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo


def _fold_number(raw: str, line: int) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise CaseParseError(f"invalid number '{raw}'.", line) from exc


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0]


def _parse_matpower_tables(text: str) -> tuple[dict[str, float], dict[str, list[tuple[int, list[float]]]]]:
    scalars: dict[str, float] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: str | None = None
    skipping = False

    def consume_rows(chunk: str, line_no: int) -> bool:
        closed = "]" in chunk
        body = chunk.split("]", 1)[0]
        for raw_row in body.split(";"):
            tokens = raw_row.replace(",", " ").split()
            if not tokens or skipping:
                continue
            tables[current].append((line_no, [_fold_number(token, line_no) for token in tokens]))
        return closed

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line)
        if not line.strip():
            continue
        if current is not None:
            if consume_rows(line, line_no):
                current = None
                skipping = False
            continue
        start = MATRIX_START_RE.match(line)
        if start:
            name = start.group("name")
            skipping = name not in MATRIX_TABLES
            current = name
            tables.setdefault(name, [])
            if consume_rows(start.group("rest"), line_no):
                current = None
                skipping = False
            continue
        scalar = SCALAR_RE.match(line)
        if scalar:
            value = scalar.group("value").strip()
            if value.startswith("'") or value.startswith('"'):
                continue
            scalars[scalar.group("name")] = _fold_number(value, line_no)
            continue
        stripped = line.strip()
        if stripped.startswith("function") or stripped in ("end", "return"):
            continue
        raise CaseParseError(f"unexpected statement '{stripped}'.", line_no)

    if current is not None:
        raise CaseParseError(f"table 'mpc.{current}' is not closed with '];'.")
    return scalars, tables


def _require_columns(row: list[float], count: int, table: str, line_no: int) -> None:
    if len(row) < count:
        raise CaseParseError(f"mpc.{table} row needs at least {count} columns, got {len(row)}.", line_no)


def _parse_matpower(text: str, name: str, angle_bound: float) -> NetworkCase:
    scalars, tables = _parse_matpower_tables(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("mpc.baseMVA is missing.")
    base = scalars["baseMVA"]
    if base <= 0.0:
        raise CaseParseError("mpc.baseMVA must be positive.")
    for table in ("bus", "gen", "branch"):
        if not tables.get(table):
            raise CaseParseError(f"mpc.{table} table is missing or empty.")

    buses: list[Bus] = []
    for line_no, row in tables["bus"]:
        _require_columns(row, 13, "bus", line_no)
        kind = MATPOWER_BUS_KINDS.get(int(row[1]))
        if kind is None:
            raise CaseParseError(f"bus {int(row[0])}: unsupported bus type {int(row[1])}.", line_no)
        buses.append(
            Bus(
                id=int(row[0]),
                kind=kind,
                pd=row[2] / base,
                qd=row[3] / base,
                gs=row[4] / base,
                bs=row[5] / base,
                vm_min=row[12],
                vm_max=row[11],
                va_min=-angle_bound,
                va_max=angle_bound,
            )
        )

    costs = tables.get("gencost", [])
    generators: list[Generator] = []
    for position, (line_no, row) in enumerate(tables["gen"]):
        _require_columns(row, 10, "gen", line_no)
        if row[7] <= 0:
            continue
        cost = (0.0, 0.0, 0.0)
        if position < len(costs):
            cost_line, cost_row = costs[position]
            cost = _matpower_cost(cost_row, base, cost_line)
        generators.append(
            Generator(
                bus=int(row[0]),
                p_min=row[9] / base,
                p_max=row[8] / base,
                q_min=row[4] / base,
                q_max=row[3] / base,
                cost=cost,
                vm_setpoint=row[5],
            )
        )

    branches: list[Branch] = []
    for line_no, row in tables["branch"]:
        _require_columns(row, 11, "branch", line_no)
        if row[10] <= 0:
            continue
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=row[2],
                x=row[3],
                b=row[4],
                tap=row[8] if row[8] != 0.0 else 1.0,
                shift=math.radians(row[9]),
                s_max=row[5] / base if row[5] > 0.0 else math.inf,
            )
        )

    return NetworkCase(name=name, base_mva=base, buses=tuple(buses), generators=tuple(generators), branches=tuple(branches))


def _matpower_cost(row: list[float], base: float, line_no: int) -> tuple[float, float, float]:
    _require_columns(row, 4, "gencost", line_no)
    if int(row[0]) != 2:
        raise CaseParseError("only polynomial (model 2) generator costs are supported.", line_no)
    n = int(row[3])
    coefficients = row[4 : 4 + n]
    if len(coefficients) != n or n > 3:
        raise CaseParseError(f"polynomial cost needs {n} <= 3 coefficients.", line_no)
    padded = [0.0] * (3 - n) + list(coefficients)
    c2, c1, c0 = padded
    return (c2 * base * base, c1 * base, c0)


def _native_number(raw: dict[str, Any], key: str, label: str, default: float | None = None) -> float:
    value = raw.get(key, default)
    if value is None:
        raise CaseParseError(f"{label}: '{key}' is required.")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseParseError(f"{label}: '{key}' must be numeric.")
    return float(value)


def _parse_native(raw: Any, name: str, angle_bound: float) -> NetworkCase:
    if not isinstance(raw, dict):
        raise CaseParseError("native case root must be an object.")
    for key in ("buses", "generators", "branches"):
        if not isinstance(raw.get(key), list):
            raise CaseParseError(f"'{key}' must be an array.")
    base = _native_number(raw, "baseMVA", "case", 100.0)

    buses: list[Bus] = []
    for index, item in enumerate(raw["buses"]):
        label = f"buses[{index}]"
        if not isinstance(item, dict):
            raise CaseParseError(f"{label}: must be an object.")
        kind = str(item.get("type") or "").strip().lower()
        if kind not in BUS_KINDS:
            raise CaseParseError(f"{label}: 'type' must be one of {list(BUS_KINDS)}.")
        va_min = item.get("vaMin")
        va_max = item.get("vaMax")
        buses.append(
            Bus(
                id=int(_native_number(item, "id", label)),
                kind=kind,
                pd=_native_number(item, "pd", label, 0.0),
                qd=_native_number(item, "qd", label, 0.0),
                gs=_native_number(item, "gs", label, 0.0),
                bs=_native_number(item, "bs", label, 0.0),
                vm_min=_native_number(item, "vmMin", label),
                vm_max=_native_number(item, "vmMax", label),
                va_min=-angle_bound if va_min is None else float(va_min),
                va_max=angle_bound if va_max is None else float(va_max),
            )
        )

    generators: list[Generator] = []
    for index, item in enumerate(raw["generators"]):
        label = f"generators[{index}]"
        if not isinstance(item, dict):
            raise CaseParseError(f"{label}: must be an object.")
        cost = item.get("cost", [0.0, 0.0, 0.0])
        if not isinstance(cost, list) or len(cost) != 3:
            raise CaseParseError(f"{label}: 'cost' must be [c2, c1, c0].")
        generators.append(
            Generator(
                bus=int(_native_number(item, "bus", label)),
                p_min=_native_number(item, "pMin", label),
                p_max=_native_number(item, "pMax", label),
                q_min=_native_number(item, "qMin", label),
                q_max=_native_number(item, "qMax", label),
                cost=(float(cost[0]), float(cost[1]), float(cost[2])),
                vm_setpoint=_native_number(item, "vmSetpoint", label, 1.0),
            )
        )

    branches: list[Branch] = []
    for index, item in enumerate(raw["branches"]):
        label = f"branches[{index}]"
        if not isinstance(item, dict):
            raise CaseParseError(f"{label}: must be an object.")
        s_max = item.get("sMax")
        branches.append(
            Branch(
                from_bus=int(_native_number(item, "from", label)),
                to_bus=int(_native_number(item, "to", label)),
                r=_native_number(item, "r", label),
                x=_native_number(item, "x", label),
                b=_native_number(item, "b", label, 0.0),
                tap=_native_number(item, "tap", label, 1.0),
                shift=_native_number(item, "shift", label, 0.0),
                s_max=math.inf if s_max is None else float(s_max),
            )
        )

    case_name = str(raw.get("name") or name).strip() or name
    return NetworkCase(name=case_name, base_mva=base, buses=tuple(buses), generators=tuple(generators), branches=tuple(branches))


def validate_case(case: NetworkCase) -> NetworkCase:
    ids = [bus.id for bus in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseParseError("bus ids must be unique.")
    slack_count = sum(1 for bus in case.buses if bus.kind == "slack")
    if slack_count != 1:
        raise CaseParseError(f"exactly one slack bus is required, found {slack_count}.")
    known = set(ids)
    kinds = {bus.id: bus.kind for bus in case.buses}

    for bus in case.buses:
        if bus.vm_min > bus.vm_max:
            raise CaseParseError(f"bus {bus.id}: voltage bounds are inverted.")
        if bus.va_min > bus.va_max:
            raise CaseParseError(f"bus {bus.id}: angle bounds are inverted.")

    generator_buses = set()
    for index, generator in enumerate(case.generators):
        if generator.bus not in known:
            raise CaseParseError(f"generator {index}: bus {generator.bus} does not exist.")
        if kinds[generator.bus] == "load":
            raise CaseParseError(f"generator {index}: bus {generator.bus} is a load bus.")
        if generator.p_min > generator.p_max:
            raise CaseParseError(f"generator {index}: active power bounds are inverted.")
        if generator.q_min > generator.q_max:
            raise CaseParseError(f"generator {index}: reactive power bounds are inverted.")
        generator_buses.add(generator.bus)

    for bus in case.buses:
        if bus.kind != "load" and bus.id not in generator_buses:
            raise CaseParseError(f"bus {bus.id}: {bus.kind} bus has no generator.")

    for index, branch in enumerate(case.branches):
        for endpoint in (branch.from_bus, branch.to_bus):
            if endpoint not in known:
                raise CaseParseError(f"branch {index}: bus {endpoint} does not exist.")
        if branch.r == 0.0 and branch.x == 0.0:
            raise CaseParseError(f"branch {index}: r and x are both zero.")
        if branch.tap <= 0.0:
            raise CaseParseError(f"branch {index}: tap ratio must be positive.")
    return case


def parse_case(text: str, name: str = "case", angle_bound: float = math.pi / 6.0) -> NetworkCase:
    """Parse a native JSON case or a MATPOWER ``mpc`` case into a validated per-unit NetworkCase."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"invalid JSON: {exc.msg}.", exc.lineno) from exc
        case = _parse_native(raw, name, angle_bound)
    else:
        case = _parse_matpower(text, name, angle_bound)
    return validate_case(case)


def fetch_case_text(session: requests.Session, url: str, timeout: float) -> str:
    response = session.get(url, timeout=timeout)
    response.raise_for_status()
    return response.text


def read_case_source(
    source: str,
    session: requests.Session | None = None,
    timeout: float = 30.0,
) -> tuple[str, str]:
    if source.startswith(("http://", "https://")):
        name = Path(source.split("?", 1)[0]).stem or "case"
        if session is not None:
            return fetch_case_text(session, source, timeout), name
        with requests.Session() as own_session:
            own_session.headers.update({"User-Agent": "pfdiff-pipeline/1.0"})
            return fetch_case_text(own_session, source, timeout), name
    path = Path(source)
    return path.read_text(encoding="utf-8"), path.stem


def load_case(source: str, angle_bound: float = math.pi / 6.0, session: requests.Session | None = None) -> NetworkCase:
    text, name = read_case_source(source, session=session)
    return parse_case(text, name=name, angle_bound=angle_bound)


def case_to_native(case: NetworkCase) -> dict[str, Any]:
    return {
        "version": VERSION,
        "name": case.name,
        "baseMVA": case.base_mva,
        "buses": [
            {
                "id": bus.id,
                "type": bus.kind,
                "pd": bus.pd,
                "qd": bus.qd,
                "gs": bus.gs,
                "bs": bus.bs,
                "vmMin": bus.vm_min,
                "vmMax": bus.vm_max,
                "vaMin": bus.va_min,
                "vaMax": bus.va_max,
            }
            for bus in case.buses
        ],
        "generators": [
            {
                "bus": gen.bus,
                "pMin": gen.p_min,
                "pMax": gen.p_max,
                "qMin": gen.q_min,
                "qMax": gen.q_max,
                "cost": list(gen.cost),
                "vmSetpoint": gen.vm_setpoint,
            }
            for gen in case.generators
        ],
        "branches": [
            {
                "from": branch.from_bus,
                "to": branch.to_bus,
                "r": branch.r,
                "x": branch.x,
                "b": branch.b,
                "tap": branch.tap,
                "shift": branch.shift,
                "sMax": None if math.isinf(branch.s_max) else branch.s_max,
            }
            for branch in case.branches
        ],
    }


def branch_admittances(case: NetworkCase) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-branch two-port entries (Yff, Yft, Ytf, Ytt) of the pi model with off-nominal tap."""
    if not case.branches:
        empty = np.zeros(0, dtype=complex)
        return empty, empty, empty, empty
    r = np.array([branch.r for branch in case.branches])
    x = np.array([branch.x for branch in case.branches])
    if np.any((r == 0.0) & (x == 0.0)):
        raise ValueError("Cannot build admittance: a branch has r = x = 0.")
    b = np.array([branch.b for branch in case.branches])
    tap = np.array([branch.tap * np.exp(1j * branch.shift) for branch in case.branches])
    series = 1.0 / (r + 1j * x)
    ytt = series + 1j * b / 2.0
    yff = ytt / (tap * np.conj(tap))
    yft = -series / np.conj(tap)
    ytf = -series / tap
    return yff, yft, ytf, ytt


def build_admittance(case: NetworkCase) -> AdmittanceMatrix:
    n = case.n_bus
    lookup = case.bus_index
    shunt = np.array([bus.gs + 1j * bus.bs for bus in case.buses])
    ybus = sparse.diags(shunt, format="csr", dtype=complex)
    if case.branches:
        yff, yft, ytf, ytt = branch_admittances(case)
        f = np.array([lookup[branch.from_bus] for branch in case.branches])
        t = np.array([lookup[branch.to_bus] for branch in case.branches])
        rows = np.concatenate([f, f, t, t])
        cols = np.concatenate([f, t, f, t])
        values = np.concatenate([yff, yft, ytf, ytt])
        ybus = ybus + sparse.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsr()
    return AdmittanceMatrix(matrix=sparse.csr_matrix(ybus))


def make_layout(case: NetworkCase) -> SampleLayout:
    return SampleLayout(demand_buses=case.demand_buses, n_bus=case.n_bus, n_gen=len(case.generators))


def generator_incidence(case: NetworkCase) -> np.ndarray:
    matrix = np.zeros((case.n_bus, len(case.generators)))
    for column, bus_position in enumerate(case.generator_buses):
        matrix[bus_position, column] = 1.0
    return matrix


def demand_incidence(layout: SampleLayout) -> np.ndarray:
    matrix = np.zeros((layout.n_bus, layout.n_demand))
    for column, bus_position in enumerate(layout.demand_buses):
        matrix[bus_position, column] = 1.0
    return matrix


@dataclass(frozen=True)
class AngleWindow:
    """Normalization window for bus angles: ``center`` per bus plus one half-width, clipped to the bus limits."""

    center: np.ndarray
    half_width: float


def _widen(low: np.ndarray, high: np.ndarray, min_span: float) -> tuple[np.ndarray, np.ndarray]:
    narrow = (high - low) < min_span
    center = (low + high) / 2.0
    return np.where(narrow, center - min_span / 2.0, low), np.where(narrow, center + min_span / 2.0, high)


def make_bounds(
    case: NetworkCase,
    layout: SampleLayout,
    demand_range: tuple[float, float] = (0.8, 1.2),
    min_span: float = 1e-3,
    angle_window: AngleWindow | None = None,
) -> NormalizationBounds:
    lo = np.zeros(layout.dimension)
    hi = np.zeros(layout.dimension)

    def put(kind: str, low: Any, high: Any) -> None:
        low, high = _widen(np.asarray(low, dtype=float), np.asarray(high, dtype=float), min_span)
        lo[layout.block(kind)] = low
        hi[layout.block(kind)] = high

    demand = [case.buses[index] for index in layout.demand_buses]
    for kind, nominal in (("P_D", [bus.pd for bus in demand]), ("Q_D", [bus.qd for bus in demand])):
        scaled = np.outer(demand_range, nominal)
        put(kind, scaled.min(axis=0), scaled.max(axis=0))
    put("V_M", [bus.vm_min for bus in case.buses], [bus.vm_max for bus in case.buses])
    va_min = np.array([bus.va_min for bus in case.buses])
    va_max = np.array([bus.va_max for bus in case.buses])
    if angle_window is None:
        put("V_A", va_min, va_max)
    else:
        center = np.clip(np.asarray(angle_window.center, dtype=float), va_min, va_max)
        half = max(float(angle_window.half_width), min_span / 2.0)
        put("V_A", np.maximum(center - half, va_min), np.minimum(center + half, va_max))
    put("P_G", [gen.p_min for gen in case.generators], [gen.p_max for gen in case.generators])
    put("Q_G", [gen.q_min for gen in case.generators], [gen.q_max for gen in case.generators])
    return NormalizationBounds(lo=lo, hi=hi)


def _check_dimension(values: np.ndarray, bounds: NormalizationBounds) -> None:
    if values.shape[-1] != bounds.dimension:
        raise ValueError(f"Dimension mismatch: got {values.shape[-1]}, bounds have {bounds.dimension}.")


def normalize(sample: np.ndarray, bounds: NormalizationBounds) -> np.ndarray:
    sample = np.asarray(sample, dtype=float)
    _check_dimension(sample, bounds)
    return (sample - bounds.lo) / bounds.span


def denormalize(unit: np.ndarray, bounds: NormalizationBounds) -> np.ndarray:
    unit = np.asarray(unit, dtype=float)
    _check_dimension(unit, bounds)
    return bounds.lo + unit * bounds.span


def layout_to_json(layout: SampleLayout, case: NetworkCase) -> dict[str, Any]:
    return {
        "dimension": layout.dimension,
        "order": list(QUANTITY_KINDS),
        "demandBuses": [case.buses[index].id for index in layout.demand_buses],
        "buses": [bus.id for bus in case.buses],
        "generatorBuses": [gen.bus for gen in case.generators],
        "labels": layout.labels(case),
    }


def bounds_to_json(bounds: NormalizationBounds) -> dict[str, Any]:
    return {"lo": bounds.lo.tolist(), "hi": bounds.hi.tolist()}


def bounds_from_json(raw: Any) -> NormalizationBounds:
    if not isinstance(raw, dict) or not isinstance(raw.get("lo"), list) or not isinstance(raw.get("hi"), list):
        raise ValueError("bounds: expected an object with 'lo' and 'hi' arrays.")
    return NormalizationBounds(lo=np.array(raw["lo"], dtype=float), hi=np.array(raw["hi"], dtype=float))


@dataclass(frozen=True)
class GridTensors:
    """Dense real-arithmetic view of Y plus the maps from generator and demand dimensions onto buses."""

    layout: SampleLayout
    g: np.ndarray
    b: np.ndarray
    generator_map: np.ndarray
    demand_map: np.ndarray


def make_grid_tensors(
    case: NetworkCase,
    layout: SampleLayout,
    admittance: AdmittanceMatrix | None = None,
) -> GridTensors:
    if admittance is None:
        admittance = build_admittance(case)
    if admittance.n_bus != layout.n_bus:
        raise ValueError(f"Admittance has {admittance.n_bus} buses, layout has {layout.n_bus}.")
    y = admittance.dense()
    return GridTensors(
        layout=layout,
        g=y.real.copy(),
        b=y.imag.copy(),
        generator_map=generator_incidence(case),
        demand_map=demand_incidence(layout),
    )

from __future__ import annotations

from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Sequence
import warnings

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import MatrixRankWarning, spsolve
import torch

from grid_model import (
    AdmittanceMatrix,
    AngleWindow,
    GridTensors,
    NetworkCase,
    NormalizationBounds,
    SampleLayout,
    bounds_from_json,
    bounds_to_json,
    branch_admittances,
    build_admittance,
    case_to_native,
    denormalize,
    layout_to_json,
    make_bounds,
    make_grid_tensors,
    make_layout,
    normalize,
    parse_case,
)
from pipeline_utils import (
    VERSION,
    DatasetAbortError,
    InfeasibleDispatchError,
    PipelineConfig,
    PowerFlowDivergedError,
    SingularJacobianError,
    config_to_json,
    read_json,
    stream_rng,
    utc_now_iso,
    write_json,
)


logger = logging.getLogger(__name__)

CONSTRAINT_KEYS = (
    "activeGeneration",
    "reactiveGeneration",
    "voltageMagnitude",
    "voltageAngle",
    "powerBalance",
    "lineFlow",
)
CONSTRAINT_LABELS = dict(zip(CONSTRAINT_KEYS, ("C1", "C2", "C3", "C4", "C5", "C6")))
BOX_CONSTRAINTS = {
    "activeGeneration": "P_G",
    "reactiveGeneration": "Q_G",
    "voltageMagnitude": "V_M",
    "voltageAngle": "V_A",
}

GENERATOR_OF_RECORD = "merit-order dispatch + Newton-Raphson AC power flow with feasibility rejection (no OPF)"

# Mean imbalance of denormalized standard-normal vectors reported for the IEEE cases.
REFERENCE_NOISE_IMBALANCE = {"case14": 2.75, "case30": 2.87}


@dataclass(frozen=True)
class ImbalanceResult:
    per_bus: np.ndarray
    mean: float | np.ndarray


@dataclass(frozen=True)
class BranchModel:
    from_index: np.ndarray
    to_index: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    s_max: np.ndarray


@dataclass(frozen=True)
class LineFlowCheck:
    flows: np.ndarray
    limits: np.ndarray
    within: np.ndarray

    @property
    def worst_violation(self) -> float:
        if self.flows.size == 0:
            return 0.0
        return float(np.max(np.maximum(self.flows - self.limits, 0.0)))


@dataclass(frozen=True)
class ConstraintCheck:
    satisfied: bool
    worst_violation: float


@dataclass(frozen=True)
class ConstraintReport:
    checks: dict[str, ConstraintCheck]

    @property
    def feasible(self) -> bool:
        return all(check.satisfied for check in self.checks.values())

    def failed(self) -> list[str]:
        return [key for key in CONSTRAINT_KEYS if not self.checks[key].satisfied]


@dataclass(frozen=True)
class DispatchScenario:
    load_multipliers: np.ndarray
    cost_multipliers: np.ndarray
    seed: int | None = None


@dataclass(frozen=True)
class GeneratorSetpoints:
    p: np.ndarray
    vm: np.ndarray


@dataclass(frozen=True)
class PowerFlowSolution:
    sample: np.ndarray
    voltage: np.ndarray
    iterations: int
    mismatch: float
    switched_buses: tuple[int, ...] = ()


@dataclass(frozen=True)
class PowerFlowDataset:
    case: NetworkCase
    layout: SampleLayout
    bounds: NormalizationBounds
    samples: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])

    def normalized(self) -> np.ndarray:
        return normalize(self.samples, self.bounds)


def _blocks(sample: np.ndarray, layout: SampleLayout) -> dict[str, np.ndarray]:
    if sample.shape[-1] != layout.dimension:
        raise ValueError(f"Sample has {sample.shape[-1]} dimensions, layout expects {layout.dimension}.")
    return {kind: sample[..., layout.block(kind)] for kind in ("P_D", "Q_D", "V_M", "V_A", "P_G", "Q_G")}


def bus_voltages(sample: np.ndarray, layout: SampleLayout) -> np.ndarray:
    blocks = _blocks(np.asarray(sample, dtype=float), layout)
    return blocks["V_M"] * np.exp(1j * blocks["V_A"])


def bus_mismatch(sample: np.ndarray, grid: GridTensors) -> np.ndarray:
    """Complex power balance mismatch per bus, (P_G - P_D) + j(Q_G - Q_D) - V conj(Y V)."""
    sample = np.asarray(sample, dtype=float)
    blocks = _blocks(sample, grid.layout)
    y = grid.g + 1j * grid.b
    voltage = blocks["V_M"] * np.exp(1j * blocks["V_A"])
    injected = voltage * np.conj(voltage @ y.T)
    generation = (blocks["P_G"] + 1j * blocks["Q_G"]) @ grid.generator_map.T
    demand = (blocks["P_D"] + 1j * blocks["Q_D"]) @ grid.demand_map.T
    return generation - demand - injected


def residual_imbalance(sample: np.ndarray, grid: GridTensors) -> ImbalanceResult:
    """Mean over buses of the complex mismatch magnitude; accepts one sample or a batch."""
    per_bus = np.abs(bus_mismatch(sample, grid))
    mean = per_bus.mean(axis=-1)
    return ImbalanceResult(per_bus=per_bus, mean=float(mean) if np.ndim(mean) == 0 else mean)


@dataclass(frozen=True)
class TorchGrid:
    layout: SampleLayout
    g: torch.Tensor
    b: torch.Tensor
    generator_map: torch.Tensor
    demand_map: torch.Tensor


def torch_grid(grid: GridTensors, dtype: torch.dtype = torch.float64) -> TorchGrid:
    return TorchGrid(
        layout=grid.layout,
        g=torch.as_tensor(grid.g, dtype=dtype),
        b=torch.as_tensor(grid.b, dtype=dtype),
        generator_map=torch.as_tensor(grid.generator_map, dtype=dtype),
        demand_map=torch.as_tensor(grid.demand_map, dtype=dtype),
    )


def residual_imbalance_torch(batch: torch.Tensor, grid: TorchGrid) -> torch.Tensor:
    """Differentiable batched imbalance in rectangular real arithmetic; returns one R per row."""
    layout = grid.layout
    if batch.shape[-1] != layout.dimension:
        raise ValueError(f"Batch has {batch.shape[-1]} dimensions, layout expects {layout.dimension}.")
    vm = batch[..., layout.block("V_M")]
    va = batch[..., layout.block("V_A")]
    e = vm * torch.cos(va)
    f = vm * torch.sin(va)
    current_re = e @ grid.g.T - f @ grid.b.T
    current_im = e @ grid.b.T + f @ grid.g.T
    p_injected = e * current_re + f * current_im
    q_injected = f * current_re - e * current_im
    p_net = batch[..., layout.block("P_G")] @ grid.generator_map.T - batch[..., layout.block("P_D")] @ grid.demand_map.T
    q_net = batch[..., layout.block("Q_G")] @ grid.generator_map.T - batch[..., layout.block("Q_D")] @ grid.demand_map.T
    mismatch = torch.stack((p_net - p_injected, q_net - q_injected), dim=-1)
    return torch.linalg.vector_norm(mismatch, dim=-1).mean(dim=-1)


def make_branch_model(case: NetworkCase) -> BranchModel:
    lookup = case.bus_index
    yff, yft, ytf, ytt = branch_admittances(case)
    return BranchModel(
        from_index=np.array([lookup[branch.from_bus] for branch in case.branches], dtype=int),
        to_index=np.array([lookup[branch.to_bus] for branch in case.branches], dtype=int),
        yff=yff,
        yft=yft,
        ytf=ytf,
        ytt=ytt,
        s_max=np.array([branch.s_max for branch in case.branches], dtype=float),
    )


def branch_flows(voltage: np.ndarray, branches: BranchModel) -> np.ndarray:
    """Apparent power magnitude per branch, the larger of the two terminal flows."""
    v_from = voltage[..., branches.from_index]
    v_to = voltage[..., branches.to_index]
    s_from = v_from * np.conj(branches.yff * v_from + branches.yft * v_to)
    s_to = v_to * np.conj(branches.ytf * v_from + branches.ytt * v_to)
    return np.maximum(np.abs(s_from), np.abs(s_to))


def line_flow_check(
    sample: np.ndarray,
    case: NetworkCase,
    layout: SampleLayout | None = None,
    branches: BranchModel | None = None,
    tolerance: float = 1e-6,
) -> LineFlowCheck:
    layout = layout or make_layout(case)
    branches = branches or make_branch_model(case)
    flows = branch_flows(bus_voltages(sample, layout), branches)
    return LineFlowCheck(flows=flows, limits=branches.s_max, within=flows <= branches.s_max + tolerance)


def constraint_violations(
    samples: np.ndarray,
    case: NetworkCase,
    grid: GridTensors,
    branches: BranchModel | None = None,
) -> dict[str, np.ndarray]:
    """Worst violation per sample for every constraint family; zero means satisfied."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    layout = grid.layout
    blocks = _blocks(samples, layout)
    limits = {
        "P_G": (np.array([gen.p_min for gen in case.generators]), np.array([gen.p_max for gen in case.generators])),
        "Q_G": (np.array([gen.q_min for gen in case.generators]), np.array([gen.q_max for gen in case.generators])),
        "V_M": (np.array([bus.vm_min for bus in case.buses]), np.array([bus.vm_max for bus in case.buses])),
        "V_A": (np.array([bus.va_min for bus in case.buses]), np.array([bus.va_max for bus in case.buses])),
    }
    violations: dict[str, np.ndarray] = {}
    for key, kind in BOX_CONSTRAINTS.items():
        lo, hi = limits[kind]
        values = blocks[kind]
        excess = np.maximum(np.maximum(lo - values, values - hi), 0.0)
        violations[key] = excess.max(axis=-1) if excess.shape[-1] else np.zeros(samples.shape[0])
    violations["powerBalance"] = np.abs(bus_mismatch(samples, grid)).max(axis=-1)
    branches = branches or make_branch_model(case)
    if branches.s_max.size:
        flows = branch_flows(blocks["V_M"] * np.exp(1j * blocks["V_A"]), branches)
        violations["lineFlow"] = np.maximum(flows - branches.s_max, 0.0).max(axis=-1)
    else:
        violations["lineFlow"] = np.zeros(samples.shape[0])
    return violations


def constraint_report(
    sample: np.ndarray,
    case: NetworkCase,
    grid: GridTensors,
    tolerance: float = 1e-6,
    branches: BranchModel | None = None,
) -> ConstraintReport:
    """Box constraints are compared exactly, power balance and line flows at ``tolerance``."""
    violations = constraint_violations(sample, case, grid, branches)
    checks: dict[str, ConstraintCheck] = {}
    for key in CONSTRAINT_KEYS:
        worst = float(violations[key][0])
        allowed = 0.0 if key in BOX_CONSTRAINTS else tolerance
        checks[key] = ConstraintCheck(satisfied=worst <= allowed, worst_violation=worst)
    return ConstraintReport(checks=checks)


def power_injection(ybus: sparse.csr_matrix, voltage: np.ndarray) -> np.ndarray:
    return voltage * np.conj(ybus @ voltage)


def mismatch_vector(
    ybus: sparse.csr_matrix,
    sbus: np.ndarray,
    voltage: np.ndarray,
    pv: np.ndarray,
    pq: np.ndarray,
) -> np.ndarray:
    mismatch = power_injection(ybus, voltage) - sbus
    return np.concatenate([mismatch[pv].real, mismatch[pq].real, mismatch[pq].imag])


def newton_jacobian(ybus: sparse.csr_matrix, voltage: np.ndarray, pv: np.ndarray, pq: np.ndarray) -> sparse.csr_matrix:
    """Polar Jacobian of ``mismatch_vector`` w.r.t. (angles at pv+pq, magnitudes at pq)."""
    n = voltage.shape[0]
    current = ybus @ voltage
    diag_v = sparse.diags(voltage)
    diag_i = sparse.diags(current)
    diag_vnorm = sparse.diags(voltage / np.abs(voltage))
    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    ds_dvm = sparse.csr_matrix(ds_dvm)
    ds_dva = sparse.csr_matrix(ds_dva)
    pvpq = np.concatenate([pv, pq])
    j11 = ds_dva[pvpq][:, pvpq].real
    j12 = ds_dvm[pvpq][:, pq].real
    j21 = ds_dva[pq][:, pvpq].imag
    j22 = ds_dvm[pq][:, pq].imag
    jacobian = sparse.vstack([sparse.hstack([j11, j12]), sparse.hstack([j21, j22])], format="csr")
    if jacobian.shape != (pvpq.size + pq.size, pvpq.size + pq.size):
        raise AssertionError(f"unexpected Jacobian shape {jacobian.shape} for {n} buses")
    return jacobian


def _infinity_norm(values: np.ndarray) -> float:
    return float(np.max(np.abs(values))) if values.size else 0.0


def _newton_iterations(
    ybus: sparse.csr_matrix,
    sbus: np.ndarray,
    voltage: np.ndarray,
    pv: np.ndarray,
    pq: np.ndarray,
    tolerance: float,
    max_iterations: int,
) -> tuple[np.ndarray, int, float]:
    vm = np.abs(voltage)
    va = np.angle(voltage)
    pvpq = np.concatenate([pv, pq])
    mismatch = mismatch_vector(ybus, sbus, voltage, pv, pq)
    norm = _infinity_norm(mismatch)
    iterations = 0
    while norm > tolerance and iterations < max_iterations:
        iterations += 1
        jacobian = newton_jacobian(ybus, voltage, pv, pq)
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                step = -spsolve(jacobian.tocsc(), mismatch)
            except (MatrixRankWarning, RuntimeError) as exc:
                raise SingularJacobianError(f"singular Jacobian at iteration {iterations}.") from exc
        step = np.atleast_1d(step)
        if not np.all(np.isfinite(step)):
            raise SingularJacobianError(f"singular Jacobian at iteration {iterations}.")
        va[pvpq] += step[: pvpq.size]
        vm[pq] += step[pvpq.size :]
        voltage = vm * np.exp(1j * va)
        vm = np.abs(voltage)
        va = np.angle(voltage)
        mismatch = mismatch_vector(ybus, sbus, voltage, pv, pq)
        norm = _infinity_norm(mismatch)
        if not np.isfinite(norm):
            break
    if not norm <= tolerance:
        raise PowerFlowDivergedError("Newton-Raphson did not converge", norm, iterations)
    return voltage, iterations, norm


def _share_by_capability(total: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    if lo.size == 1:
        return np.array([total])
    span = hi - lo
    if span.sum() <= 0.0:
        return np.full(lo.size, total / lo.size)
    return lo + (total - lo.sum()) * span / span.sum()


def solve_newton_raphson(
    case: NetworkCase,
    demand_p: np.ndarray,
    demand_q: np.ndarray,
    setpoints: GeneratorSetpoints,
    init: np.ndarray | None = None,
    admittance: AdmittanceMatrix | None = None,
    tolerance: float = 1e-8,
    max_iterations: int = 30,
    enforce_reactive_limits: bool = True,
) -> PowerFlowSolution:
    """Solve AC power flow in polar form, switching PV buses to PQ when their reactive limit binds.

    ``demand_p``/``demand_q`` follow the layout's demand block order; ``setpoints`` are per generator.
    ``init`` is an optional complex voltage vector (defaults to a flat start with setpoint magnitudes).
    """
    layout = make_layout(case)
    n = case.n_bus
    demand_p = np.asarray(demand_p, dtype=float)
    demand_q = np.asarray(demand_q, dtype=float)
    if demand_p.shape != (layout.n_demand,) or demand_q.shape != (layout.n_demand,):
        raise ValueError(f"Demand vectors must have {layout.n_demand} entries.")
    if setpoints.p.shape != (len(case.generators),) or setpoints.vm.shape != (len(case.generators),):
        raise ValueError(f"Setpoints must have {len(case.generators)} entries.")
    ybus = (admittance or build_admittance(case)).matrix

    gen_buses = np.array(case.generator_buses, dtype=int)
    demand_buses = np.array(layout.demand_buses, dtype=int)
    pd_bus = np.zeros(n)
    qd_bus = np.zeros(n)
    np.add.at(pd_bus, demand_buses, demand_p)
    np.add.at(qd_bus, demand_buses, demand_q)
    pg_bus = np.zeros(n)
    np.add.at(pg_bus, gen_buses, setpoints.p)

    q_min = np.array([gen.q_min for gen in case.generators])
    q_max = np.array([gen.q_max for gen in case.generators])
    p_min = np.array([gen.p_min for gen in case.generators])
    p_max = np.array([gen.p_max for gen in case.generators])
    q_min_bus = np.zeros(n)
    q_max_bus = np.zeros(n)
    np.add.at(q_min_bus, gen_buses, q_min)
    np.add.at(q_max_bus, gen_buses, q_max)

    slack = case.slack_index
    kinds = [bus.kind for bus in case.buses]
    pv = np.array([index for index in range(n) if kinds[index] == "generator"], dtype=int)
    pq = np.array([index for index in range(n) if kinds[index] == "load"], dtype=int)

    vm_target = np.ones(n)
    for position, bus_position in enumerate(gen_buses):
        vm_target[bus_position] = setpoints.vm[position]
    if init is None:
        voltage = vm_target.astype(complex)
    else:
        voltage = np.asarray(init, dtype=complex).copy()
        if voltage.shape != (n,):
            raise ValueError(f"Initial voltage must have {n} entries.")
        voltage[pv] = vm_target[pv] * np.exp(1j * np.angle(voltage[pv]))
        voltage[slack] = vm_target[slack] * np.exp(1j * np.angle(voltage[slack]))

    q_fixed = np.zeros(n)
    switched: list[int] = []
    total_iterations = 0
    while True:
        sbus = (pg_bus - pd_bus) + 1j * (q_fixed - qd_bus)
        voltage, iterations, norm = _newton_iterations(ybus, sbus, voltage, pv, pq, tolerance, max_iterations)
        total_iterations += iterations
        injected = power_injection(ybus, voltage)
        qg_bus = injected.imag + qd_bus
        if not enforce_reactive_limits or pv.size == 0:
            break
        above = pv[qg_bus[pv] > q_max_bus[pv]]
        below = pv[qg_bus[pv] < q_min_bus[pv]]
        if above.size == 0 and below.size == 0:
            break
        q_fixed[above] = q_max_bus[above]
        q_fixed[below] = q_min_bus[below]
        newly = np.concatenate([above, below])
        switched.extend(int(index) for index in newly)
        logger.debug("Switching buses %s from PV to PQ on reactive limits.", [case.buses[i].id for i in newly])
        pv = np.setdiff1d(pv, newly)
        pq = np.sort(np.concatenate([pq, newly]))

    injected = power_injection(ybus, voltage)
    pg_bus_solved = pg_bus.copy()
    pg_bus_solved[slack] = injected[slack].real + pd_bus[slack]
    qg_bus = injected.imag + qd_bus
    for index in switched:
        qg_bus[index] = q_fixed[index]

    pg = np.array(setpoints.p, dtype=float)
    qg = np.zeros(len(case.generators))
    for bus_position in np.unique(gen_buses):
        members = np.flatnonzero(gen_buses == bus_position)
        if bus_position == slack:
            pg[members] = _share_by_capability(pg_bus_solved[slack], p_min[members], p_max[members])
        qg[members] = _share_by_capability(qg_bus[bus_position], q_min[members], q_max[members])

    sample = np.concatenate([demand_p, demand_q, np.abs(voltage), np.angle(voltage), pg, qg])
    return PowerFlowSolution(
        sample=sample,
        voltage=voltage,
        iterations=total_iterations,
        mismatch=norm,
        switched_buses=tuple(case.buses[index].id for index in switched),
    )


def nominal_demand(case: NetworkCase, layout: SampleLayout | None = None) -> tuple[np.ndarray, np.ndarray]:
    layout = layout or make_layout(case)
    buses = [case.buses[index] for index in layout.demand_buses]
    return np.array([bus.pd for bus in buses]), np.array([bus.qd for bus in buses])


def sample_dispatch(
    case: NetworkCase,
    rng: np.random.Generator,
    demand_range: tuple[float, float] = (0.8, 1.2),
    cost_range: tuple[float, float] = (0.5, 1.5),
    seed: int | None = None,
) -> DispatchScenario:
    layout = make_layout(case)
    return DispatchScenario(
        load_multipliers=rng.uniform(demand_range[0], demand_range[1], size=layout.n_demand),
        cost_multipliers=rng.uniform(cost_range[0], cost_range[1], size=len(case.generators)),
        seed=seed,
    )


def _unit_output(lam: float, c2: np.ndarray, c1: np.ndarray, p_min: np.ndarray, p_max: np.ndarray) -> np.ndarray:
    quadratic = c2 > 0.0
    output = np.where(c1 < lam, p_max, p_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        unconstrained = (lam - c1) / (2.0 * c2)
    return np.where(quadratic, np.clip(unconstrained, p_min, p_max), output)


def economic_dispatch(
    c2: np.ndarray,
    c1: np.ndarray,
    p_min: np.ndarray,
    p_max: np.ndarray,
    target: float,
    iterations: int = 200,
) -> np.ndarray:
    """Equal-incremental-cost dispatch by bisection on the system marginal cost."""
    if target >= p_max.sum():
        return p_max.copy()
    if target <= p_min.sum():
        return p_min.copy()
    marginal_low = 2.0 * c2 * p_min + c1
    marginal_high = 2.0 * c2 * p_max + c1
    low = float(marginal_low.min()) - 1.0
    high = float(marginal_high.max()) + 1.0
    for _ in range(iterations):
        middle = 0.5 * (low + high)
        if _unit_output(middle, c2, c1, p_min, p_max).sum() < target:
            low = middle
        else:
            high = middle
    output = _unit_output(high, c2, c1, p_min, p_max)
    excess = output.sum() - target
    scale = max(1.0, abs(high))
    marginal = np.flatnonzero((c2 <= 0.0) & (np.abs(c1 - high) <= 1e-9 * scale + (high - low)))
    for index in marginal[::-1]:
        if excess <= 0.0:
            break
        cut = min(excess, output[index] - p_min[index])
        output[index] -= cut
        excess -= cut
    return output


def dispatch_from_costs(
    case: NetworkCase,
    scenario: DispatchScenario,
    total_demand: float,
    rng: np.random.Generator,
    voltage_range: tuple[float, float] = (0.95, 1.05),
    loss_factor: float = 0.02,
) -> GeneratorSetpoints:
    p_min = np.array([gen.p_min for gen in case.generators])
    p_max = np.array([gen.p_max for gen in case.generators])
    if total_demand > p_max.sum():
        raise InfeasibleDispatchError(
            f"demand {total_demand:.4f} p.u. exceeds total generator capability {p_max.sum():.4f} p.u."
        )
    costs = np.array([gen.cost for gen in case.generators]) * scenario.cost_multipliers[:, None]
    target = min(total_demand * (1.0 + loss_factor), float(p_max.sum()))
    p = economic_dispatch(costs[:, 0], costs[:, 1], p_min, p_max, target)

    bus_setpoint: dict[int, float] = {}
    for gen in case.generators:
        if gen.bus in bus_setpoint:
            continue
        bus = case.buses[case.bus_index[gen.bus]]
        low = max(voltage_range[0], bus.vm_min)
        high = min(voltage_range[1], bus.vm_max)
        if low > high:
            raise InfeasibleDispatchError(f"bus {gen.bus}: no voltage setpoint inside {list(voltage_range)}.")
        bus_setpoint[gen.bus] = float(rng.uniform(low, high))
    vm = np.array([bus_setpoint[gen.bus] for gen in case.generators])
    return GeneratorSetpoints(p=p, vm=vm)


def _slack_reactive_window(case: NetworkCase) -> tuple[float, float, np.ndarray]:
    slack_id = case.buses[case.slack_index].id
    members = np.array([index for index, gen in enumerate(case.generators) if gen.bus == slack_id], dtype=int)
    q_lo = sum(case.generators[index].q_min for index in members)
    q_hi = sum(case.generators[index].q_max for index in members)
    return q_lo, q_hi, members


def solve_with_slack_reactive_limits(
    case: NetworkCase,
    demand_p: np.ndarray,
    demand_q: np.ndarray,
    setpoints: GeneratorSetpoints,
    admittance: AdmittanceMatrix,
    config: PipelineConfig,
) -> PowerFlowSolution:
    """Re-solve with a moved slack voltage setpoint until the slack reactive output is inside its limits."""
    solver = config.solver
    layout = make_layout(case)
    q_lo, q_hi, members = _slack_reactive_window(case)
    slack_bus = case.buses[case.slack_index]
    v_low = max(config.grid.voltage_setpoint_range[0], slack_bus.vm_min)
    v_high = min(config.grid.voltage_setpoint_range[1], slack_bus.vm_max)
    q_block = layout.block("Q_G")

    def solve(current: GeneratorSetpoints, init: np.ndarray | None) -> PowerFlowSolution:
        return solve_newton_raphson(
            case,
            demand_p,
            demand_q,
            current,
            init=init,
            admittance=admittance,
            tolerance=solver.tolerance,
            max_iterations=solver.max_iterations,
            enforce_reactive_limits=solver.enforce_reactive_limits,
        )

    solution = solve(setpoints, None)
    history: list[tuple[float, float]] = []
    current = setpoints
    for _ in range(solver.slack_reactive_adjustments):
        q = float(solution.sample[q_block][members].sum())
        if q_lo <= q <= q_hi:
            break
        v = float(current.vm[members[0]])
        history.append((v, q))
        span = q_hi - q_lo
        target = q_lo + 0.25 * span if q < q_lo else q_hi - 0.25 * span
        slope = 0.0
        if len(history) >= 2:
            (v0, q0), (v1, q1) = history[-2], history[-1]
            if v1 != v0:
                slope = (q1 - q0) / (v1 - v0)
        if slope > 0.0:
            v_next = v + (target - q) / slope
        else:
            v_next = v + (0.01 if q < q_lo else -0.01)
        v_next = float(np.clip(v_next, v_low, v_high))
        if v_next == v:
            break
        vm = current.vm.copy()
        vm[members] = v_next
        current = GeneratorSetpoints(p=current.p, vm=vm)
        solution = solve(current, solution.voltage)
    return solution


@dataclass(frozen=True)
class _FactoryContext:
    case: NetworkCase
    config: PipelineConfig
    seed: int


@dataclass(frozen=True)
class _SampleOutcome:
    index: int
    sample: np.ndarray | None
    attempts: int
    reasons: dict[str, int]
    iterations: int


def _draw_sample(
    context: _FactoryContext,
    index: int,
    admittance: AdmittanceMatrix,
    grid: GridTensors,
    branches: BranchModel,
) -> _SampleOutcome:
    case = context.case
    config = context.config
    rng = stream_rng(context.seed, "data", index)
    pd_nominal, qd_nominal = nominal_demand(case, grid.layout)
    reasons: Counter[str] = Counter()
    for attempt in range(1, config.dataset.max_attempts_per_sample + 1):
        scenario = sample_dispatch(case, rng, config.grid.demand_range, config.grid.cost_range)
        demand_p = pd_nominal * scenario.load_multipliers
        demand_q = qd_nominal * scenario.load_multipliers
        try:
            setpoints = dispatch_from_costs(
                case,
                scenario,
                float(demand_p.sum()),
                rng,
                config.grid.voltage_setpoint_range,
                config.grid.loss_factor,
            )
            solution = solve_with_slack_reactive_limits(case, demand_p, demand_q, setpoints, admittance, config)
        except InfeasibleDispatchError:
            reasons["infeasibleDispatch"] += 1
            continue
        except SingularJacobianError:
            reasons["singularJacobian"] += 1
            continue
        except PowerFlowDivergedError:
            reasons["diverged"] += 1
            continue
        report = constraint_report(solution.sample, case, grid, config.solver.constraint_tolerance, branches)
        if report.feasible:
            return _SampleOutcome(index, solution.sample, attempt, dict(reasons), solution.iterations)
        for key in report.failed():
            reasons[key] += 1
    return _SampleOutcome(index, None, config.dataset.max_attempts_per_sample, dict(reasons), 0)


def _draw_chunk(context: _FactoryContext, indices: Sequence[int]) -> list[_SampleOutcome]:
    layout = make_layout(context.case)
    admittance = build_admittance(context.case)
    grid = make_grid_tensors(context.case, layout, admittance)
    branches = make_branch_model(context.case)
    return [_draw_sample(context, index, admittance, grid, branches) for index in indices]


def noise_imbalance_target(case: NetworkCase, config: PipelineConfig) -> float | None:
    if not config.grid.calibrate_angle_window:
        return None
    if config.grid.noise_imbalance_target is not None:
        return config.grid.noise_imbalance_target
    return REFERENCE_NOISE_IMBALANCE.get(case.name)


def calibrate_angle_window(
    case: NetworkCase,
    layout: SampleLayout,
    center: np.ndarray,
    target: float,
    config: PipelineConfig,
    rng: np.random.Generator,
    iterations: int = 60,
) -> tuple[AngleWindow, float]:
    """Bisect the angle half-width until standard-normal vectors denormalize to mean imbalance ``target``."""
    noise = rng.standard_normal((config.schedule.gamma_draws, layout.dimension))
    grid = make_grid_tensors(case, layout)

    def measure(half_width: float) -> float:
        window = AngleWindow(center=center, half_width=half_width)
        bounds = make_bounds(case, layout, config.grid.demand_range, config.grid.min_span, window)
        return float(np.mean(residual_imbalance(denormalize(noise, bounds), grid).mean))

    low, high = config.grid.min_span / 2.0, config.grid.angle_bound
    at_low, at_high = measure(low), measure(high)
    if at_low >= target:
        logger.warning("Noise imbalance %.4f at the narrowest angle window already exceeds %.4f.", at_low, target)
        return AngleWindow(center=center, half_width=low), at_low
    if at_high <= target:
        logger.warning("Noise imbalance %.4f at the full angle box stays below %.4f.", at_high, target)
        return AngleWindow(center=center, half_width=high), at_high
    for _ in range(iterations):
        middle = 0.5 * (low + high)
        if measure(middle) < target:
            low = middle
        else:
            high = middle
    half_width = 0.5 * (low + high)
    measured = measure(half_width)
    logger.info("Angle window half-width %.5f rad gives noise imbalance %.4f (target %.4f).", half_width, measured, target)
    return AngleWindow(center=center, half_width=half_width), measured


def dataset_bounds(
    case: NetworkCase,
    layout: SampleLayout,
    samples: np.ndarray,
    config: PipelineConfig,
) -> tuple[NormalizationBounds, dict[str, Any] | None]:
    """Box bounds from the case, with the angle block narrowed to a calibrated window around the data."""
    target = noise_imbalance_target(case, config)
    if target is None:
        return make_bounds(case, layout, config.grid.demand_range, config.grid.min_span), None
    angles = samples[:, layout.block("V_A")]
    center = 0.5 * (angles.min(axis=0) + angles.max(axis=0))
    window, measured = calibrate_angle_window(
        case, layout, center, target, config, stream_rng(config.seed, "calibration")
    )
    bounds = make_bounds(case, layout, config.grid.demand_range, config.grid.min_span, window)
    return bounds, {"halfWidth": window.half_width, "target": target, "measured": measured}


def generate_dataset(
    case: NetworkCase,
    n: int,
    config: PipelineConfig,
    workers: int | None = None,
) -> PowerFlowDataset:
    """Manufacture ``n`` feasible solved samples; sample ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1.")
    workers = workers or config.workers
    window = config.dataset.rejection_window
    context = _FactoryContext(case=case, config=config, seed=config.seed)
    chunks = [list(range(start, min(start + window, n))) for start in range(0, n, window)]
    layout = make_layout(case)

    samples = np.zeros((n, layout.dimension))
    reasons: Counter[str] = Counter()
    attempts = 0
    iterations: list[int] = []

    def consume(outcomes: list[_SampleOutcome]) -> None:
        nonlocal attempts
        chunk_attempts = sum(outcome.attempts for outcome in outcomes)
        chunk_rejected = chunk_attempts - sum(1 for outcome in outcomes if outcome.sample is not None)
        for outcome in outcomes:
            reasons.update(outcome.reasons)
        attempts += chunk_attempts
        rate = chunk_rejected / chunk_attempts if chunk_attempts else 0.0
        diagnostics = {
            "window": [outcomes[0].index, outcomes[-1].index],
            "attempts": chunk_attempts,
            "rejected": chunk_rejected,
            "rejectionRate": rate,
            "reasons": dict(sorted(reasons.items())),
        }
        if rate > config.dataset.max_rejection_rate:
            logger.error("Rejection rate %.1f%% over samples %s; aborting.", 100.0 * rate, diagnostics["window"])
            raise DatasetAbortError(f"rejection rate {rate:.1%} exceeds {config.dataset.max_rejection_rate:.0%}", diagnostics)
        for outcome in outcomes:
            if outcome.sample is None:
                logger.error("Sample %d not feasible after %d attempts.", outcome.index, outcome.attempts)
                raise DatasetAbortError(f"sample {outcome.index} exceeded {outcome.attempts} attempts", diagnostics)
            samples[outcome.index] = outcome.sample
            iterations.append(outcome.iterations)
        logger.info("Generated %d/%d samples (window rejection %.1f%%).", outcomes[-1].index + 1, n, 100.0 * rate)

    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for outcomes in pool.map(_draw_chunk, [context] * len(chunks), chunks):
                consume(outcomes)
    else:
        for chunk in chunks:
            consume(_draw_chunk(context, chunk))

    bounds, angle_window = dataset_bounds(case, layout, samples, config)
    rejected = attempts - n
    metadata = {
        "generatorOfRecord": GENERATOR_OF_RECORD,
        "seed": config.seed,
        "rejection": {
            "attempts": attempts,
            "accepted": n,
            "rejected": rejected,
            "rate": rejected / attempts if attempts else 0.0,
            "reasons": dict(sorted(reasons.items())),
        },
        "solver": {
            "tolerance": config.solver.tolerance,
            "maxIterations": config.solver.max_iterations,
            "meanIterations": float(np.mean(iterations)) if iterations else 0.0,
            "maxIterationsUsed": int(max(iterations)) if iterations else 0,
        },
    }
    if angle_window is not None:
        metadata["angleWindow"] = angle_window
    return PowerFlowDataset(case=case, layout=layout, bounds=bounds, samples=samples, metadata=metadata)


def save_dataset(dataset: PowerFlowDataset, out_dir: Path, config: PipelineConfig | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "samples.npy", dataset.normalized())
    sidecar = {
        "version": VERSION,
        "generatedAt": utc_now_iso(),
        "case": dataset.case.name,
        "baseMVA": dataset.case.base_mva,
        "samples": dataset.size,
        "normalized": True,
        "layout": layout_to_json(dataset.layout, dataset.case),
        "bounds": bounds_to_json(dataset.bounds),
        **dataset.metadata,
    }
    if config is not None:
        sidecar["config"] = config_to_json(config)
    write_json(out_dir / "dataset.json", sidecar)
    write_json(out_dir / "case.json", case_to_native(dataset.case))


def load_dataset(directory: Path) -> PowerFlowDataset:
    sidecar = read_json(directory / "dataset.json")
    if not isinstance(sidecar, dict) or sidecar.get("version") != VERSION:
        raise ValueError(f"{directory / 'dataset.json'}: unsupported dataset sidecar version.")
    case_text = (directory / "case.json").read_text(encoding="utf-8")
    case = parse_case(case_text, name=str(sidecar.get("case") or directory.name))
    layout = make_layout(case)
    bounds = bounds_from_json(sidecar.get("bounds"))
    if bounds.dimension != layout.dimension:
        raise ValueError(f"{directory}: bounds have {bounds.dimension} dimensions, layout {layout.dimension}.")
    unit = np.load(directory / "samples.npy")
    if unit.ndim != 2 or unit.shape[1] != layout.dimension:
        raise ValueError(f"{directory / 'samples.npy'}: expected an n x {layout.dimension} matrix.")
    skip = {"version", "generatedAt", "case", "baseMVA", "samples", "normalized", "layout", "bounds"}
    metadata = {key: value for key, value in sidecar.items() if key not in skip}
    return PowerFlowDataset(case=case, layout=layout, bounds=bounds, samples=denormalize(unit, bounds), metadata=metadata)

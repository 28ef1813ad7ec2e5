from __future__ import annotations

import json
import math
import sys
from pathlib import Path
import tempfile
import unittest

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from grid_model import (
    AngleWindow,
    NormalizationBounds,
    build_admittance,
    case_to_native,
    denormalize,
    layout_to_json,
    load_case,
    make_bounds,
    make_grid_tensors,
    make_layout,
    normalize,
    parse_case,
    read_case_source,
)
from pipeline_utils import CaseParseError

CASES_DIR = Path(__file__).resolve().parents[1] / "config" / "cases"

THREE_BUS = {
    "name": "three-bus",
    "baseMVA": 100.0,
    "buses": [
        {"id": 1, "type": "slack", "vmMin": 0.9, "vmMax": 1.1},
        {"id": 2, "type": "generator", "pd": 0.2, "vmMin": 0.9, "vmMax": 1.1, "bs": 0.05},
        {"id": 3, "type": "load", "pd": 0.6, "qd": 0.25, "vmMin": 0.9, "vmMax": 1.1},
    ],
    "generators": [
        {"bus": 1, "pMin": 0.0, "pMax": 2.0, "qMin": -1.0, "qMax": 1.0, "cost": [0.1, 10.0, 0.0]},
        {"bus": 2, "pMin": 0.0, "pMax": 1.0, "qMin": -0.5, "qMax": 0.5, "cost": [0.2, 20.0, 0.0]},
    ],
    "branches": [
        {"from": 1, "to": 2, "r": 0.02, "x": 0.2, "b": 0.04},
        {"from": 2, "to": 3, "r": 0.01, "x": 0.1, "tap": 0.95, "shift": 0.1, "sMax": 1.5},
        {"from": 1, "to": 3, "r": 0.03, "x": 0.25},
    ],
}


class _FakeResponse:
    def __init__(self, text: str) -> None:
        self.text = text

    def raise_for_status(self) -> None:
        return None


class _FakeSession:
    def __init__(self, text: str) -> None:
        self.text = text
        self.calls: list[tuple[str, float]] = []

    def get(self, url: str, timeout: float) -> _FakeResponse:
        self.calls.append((url, timeout))
        return _FakeResponse(self.text)


def _brute_force_ybus(raw: dict) -> np.ndarray:
    ids = [bus["id"] for bus in raw["buses"]]
    y = np.diag([complex(bus.get("gs", 0.0), bus.get("bs", 0.0)) for bus in raw["buses"]])
    for branch in raw["branches"]:
        f = ids.index(branch["from"])
        t = ids.index(branch["to"])
        series = 1.0 / complex(branch["r"], branch["x"])
        charging = 1j * branch.get("b", 0.0) / 2.0
        tap = branch.get("tap", 1.0) * complex(math.cos(branch.get("shift", 0.0)), math.sin(branch.get("shift", 0.0)))
        y[f, f] += (series + charging) / abs(tap) ** 2
        y[f, t] += -series / tap.conjugate()
        y[t, f] += -series / tap
        y[t, t] += series + charging
    return y


class MatpowerCaseTest(unittest.TestCase):
    def test_case14_dimensions_and_units(self) -> None:
        case = load_case(str(CASES_DIR / "case14.m"))
        layout = make_layout(case)
        self.assertEqual(case.name, "case14")
        self.assertEqual(case.n_bus, 14)
        self.assertEqual(len(case.generators), 5)
        self.assertEqual(len(case.branches), 20)
        self.assertEqual(layout.n_demand, 11)
        self.assertEqual(layout.dimension, 60)
        self.assertEqual(case.buses[case.slack_index].id, 1)
        self.assertAlmostEqual(case.buses[1].pd, 0.217)
        self.assertAlmostEqual(case.generators[0].p_max, 3.324)
        self.assertAlmostEqual(case.generators[0].cost[0], 430.292599)
        self.assertAlmostEqual(case.generators[0].cost[1], 2000.0)
        # rateA = 0 means unlimited, ratio = 0 means nominal tap
        self.assertTrue(math.isinf(case.branches[0].s_max))
        self.assertEqual(case.branches[0].tap, 1.0)
        self.assertAlmostEqual(case.branches[7].tap, 0.978)
        self.assertAlmostEqual(case.buses[8].bs, 0.19)

    def test_case30_dimension(self) -> None:
        case = load_case(str(CASES_DIR / "case30.m"))
        self.assertEqual(case.n_bus, 30)
        self.assertEqual(len(case.generators), 6)
        self.assertEqual(make_layout(case).dimension, 112)

    def test_syntax_errors_carry_line_numbers(self) -> None:
        text = "mpc.baseMVA = 100;\nmpc.bus = [\n\t1\t3\t0\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\tx;\n];\n"
        with self.assertRaises(CaseParseError) as ctx:
            parse_case(text)
        self.assertEqual(ctx.exception.line, 3)

    def test_missing_tables_and_unclosed_tables(self) -> None:
        with self.assertRaises(CaseParseError):
            parse_case("mpc.baseMVA = 100;\n")
        with self.assertRaises(CaseParseError):
            parse_case("mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;\n")


class NativeCaseTest(unittest.TestCase):
    def test_two_bus_example(self) -> None:
        case = load_case(str(CASES_DIR / "two_bus.json"))
        layout = make_layout(case)
        self.assertEqual(case.name, "two-bus")
        self.assertEqual(layout.demand_buses, (1,))
        self.assertEqual(layout.dimension, 8)
        self.assertEqual(case.branches[0].s_max, 2.0)

    def test_native_round_trip(self) -> None:
        case = parse_case(json.dumps(THREE_BUS))
        again = parse_case(json.dumps(case_to_native(case)))
        self.assertEqual(again, case)

    def test_semantic_errors(self) -> None:
        cases = {
            "two slacks": {**THREE_BUS, "buses": [dict(THREE_BUS["buses"][0]), {**THREE_BUS["buses"][1], "type": "slack"}, THREE_BUS["buses"][2]]},
            "generator on load bus": {**THREE_BUS, "generators": [*THREE_BUS["generators"], {**THREE_BUS["generators"][1], "bus": 3}]},
            "dangling branch": {**THREE_BUS, "branches": [{"from": 1, "to": 9, "r": 0.01, "x": 0.1}]},
            "zero impedance": {**THREE_BUS, "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.0}]},
            "bad type": {**THREE_BUS, "buses": [{**THREE_BUS["buses"][0], "type": "swing"}, *THREE_BUS["buses"][1:]]},
        }
        for label, raw in cases.items():
            with self.subTest(label=label):
                with self.assertRaises(CaseParseError):
                    parse_case(json.dumps(raw))

    def test_invalid_json_is_a_parse_error(self) -> None:
        with self.assertRaises(CaseParseError):
            parse_case('{"buses": [}')


class CaseSourceTest(unittest.TestCase):
    def test_url_sources_use_the_session(self) -> None:
        session = _FakeSession(json.dumps(THREE_BUS))
        text, name = read_case_source("https://grid.example.org/cases/three.json?rev=2", session=session, timeout=5.0)
        self.assertEqual(name, "three")
        self.assertEqual(session.calls, [("https://grid.example.org/cases/three.json?rev=2", 5.0)])
        self.assertEqual(parse_case(text).n_bus, 3)

    def test_path_sources_use_file_stem(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "mine.json"
            path.write_text(json.dumps({**THREE_BUS, "name": ""}), encoding="utf-8")
            self.assertEqual(load_case(str(path)).name, "mine")


class AdmittanceTest(unittest.TestCase):
    def test_matches_brute_force_pi_model(self) -> None:
        case = parse_case(json.dumps(THREE_BUS))
        ybus = build_admittance(case).dense()
        np.testing.assert_allclose(ybus, _brute_force_ybus(THREE_BUS), atol=1e-12)

    def test_case14_is_symmetric_without_phase_shifters(self) -> None:
        ybus = build_admittance(load_case(str(CASES_DIR / "case14.m"))).dense()
        np.testing.assert_allclose(ybus, ybus.T, atol=1e-12)

    def test_grid_tensors_split_real_and_imaginary(self) -> None:
        case = parse_case(json.dumps(THREE_BUS))
        layout = make_layout(case)
        grid = make_grid_tensors(case, layout)
        ybus = build_admittance(case).dense()
        np.testing.assert_allclose(grid.g + 1j * grid.b, ybus)
        np.testing.assert_array_equal(grid.generator_map, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(grid.demand_map, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class LayoutAndBoundsTest(unittest.TestCase):
    def setUp(self) -> None:
        self.case = parse_case(json.dumps(THREE_BUS))
        self.layout = make_layout(self.case)

    def test_blocks_follow_quantity_order(self) -> None:
        layout = self.layout
        self.assertEqual(layout.dimension, 2 * 2 + 2 * 3 + 2 * 2)
        self.assertEqual(layout.block("P_D"), slice(0, 2))
        self.assertEqual(layout.block("V_M"), slice(4, 7))
        self.assertEqual(layout.block("Q_G"), slice(12, 14))
        self.assertEqual(layout.index("V_A", 2), 9)
        with self.assertRaises(ValueError):
            layout.index("P_G", 2)
        labels = layout.labels(self.case)
        self.assertEqual(len(labels), layout.dimension)
        self.assertEqual(labels[0], "P_D[bus 2]")
        self.assertEqual(layout_to_json(layout, self.case)["demandBuses"], [2, 3])

    def test_bounds_cover_perturbation_and_limits(self) -> None:
        bounds = make_bounds(self.case, self.layout, (0.8, 1.2))
        self.assertTrue(np.all(bounds.lo < bounds.hi))
        p_d = self.layout.block("P_D")
        np.testing.assert_allclose(bounds.lo[p_d], [0.16, 0.48])
        np.testing.assert_allclose(bounds.hi[p_d], [0.24, 0.72])
        # bus 2 has no reactive demand; the range is widened to the minimum span
        q_d = self.layout.block("Q_D")
        self.assertAlmostEqual(bounds.hi[q_d][0] - bounds.lo[q_d][0], 1e-3)
        np.testing.assert_allclose(bounds.hi[self.layout.block("V_A")], [math.pi / 6.0] * 3)
        np.testing.assert_allclose(bounds.hi[self.layout.block("P_G")], [2.0, 1.0])

    def test_normalization_maps_box_to_unit_cube(self) -> None:
        bounds = make_bounds(self.case, self.layout)
        np.testing.assert_allclose(normalize(bounds.lo, bounds), np.zeros(bounds.dimension))
        np.testing.assert_allclose(normalize(bounds.hi, bounds), np.ones(bounds.dimension))
        rng = np.random.default_rng(0)
        unit = rng.random((5, bounds.dimension))
        np.testing.assert_allclose(normalize(denormalize(unit, bounds), bounds), unit)
        with self.assertRaises(ValueError):
            normalize(np.zeros(3), bounds)

    def test_bounds_reject_empty_ranges(self) -> None:
        with self.assertRaises(ValueError):
            NormalizationBounds(lo=np.array([0.0, 1.0]), hi=np.array([1.0, 1.0]))

    def test_fixed_output_generator_gets_minimum_span(self) -> None:
        raw = json.loads(json.dumps(THREE_BUS))
        raw["generators"][1].update({"pMin": 0.4, "pMax": 0.4, "qMin": 0.1, "qMax": 0.1})
        case = parse_case(json.dumps(raw))
        bounds = make_bounds(case, make_layout(case), min_span=2e-3)
        p_g = self.layout.index("P_G", 1)
        q_g = self.layout.index("Q_G", 1)
        np.testing.assert_allclose([bounds.lo[p_g], bounds.hi[p_g]], [0.399, 0.401])
        np.testing.assert_allclose([bounds.lo[q_g], bounds.hi[q_g]], [0.099, 0.101])

    def test_angle_window_is_centered_and_clipped(self) -> None:
        window = AngleWindow(center=np.array([0.0, -0.1, -0.5]), half_width=0.05)
        bounds = make_bounds(self.case, self.layout, angle_window=window)
        v_a = self.layout.block("V_A")
        np.testing.assert_allclose(bounds.lo[v_a], [-0.05, -0.15, -math.pi / 6.0])
        np.testing.assert_allclose(bounds.hi[v_a], [0.05, -0.05, -0.45])
        np.testing.assert_array_equal(bounds.lo[self.layout.block("V_M")], [0.9, 0.9, 0.9])

        narrow = make_bounds(self.case, self.layout, angle_window=AngleWindow(center=np.zeros(3), half_width=0.0))
        np.testing.assert_allclose(narrow.span[v_a], [1e-3] * 3)


if __name__ == "__main__":
    unittest.main()

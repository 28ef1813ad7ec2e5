from __future__ import annotations

import json
import math
import sys
from pathlib import Path
import tempfile
import unittest

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from grid_model import build_admittance, load_case, make_grid_tensors, make_layout, parse_case
from pf_engine import (
    GeneratorSetpoints,
    DispatchScenario,
    constraint_report,
    dispatch_from_costs,
    economic_dispatch,
    dataset_bounds,
    generate_dataset,
    line_flow_check,
    load_dataset,
    mismatch_vector,
    newton_jacobian,
    noise_imbalance_target,
    residual_imbalance,
    residual_imbalance_torch,
    sample_dispatch,
    save_dataset,
    solve_newton_raphson,
    solve_with_slack_reactive_limits,
    torch_grid,
)
from pipeline_utils import (
    DatasetAbortError,
    InfeasibleDispatchError,
    PipelineConfig,
    PowerFlowDivergedError,
    SingularJacobianError,
    read_json,
)

CASES_DIR = Path(__file__).resolve().parents[1] / "config" / "cases"

PV_LIMIT_CASE = {
    "name": "pv-limit",
    "baseMVA": 100.0,
    "buses": [
        {"id": 1, "type": "slack", "vmMin": 0.9, "vmMax": 1.1},
        {"id": 2, "type": "generator", "vmMin": 0.9, "vmMax": 1.1},
        {"id": 3, "type": "load", "pd": 0.6, "qd": 0.3, "vmMin": 0.9, "vmMax": 1.1},
    ],
    "generators": [
        {"bus": 1, "pMin": 0.0, "pMax": 3.0, "qMin": -2.0, "qMax": 2.0, "cost": [0.1, 10.0, 0.0]},
        {"bus": 2, "pMin": 0.0, "pMax": 1.0, "qMin": -0.01, "qMax": 0.01, "cost": [0.2, 20.0, 0.0]},
    ],
    "branches": [
        {"from": 1, "to": 2, "r": 0.01, "x": 0.1},
        {"from": 2, "to": 3, "r": 0.01, "x": 0.1},
        {"from": 1, "to": 3, "r": 0.01, "x": 0.1},
    ],
}


def _two_bus():
    return load_case(str(CASES_DIR / "two_bus.json"))


def _small_config(**dataset) -> PipelineConfig:
    return PipelineConfig().with_overrides(
        seed=123,
        dataset={"samples": 6, "rejection_window": 3, "max_attempts_per_sample": 5, **dataset},
    )


class ResidualTest(unittest.TestCase):
    def test_flat_two_bus_mismatch_by_hand(self) -> None:
        case = _two_bus()
        layout = make_layout(case)
        grid = make_grid_tensors(case, layout)
        # P_D, Q_D, V_M x2, V_A x2, P_G, Q_G
        sample = np.array([0.5, 0.2, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
        result = residual_imbalance(sample, grid)
        # both buses only see the line charging j0.01 at flat voltage
        expected_per_bus = [0.01, math.hypot(0.5, 0.19)]
        np.testing.assert_allclose(result.per_bus, expected_per_bus, atol=1e-12)
        self.assertAlmostEqual(result.mean, sum(expected_per_bus) / 2.0, places=12)

    def test_matches_brute_force_complex_evaluation(self) -> None:
        case = parse_case(json.dumps(PV_LIMIT_CASE))
        layout = make_layout(case)
        grid = make_grid_tensors(case, layout)
        ybus = np.zeros((3, 3), dtype=complex)
        for branch in PV_LIMIT_CASE["branches"]:
            f, t = branch["from"] - 1, branch["to"] - 1
            y = 1.0 / complex(branch["r"], branch["x"])
            ybus[f, f] += y
            ybus[t, t] += y
            ybus[f, t] -= y
            ybus[t, f] -= y
        rng = np.random.default_rng(11)
        batch = rng.uniform(0.0, 1.0, size=(1000, layout.dimension))
        batch[:, layout.block("V_M")] += 0.5
        expected = np.empty(1000)
        for row, sample in enumerate(batch):
            v = sample[layout.block("V_M")] * np.exp(1j * sample[layout.block("V_A")])
            net = np.zeros(3, dtype=complex)
            net[[0, 1]] += sample[layout.block("P_G")] + 1j * sample[layout.block("Q_G")]
            net[[2]] -= sample[layout.block("P_D")] + 1j * sample[layout.block("Q_D")]
            expected[row] = np.mean(np.abs(net - v * np.conj(ybus @ v)))
        np.testing.assert_allclose(residual_imbalance(batch, grid).mean, expected, rtol=1e-12)

    def test_torch_matches_numpy_on_case14(self) -> None:
        case = load_case(str(CASES_DIR / "case14.m"))
        layout = make_layout(case)
        grid = make_grid_tensors(case, layout)
        rng = np.random.default_rng(3)
        batch = rng.uniform(0.0, 1.0, size=(16, layout.dimension))
        batch[:, layout.block("V_M")] += 0.5
        expected = residual_imbalance(batch, grid).mean
        got = residual_imbalance_torch(torch.as_tensor(batch), torch_grid(grid)).numpy()
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_torch_residual_gradient_matches_finite_differences(self) -> None:
        case = parse_case(json.dumps(PV_LIMIT_CASE))
        layout = make_layout(case)
        tgrid = torch_grid(make_grid_tensors(case, layout))
        generator = torch.Generator().manual_seed(0)
        batch = torch.rand((3, layout.dimension), generator=generator, dtype=torch.float64) + 0.5
        batch.requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(lambda x: residual_imbalance_torch(x, tgrid), (batch,)))

    def test_dimension_mismatch_is_rejected(self) -> None:
        case = _two_bus()
        grid = make_grid_tensors(case, make_layout(case))
        with self.assertRaises(ValueError):
            residual_imbalance(np.zeros(5), grid)
        with self.assertRaises(ValueError):
            residual_imbalance_torch(torch.zeros((2, 5), dtype=torch.float64), torch_grid(grid))


class NewtonRaphsonTest(unittest.TestCase):
    def test_jacobian_matches_finite_differences(self) -> None:
        case = load_case(str(CASES_DIR / "case14.m"))
        ybus = build_admittance(case).matrix
        kinds = [bus.kind for bus in case.buses]
        pv = np.array([i for i, kind in enumerate(kinds) if kind == "generator"])
        pq = np.array([i for i, kind in enumerate(kinds) if kind == "load"])
        rng = np.random.default_rng(1)
        vm = rng.uniform(0.95, 1.05, case.n_bus)
        va = rng.uniform(-0.2, 0.2, case.n_bus)
        sbus = rng.normal(size=case.n_bus) + 1j * rng.normal(size=case.n_bus)

        def mismatch(x: np.ndarray) -> np.ndarray:
            angles = va.copy()
            mags = vm.copy()
            angles[np.concatenate([pv, pq])] = x[: pv.size + pq.size]
            mags[pq] = x[pv.size + pq.size :]
            return mismatch_vector(ybus, sbus, mags * np.exp(1j * angles), pv, pq)

        x0 = np.concatenate([va[np.concatenate([pv, pq])], vm[pq]])
        numeric = np.zeros((x0.size, x0.size))
        step = 1e-6
        for column in range(x0.size):
            delta = np.zeros_like(x0)
            delta[column] = step
            numeric[:, column] = (mismatch(x0 + delta) - mismatch(x0 - delta)) / (2.0 * step)
        analytic = newton_jacobian(ybus, vm * np.exp(1j * va), pv, pq).toarray()
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_case14_nominal_solution(self) -> None:
        case = load_case(str(CASES_DIR / "case14.m"))
        layout = make_layout(case)
        demand = [case.buses[index] for index in layout.demand_buses]
        setpoints = GeneratorSetpoints(
            p=np.array([2.324, 0.4, 0.0, 0.0, 0.0]),
            vm=np.array([gen.vm_setpoint for gen in case.generators]),
        )
        solution = solve_newton_raphson(
            case,
            [bus.pd for bus in demand],
            [bus.qd for bus in demand],
            setpoints,
            enforce_reactive_limits=False,
        )
        self.assertLessEqual(solution.mismatch, 1e-8)
        self.assertLessEqual(solution.iterations, 10)
        # solved values stored in the case file, rounded to 3 decimals / 0.01 degree
        vm = [1.06, 1.045, 1.01, 1.019, 1.02, 1.07, 1.062, 1.09, 1.056, 1.051, 1.057, 1.055, 1.05, 1.036]
        va = [0, -4.98, -12.72, -10.33, -8.78, -14.22, -13.37, -13.36, -14.94, -15.1, -14.79, -15.07, -15.16, -16.04]
        np.testing.assert_allclose(np.abs(solution.voltage), vm, atol=2e-3)
        np.testing.assert_allclose(np.angle(solution.voltage), np.radians(va), atol=1e-3)

    def test_two_bus_solution_balances(self) -> None:
        case = _two_bus()
        grid = make_grid_tensors(case, make_layout(case))
        solution = solve_newton_raphson(case, [0.5], [0.2], GeneratorSetpoints(p=np.array([0.5]), vm=np.array([1.0])))
        self.assertLessEqual(solution.mismatch, 1e-8)
        self.assertLess(residual_imbalance(solution.sample, grid).mean, 1e-7)
        layout = make_layout(case)
        self.assertGreater(solution.sample[layout.block("P_G")][0], 0.5)
        self.assertLess(solution.sample[layout.block("V_M")][1], 1.0)
        self.assertAlmostEqual(solution.sample[layout.block("V_M")][0], 1.0)
        self.assertEqual(solution.sample[layout.block("V_A")][0], 0.0)
        # load bus: V2 conj(Y21 V1 + Y22 V2) = -S_D
        ybus = build_admittance(case).dense()
        v = solution.voltage
        self.assertAlmostEqual(abs(v[1] * np.conj(ybus[1] @ v) + (0.5 + 0.2j)), 0.0, places=7)

    def test_reactive_limit_switches_pv_bus(self) -> None:
        case = parse_case(json.dumps(PV_LIMIT_CASE))
        layout = make_layout(case)
        grid = make_grid_tensors(case, layout)
        setpoints = GeneratorSetpoints(p=np.array([0.3, 0.3]), vm=np.array([1.0, 1.05]))
        free = solve_newton_raphson(case, [0.6], [0.3], setpoints, enforce_reactive_limits=False)
        self.assertGreater(free.sample[layout.block("Q_G")][1], 0.01)

        limited = solve_newton_raphson(case, [0.6], [0.3], setpoints)
        self.assertEqual(limited.switched_buses, (2,))
        self.assertEqual(limited.sample[layout.block("Q_G")][1], 0.01)
        self.assertLess(limited.sample[layout.block("V_M")][1], 1.05)
        self.assertLess(residual_imbalance(limited.sample, grid).mean, 1e-7)

    def test_divergence_reports_mismatch_and_iterations(self) -> None:
        case = _two_bus()
        setpoints = GeneratorSetpoints(p=np.array([0.5]), vm=np.array([1.0]))
        with self.assertRaises(PowerFlowDivergedError) as ctx:
            solve_newton_raphson(case, [3.0], [1.0], setpoints, max_iterations=1)
        self.assertEqual(ctx.exception.iterations, 1)
        self.assertGreater(ctx.exception.mismatch, 1e-8)

    def test_isolated_bus_gives_singular_jacobian(self) -> None:
        raw = json.loads(json.dumps(PV_LIMIT_CASE))
        raw["branches"] = raw["branches"][:1]
        case = parse_case(json.dumps(raw))
        setpoints = GeneratorSetpoints(p=np.array([0.3, 0.3]), vm=np.array([1.0, 1.0]))
        with self.assertRaises(SingularJacobianError):
            solve_newton_raphson(case, [0.6], [0.3], setpoints, enforce_reactive_limits=False)


class DispatchTest(unittest.TestCase):
    def test_equal_incremental_cost(self) -> None:
        output = economic_dispatch(
            np.array([1.0, 1.0]), np.array([0.0, 0.0]), np.zeros(2), np.ones(2) * 2.0, target=1.0
        )
        np.testing.assert_allclose(output, [0.5, 0.5], atol=1e-9)

    def test_linear_costs_follow_merit_order(self) -> None:
        output = economic_dispatch(np.zeros(3), np.array([3.0, 1.0, 2.0]), np.zeros(3), np.ones(3), target=1.5)
        np.testing.assert_allclose(output, [0.0, 1.0, 0.5], atol=1e-9)

    def test_target_outside_capability_saturates(self) -> None:
        p_max = np.array([1.0, 2.0])
        np.testing.assert_array_equal(economic_dispatch(np.ones(2), np.ones(2), np.zeros(2), p_max, 5.0), p_max)
        np.testing.assert_array_equal(economic_dispatch(np.ones(2), np.ones(2), np.array([0.1, 0.2]), p_max, 0.0), [0.1, 0.2])

    def test_dispatch_covers_demand_plus_losses(self) -> None:
        case = parse_case(json.dumps(PV_LIMIT_CASE))
        rng = np.random.default_rng(5)
        scenario = sample_dispatch(case, rng, (0.8, 1.2), (0.5, 1.5))
        self.assertTrue(np.all((scenario.load_multipliers >= 0.8) & (scenario.load_multipliers <= 1.2)))
        self.assertTrue(np.all((scenario.cost_multipliers >= 0.5) & (scenario.cost_multipliers <= 1.5)))
        setpoints = dispatch_from_costs(case, scenario, 0.6, rng, (0.95, 1.05), loss_factor=0.02)
        self.assertAlmostEqual(float(setpoints.p.sum()), 0.612, places=6)
        self.assertTrue(np.all((setpoints.vm >= 0.95) & (setpoints.vm <= 1.05)))

    def test_demand_above_capability_is_infeasible(self) -> None:
        case = _two_bus()
        scenario = DispatchScenario(load_multipliers=np.ones(1), cost_multipliers=np.ones(1))
        with self.assertRaises(InfeasibleDispatchError):
            dispatch_from_costs(case, scenario, 2.5, np.random.default_rng(0))


class ConstraintTest(unittest.TestCase):
    def setUp(self) -> None:
        self.case = _two_bus()
        self.layout = make_layout(self.case)
        self.grid = make_grid_tensors(self.case, self.layout)
        setpoints = GeneratorSetpoints(p=np.array([0.5]), vm=np.array([1.0]))
        self.solution = solve_newton_raphson(self.case, [0.5], [0.2], setpoints)

    def test_solved_sample_is_feasible(self) -> None:
        report = constraint_report(self.solution.sample, self.case, self.grid)
        self.assertTrue(report.feasible, report.failed())

    def test_box_violation_is_reported(self) -> None:
        sample = self.solution.sample.copy()
        sample[self.layout.index("V_M", 1)] = 1.2
        report = constraint_report(sample, self.case, self.grid)
        self.assertIn("voltageMagnitude", report.failed())
        self.assertAlmostEqual(report.checks["voltageMagnitude"].worst_violation, 0.1)
        self.assertTrue(report.checks["activeGeneration"].satisfied)

    def test_line_flow_matches_two_port_formula(self) -> None:
        check = line_flow_check(self.solution.sample, self.case)
        self.assertTrue(bool(check.within.all()))
        branch = self.case.branches[0]
        series = 1.0 / complex(branch.r, branch.x)
        charging = 1j * branch.b / 2.0
        v1, v2 = self.solution.voltage
        s_from = v1 * np.conj((series + charging) * v1 - series * v2)
        s_to = v2 * np.conj(-series * v1 + (series + charging) * v2)
        self.assertAlmostEqual(float(check.flows[0]), max(abs(s_from), abs(s_to)), places=12)

    def test_flat_profile_carries_only_charging(self) -> None:
        flat = self.solution.sample.copy()
        flat[self.layout.block("V_M")] = 1.02
        flat[self.layout.block("V_A")] = -0.1
        raw = json.loads((CASES_DIR / "two_bus.json").read_text(encoding="utf-8"))
        raw["branches"][0]["b"] = 0.0
        lossless = parse_case(json.dumps(raw))
        np.testing.assert_array_equal(line_flow_check(flat, lossless).flows, [0.0])
        # charging b/2 |V|^2 at each end is all that remains
        self.assertAlmostEqual(float(line_flow_check(flat, self.case).flows[0]), 0.01 * 1.02**2, places=12)

    def test_tight_line_limit_fails_only_line_flow(self) -> None:
        raw = json.loads((CASES_DIR / "two_bus.json").read_text(encoding="utf-8"))
        raw["branches"][0]["sMax"] = 0.1
        case = parse_case(json.dumps(raw))
        report = constraint_report(self.solution.sample, case, make_grid_tensors(case, make_layout(case)))
        self.assertEqual(report.failed(), ["lineFlow"])


class DatasetFactoryTest(unittest.TestCase):
    def test_samples_are_feasible_and_index_deterministic(self) -> None:
        case = _two_bus()
        grid = make_grid_tensors(case, make_layout(case))
        config = _small_config()
        dataset = generate_dataset(case, 6, config)
        self.assertEqual(dataset.samples.shape, (6, 8))
        for sample in dataset.samples:
            self.assertTrue(constraint_report(sample, case, grid).feasible)
        self.assertLess(float(residual_imbalance(dataset.samples, grid).mean.max()), 1e-6)
        self.assertEqual(dataset.metadata["rejection"]["accepted"], 6)
        self.assertEqual(dataset.metadata["seed"], 123)

        shorter = generate_dataset(case, 4, config)
        np.testing.assert_array_equal(shorter.samples, dataset.samples[:4])
        parallel = generate_dataset(case, 6, config, workers=2)
        np.testing.assert_array_equal(parallel.samples, dataset.samples)

    def test_demand_perturbation_stays_in_range(self) -> None:
        case = _two_bus()
        layout = make_layout(case)
        dataset = generate_dataset(case, 6, _small_config())
        p_d = dataset.samples[:, layout.block("P_D")][:, 0]
        self.assertTrue(np.all((p_d >= 0.4 - 1e-12) & (p_d <= 0.6 + 1e-12)))
        unit = dataset.normalized()
        self.assertTrue(np.all((unit >= -1e-9) & (unit <= 1.0 + 1e-9)))

    def test_slack_reactive_loop_moves_setpoint_inside_limits(self) -> None:
        raw = json.loads(json.dumps(PV_LIMIT_CASE))
        raw["generators"][0].update({"qMin": 0.2, "qMax": 0.6})
        raw["generators"][1].update({"qMin": -2.0, "qMax": 2.0})
        case = parse_case(json.dumps(raw))
        layout = make_layout(case)
        config = PipelineConfig()
        setpoints = GeneratorSetpoints(p=np.array([0.3, 0.3]), vm=np.array([0.96, 1.0]))
        plain = solve_newton_raphson(case, [0.6], [0.3], setpoints)
        adjusted = solve_with_slack_reactive_limits(case, [0.6], [0.3], setpoints, build_admittance(case), config)
        self.assertLess(plain.sample[layout.block("Q_G")][0], 0.2)
        q = adjusted.sample[layout.block("Q_G")][0]
        self.assertGreaterEqual(q, 0.2)
        self.assertLessEqual(q, 0.6)
        self.assertGreater(adjusted.sample[layout.block("V_M")][0], 0.96)

    def test_abort_when_rejection_rate_is_too_high(self) -> None:
        case = _two_bus()
        config = _small_config().with_overrides(grid={"demand_range": (5.0, 6.0)})
        with self.assertRaises(DatasetAbortError) as ctx:
            generate_dataset(case, 6, config)
        self.assertEqual(ctx.exception.diagnostics["rejectionRate"], 1.0)
        self.assertIn("infeasibleDispatch", ctx.exception.diagnostics["reasons"])

    def test_save_and_load_dataset_directory(self) -> None:
        case = _two_bus()
        config = _small_config()
        dataset = generate_dataset(case, 6, config)
        with tempfile.TemporaryDirectory() as tmp_dir:
            out_dir = Path(tmp_dir) / "data"
            save_dataset(dataset, out_dir, config)
            self.assertEqual(np.load(out_dir / "samples.npy").shape, (6, 8))
            sidecar = read_json(out_dir / "dataset.json")
            self.assertEqual(sidecar["version"], 1)
            self.assertEqual(sidecar["layout"]["dimension"], 8)
            self.assertEqual(sidecar["config"]["seed"], 123)
            self.assertIn("generatorOfRecord", sidecar)
            loaded = load_dataset(out_dir)
        self.assertEqual(loaded.case, case)
        np.testing.assert_allclose(loaded.samples, dataset.samples, atol=1e-12)
        self.assertEqual(loaded.metadata["rejection"], dataset.metadata["rejection"])

    def test_reference_cases_get_a_calibrated_angle_window(self) -> None:
        case = load_case(str(CASES_DIR / "case14.m"))
        layout = make_layout(case)
        samples = np.zeros((2, layout.dimension))
        # case-file angles of the IEEE 14-bus operating point
        center = np.radians(
            [0.0, -4.98, -12.72, -10.33, -8.78, -14.22, -13.37, -13.36, -14.94, -15.1, -14.79, -15.07, -15.16, -16.04]
        )
        samples[0, layout.block("V_A")] = 0.9 * center
        samples[1, layout.block("V_A")] = 1.1 * center
        config = PipelineConfig().with_overrides(seed=5, schedule={"gamma_draws": 500})
        bounds, window = dataset_bounds(case, layout, samples, config)
        self.assertEqual(window["target"], 2.75)
        self.assertAlmostEqual(window["measured"], 2.75, delta=1e-6)
        v_a = layout.block("V_A")
        np.testing.assert_allclose(bounds.lo[v_a], center - window["halfWidth"], atol=1e-12)
        np.testing.assert_allclose(bounds.hi[v_a], center + window["halfWidth"], atol=1e-12)

        explicit = config.with_overrides(grid={"noise_imbalance_target": 3.5})
        _, window = dataset_bounds(case, layout, samples, explicit)
        self.assertAlmostEqual(window["measured"], 3.5, delta=1e-6)

        off = config.with_overrides(grid={"calibrate_angle_window": False})
        bounds, window = dataset_bounds(case, layout, samples, off)
        self.assertIsNone(window)
        np.testing.assert_allclose(bounds.hi[v_a], [math.pi / 6.0] * case.n_bus)
        self.assertIsNone(noise_imbalance_target(_two_bus(), config))


if __name__ == "__main__":
    unittest.main()

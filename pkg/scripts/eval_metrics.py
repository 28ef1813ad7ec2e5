from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy import stats

from diffusion import ImbalanceBound
from grid_model import GridTensors, NetworkCase
from pf_engine import BOX_CONSTRAINTS, CONSTRAINT_KEYS, CONSTRAINT_LABELS, BranchModel, constraint_violations, residual_imbalance
from pipeline_utils import VERSION, utc_now_iso


@dataclass(frozen=True)
class ImbalanceSummary:
    mean: float
    median: float
    p95: float
    per_sample: np.ndarray

    def to_json(self) -> dict[str, float]:
        return {"mean": self.mean, "median": self.median, "p95": self.p95}


@dataclass(frozen=True)
class FidelityReport:
    wasserstein: np.ndarray
    ks: np.ndarray
    support_extension: np.ndarray

    def summary(self) -> dict[str, float]:
        return {
            "meanWasserstein": float(self.wasserstein.mean()),
            "maxWasserstein": float(self.wasserstein.max()),
            "meanKs": float(self.ks.mean()),
            "maxKs": float(self.ks.max()),
            "meanSupportExtension": float(self.support_extension.mean()),
        }


@dataclass(frozen=True)
class LinearityScore:
    rmse: float
    max_deviation: float


def _as_matrix(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("expected a non-empty n x D sample matrix.")
    return samples


def mean_imbalance(samples: np.ndarray, grid: GridTensors) -> ImbalanceSummary:
    per_sample = np.atleast_1d(residual_imbalance(_as_matrix(samples), grid).mean)
    return ImbalanceSummary(
        mean=float(per_sample.mean()),
        median=float(np.median(per_sample)),
        p95=float(np.percentile(per_sample, 95)),
        per_sample=per_sample,
    )


def constraint_satisfaction(
    samples: np.ndarray,
    case: NetworkCase,
    grid: GridTensors,
    tolerance: float = 1e-6,
    branches: BranchModel | None = None,
) -> dict[str, float]:
    violations = constraint_violations(_as_matrix(samples), case, grid, branches)
    rates: dict[str, float] = {}
    for key in CONSTRAINT_KEYS:
        allowed = 0.0 if key in BOX_CONSTRAINTS else tolerance
        rates[key] = float(np.mean(violations[key] <= allowed))
    return rates


def support_extension(synthetic: np.ndarray, real: np.ndarray) -> np.ndarray:
    """Per dimension, the fraction of synthetic values outside the range the real data covers."""
    synthetic = _as_matrix(synthetic)
    real = _as_matrix(real)
    outside = (synthetic < real.min(axis=0)) | (synthetic > real.max(axis=0))
    return outside.mean(axis=0)


def distribution_fidelity(synthetic: np.ndarray, real: np.ndarray) -> FidelityReport:
    synthetic = _as_matrix(synthetic)
    real = _as_matrix(real)
    if synthetic.shape[1] != real.shape[1]:
        raise ValueError(f"layouts differ: {synthetic.shape[1]} vs {real.shape[1]} dimensions.")
    dimension = real.shape[1]
    wasserstein = np.array([stats.wasserstein_distance(synthetic[:, i], real[:, i]) for i in range(dimension)])
    ks = np.array([stats.ks_2samp(synthetic[:, i], real[:, i]).statistic for i in range(dimension)])
    return FidelityReport(wasserstein=wasserstein, ks=ks, support_extension=support_extension(synthetic, real))


def linearity_score(curve: np.ndarray, bound: ImbalanceBound) -> LinearityScore:
    curve = np.asarray(curve, dtype=float)
    if curve.shape != (bound.steps + 1,):
        raise ValueError(f"curve must cover t = 0..{bound.steps}.")
    deviation = curve - bound.values()
    return LinearityScore(
        rmse=float(np.sqrt(np.mean(deviation[1:] ** 2))),
        max_deviation=float(np.max(np.abs(deviation))),
    )


def linearity_improvement(baseline: LinearityScore, learned: LinearityScore, factor: float) -> dict[str, Any]:
    """Baseline-to-learned RMSE ratio; the learned schedule passes when the ratio reaches ``factor``."""
    if learned.rmse == 0.0:
        return {"ratio": None, "factor": factor, "holds": True}
    ratio = baseline.rmse / learned.rmse
    return {"ratio": ratio, "factor": factor, "holds": ratio >= factor}


def reverse_trace_check(trace: np.ndarray, bound: ImbalanceBound) -> float:
    """Fraction of steps t = 1..T whose mean reverse-chain imbalance stays within gamma_t."""
    trace = np.asarray(trace, dtype=float)
    if trace.shape != (bound.steps + 1,):
        raise ValueError(f"trace must cover t = 0..{bound.steps}.")
    return float(np.mean(trace[1:] <= bound.values()[1:]))


def build_report(
    case: NetworkCase,
    model_tag: str,
    imbalance: ImbalanceSummary,
    rates: dict[str, float],
    fidelity: FidelityReport,
    labels: Sequence[str],
    seeds: dict[str, Any],
    real_imbalance: ImbalanceSummary | None = None,
    noise_floor: FidelityReport | None = None,
    linearity: dict[str, LinearityScore] | None = None,
    trace_fraction: float | None = None,
    linearity_factor: float | None = None,
) -> dict[str, Any]:
    report: dict[str, Any] = {
        "version": VERSION,
        "generatedAt": utc_now_iso(),
        "grid": case.name,
        "modelTag": model_tag,
        "meanImbalance": imbalance.to_json(),
        "constraintRates": {key: rates[key] for key in CONSTRAINT_KEYS},
        "fidelity": {
            "summary": fidelity.summary(),
            "perDimension": [
                {
                    "label": label,
                    "wasserstein": float(fidelity.wasserstein[index]),
                    "ks": float(fidelity.ks[index]),
                    "supportExtension": float(fidelity.support_extension[index]),
                }
                for index, label in enumerate(labels)
            ],
        },
        "seeds": seeds,
    }
    if real_imbalance is not None:
        report["realImbalance"] = real_imbalance.to_json()
    if noise_floor is not None:
        report["fidelity"]["noiseFloor"] = noise_floor.summary()
    if linearity:
        report["linearity"] = {
            name: {"rmse": score.rmse, "maxDeviation": score.max_deviation} for name, score in linearity.items()
        }
        if linearity_factor is not None and {"baseline", "learned"} <= set(linearity):
            report["linearityImprovement"] = linearity_improvement(
                linearity["baseline"], linearity["learned"], linearity_factor
            )
    if trace_fraction is not None:
        report["traceFraction"] = trace_fraction
    return report


def format_report_table(report: dict[str, Any]) -> str:
    lines = [f"grid {report['grid']}  model {report['modelTag']}", ""]
    imbalance = report["meanImbalance"]
    lines.append(f"{'mean imbalance (p.u.)':<32}{imbalance['mean']:>14.6g}")
    lines.append(f"{'median / p95 (p.u.)':<32}{imbalance['median']:>14.6g}{imbalance['p95']:>14.6g}")
    if "realImbalance" in report:
        lines.append(f"{'real data imbalance (p.u.)':<32}{report['realImbalance']['mean']:>14.6g}")
    lines.append("")
    for key, rate in report["constraintRates"].items():
        lines.append(f"{CONSTRAINT_LABELS[key] + ' ' + key:<32}{rate:>14.4f}")
    lines.append("")
    summary = report["fidelity"]["summary"]
    lines.append(f"{'W1 mean / max':<32}{summary['meanWasserstein']:>14.6g}{summary['maxWasserstein']:>14.6g}")
    lines.append(f"{'KS mean / max':<32}{summary['meanKs']:>14.6g}{summary['maxKs']:>14.6g}")
    lines.append(f"{'support extension (mean)':<32}{summary['meanSupportExtension']:>14.6g}")
    floor = report["fidelity"].get("noiseFloor")
    if floor:
        lines.append(f"{'noise floor W1 / KS (mean)':<32}{floor['meanWasserstein']:>14.6g}{floor['meanKs']:>14.6g}")
    for name, score in report.get("linearity", {}).items():
        lines.append(f"{'linearity ' + name + ' rmse / max':<32}{score['rmse']:>14.6g}{score['maxDeviation']:>14.6g}")
    improvement = report.get("linearityImprovement")
    if improvement:
        ratio = "inf" if improvement["ratio"] is None else f"{improvement['ratio']:.4g}"
        verdict = "pass" if improvement["holds"] else "fail"
        lines.append(f"{'linearity gain vs x' + format(improvement['factor'], 'g'):<32}{ratio:>14}  {verdict}")
    if "traceFraction" in report:
        lines.append(f"{'reverse steps within bound':<32}{report['traceFraction']:>14.4f}")
    return "\n".join(lines) + "\n"

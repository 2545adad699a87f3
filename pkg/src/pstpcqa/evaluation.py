"""Correlation and error metrics between predicted and ground-truth scores.

Implements Pearson (optionally after a fitted 4-parameter logistic mapping),
Spearman with tie-averaged ranks, Kendall tau-b, and RMSE, plus CSV export
of prediction/truth pairs for scatter plots. Everything here is a pure
function over equal-length vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from pstpcqa.pointcloud import IoFailure


class LengthMismatch(ValueError):
    """Prediction and truth vectors differ in length (or are too short)."""


class ConstantInput(ValueError):
    """A correlation was requested against a constant vector."""


@dataclass
class EvalReport:
    """One evaluation: correlations, error, and the raw pairs behind them."""

    plcc: float
    srcc: float
    krcc: float
    rmse: float
    n: int
    plcc_raw: float = float("nan")
    logistic_params: Optional[np.ndarray] = None
    pairs: list = field(default_factory=list)
    scale_min: Optional[float] = None
    scale_max: Optional[float] = None


def _check(pred, truth, min_n=2):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 1 or truth.ndim != 1 or pred.shape[0] != truth.shape[0]:
        raise LengthMismatch(f"got shapes {pred.shape} and {truth.shape}")
    if pred.shape[0] < min_n:
        raise LengthMismatch(f"need at least {min_n} pairs, got {pred.shape[0]}")
    return pred, truth


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise ConstantInput("correlation undefined for constant input")
    return float((da * db).sum() / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def fit_logistic(pred: np.ndarray, truth: np.ndarray,
                 max_iter: int = 200, step_tol: float = 1e-10) -> np.ndarray:
    """Least-squares fit of y = b1*(0.5 - 1/(1+exp(b2*(x-b3)))) + b4.

    Gauss-Newton from the conventional initialization (b1 = range of truth,
    b2 = 1/std of predictions, b3 = mean prediction, b4 = mean truth),
    stopping after max_iter iterations or once the step norm drops below
    step_tol.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    std = x.std()
    beta = np.array([y.max() - y.min(), 1.0 / std if std > 0 else 1.0, x.mean(), y.mean()])

    def residual(b):
        z = np.clip(b[1] * (x - b[2]), -500.0, 500.0)
        sig = 1.0 / (1.0 + np.exp(z))
        return y - (b[0] * (0.5 - sig) + b[3]), sig

    resid, sig = residual(beta)
    sse = float(resid @ resid)
    for _ in range(max_iter):
        dsig = sig * (1.0 - sig)  # d(1/(1+e^z))/dz = -dsig, absorbed below
        jac = np.column_stack([
            0.5 - sig,
            beta[0] * dsig * (x - beta[2]),
            -beta[0] * dsig * beta[1],
            np.ones_like(x),
        ])
        step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        # Damped step: halve until the sum of squares stops increasing.
        scale = 1.0
        for _ in range(25):
            cand = beta + scale * step
            cand_resid, cand_sig = residual(cand)
            cand_sse = float(cand_resid @ cand_resid)
            if cand_sse <= sse:
                break
            scale *= 0.5
        else:
            break
        beta, resid, sig, sse = cand, cand_resid, cand_sig, cand_sse
        if np.linalg.norm(scale * step) < step_tol:
            break
    return beta


def logistic_apply(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    z = np.clip(params[1] * (np.asarray(x, dtype=np.float64) - params[2]), -500.0, 500.0)
    return params[0] * (0.5 - 1.0 / (1.0 + np.exp(z))) + params[3]


def plcc(pred: Sequence[float], truth: Sequence[float], logistic: bool = False):
    """Pearson linear correlation; optionally through a fitted logistic map.

    Returns (value, params) where params is the fitted 4-vector in logistic
    mode and None otherwise.
    """
    pred, truth = _check(pred, truth)
    if np.all(truth == truth[0]):
        raise ConstantInput("truth vector is constant")
    if not logistic:
        return _pearson(pred, truth), None
    params = fit_logistic(pred, truth)
    return _pearson(logistic_apply(params, pred), truth), params


def srcc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Spearman rank correlation with tie-averaged ranks."""
    pred, truth = _check(pred, truth)
    return _pearson(_average_ranks(pred), _average_ranks(truth))


def krcc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Kendall tau-b over all pairs, with tie corrections in both variables."""
    pred, truth = _check(pred, truth)
    dp = np.sign(pred[:, None] - pred[None, :])
    dt = np.sign(truth[:, None] - truth[None, :])
    iu = np.triu_indices(len(pred), k=1)
    sp, st = dp[iu], dt[iu]
    concordant = int(np.sum((sp * st) > 0))
    discordant = int(np.sum((sp * st) < 0))
    ties_pred = int(np.sum((sp == 0) & (st != 0)))
    ties_truth = int(np.sum((st == 0) & (sp != 0)))
    denom = np.sqrt(float(concordant + discordant + ties_pred) *
                    float(concordant + discordant + ties_truth))
    if denom == 0.0:
        raise ConstantInput("tau undefined: a vector is constant")
    return float((concordant - discordant) / denom)


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Root mean squared error in the units of the inputs."""
    pred, truth = _check(pred, truth, min_n=1)
    diff = pred - truth
    return float(np.sqrt((diff * diff).mean()))


def evaluate(pred: Sequence[float], truth: Sequence[float],
             scale_min: Optional[float] = None,
             scale_max: Optional[float] = None) -> EvalReport:
    """Compute the full metric set over one prediction/truth pairing.

    The reported PLCC is the logistic-mapped value (conventional for this
    task); the raw value is kept alongside it.
    """
    pred, truth = _check(pred, truth)
    value_raw, _ = plcc(pred, truth, logistic=False)
    value_log, params = plcc(pred, truth, logistic=True)
    return EvalReport(
        plcc=value_log,
        srcc=srcc(pred, truth),
        krcc=krcc(pred, truth),
        rmse=rmse(pred, truth),
        n=len(pred),
        plcc_raw=value_raw,
        logistic_params=params,
        pairs=list(zip(pred.tolist(), truth.tolist())),
        scale_min=scale_min,
        scale_max=scale_max,
    )


def scatter_csv(report: EvalReport, path) -> None:
    """Write normalized (predicted, ground_truth) pairs as CSV.

    Both columns map to [0, 1] by the report's scaling (falling back to the
    min/max of the ground truth when no fold scaling was recorded).
    """
    if not report.pairs:
        raise ValueError("report has no pairs to write")
    pred = np.array([p for p, _ in report.pairs])
    truth = np.array([t for _, t in report.pairs])
    lo = report.scale_min if report.scale_min is not None else truth.min()
    hi = report.scale_max if report.scale_max is not None else truth.max()
    span = hi - lo if hi > lo else 1.0
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["predicted", "ground_truth"])
            for p, t in zip((pred - lo) / span, (truth - lo) / span):
                writer.writerow([f"{p:.12g}", f"{t:.12g}"])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def format_report(report: EvalReport) -> str:
    """Flat key-value text rendering of a report."""
    lines = [
        f"n {report.n}",
        f"plcc {report.plcc:.6f}",
        f"plcc_raw {report.plcc_raw:.6f}",
        f"srcc {report.srcc:.6f}",
        f"krcc {report.krcc:.6f}",
        f"rmse {report.rmse:.6f}",
    ]
    if report.logistic_params is not None:
        lines.append("logistic_params " + " ".join(f"{b:.8g}" for b in report.logistic_params))
    return "\n".join(lines) + "\n"

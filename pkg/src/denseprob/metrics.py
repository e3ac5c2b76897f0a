"""Flow accuracy, uncertainty calibration and relative pose metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

GRID_STEPS = 50  # removal fractions 0, 0.02, ..., 0.98


class NoValidPixelsError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


def _endpoint_errors(pred, gt, valid=None):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    err = np.sqrt(((pred - gt) ** 2).sum(-1))
    if valid is None:
        valid = np.ones(err.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise NoValidPixelsError("no valid pixels")
    return err, valid


def endpoint_errors(pred, gt, valid=None):
    """Per-pixel Euclidean errors of the valid pixels (flattened)."""
    err, valid = _endpoint_errors(pred, gt, valid)
    return err[valid]


def aepe(pred, gt, valid=None):
    err, valid = _endpoint_errors(pred, gt, valid)
    return float(err[valid].mean())


def pck(pred, gt, T, valid=None, per_image=False):
    """Percentage of valid pixels with end-point error at most ``T``.

    Pooled over all pixels by default; ``per_image=True`` averages the
    per-image percentages over the leading batch axis instead.
    """
    if not T > 0:
        raise ValueError("threshold must be positive")
    err, valid = _endpoint_errors(pred, gt, valid)
    if not per_image:
        return float(100.0 * (err[valid] <= T).mean())
    scores = []
    for e, v in zip(err, valid):
        if v.any():
            scores.append(100.0 * (e[v] <= T).mean())
    return float(np.mean(scores))


def f1_outlier_rate(pred, gt, valid=None):
    """Percentage of valid pixels with error > 3 px and error / |gt| > 0.05.

    Where ``|gt| = 0`` the relative condition counts as satisfied.
    """
    err, valid = _endpoint_errors(pred, gt, valid)
    mag = np.sqrt((np.asarray(gt, dtype=float) ** 2).sum(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mag > 0, err / np.where(mag > 0, mag, 1.0) > 0.05, True)
    out = (err > 3.0) & rel
    return float(100.0 * out[valid].mean())


# ---------------------------------------------------------------------------
# sparsification


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    values: np.ndarray
    normalized: bool = True


def removal_grid(steps: int = GRID_STEPS):
    return np.arange(steps) / steps


def _metric_on(err, metric, T):
    if metric == "aepe":
        return err.mean()
    if metric == "pck":
        # use the complement so that lower is better, like AEPE
        return 1.0 - (err <= T).mean()
    raise ValueError(f"unknown metric {metric!r}")


def sparsification(errors, confidence, metric="aepe", T=1.0, steps=GRID_STEPS, normalize=True, rng=None):
    """Metric of the pixels left after removing the least confident ones.

    At grid point ``k`` the ``(k * n) // steps`` least confident pixels are
    dropped.  Ties keep pixel order unless ``rng`` is given, in which case
    they are broken at random.  Normalization divides by the value at
    fraction 0 (an all-zero curve stays zero).
    """
    errors = np.asarray(errors, dtype=float).ravel()
    confidence = np.asarray(confidence, dtype=float).ravel()
    if errors.shape != confidence.shape:
        raise ValueError("errors and confidence lengths differ")
    n = len(errors)
    if n == 0:
        raise NoValidPixelsError("no pixels")
    if rng is None:
        order = np.argsort(confidence, kind="stable")
    else:
        order = np.lexsort((rng.permutation(n), confidence))
    e = errors[order]
    fr = removal_grid(steps)
    vals = []
    for k in range(steps):
        removed = (k * n) // steps
        if removed >= n:
            break
        vals.append(_metric_on(e[removed:], metric, T))
    vals = np.asarray(vals)
    fr = fr[:len(vals)]
    if normalize:
        vals = vals / vals[0] if vals[0] != 0 else np.zeros_like(vals)
    return SparsificationCurve(fr, vals, normalize)


def oracle_curve(errors, metric="aepe", T=1.0, steps=GRID_STEPS, normalize=True):
    """Sparsification under the ideal ordering (largest errors removed first)."""
    errors = np.asarray(errors, dtype=float).ravel()
    return sparsification(errors, -errors, metric, T, steps, normalize)


def average_curves(curves: Sequence[SparsificationCurve]):
    grid = curves[0].fractions
    for c in curves[1:]:
        if c.fractions.shape != grid.shape or not np.array_equal(c.fractions, grid):
            raise GridMismatchError("curves use different grids")
    return SparsificationCurve(grid.copy(), np.mean([c.values for c in curves], axis=0), curves[0].normalized)


def ause(curve: SparsificationCurve, oracle: SparsificationCurve):
    """Trapezoidal area between a sparsification curve and its oracle."""
    if curve.fractions.shape != oracle.fractions.shape or not np.array_equal(curve.fractions, oracle.fractions):
        raise GridMismatchError("curve and oracle use different grids")
    gap = curve.values - oracle.values
    x = curve.fractions
    return float(np.sum(0.5 * (gap[1:] + gap[:-1]) * np.diff(x)))


def ause_per_image(errors_list, conf_list, metric="aepe", T=1.0, steps=GRID_STEPS):
    """Average per-image curves, then integrate.  Returns ``(ause, curve, oracle)``."""
    curves = [sparsification(e, c, metric, T, steps) for e, c in zip(errors_list, conf_list)]
    oracles = [oracle_curve(e, metric, T, steps) for e in errors_list]
    n = min(len(c.values) for c in curves + oracles)
    curves = [SparsificationCurve(c.fractions[:n], c.values[:n]) for c in curves]
    oracles = [SparsificationCurve(c.fractions[:n], c.values[:n]) for c in oracles]
    sc = average_curves(curves)
    oc = average_curves(oracles)
    return ause(sc, oc), sc, oc


# ---------------------------------------------------------------------------
# pose


def rotation_error(R_gt, R_est):
    """Angle in degrees of the rotation taking ``R_gt`` to ``R_est``."""
    R_gt = np.asarray(R_gt, dtype=float)
    R_est = np.asarray(R_est, dtype=float)
    c = (np.trace(R_gt.T @ R_est) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(T_gt, T_est):
    """Angle in degrees between two translation directions."""
    a = np.asarray(T_gt, dtype=float).ravel()
    b = np.asarray(T_est, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("translation vectors must be nonzero")
    return float(np.degrees(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0))))


def accuracy_at(errors, kappa):
    return float((np.asarray(errors, dtype=float) < kappa).mean())


def map_at(errors, thresholds=(5, 10, 20)):
    """mAP at each threshold as the mean accuracy over 5-degree steps up to it.

    ``errors`` are per-pair ``max(rotation error, translation error)``.
    Returns a dict ``{threshold: fraction}``.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold list is empty")
    errors = np.asarray(errors, dtype=float)
    out = {}
    for t in thresholds:
        ks = np.arange(5, t + 1, 5)
        out[t] = float(np.mean([accuracy_at(errors, k) for k in ks]))
    return out

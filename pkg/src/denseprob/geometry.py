"""Homography estimation and confidence-driven multi-stage inference.

Coordinates are ``(x, y)`` pixel positions with pixel centres on integers.
A homography ``H`` maps reference coordinates to query coordinates, so the
flow it induces is ``project(H, x) - x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn

DEFAULT_SCALES = (0.5, 0.88, 1.0, 1.33, 1.66, 2.0)


class DegenerateConfigurationError(ValueError):
    """Correspondences do not determine a homography (for example, collinear points)."""


class RansacFailure(RuntimeError):
    """No model gathered at least four inliers."""


# ---------------------------------------------------------------------------
# basic projective helpers


def normalize_homography(H):
    H = np.asarray(H, dtype=float)
    return H / H[2, 2] if H[2, 2] != 0 else H


def apply_homography(H, pts, eps=1e-12):
    """Project ``(..., 2)`` points.  Points sent to the plane at infinity become NaN."""
    pts = np.asarray(pts, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    bad = np.abs(w) < eps
    w = np.where(bad, np.nan, w)
    u = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w
    v = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w
    return np.stack([u, v], axis=-1)


def flow_from_homography(H, shape):
    """Dense flow ``project(H, x) - x`` over an ``(h, w)`` grid; invalid pixels are NaN."""
    h, w = shape
    xs, ys = nn.pixel_grid(h, w)
    grid = np.stack([xs, ys], axis=-1)
    return apply_homography(H, grid) - grid


def compose_flows(H, fine):
    """Flow of the composition: ``Y(x) = project(H, x + F(x)) - x``."""
    fine = np.asarray(fine, dtype=float)
    h, w = fine.shape[-3:-1]
    xs, ys = nn.pixel_grid(h, w)
    grid = np.stack([xs, ys], axis=-1)
    return apply_homography(H, grid + fine) - grid


def corner_error(H_est, H_true, shape):
    """Largest displacement between the image corners mapped by the two homographies."""
    h, w = shape
    c = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)
    return float(np.linalg.norm(apply_homography(H_est, c) - apply_homography(H_true, c), axis=-1).max())


def scaling_matrix(fx, fy=None):
    """Map pixel coordinates of an image to those of the image resized by ``(fx, fy)``."""
    fy = fx if fy is None else fy
    return np.array([[fx, 0.0, 0.5 * fx - 0.5], [0.0, fy, 0.5 * fy - 0.5], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# DLT and RANSAC


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T, (pts - c) * s


def _collinear(pts, tol=1e-9):
    q = pts - pts.mean(axis=0)
    sv = np.linalg.svd(q, compute_uv=False)
    return sv[0] == 0 or sv[-1] <= tol * sv[0]


def fit_homography_dlt(src, dst):
    """Normalized direct linear transform from ``n >= 4`` correspondences."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("source and destination counts differ")
    if len(src) < 4:
        raise ValueError(f"a homography needs at least 4 correspondences, got {len(src)}")
    if _collinear(src) or _collinear(dst):
        raise DegenerateConfigurationError("correspondences are collinear")
    Ts, s = _hartley(src)
    Td, d = _hartley(dst)
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, vt = np.linalg.svd(A)
    if sv[min(7, len(sv) - 1)] <= 1e-12 * sv[0]:
        raise DegenerateConfigurationError("correspondence matrix is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return normalize_homography(H)


def symmetric_transfer_error(H, src, dst):
    """Per-match ``|H src - dst|^2 + |H^-1 dst - src|^2``; NaN projections count as infinite."""
    Hinv = np.linalg.inv(H)
    f = ((apply_homography(H, src) - dst) ** 2).sum(-1)
    b = ((apply_homography(Hinv, dst) - src) ** 2).sum(-1)
    e = f + b
    return np.where(np.isfinite(e), e, np.inf)


@dataclass
class RansacResult:
    H: np.ndarray
    inliers: np.ndarray
    inlier_ratio: float
    iterations: int


def ransac_homography(src, dst, threshold=1.0, max_iters=2000, confidence=0.999, seed=0,
                      refine_steps=2) -> RansacResult:
    """4-point RANSAC scored by symmetric transfer error, then a least-squares refit.

    A match is an inlier when its symmetric transfer error is at most
    ``2 * threshold**2``.  The iteration budget shrinks adaptively with the
    best inlier ratio found so far.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise ValueError(f"RANSAC needs at least 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    limit = 2.0 * threshold ** 2
    best_count, best_mask = 0, None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        try:
            H = fit_homography_dlt(src[idx], dst[idx])
            mask = symmetric_transfer_error(H, src, dst) <= limit
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / n
            if w >= 1.0:
                needed = it
            else:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w ** 4))) if w > 0 else max_iters
    if best_count < 4:
        raise RansacFailure(f"best model has {best_count} inliers")
    mask = best_mask
    H = fit_homography_dlt(src[mask], dst[mask])
    for _ in range(refine_steps):
        new = symmetric_transfer_error(H, src, dst) <= limit
        if new.sum() < 4 or np.array_equal(new, mask):
            break
        mask = new
        H = fit_homography_dlt(src[mask], dst[mask])
    mask = symmetric_transfer_error(H, src, dst) <= limit
    if mask.sum() < 4:
        raise RansacFailure("refit model lost its consensus set")
    return RansacResult(H, mask, float(mask.mean()), it)


# ---------------------------------------------------------------------------
# match selection


@dataclass
class MatchSet:
    src: np.ndarray  # (n, 2) reference coordinates
    dst: np.ndarray  # (n, 2) query coordinates
    confidence: np.ndarray  # (n,)

    def __len__(self):
        return len(self.src)


def select_matches(flow, confidence, threshold=0.1, scale=1.0, valid=None, bounds=None):
    """One correspondence per pixel whose confidence exceeds ``threshold``.

    ``flow`` is ``(h, w, 2)`` in its own pixel units.  Coordinates and flow
    are mapped to a grid ``scale`` times finer (``x -> scale * x + (scale - 1) / 2``).
    ``bounds = (H, W)`` drops matches whose query position falls outside.
    An empty result is returned as a ``MatchSet`` of length 0.
    """
    flow = np.asarray(flow, dtype=float)
    confidence = np.asarray(confidence, dtype=float)
    h, w = flow.shape[:2]
    if confidence.shape != (h, w):
        raise ValueError(f"confidence {confidence.shape} does not match flow {flow.shape}")
    keep = confidence > threshold
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    xs, ys = nn.pixel_grid(h, w)
    src = np.stack([xs, ys], axis=-1)
    dst = src + flow
    o = 0.5 * (scale - 1.0)
    src = src * scale + o
    dst = dst * scale + o
    keep &= np.isfinite(dst).all(-1)
    if bounds is not None:
        Hb, Wb = bounds
        keep &= (dst[..., 0] >= 0) & (dst[..., 0] <= Wb - 1) & (dst[..., 1] >= 0) & (dst[..., 1] <= Hb - 1)
    return MatchSet(src[keep], dst[keep], confidence[keep])


# ---------------------------------------------------------------------------
# multi-stage inference


@dataclass
class InferenceResult:
    flow: np.ndarray  # (H, W, 2)
    confidence: Optional[np.ndarray]  # (H, W)
    homography: Optional[np.ndarray] = None
    inlier_ratio: float = 0.0
    scale: Optional[float] = None
    fallback: bool = True


def warp_image(img, H, border="clamp"):
    """Resample ``img`` (H, W, C) at ``project(H, x)``.

    Out-of-view samples repeat the nearest edge pixel (``border="clamp"``)
    or are zero (``border="zero"``).  Clamping keeps the per-image input
    statistics of the second pass close to those of a natural image.
    """
    h, w = img.shape[:2]
    xs, ys = nn.pixel_grid(h, w)
    p = apply_homography(H, np.stack([xs, ys], axis=-1))
    if border == "clamp":
        p = np.where(np.isfinite(p), p, 0.0)
        x = np.clip(p[..., 0], 0, w - 1)
        y = np.clip(p[..., 1], 0, h - 1)
    elif border == "zero":
        p = np.where(np.isfinite(p), p, -1e6)
        x, y = p[..., 0], p[..., 1]
    else:
        raise ValueError(f"unknown border mode {border!r}")
    out, _ = nn.bilinear_sample_forward(img[None], x[None], y[None])
    return out[0]


def _fallback(pred):
    conf = None if pred.confidence is None else pred.confidence[0]
    return InferenceResult(pred.flow[0], conf)


def _coarse_fit(net, ref, query, scale, threshold, R, ransac, ransac_kw, pred=None):
    """Stage-one homography from a pass on the pair resized for ``scale``.

    Ratios below 1 shrink the reference, ratios above 1 shrink the query by
    the inverse.  Returns ``(H_original, inlier_ratio)`` or ``None``.
    """
    fr = fq = 1.0
    if scale < 1:
        fr = scale
    elif scale > 1:
        fq = 1.0 / scale
    r_in, r_ext, r_f = _shrink(ref, fr)
    q_in, q_ext, q_f = _shrink(query, fq)
    if pred is None or scale != 1.0:
        pred = net.predict(r_in[None], q_in[None], R)
    lv = pred.coarse
    if pred.coarse_confidence is None:
        return None
    stride = lv.stride
    h, w = lv.mean.shape[1:3]
    # keep only coarse pixels whose centre lies inside the resized reference
    xs, ys = nn.pixel_grid(h, w)
    o = 0.5 * (stride - 1)
    inside = (xs * stride + o <= r_ext[1] - 1) & (ys * stride + o <= r_ext[0] - 1)
    m = select_matches(lv.mean[0], pred.coarse_confidence[0], threshold, scale=stride, valid=inside,
                       bounds=q_ext)
    if len(m) < 4:
        return None
    try:
        res = ransac(m.src, m.dst, **ransac_kw)
    except (RansacFailure, DegenerateConfigurationError, ValueError, np.linalg.LinAlgError):
        return None
    H = np.linalg.inv(scaling_matrix(*q_f)) @ res.H @ scaling_matrix(*r_f)
    return normalize_homography(H), res.inlier_ratio


def _shrink(img, f):
    """Resize by ``f <= 1`` and paste top-left into a canvas of the original extent.

    The canvas holds the mean colour of the resized image, so the padding does
    not shift the per-image standardisation or add a hard edge.

    Returns the canvas, the resized extent and the exact ``(fx, fy)`` factors.
    """
    h, w = img.shape[:2]
    if f == 1.0:
        return img, (h, w), (1.0, 1.0)
    nh, nw = max(1, int(round(h * f))), max(1, int(round(w * f)))
    small, _ = nn.resize_forward(img[None], nh, nw)
    out = np.empty_like(img)
    out[:] = small[0].mean(axis=(0, 1))
    out[:nh, :nw] = small[0]
    return out, (nh, nw), (nw / w, nh / h)


def _refine(net, ref, query, H, R):
    aligned = warp_image(query, H)
    pred = net.predict(ref[None], aligned[None], R)
    flow = compose_flows(H, pred.flow[0])
    conf = None if pred.confidence is None else pred.confidence[0]
    return flow, conf


def multi_scale_inference(net, ref, query, scales: Sequence[float] = DEFAULT_SCALES, threshold=0.1, R=1.0,
                          inlier_floor=0.10, ransac: Callable = ransac_homography, ransac_kw=None):
    """Coarse homography at the scale with the highest inlier ratio, then a refinement pass.

    Falls back to the single-pass prediction when no scale yields an
    acceptable homography.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("scale list is empty")
    ransac_kw = dict(ransac_kw or {})
    ref = np.asarray(ref, dtype=float)
    query = np.asarray(query, dtype=float)
    base = net.predict(ref[None], query[None], R)
    best = None
    for s in scales:
        fit = _coarse_fit(net, ref, query, float(s), threshold, R, ransac, ransac_kw, base)
        if fit is None:
            continue
        if best is None or fit[1] > best[1]:
            best = (fit[0], fit[1], float(s))
    if best is None or best[1] < inlier_floor:
        return _fallback(base)
    H, ratio, s = best
    flow, conf = _refine(net, ref, query, H, R)
    if not np.isfinite(flow).all():
        return _fallback(base)
    return InferenceResult(flow, conf, H, ratio, s, fallback=False)


def two_stage_inference(net, ref, query, threshold=0.1, R=1.0, inlier_floor=0.10,
                        ransac: Callable = ransac_homography, ransac_kw=None):
    """Single-scale coarse alignment followed by a second pass and flow composition."""
    return multi_scale_inference(net, ref, query, (1.0,), threshold, R, inlier_floor, ransac, ransac_kw)

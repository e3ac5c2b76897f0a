"""Synthetic training triplets for self-supervised dense matching.

A sample is built in three steps:

1. a procedural texture is rendered as the query image and, through a
   random homography, as the reference image (the texture is analytic, so
   both renders are exact);
2. optional textured disks are pasted into both images with their own
   affine motion;
3. optional local perturbations warp the reference by a residual flow
   ``eps`` that is confined to a few smooth blobs.

The flow ``Y`` maps a reference pixel ``x`` to the query position
``x + Y(x)``, i.e. ``I_ref(x) ~ I_query(x + Y(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nn
from .geometry import apply_homography


class FootprintError(ValueError):
    """A moving object does not fit inside both images."""


# ---------------------------------------------------------------------------
# procedural textures


@dataclass
class Texture:
    """Band-limited texture over the whole plane with soft flat regions.

    ``value(x, y) = base + gate(x, y) * sum_k amp_k * sin(freq_k . (x, y) + phase_k)``
    where ``gate`` is a smooth step of a slow wave, so parts of the plane
    carry no texture at all.
    """

    base: np.ndarray  # (C,)
    freqs: np.ndarray  # (K, 2) radians per pixel
    phases: np.ndarray  # (K,)
    amps: np.ndarray  # (K, C)
    gate_freq: np.ndarray  # (2,)
    gate_phase: float
    gate_bias: float
    gate_sharpness: float = 4.0

    def render(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        arg = x[..., None] * self.freqs[:, 0] + y[..., None] * self.freqs[:, 1] + self.phases
        waves = np.sin(arg) @ self.amps
        g = np.sin(x * self.gate_freq[0] + y * self.gate_freq[1] + self.gate_phase) + self.gate_bias
        gate = 0.5 * (1.0 + np.tanh(self.gate_sharpness * g))
        return np.clip(self.base + gate[..., None] * waves, 0.0, 1.0)


def random_texture(rng, channels=3, n_waves=6, wavelength=(12.0, 32.0), contrast=0.25, flat_fraction=0.3):
    """Draw a :class:`Texture`; ``flat_fraction`` roughly sets the untextured area."""
    lam = rng.uniform(*wavelength, size=n_waves)
    theta = rng.uniform(0, np.pi, size=n_waves)
    freqs = (2 * np.pi / lam)[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    amps = rng.uniform(-1, 1, size=(n_waves, channels))
    amps *= contrast / np.abs(amps).sum(axis=0, keepdims=True)
    gl = rng.uniform(48.0, 96.0)
    gt = rng.uniform(0, np.pi)
    gate_freq = (2 * np.pi / gl) * np.array([np.cos(gt), np.sin(gt)])
    # sin + b > 0 on a fraction arccos(-b)/pi of the plane
    bias = -np.cos(np.pi * (1.0 - flat_fraction)) if flat_fraction > 0 else 10.0
    return Texture(
        base=rng.uniform(contrast, 1.0 - contrast, size=channels),
        freqs=freqs,
        phases=rng.uniform(0, 2 * np.pi, size=n_waves),
        amps=amps,
        gate_freq=gate_freq,
        gate_phase=float(rng.uniform(0, 2 * np.pi)),
        gate_bias=float(bias),
    )


# ---------------------------------------------------------------------------
# base transform


@dataclass
class HomographySpec:
    size: tuple = (64, 64)
    corner_range: float = 8.0  # max |displacement| per corner coordinate
    translation: float = 0.0  # extra shared shift, same units
    max_retries: int = 100


def _corners(size):
    h, w = size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)


def _convex(q):
    cross = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        cross.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    cross = np.array(cross)
    return bool(np.all(cross > 0) or np.all(cross < 0))


def homography_from_corners(src, dst):
    """Exact homography through four correspondences."""
    A = []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    _, _, vt = np.linalg.svd(np.asarray(A))
    H = vt[-1].reshape(3, 3)
    return H / H[2, 2]


def sample_homography(spec: HomographySpec, rng) -> np.ndarray:
    """Random reference-to-query homography with bounded corner displacements."""
    src = _corners(spec.size)
    if spec.corner_range == 0 and spec.translation == 0:
        return np.eye(3)
    for _ in range(spec.max_retries):
        shift = rng.uniform(-spec.translation, spec.translation, size=2)
        dst = src + rng.uniform(-spec.corner_range, spec.corner_range, size=(4, 2)) + shift
        if not _convex(dst):
            continue
        H = homography_from_corners(src, dst)
        if np.isfinite(H).all() and abs(np.linalg.det(H)) > 1e-8:
            return H
    raise RuntimeError("could not draw an invertible homography")


# ---------------------------------------------------------------------------
# perturbations


@dataclass
class PerturbationSpec:
    amplitude: float = 3.0  # max |E| in pixels
    smoothness: float = 4.0  # gaussian sigma of the elastic field
    mask_count: tuple = (1, 4)  # inclusive range
    sigma_range: tuple = (3.0, 8.0)  # gaussian blob std range
    max_norm: float = 4.0  # clamp on |eps| where blobs overlap


def elastic_field(shape, amplitude, smoothness, rng):
    """Smoothed uniform noise with its largest vector norm scaled to ``amplitude``."""
    if smoothness <= 0:
        raise ValueError("smoothness must be positive")
    h, w = shape
    noise = rng.uniform(-1, 1, size=(h, w, 2))
    if amplitude == 0:
        return np.zeros((h, w, 2))
    E = np.stack([gaussian_filter(noise[..., i], smoothness, mode="reflect") for i in range(2)], axis=-1)
    peak = np.sqrt((E ** 2).sum(-1)).max()
    return E * (amplitude / peak) if peak > 0 else E


def gaussian_bump(shape, center, sigma):
    h, w = shape
    xs, ys = nn.pixel_grid(h, w)
    return np.exp(-((xs - center[0]) ** 2 + (ys - center[1]) ** 2) / (2.0 * sigma ** 2))


def perturbation_masks(shape, count, sigma_range, rng):
    """``count`` masks ``min(2 G, 1)`` around unit-peak gaussian bumps; shape ``(count, h, w)``."""
    if count < 0:
        raise ValueError("mask count must be nonnegative")
    h, w = shape
    out = np.zeros((count, h, w))
    for i in range(count):
        c = rng.uniform([0, 0], [w - 1, h - 1])
        s = rng.uniform(*sigma_range)
        out[i] = np.minimum(2.0 * gaussian_bump(shape, c, s), 1.0)
    return out


def residual_flow(E, masks, max_norm=None):
    """``eps = sum_i E * S_i`` with its per-pixel norm clamped to ``max_norm``."""
    eps = E * masks.sum(axis=0)[..., None] if len(masks) else np.zeros_like(E)
    if max_norm is not None:
        n = np.sqrt((eps ** 2).sum(-1, keepdims=True))
        eps = np.where(n > max_norm, eps * (max_norm / np.maximum(n, 1e-300)), eps)
    return eps


def sample_residual_flow(spec: PerturbationSpec, shape, rng):
    E = elastic_field(shape, spec.amplitude, spec.smoothness, rng)
    k = int(rng.integers(spec.mask_count[0], spec.mask_count[1] + 1))
    masks = perturbation_masks(shape, k, spec.sigma_range, rng)
    return residual_flow(E, masks, spec.max_norm)


# ---------------------------------------------------------------------------
# triplets


@dataclass
class SampleTriplet:
    ref: np.ndarray  # (H, W, C)
    query: np.ndarray  # (H, W, C)
    flow: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W) bool
    homography: Optional[np.ndarray] = None
    object_masks: List[np.ndarray] = field(default_factory=list)


def in_bounds(flow, shape=None):
    """Pixels whose target ``x + flow(x)`` lies inside the image."""
    h, w = flow.shape[:2] if shape is None else shape
    xs, ys = nn.pixel_grid(*flow.shape[:2])
    tx = xs + flow[..., 0]
    ty = ys + flow[..., 1]
    return np.isfinite(tx) & np.isfinite(ty) & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)


def sample_clamped(img, x, y):
    """Bilinear sample of ``img`` (H, W, C) with edge clamping (constants stay exact)."""
    h, w = img.shape[:2]
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    out, _ = nn.bilinear_sample_forward(img[None], x[None], y[None])
    return out[0]


def _base_flow_at(base, x, y):
    """Evaluate the base flow at float positions; ``base`` is a 3x3 matrix or a flow field."""
    base = np.asarray(base, dtype=float)
    if base.shape == (3, 3):
        p = np.stack([x, y], axis=-1)
        return apply_homography(base, p) - p
    return sample_clamped(base, x, y)


def compose_perturbed(base, eps, ref, query) -> SampleTriplet:
    """Apply a residual flow to a clean pair.

    The query is unchanged, the reference becomes ``ref(x + eps(x))`` and
    the flow becomes ``base(x + eps(x)) + eps(x)``.  ``base`` is either a
    homography or a dense flow field of the clean pair.
    """
    eps = np.asarray(eps, dtype=float)
    h, w = ref.shape[:2]
    if eps.shape != (h, w, 2):
        raise ValueError(f"residual flow {eps.shape} does not match image extent {(h, w)}")
    xs, ys = nn.pixel_grid(h, w)
    px = xs + eps[..., 0]
    py = ys + eps[..., 1]
    flow = _base_flow_at(base, px, py) + eps
    if np.any(eps):
        new_ref = sample_clamped(ref, px, py)
    else:
        new_ref = ref.copy()
    H = base if np.shape(base) == (3, 3) else None
    return SampleTriplet(new_ref, query.copy(), flow, in_bounds(flow), H)


@dataclass
class ObjectSpec:
    center: tuple  # disk centre in the reference (x, y)
    radius: float
    linear: np.ndarray = field(default_factory=lambda: np.eye(2))  # 2x2 part of the motion
    translation: tuple = (0.0, 0.0)
    texture: Optional[Texture] = None


def object_motion(spec: ObjectSpec, pts):
    """Affine motion of the object: reference position -> query position."""
    c = np.asarray(spec.center, dtype=float)
    return c + np.asarray(spec.translation) + (np.asarray(pts) - c) @ np.asarray(spec.linear).T


def add_moving_object(triplet: SampleTriplet, spec: ObjectSpec, rng=None) -> SampleTriplet:
    """Paste a textured disk into both images with its own affine motion.

    Inside the disk's reference footprint the flow is the object motion.
    """
    h, w = triplet.ref.shape[:2]
    c = np.asarray(spec.center, dtype=float)
    r = float(spec.radius)
    if c[0] - r < 0 or c[1] - r < 0 or c[0] + r > w - 1 or c[1] + r > h - 1:
        raise FootprintError("object footprint leaves the reference image")
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    rim = object_motion(spec, c + r * np.stack([np.cos(t), np.sin(t)], axis=-1))
    if rim[:, 0].min() < 0 or rim[:, 1].min() < 0 or rim[:, 0].max() > w - 1 or rim[:, 1].max() > h - 1:
        raise FootprintError("object footprint leaves the query image")
    L = np.asarray(spec.linear, dtype=float)
    if abs(np.linalg.det(L)) < 1e-8:
        raise FootprintError("object motion is singular")
    tex = spec.texture
    if tex is None:
        tex = random_texture(rng if rng is not None else np.random.default_rng(0),
                             channels=triplet.ref.shape[2], flat_fraction=0.0)
    xs, ys = nn.pixel_grid(h, w)
    grid = np.stack([xs, ys], axis=-1)

    # reference: object-local coordinates are x - c
    ref_mask = ((grid - c) ** 2).sum(-1) <= r * r
    ref = triplet.ref.copy()
    local = grid[ref_mask] - c
    ref[ref_mask] = tex.render(local[:, 0], local[:, 1])

    # query: invert the motion to find object-local coordinates
    Linv = np.linalg.inv(L)
    q_local = (grid - c - np.asarray(spec.translation)) @ Linv.T
    q_mask = (q_local ** 2).sum(-1) <= r * r
    query = triplet.query.copy()
    query[q_mask] = tex.render(q_local[q_mask][:, 0], q_local[q_mask][:, 1])

    flow = triplet.flow.copy()
    flow[ref_mask] = object_motion(spec, grid[ref_mask]) - grid[ref_mask]
    return SampleTriplet(ref, query, flow, in_bounds(flow), triplet.homography,
                         triplet.object_masks + [ref_mask])


# ---------------------------------------------------------------------------
# full generator


@dataclass
class GeneratorConfig:
    size: tuple = (64, 64)
    channels: int = 3
    homography: HomographySpec = field(default_factory=HomographySpec)
    perturb: bool = True
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    object_prob: float = 0.5
    object_radius: tuple = (5.0, 10.0)
    object_shift: float = 4.0
    object_rotation: float = 0.2  # radians
    object_scale: tuple = (0.9, 1.1)
    flat_fraction: float = 0.3

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        if tuple(self.homography.size) != self.size:
            self.homography = replace(self.homography, size=self.size)


def render_homography_pair(texture: Texture, H, size):
    """Query = texture on the grid; reference(x) = texture(H x)."""
    h, w = size
    xs, ys = nn.pixel_grid(h, w)
    query = texture.render(xs, ys)
    p = apply_homography(H, np.stack([xs, ys], axis=-1))
    ref = texture.render(p[..., 0], p[..., 1])
    flow = p - np.stack([xs, ys], axis=-1)
    return SampleTriplet(ref, query, flow, in_bounds(flow), np.asarray(H, dtype=float))


def random_object(cfg: GeneratorConfig, rng, texture_channels) -> ObjectSpec:
    h, w = cfg.size
    lo, hi = cfg.object_radius
    fit = (min(h, w) - 1) / 2 - cfg.object_shift - 2  # largest radius whose margin fits the image
    if fit < 1:
        raise FootprintError(f"no room for an object in a {h}x{w} image")
    r = rng.uniform(min(lo, fit), min(hi, fit))
    margin = r + cfg.object_shift + 2
    c = rng.uniform([margin, margin], [w - 1 - margin, h - 1 - margin])
    a = rng.uniform(-cfg.object_rotation, cfg.object_rotation)
    s = rng.uniform(*cfg.object_scale)
    L = s * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    shift = rng.uniform(-cfg.object_shift, cfg.object_shift, size=2)
    return ObjectSpec(tuple(c), r, L, tuple(shift), random_texture(rng, texture_channels, flat_fraction=0.0))


def generate_triplet(cfg: GeneratorConfig, rng) -> SampleTriplet:
    """One sample as a pure function of ``(cfg, rng state)``."""
    tex = random_texture(rng, cfg.channels, flat_fraction=cfg.flat_fraction)
    H = sample_homography(cfg.homography, rng)
    trip = render_homography_pair(tex, H, cfg.size)
    if rng.uniform() < cfg.object_prob:
        for _ in range(10):
            try:
                trip = add_moving_object(trip, random_object(cfg, rng, cfg.channels))
                break
            except FootprintError:
                continue
    if cfg.perturb:
        eps = sample_residual_flow(cfg.perturbation, cfg.size, rng)
        base = trip.homography if not trip.object_masks else trip.flow
        out = compose_perturbed(base, eps, trip.ref, trip.query)
        out.homography = trip.homography
        out.object_masks = trip.object_masks
        trip = out
    return trip


def sample_seed(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-sample generator derived from a master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def generate_batch(cfg: GeneratorConfig, master_seed: int, start: int, count: int):
    trips = [generate_triplet(cfg, sample_seed(master_seed, i)) for i in range(start, start + count)]
    return stack_triplets(trips)


def stack_triplets(trips):
    return (np.stack([t.ref for t in trips]), np.stack([t.query for t in trips]),
            np.stack([t.flow for t in trips]), np.stack([t.valid for t in trips]))


def warp_query(query, flow):
    """Backward-warp the query by the flow: ``out(x) = query(x + flow(x))`` (zero outside)."""
    h, w = flow.shape[:2]
    xs, ys = nn.pixel_grid(h, w)
    out, _ = nn.bilinear_sample_forward(query[None], (xs + flow[..., 0])[None], (ys + flow[..., 1])[None])
    return out[0]

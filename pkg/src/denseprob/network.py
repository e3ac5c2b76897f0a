"""Two-level pyramidal flow network with a probabilistic output head.

The toy network mirrors the coarse-to-fine layout of larger matching
architectures at a size that trains on a CPU:

* a shared three-layer feature extractor produces features at strides 4
  and 8;
* level 1 (stride 8) correlates all reference and query positions, turns the
  volume into a soft assignment and decodes a mean flow from it;
* level 2 (stride 4) warps the query features by the upsampled level-1 flow,
  builds a local volume with radius ``r`` and refines the flow.

Each level also predicts mixture weights and variances, either through a
separate uncertainty decoder (correlation uncertainty module plus predictor)
or as extra channels of the flow decoder.  Flows are expressed in pixels of
the level they live on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import nn
from .correlation import (
    correlation_uncertainty,
    correlation_uncertainty_backward,
    global_correlation,
    global_correlation_backward,
    global_uncertainty_layers,
    local_correlation,
    local_correlation_backward,
    local_uncertainty_layers,
    predictor_layers,
    uncertainty_predictor,
    uncertainty_predictor_backward,
)
from .mixture import ConstraintSpec, EmptyLossError, MixtureParams, confidence_pr, l1_loss, nll_loss

HEADS = ("prob", "l1")
MIXTURES = ("constrained", "unconstrained", "single")
DECODERS = ("uncertainty", "common", "correlation")


class IndivisibleExtentError(ValueError):
    pass


@dataclass
class NetConfig:
    image_size: tuple = (64, 64)
    in_channels: int = 3
    feat_channels: tuple = (8, 16, 16)
    radius: int = 4
    head: str = "prob"
    mixture: str = "constrained"
    decoder: str = "uncertainty"
    propagate: bool = True
    dec_widths: tuple = (32, 16)
    unc_widths: tuple = (8, 8, 8)
    unc_channels: int = 8
    pred_widths: tuple = (32, 16)
    dtype: str = "float64"
    standardize: bool = True
    feat_gain: float = 1.0
    normalize_features: bool = True
    temperature: float = 10.0  # scale of the cosine volumes before the softmax
    init_variance: float = 0.0  # starting variance in image px^2 (0: middle of each interval)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("feat_channels", "dec_widths", "unc_widths", "pred_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.mixture not in MIXTURES:
            raise ValueError(f"mixture must be one of {MIXTURES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")
        H, W = self.image_size
        if H % 8 or W % 8:
            raise IndivisibleExtentError(f"image extent {H}x{W} must be divisible by 8")

    def to_dict(self):
        return asdict(self)


def level_constraint(kind: str, extent: int, stride: int = 1) -> ConstraintSpec:
    """Variance intervals for a level whose flow lives on an ``extent``-pixel grid.

    The intervals are specified in image pixels and converted to level
    pixels, so lower bounds shrink by ``stride**2``.  The upper bound, the
    squared image extent, is the squared level extent (at least 4 so that
    tiny test grids still give a valid interval).
    """
    top = max(float(extent) ** 2, 4.0)
    u = 1.0 / float(stride) ** 2
    if kind == "constrained":
        return ConstraintSpec((u, 2.0 * u), (u, top))
    if kind == "unconstrained":
        return ConstraintSpec.shared(2, u, top)
    if kind == "single":
        return ConstraintSpec((u,), (top,))
    raise ValueError(f"unknown mixture kind {kind!r}")


def _offset_table(r, dtype):
    k, l = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    return np.stack([l.ravel(), k.ravel()], axis=-1).astype(dtype)


@dataclass
class LevelOutput:
    """Prediction of one pyramid level (flow in level pixels)."""

    stride: int
    mean: np.ndarray
    params: Optional[MixtureParams] = None


class PyramidNet:
    def __init__(self, config: NetConfig = None, seed: int = 0):
        self.config = config = config or NetConfig()
        self.dtype = dt = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        H, W = config.image_size
        self.extents = [(H // 8, W // 8), (H // 4, W // 4)]
        self.strides = [8, 4]
        prob = config.head == "prob"
        if prob:
            self.constraints = [level_constraint(config.mixture, max(e), s) for e, s in zip(self.extents, self.strides)]
            self.M = self.constraints[0].n_components
        else:
            self.constraints = [None, None]
            self.M = 0
        M = self.M
        common = prob and config.decoder == "common"
        separate = prob and not common
        self.common = common
        self.separate = separate
        self.prev_channels = 2 * M if (prob and config.propagate) else 0

        c1, c2, c3 = config.feat_channels
        self.feat = nn.ConvStack(config.in_channels, [
            nn.conv(c1, stride=2, pad=1), nn.conv(c2, stride=2, pad=1),
            nn.conv(c3, stride=2, pad=1, activation=None)], rng=rng, dtype=dt, gain=config.feat_gain)
        self.feat_l2_channels = c2
        h1, w1 = self.extents[0]
        d = 2 * config.radius + 1
        out_ch = 2 + 2 * M if common else 2
        dw = config.dec_widths
        self.r1 = max(h1, w1) - 1
        d1 = 2 * self.r1 + 1
        self.dec1 = nn.ConvStack(d1 * d1, [nn.conv(dw[0], pad=1), nn.conv(dw[1], pad=1),
                                           nn.conv(out_ch, pad=1, activation=None)], rng=rng, dtype=dt)
        self.dec2 = nn.ConvStack(d * d + 2 + self.prev_channels,
                                 [nn.conv(dw[0], pad=1), nn.conv(dw[1], pad=1),
                                  nn.conv(out_ch, pad=1, activation=None)], rng=rng, dtype=dt)
        self.stacks = [("feat", self.feat), ("dec1", self.dec1), ("dec2", self.dec2)]
        if separate:
            n = config.unc_channels
            if h1 != w1:
                raise IndivisibleExtentError("the global uncertainty module needs a square level-1 grid")
            self.unc1 = nn.ConvStack(1, global_uncertainty_layers(h1, n, config.unc_widths), rng=rng, dtype=dt)
            self.unc2 = nn.ConvStack(1, local_uncertainty_layers(n, config.unc_widths), rng=rng, dtype=dt)
            flow_ch = dw[1] if config.decoder == "uncertainty" else 0
            self.pred1 = nn.ConvStack(n + flow_ch, predictor_layers(M, config.pred_widths), rng=rng, dtype=dt)
            self.pred2 = nn.ConvStack(n + flow_ch + self.prev_channels, predictor_layers(M, config.pred_widths), rng=rng, dtype=dt)
            self.stacks += [("unc1", self.unc1), ("unc2", self.unc2), ("pred1", self.pred1), ("pred2", self.pred2)]

        if prob and config.init_variance > 0:
            self._init_variance_bias(config.init_variance)

        # displacement tables, (d*d, 2) in (x, y) order
        self._offsets1 = _offset_table(self.r1, dt)
        self._offsets2 = _offset_table(config.radius, dt)

    def _init_variance_bias(self, v0):
        """Set the output biases of the variance channels so each level starts at ``v0``."""
        heads = (self.dec1, self.dec2) if self.common else (self.pred1, self.pred2)
        first = 2 + self.M if self.common else self.M
        for stack, cons, s in zip(heads, self.constraints, self.strides):
            b = stack.params[-1][1]
            for m, (lo, hi) in enumerate(zip(cons.lower, cons.upper)):
                if hi > lo:
                    t = np.clip((v0 / s ** 2 - lo) / (hi - lo), 1e-6, 1 - 1e-6)
                    b[first + m] = np.log(t) - np.log1p(-t)

    # ------------------------------------------------------------------ params
    def named_arrays(self):
        out = []
        for name, stack in self.stacks:
            out.extend(stack.named_arrays(name))
        return out

    def n_params(self):
        return int(sum(a.size for _, a in self.named_arrays()))

    # ----------------------------------------------------------------- forward
    def forward(self, ref, query):
        """Run both levels on a batch ``(N, H, W, C)``.  Returns ``(levels, cache)``."""
        cfg = self.config
        ref = np.asarray(ref, dtype=self.dtype)
        query = np.asarray(query, dtype=self.dtype)
        if ref.shape != query.shape:
            raise IndivisibleExtentError(f"reference {ref.shape} and query {query.shape} differ")
        if ref.ndim == 3:
            ref, query = ref[None], query[None]
        if tuple(ref.shape[1:3]) != cfg.image_size:
            raise IndivisibleExtentError(f"network built for {cfg.image_size}, got {ref.shape[1:3]}")
        N = ref.shape[0]
        M = self.M
        c = {}

        x = np.concatenate([ref, query], axis=0)
        if cfg.standardize:
            mu = x.mean(axis=(1, 2), keepdims=True)
            sd = x.std(axis=(1, 2), keepdims=True)
            x = (x - mu) / (sd + self.dtype.type(0.05))
        else:
            x = x - self.dtype.type(0.5)
        f1, c["feat"] = self.feat.forward(x)
        f2 = c["feat"]["acts"][1]
        if cfg.normalize_features:
            f1, c["norm1"] = nn.l2_normalize_forward(f1)
            f2, c["norm2"] = nn.l2_normalize_forward(f2)
        tau = self.dtype.type(cfg.temperature)
        fr1, fq1 = f1[:N], f1[N:]
        fr2, fq2 = f2[:N], f2[N:]
        c["f1"] = (fr1, fq1)
        c["f2"] = (fr2, fq2)

        # level 1: global correlation, soft assignment, mapping decoder
        h1, w1 = self.extents[0]
        # the decoder reads the global volume indexed by displacement: a local
        # volume whose radius spans the whole grid holds the same products
        D1 = local_correlation(fr1, fq1, self.r1)
        P1, _ = nn.softmax_forward(tau * D1.reshape(N, h1, w1, -1))
        soft1 = P1 @ self._offsets1
        out1, c["dec1"] = self.dec1.forward(P1)
        mu1 = soft1 + out1[..., :2]
        g1 = c["dec1"]["acts"][1]
        c.update(D1=D1, P1=P1)

        level1 = LevelOutput(8, mu1)
        logits1 = hh1 = None
        if self.common:
            logits1, hh1 = out1[..., 2:2 + M], out1[..., 2 + M:]
        elif self.separate:
            C1 = global_correlation(fr1, fq1)
            c["C1_shape"] = C1.shape
            u1, c["unc1"] = correlation_uncertainty(C1, self.unc1)
            logits1, hh1, c["pred1"] = uncertainty_predictor(u1, g1 if cfg.decoder == "uncertainty" else None, self.pred1)
        if M:
            level1.params = MixtureParams(mu1, logits1, hh1, self.constraints[0])

        # level 2: warp by the upsampled coarse flow, local correlation, refinement
        h2, w2 = self.extents[1]
        up1, c["up_mu"] = nn.resize_forward(mu1, h2, w2)
        mu1up = 2.0 * up1
        gx, gy = (a.astype(self.dtype) for a in nn.pixel_grid(h2, w2))
        fq2w, c["warp"] = nn.bilinear_sample_forward(fq2, gx + mu1up[..., 0], gy + mu1up[..., 1])
        C2 = local_correlation(fr2, fq2w, cfg.radius)
        d2 = C2.shape[-1] ** 2
        P2, _ = nn.softmax_forward(tau * C2.reshape(N, h2, w2, d2))
        soft2 = P2 @ self._offsets2
        parts = [P2, mu1up]
        prev = None
        if self.prev_channels:
            prev, c["up_prev"] = nn.resize_forward(np.concatenate([logits1, hh1], axis=-1), h2, w2)
            parts.append(prev)
        out2, c["dec2"] = self.dec2.forward(np.concatenate(parts, axis=-1))
        mu2 = mu1up + soft2 + out2[..., :2]
        g2 = c["dec2"]["acts"][1]
        c.update(C2=C2, P2=P2, fq2w=fq2w)

        level2 = LevelOutput(4, mu2)
        if self.common:
            logits2, hh2 = out2[..., 2:2 + M], out2[..., 2 + M:]
        elif self.separate:
            u2, c["unc2"] = correlation_uncertainty(C2, self.unc2)
            logits2, hh2, c["pred2"] = uncertainty_predictor(
                u2, g2 if cfg.decoder == "uncertainty" else None, self.pred2, prev)
        if M:
            level2.params = MixtureParams(mu2, logits2, hh2, self.constraints[1])
        c["N"] = N
        return [level1, level2], c

    # ---------------------------------------------------------------- backward
    def backward(self, cache, level_grads):
        """Backpropagate per-level output gradients into every weight.

        ``level_grads[l]`` is a dict with ``"mean"`` and, for the probabilistic
        head, ``"alpha_logits"`` and ``"h"`` (missing entries count as zero).
        Returns a list of ``(name, gradient)`` aligned with ``named_arrays``.
        """
        cfg = self.config
        c = cache
        N = c["N"]
        M = self.M
        h1, w1 = self.extents[0]
        h2, w2 = self.extents[1]
        g_lv1, g_lv2 = level_grads

        def part(g, key, shape):
            v = g.get(key) if g else None
            return np.zeros(shape, dtype=self.dtype) if v is None else np.asarray(v, dtype=self.dtype)

        dmu2 = part(g_lv2, "mean", (N, h2, w2, 2))
        dmu1 = part(g_lv1, "mean", (N, h1, w1, 2)).copy()
        grads = {}

        # level 2
        dprev = None
        dout2 = dmu2
        extra2 = {}
        if M:
            dl2 = part(g_lv2, "alpha_logits", (N, h2, w2, M))
            dh2 = part(g_lv2, "h", (N, h2, w2, M))
        if self.common:
            dout2 = np.concatenate([dmu2, dl2, dh2], axis=-1)
        elif self.separate:
            pieces, grads["pred2"] = uncertainty_predictor_backward(dl2, dh2, self.pred2, c["pred2"])
            du2 = pieces[0]
            i = 1
            if cfg.decoder == "uncertainty":
                extra2[1] = pieces[1]
                i = 2
            if self.prev_channels:
                dprev = pieces[i]
            dC2_u, grads["unc2"] = correlation_uncertainty_backward(du2, self.unc2, c["unc2"], c["C2"].shape)
        din2, grads["dec2"] = self.dec2.backward(c["dec2"], dout2, extra2)
        d_sq = c["P2"].shape[-1]
        dP2 = din2[..., :d_sq] + dmu2 @ self._offsets2.T
        dmu1up = din2[..., d_sq:d_sq + 2] + dmu2
        if self.prev_channels:
            dp = din2[..., d_sq + 2:]
            dprev = dp if dprev is None else dprev + dp
        tau = self.dtype.type(cfg.temperature)
        dC2 = tau * nn.softmax_backward(dP2, c["P2"]).reshape(c["C2"].shape)
        if self.separate:
            dC2 = dC2 + dC2_u
        fr2, fq2 = c["f2"]
        dfr2, dfq2w = local_correlation_backward(dC2, fr2, c["fq2w"], cfg.radius)
        dfq2, dwx, dwy = nn.bilinear_sample_backward(dfq2w, c["warp"])
        dmu1up = dmu1up + np.stack([dwx, dwy], axis=-1)
        dmu1 += 2.0 * nn.resize_backward(dmu1up, c["up_mu"])

        # level 1
        dout1 = dmu1
        extra1 = {}
        if M:
            dl1 = part(g_lv1, "alpha_logits", (N, h1, w1, M)).copy()
            dh1 = part(g_lv1, "h", (N, h1, w1, M)).copy()
            if dprev is not None:
                dback = nn.resize_backward(dprev, c["up_prev"])
                dl1 += dback[..., :M]
                dh1 += dback[..., M:]
        if self.common:
            dout1 = np.concatenate([dmu1, dl1, dh1], axis=-1)
        elif self.separate:
            pieces, grads["pred1"] = uncertainty_predictor_backward(dl1, dh1, self.pred1, c["pred1"])
            if cfg.decoder == "uncertainty":
                extra1[1] = pieces[1]
            dC1, grads["unc1"] = correlation_uncertainty_backward(pieces[0], self.unc1, c["unc1"], c["C1_shape"])
        dP1, grads["dec1"] = self.dec1.backward(c["dec1"], dout1, extra1)
        dP1 = dP1 + dmu1 @ self._offsets1.T
        dD1 = tau * nn.softmax_backward(dP1, c["P1"]).reshape(c["D1"].shape)
        fr1, fq1 = c["f1"]
        dfr1, dfq1 = local_correlation_backward(dD1, fr1, fq1, self.r1)
        if self.separate:
            gr, gq = global_correlation_backward(dC1, fr1, fq1)
            dfr1 = dfr1 + gr
            dfq1 = dfq1 + gq

        # shared features
        df1 = np.concatenate([dfr1, dfq1], axis=0)
        df2 = np.concatenate([dfr2, dfq2], axis=0)
        if cfg.normalize_features:
            df1 = nn.l2_normalize_backward(df1, c["norm1"])
            df2 = nn.l2_normalize_backward(df2, c["norm2"])
        _, grads["feat"] = self.feat.backward(c["feat"], df1, {1: df2})

        out = []
        for name, stack in self.stacks:
            out.extend(nn.ConvStack.named_grads(grads[name], name))
        return out

    # --------------------------------------------------------------- inference
    def predict(self, ref, query, R: float = 1.0):
        """Full-resolution flow and confidence ``P_R`` (R in image pixels)."""
        levels, _ = self.forward(ref, query)
        return full_resolution(levels[-1], self.config.image_size, R)


@dataclass
class Prediction:
    flow: np.ndarray  # (N, H, W, 2) full-resolution pixels
    confidence: Optional[np.ndarray]  # (N, H, W) or None for the L1 head
    coarse: LevelOutput = None
    coarse_confidence: Optional[np.ndarray] = None


def full_resolution(level: LevelOutput, image_size, R: float = 1.0) -> Prediction:
    H, W = image_size
    s = level.stride
    flow, _ = nn.resize_forward(level.mean, H, W)
    flow = flow * s
    conf = conf_c = None
    if level.params is not None:
        conf_c = confidence_pr(level.params, R / s)
        conf = nn.resize_forward(conf_c[..., None], H, W)[0][..., 0]
    return Prediction(flow, conf, level, conf_c)


# ---------------------------------------------------------------------- loss
def downsample_ground_truth(flow, valid, stride: int):
    """Area-average a full-resolution flow to ``1/stride`` and rescale its magnitude.

    A coarse pixel is valid when every full-resolution pixel inside it is.
    """
    flow = np.asarray(flow, dtype=float)
    f = nn.area_downsample(flow, stride) / stride
    v = None
    if valid is not None:
        v = nn.area_downsample(np.asarray(valid, dtype=float)[..., None], stride)[..., 0] == 1.0
    return f, v


@dataclass
class LossResult:
    loss: float
    level_losses: List[float]
    level_grads: list
    param_grads: dict = field(default_factory=dict)
    skipped_levels: int = 0


def multiscale_loss(levels, gt_flow, valid=None, gammas=(0.32, 0.08), eta=0.0, params=None,
                    use_mask=True):
    """Weighted sum of per-level losses plus ``eta * ||theta||_2``.

    ``gt_flow`` is at full resolution and is brought to each level with
    :func:`downsample_ground_truth`.  Levels without a valid pixel contribute
    nothing and are counted in ``skipped_levels``.  ``params`` (a list of
    ``(name, array)``) is required when ``eta > 0``.
    """
    gammas = tuple(float(g) for g in gammas)
    if len(gammas) != len(levels):
        raise ValueError(f"{len(gammas)} level weights for {len(levels)} levels")
    if not any(g > 0 for g in gammas):
        raise ValueError("at least one level weight must be positive")
    total = 0.0
    per_level, grads = [], []
    skipped = 0
    for lv, gamma in zip(levels, gammas):
        f, v = downsample_ground_truth(gt_flow, valid if use_mask else None, lv.stride)
        try:
            if lv.params is not None:
                loss, g = nll_loss(lv.params, f, v)
            else:
                loss, gm = l1_loss(lv.mean, f, v)
                g = {"mean": gm}
        except EmptyLossError:
            skipped += 1
            per_level.append(0.0)
            grads.append({})
            continue
        total += gamma * loss
        per_level.append(loss)
        grads.append({k: gamma * a for k, a in g.items()})
    pgrads = {}
    if eta:
        if params is None:
            raise ValueError("weight norm term needs the parameter list")
        norm = np.sqrt(sum(float((a.astype(float) ** 2).sum()) for _, a in params))
        total += eta * norm
        if norm > 0:
            pgrads = {name: eta * a / norm for name, a in params}
    return LossResult(total, per_level, grads, pgrads, skipped)


def loss_and_grads(net: PyramidNet, ref, query, gt_flow, valid=None, gammas=(0.32, 0.08), eta=0.0,
                   use_mask=True):
    """Forward, loss and backward in one call; returns ``(LossResult, grads)``."""
    levels, cache = net.forward(ref, query)
    res = multiscale_loss(levels, gt_flow, valid, gammas, eta, net.named_arrays() if eta else None, use_mask)
    grads = net.backward(cache, res.level_grads)
    if res.param_grads:
        grads = [(n, g + res.param_grads[n]) for n, g in grads]
    return res, grads

"""Constrained mixture-of-Laplace predictive distribution for dense flow.

Every pixel carries a bivariate Laplace mixture whose components share the
mean flow ``mu`` and differ in a scalar variance that is shared by the u and
v directions::

    p(y) = sum_m alpha_m / (2 s2_m) * exp(-sqrt(2 / s2_m) * |y - mu|_1)

Component variances are produced from unconstrained network outputs ``h``
through ``lo + (hi - lo) * sigmoid(h)`` so that each component owns a fixed
interval of uncertainties.  Weights come from a softmax over logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOG2 = float(np.log(2.0))
SQRT2 = float(np.sqrt(2.0))


class ConstraintOrderError(ValueError):
    """Variance bounds are not ordered."""


class EmptyLossError(ValueError):
    """No valid pixel contributes to the loss."""


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits, axis=-1):
    shift = logits.max(axis=axis, keepdims=True)
    z = logits - shift
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def logsumexp(a, axis=-1):
    m = a.max(axis=axis, keepdims=True)
    # all -inf rows stay -inf instead of producing nan
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass(frozen=True)
class LaplaceComponent:
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    @property
    def log_variance(self) -> float:
        return float(np.log(self.variance))


@dataclass(frozen=True)
class ConstraintSpec:
    """Per-component variance intervals ``[lower[m], upper[m]]`` in pixels^2.

    With ``ordered=True`` (the default) the intervals must form the chain
    ``0 < lo_1 <= hi_1 <= lo_2 <= ... <= hi_M``.  ``ordered=False`` is only
    used to build permutation-invariant baselines where components share an
    interval.
    """

    lower: tuple
    upper: tuple
    ordered: bool = True

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must be nonempty and of equal length")
        for a, b in zip(lo, hi):
            if not a > 0:
                raise ConstraintOrderError(f"lower bound must be positive, got {a}")
            if a > b:
                raise ConstraintOrderError(f"lower bound {a} exceeds upper bound {b}")
        if self.ordered:
            for m in range(len(lo) - 1):
                if hi[m] > lo[m + 1]:
                    raise ConstraintOrderError(
                        f"component {m} upper bound {hi[m]} overlaps component {m + 1} lower bound {lo[m + 1]}"
                    )

    @property
    def n_components(self) -> int:
        return len(self.lower)

    @property
    def fixed(self) -> np.ndarray:
        """Boolean mask of components whose variance is not learned."""
        return np.array([a == b for a, b in zip(self.lower, self.upper)])

    @classmethod
    def default(cls, image_size: float) -> "ConstraintSpec":
        """Two components: ``s2_1 = 1`` fixed and ``2 <= s2_2 <= image_size**2``."""
        return cls((1.0, 2.0), (1.0, float(image_size) ** 2))

    @classmethod
    def shared(cls, n_components: int, lower: float, upper: float) -> "ConstraintSpec":
        """Unordered mixture where every component spans the same interval."""
        return cls((lower,) * n_components, (upper,) * n_components, ordered=False)


def constrain_variance(h, lo, hi):
    """Map an unconstrained value to a variance in ``[lo, hi]``."""
    if lo > hi:
        raise ConstraintOrderError(f"lower bound {lo} exceeds upper bound {hi}")
    return lo + (hi - lo) * sigmoid(h)


@dataclass
class MixtureParams:
    """Per-pixel mixture parameters.

    ``mean`` has shape ``(..., 2)`` (u, v); ``alpha_logits`` and ``h`` have
    shape ``(..., M)``.  Weights and variances are derived on access.
    """

    mean: np.ndarray
    alpha_logits: np.ndarray
    h: np.ndarray
    constraint: ConstraintSpec = field(default_factory=lambda: ConstraintSpec.default(256))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.alpha_logits = np.asarray(self.alpha_logits, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        M = self.constraint.n_components
        if self.mean.shape[-1] != 2:
            raise ValueError("mean must end in a 2-vector axis")
        lead = self.mean.shape[:-1]
        for name in ("alpha_logits", "h"):
            arr = getattr(self, name)
            if arr.shape != lead + (M,):
                raise ValueError(f"{name} has shape {arr.shape}, expected {lead + (M,)}")

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.alpha_logits)

    @property
    def log_weights(self) -> np.ndarray:
        return log_softmax(self.alpha_logits)

    @property
    def variances(self) -> np.ndarray:
        lo = np.asarray(self.constraint.lower)
        hi = np.asarray(self.constraint.upper)
        return lo + (hi - lo) * sigmoid(self.h)

    @property
    def log_variances(self) -> np.ndarray:
        return np.log(self.variances)

    @classmethod
    def from_weights(cls, mean, weights, variances, constraint=None):
        """Build params from explicit weights and variances (inverting the maps).

        Without a constraint, every component gets the degenerate interval
        ``[variance, variance]``; this is handy for tests and oracles.
        """
        weights = np.asarray(weights, dtype=float)
        variances = np.asarray(variances, dtype=float)
        mean = np.asarray(mean, dtype=float)
        with np.errstate(divide="ignore"):
            logits = np.log(weights)
        if constraint is None:
            flat = variances.reshape(-1, variances.shape[-1])
            if not np.all(flat == flat[0]):
                raise ValueError("per-pixel variances need an explicit constraint")
            constraint = ConstraintSpec(tuple(flat[0]), tuple(flat[0]), ordered=False)
            h = np.zeros_like(variances)
        else:
            lo = np.asarray(constraint.lower)
            hi = np.asarray(constraint.upper)
            span = np.where(hi > lo, hi - lo, 1.0)
            t = np.clip((variances - lo) / span, 1e-300, 1 - 1e-16)
            h = np.where(hi > lo, np.log(t) - np.log1p(-t), 0.0)
        shape = mean.shape[:-1] + (constraint.n_components,)
        return cls(mean, np.broadcast_to(logits, shape).copy(), np.broadcast_to(h, shape).copy(), constraint)


def _component_log_terms(y, params: MixtureParams):
    """Return (terms, dist, s) with terms[..., m] = log(alpha_m / (2 s2_m)) - sqrt(2/s2_m) * dist."""
    diff = np.asarray(y, dtype=float) - params.mean
    dist = np.abs(diff).sum(axis=-1)
    s = params.log_variances
    terms = params.log_weights - LOG2 - s - SQRT2 * np.exp(-0.5 * s) * dist[..., None]
    return terms, dist, s


def log_density(y, params: MixtureParams):
    """Log of the mixture density at ``y`` (broadcast over leading axes)."""
    terms, _, _ = _component_log_terms(y, params)
    return logsumexp(terms, axis=-1)


def nll_loss(params: MixtureParams, gt_flow, valid=None):
    """Mean negative log-likelihood over valid pixels, with analytic gradients.

    Returns ``(loss, grads)`` where ``grads`` holds the derivatives with
    respect to ``mean``, ``alpha_logits`` and ``h``.  The derivative of
    ``|x|`` at 0 is taken as 0.  Gradients for fixed components are zero.
    """
    gt_flow = np.asarray(gt_flow, dtype=float)
    if gt_flow.shape != params.mean.shape:
        raise ValueError(f"flow shape {gt_flow.shape} does not match params {params.mean.shape}")
    lead = gt_flow.shape[:-1]
    if valid is None:
        valid = np.ones(lead, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != lead:
        raise ValueError(f"mask shape {valid.shape} does not match flow extent {lead}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyLossError("no valid pixels")

    lo = np.asarray(params.constraint.lower)
    hi = np.asarray(params.constraint.upper)
    sig = sigmoid(params.h)
    var = lo + (hi - lo) * sig
    s = np.log(var)
    log_w = log_softmax(params.alpha_logits)
    diff = gt_flow - params.mean
    dist = np.abs(diff).sum(axis=-1)
    inv_sd = np.exp(-0.5 * s)
    terms = log_w - LOG2 - s - SQRT2 * inv_sd * dist[..., None]
    log_p = logsumexp(terms, axis=-1)

    scale = valid / n_valid
    loss = -float((log_p * valid).sum() / n_valid)

    # responsibilities r_m = softmax over components of terms
    resp = np.exp(terms - log_p[..., None])
    w = np.exp(log_w)
    g_logits = (w - resp) * scale[..., None]
    g_s = resp * (1.0 - (SQRT2 / 2.0) * inv_sd * dist[..., None]) * scale[..., None]
    g_h = g_s * (hi - lo) * sig * (1.0 - sig) / var
    g_dist = (resp * SQRT2 * inv_sd).sum(axis=-1) * scale
    g_mean = -np.sign(diff) * g_dist[..., None]
    return loss, {"mean": g_mean, "alpha_logits": g_logits, "h": g_h}


def confidence_pr(params: MixtureParams, R: float = 1.0):
    """Probability that the true flow lies in the inf-norm ball of radius R around the mean."""
    if not R > 0:
        raise ValueError(f"radius must be positive, got {R}")
    sd = np.sqrt(params.variances)
    return (params.weights * (-np.expm1(-SQRT2 * R / sd)) ** 2).sum(axis=-1)


def mixture_variance(params: MixtureParams):
    """Variance of the mixture, ``sum_m alpha_m s2_m``."""
    return (params.weights * params.variances).sum(axis=-1)


def l1_loss(pred, gt_flow, valid=None):
    """Mean ``|y - mu|_1`` over valid pixels; the non-probabilistic baseline objective."""
    pred = np.asarray(pred, dtype=float)
    gt_flow = np.asarray(gt_flow, dtype=float)
    lead = gt_flow.shape[:-1]
    valid = np.ones(lead, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyLossError("no valid pixels")
    diff = pred - gt_flow
    loss = float((np.abs(diff).sum(axis=-1) * valid).sum() / n_valid)
    return loss, np.sign(diff) * (valid / n_valid)[..., None]


def fixed_params(mean, variances: Sequence[float], weights: Sequence[float]):
    """Spatially constant mixture with explicit weights and variances."""
    mean = np.asarray(mean, dtype=float)
    lead = mean.shape[:-1]
    w = np.broadcast_to(np.asarray(weights, dtype=float), lead + (len(weights),))
    v = np.broadcast_to(np.asarray(variances, dtype=float), lead + (len(variances),))
    return MixtureParams.from_weights(mean, w, v)

"""Adam with decoupled weight decay and the training loop for :class:`PyramidNet`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .network import PyramidNet, loss_and_grads, multiscale_loss


class DivergenceError(FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, iteration, batch_indices):
        super().__init__(f"non-finite loss at iteration {iteration} (batch samples {list(batch_indices)})")
        self.iteration = iteration
        self.batch_indices = list(batch_indices)


@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    lr_steps: tuple = ()  # iterations after which the rate is halved
    weight_decay: float = 4e-4
    gammas: tuple = (0.32, 0.08)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_mask: bool = False

    def __post_init__(self):
        self.gammas = tuple(float(g) for g in self.gammas)
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if not any(g > 0 for g in self.gammas):
            raise ValueError("at least one level weight must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch size >= 1")

    def lr_at(self, it: int) -> float:
        return self.lr * 0.5 ** sum(it >= s for s in self.lr_steps)


class AdamW:
    """Adam on a list of ``(name, array)`` pairs, updated in place.

    Weight decay is decoupled: after the adaptive step each array is scaled
    by ``1 - lr * weight_decay``.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(a) for n, a in self.params}
        self.v = {n: np.zeros_like(a) for n, a in self.params}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        g = dict(grads)
        for name, a in self.params:
            gr = g[name].astype(a.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            a -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(a.dtype, copy=False)
            if self.weight_decay:
                a *= a.dtype.type(1.0 - lr * self.weight_decay)


@dataclass
class Dataset:
    ref: np.ndarray  # (N, H, W, C)
    query: np.ndarray
    flow: np.ndarray  # (N, H, W, 2)
    valid: np.ndarray  # (N, H, W)

    def __len__(self):
        return len(self.ref)

    def batch(self, idx):
        return self.ref[idx], self.query[idx], self.flow[idx], self.valid[idx]


@dataclass
class TrainResult:
    net: PyramidNet
    losses: List[float] = field(default_factory=list)
    level_losses: List[list] = field(default_factory=list)


def batch_order(n, batch_size, iterations, seed):
    """Deterministic sequence of batch index arrays drawn epoch by epoch."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                perm = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take])
            pos += take
        yield np.asarray(idx)


def train(net: PyramidNet, data: Dataset, cfg: TrainConfig, callback: Optional[Callable] = None) -> TrainResult:
    """Minimize the multi-scale loss with AdamW; deterministic given ``cfg.seed``."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    opt = AdamW(net.named_arrays(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    res = TrainResult(net)
    for it, idx in enumerate(batch_order(len(data), cfg.batch_size, cfg.iterations, cfg.seed)):
        ref, query, flow, valid = data.batch(idx)
        out, grads = loss_and_grads(net, ref, query, flow, valid, cfg.gammas, 0.0, cfg.use_mask)
        if not np.isfinite(out.loss) or not all(np.isfinite(g).all() for _, g in grads):
            raise DivergenceError(it, idx)
        opt.step(grads, cfg.lr_at(it))
        res.losses.append(out.loss)
        res.level_losses.append(out.level_losses)
        if callback is not None:
            callback(it, out)
    return res


def evaluate_loss(net: PyramidNet, data: Dataset, gammas=(0.32, 0.08), batch_size=16, use_mask=False):
    """Sample-weighted mean multi-scale loss over a dataset (no weight term)."""
    total, count = 0.0, 0
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        ref, query, flow, valid = data.batch(idx)
        levels, _ = net.forward(ref, query)
        total += multiscale_loss(levels, flow, valid, gammas, use_mask=use_mask).loss * len(idx)
        count += len(idx)
    return total / count

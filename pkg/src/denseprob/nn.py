"""Minimal NHWC convolution machinery with explicit forward/backward passes.

Arrays are laid out as ``(batch, height, width, channels)``.  Every forward
function returns ``(output, cache)`` and its backward counterpart consumes the
cache together with the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MissingTraceError(RuntimeError):
    """Backward pass requested without a stored forward trace."""


def conv_output_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, (n, ho, wo)


def conv2d_forward(x, w, b, stride=1, pad=0):
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    cols, (n, ho, wo) = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(-1, cout)
    y += b
    return y.reshape(n, ho, wo, cout), (x.shape, w, stride, pad, cols)


def conv2d_backward(dy, cache):
    xshape, w, stride, pad, cols = cache
    kh, kw, cin, cout = w.shape
    n, ho, wo, _ = dy.shape
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    _, h, wd, _ = xshape
    if stride == 1 and kh == kw and pad < kh and cin >= 4:  # the loop wins for narrow inputs
        # full correlation of dy with the flipped kernel, cropped by the padding
        cols_dy, _ = _im2col(dy, kh, kw, 1, kh - 1)
        wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
        full = (cols_dy @ wf).reshape(n, ho + kh - 1, wo + kw - 1, cin)
        return full[:, pad:pad + h, pad:pad + wd], dw, db
    dcols = (dy2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dy.dtype)
    for a in range(kh):
        for c in range(kw):
            dxp[:, a:a + stride * (ho - 1) + 1:stride, c:c + stride * (wo - 1) + 1:stride] += dcols[:, :, :, a, c]
    return dxp[:, pad:pad + h, pad:pad + wd], dw, db


def maxpool_forward(x, kernel=3, stride=2, pad=1):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (kernel * kernel,))
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx, kernel, stride, pad)


def maxpool_backward(dy, cache):
    pshape, idx, kernel, stride, pad = cache
    n, ho, wo, c = dy.shape
    dxp = np.zeros(pshape, dtype=dy.dtype)
    for k in range(kernel * kernel):
        a, b = divmod(k, kernel)
        dxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += dy * (idx == k)
    return dxp[:, pad:pshape[1] - pad, pad:pshape[2] - pad]


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def softmax_forward(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p, p


def softmax_backward(dy, p, axis=-1):
    return p * (dy - (dy * p).sum(axis=axis, keepdims=True))


def l2_normalize_forward(x, eps=1e-6):
    """Scale each feature vector (last axis) to unit length."""
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + x.dtype.type(eps))
    y = x / n
    return y, (y, n)


def l2_normalize_backward(dy, cache):
    y, n = cache
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / n


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation matrix (half-pixel centres, edge clamped) of shape (n_out, n_in)."""
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1 - t)
    np.add.at(A, (rows, i1), t)
    return A


def resize_forward(x, out_h, out_w):
    """Bilinear resize of an NHWC array; linear, so the backward is the transpose."""
    Ah = resize_matrix(x.shape[1], out_h).astype(x.dtype)
    Aw = resize_matrix(x.shape[2], out_w).astype(x.dtype)
    y = np.einsum("ih,nhwc,jw->nijc", Ah, x, Aw, optimize=True)
    return y, (Ah, Aw)


def resize_backward(dy, cache):
    Ah, Aw = cache
    return np.einsum("ih,nijc,jw->nhwc", Ah, dy, Aw, optimize=True)


def area_downsample(x, factor: int):
    """Average non-overlapping ``factor x factor`` blocks of an NHWC (or HWC) array."""
    if factor == 1:
        return x
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise ValueError(f"extent {h}x{w} not divisible by {factor}")
    y = x.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))
    return y[0] if squeeze else y


def bilinear_sample_forward(img, x, y):
    """Sample ``img`` (N,H,W,C) at float pixel coordinates ``x``, ``y`` (N,h,w).

    Out-of-bounds taps contribute zero.  Interpolation uses the nested lerp
    form so that constant neighbourhoods are reproduced exactly.
    """
    n, H, W, C = img.shape
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.arange(n).reshape((n,) + (1,) * (x.ndim - 1))
    flat = img.reshape(-1, C)
    taps = []
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xx = x0 + dx_
        yy = y0 + dy_
        ok = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        lin = (bidx * H + np.clip(yy, 0, H - 1)) * W + np.clip(xx, 0, W - 1)
        v = flat[lin] * ok[..., None]
        taps.append((v, lin, ok))
    (v00, _, _), (v01, _, _), (v10, _, _), (v11, _, _) = taps
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    return out, (img.shape, fx, fy, taps, top, bot)


def bilinear_sample_backward(dout, cache):
    shape, fx, fy, taps, top, bot = cache
    n, H, W, C = shape
    (v00, l00, k00), (v01, l01, k01), (v10, l10, k10), (v11, l11, k11) = taps
    dfx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * dout
    dfy = (bot - top) * dout
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    dimg = np.zeros((n * H * W, C), dtype=dout.dtype)
    for (lin, ok), wt in zip(((l00, k00), (l01, k01), (l10, k10), (l11, k11)), wts):
        contrib = (dout * wt * ok[..., None]).reshape(-1, C)
        np.add.at(dimg, lin.reshape(-1), contrib)
    return dimg.reshape(shape), dfx.sum(axis=-1), dfy.sum(axis=-1)


def pixel_grid(h: int, w: int):
    """Return ``(xs, ys)`` coordinate arrays of shape (h, w)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return xs, ys


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "maxpool"
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    out_channels: int = 0
    activation: Optional[str] = "relu"


def conv(out_channels, kernel=3, stride=1, pad=0, activation="relu"):
    return LayerSpec("conv", kernel, stride, pad, out_channels, activation)


def maxpool(kernel=3, stride=2, pad=1):
    return LayerSpec("maxpool", kernel, stride, pad, 0, None)


class ConvStack:
    """An ordered list of convolution / max-pool layers.

    Weights live in ``self.params`` as a list of ``(W, b)`` pairs (``None``
    for pooling layers).  The last layer is always linear.  Weights start
    uniform in ``[-a, a]`` with ``a = gain / sqrt(fan_in)``; biases start at 0.
    """

    def __init__(self, in_channels: int, layers: Sequence[LayerSpec], rng=None, dtype=np.float64, gain=1.0):
        layers = list(layers)
        if not layers:
            raise ValueError("a ConvStack needs at least one layer")
        if layers[-1].kind == "conv" and layers[-1].activation is not None:
            layers[-1] = LayerSpec("conv", layers[-1].kernel, layers[-1].stride, layers[-1].pad,
                                   layers[-1].out_channels, None)
        self.in_channels = in_channels
        self.layers = layers
        rng = np.random.default_rng() if rng is None else rng
        self.params = []
        c = in_channels
        for spec in layers:
            if spec.kind == "conv":
                fan_in = spec.kernel * spec.kernel * c
                a = gain / np.sqrt(fan_in)
                W = rng.uniform(-a, a, size=(spec.kernel, spec.kernel, c, spec.out_channels)).astype(dtype)
                self.params.append((W, np.zeros(spec.out_channels, dtype=dtype)))
                c = spec.out_channels
            elif spec.kind == "maxpool":
                self.params.append(None)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        self.out_channels = c

    def output_extent(self, h: int, w: int):
        for spec in self.layers:
            h = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
            w = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        return h, w

    def forward(self, x):
        """Return ``(output, trace)``; ``trace["acts"][i]`` is the output of layer i."""
        caches, acts = [], []
        for spec, p in zip(self.layers, self.params):
            if spec.kind == "conv":
                x, cc = conv2d_forward(x, p[0], p[1], spec.stride, spec.pad)
                mask = None
                if spec.activation == "relu":
                    x, mask = relu_forward(x)
                caches.append((cc, mask))
            else:
                x, cc = maxpool_forward(x, spec.kernel, spec.stride, spec.pad)
                caches.append((cc, None))
            acts.append(x)
        return x, {"caches": caches, "acts": acts}

    def backward(self, trace, dy, extra=None):
        """Backpropagate ``dy`` through the stack.

        ``extra`` maps a layer index to an additional gradient arriving at that
        layer's output (used when intermediate activations feed other heads).
        Returns ``(dx, grads)`` with ``grads`` aligned to ``self.params``.
        """
        if trace is None:
            raise MissingTraceError("backward requires the trace returned by forward")
        extra = extra or {}
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            if i in extra:
                dy = dy + extra[i]
            spec = self.layers[i]
            cc, mask = trace["caches"][i]
            if spec.kind == "conv":
                if mask is not None:
                    dy = relu_backward(dy, mask)
                dy, dW, db = conv2d_backward(dy, cc)
                grads[i] = (dW, db)
            else:
                dy = maxpool_backward(dy, cc)
        return dy, grads

    # flat parameter access for optimisers and checkpoints
    def named_arrays(self, prefix: str):
        out = []
        for i, p in enumerate(self.params):
            if p is not None:
                out.append((f"{prefix}.{i}.weight", p[0]))
                out.append((f"{prefix}.{i}.bias", p[1]))
        return out

    @staticmethod
    def named_grads(grads, prefix: str):
        out = []
        for i, g in enumerate(grads):
            if g is not None:
                out.append((f"{prefix}.{i}.weight", g[0]))
                out.append((f"{prefix}.{i}.bias", g[1]))
        return out


def conv_backward(stack: ConvStack, trace, upstream, extra=None):
    """Gradients of a stack's output with respect to its weights and input."""
    return stack.backward(trace, upstream, extra)

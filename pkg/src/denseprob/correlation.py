"""Feature correlation volumes and the uncertainty decoder built on them.

Local volumes have shape ``(N, h, w, d, d)`` with ``d = 2r + 1`` and
``C[n, i, j, k + r, l + r] = <f_ref[n, i, j], f_query[n, i + k, j + l]>``
(zero when ``(i + k, j + l)`` falls outside the query).  Global volumes have
shape ``(N, h, w, h, w)`` and compare every reference position with every
query position.
"""

from __future__ import annotations

import numpy as np

from .nn import ConvStack, conv, maxpool


class ExtentMismatchError(ValueError):
    pass


def _check_pair(ref, query):
    if ref.shape != query.shape:
        raise ExtentMismatchError(f"reference {ref.shape} and query {query.shape} differ")


def local_correlation(ref, query, r: int):
    """Dense scalar products over a ``(2r+1) x (2r+1)`` displacement window."""
    _check_pair(ref, query)
    if r < 0:
        raise ValueError("radius must be nonnegative")
    n, h, w, c = ref.shape
    d = 2 * r + 1
    qp = np.pad(query, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.empty((n, h, w, d, d), dtype=np.result_type(ref, query))
    for k in range(d):
        for l in range(d):
            out[..., k, l] = np.einsum("nijc,nijc->nij", ref, qp[:, k:k + h, l:l + w])
    return out


def local_correlation_backward(dC, ref, query, r: int):
    n, h, w, c = ref.shape
    d = 2 * r + 1
    qp = np.pad(query, ((0, 0), (r, r), (r, r), (0, 0)))
    dref = np.zeros_like(ref, dtype=dC.dtype)
    dqp = np.zeros(qp.shape, dtype=dC.dtype)
    for k in range(d):
        for l in range(d):
            g = dC[..., k, l, None]
            dref += g * qp[:, k:k + h, l:l + w]
            dqp[:, k:k + h, l:l + w] += g * ref
    return dref, dqp[:, r:r + h, r:r + w]


def global_correlation(ref, query):
    """Scalar products between all reference and all query positions."""
    _check_pair(ref, query)
    return np.einsum("nijc,nklc->nijkl", ref, query, optimize=True)


def global_correlation_backward(dC, ref, query):
    dref = np.einsum("nijkl,nklc->nijc", dC, query, optimize=True)
    dquery = np.einsum("nijkl,nijc->nklc", dC, ref, optimize=True)
    return dref, dquery


def local_uncertainty_layers(n_out: int, widths=(32, 32, 16)):
    """Four valid 3x3 convolutions taking a 9x9 slice to 1x1 (9 -> 7 -> 5 -> 3 -> 1)."""
    return [conv(widths[0]), conv(widths[1]), conv(widths[2]), conv(n_out, activation=None)]


def global_uncertainty_layers(size: int, n_out: int, widths=(32, 32, 16)):
    """Layers reducing a ``size x size`` global slice to 1x1.

    For ``size == 16`` this is conv3 (14) -> maxpool3/s2 (7) -> conv3 (5)
    -> conv3 (3) -> conv3 (1).  Other sizes use valid 3x3 convolutions until
    at most 3 remains, then a final convolution spanning what is left.
    """
    if size == 16:
        return [conv(widths[0]), maxpool(), conv(widths[1]), conv(widths[2]), conv(n_out, activation=None)]
    layers = []
    s = size
    i = 0
    while s > 3:
        layers.append(conv(widths[min(i, len(widths) - 1)]))
        s -= 2
        i += 1
    layers.append(conv(n_out, kernel=s, activation=None))
    return layers


def correlation_uncertainty(corr, stack: ConvStack):
    """Apply ``stack`` to every 2D correlation slice independently.

    ``corr`` has shape ``(N, h, w, a, b)``; the spatial positions are moved
    into the batch axis so each slice is processed as a one-channel image.
    Returns ``(u, trace)`` with ``u`` of shape ``(N, h, w, n)``.
    """
    n, h, w, a, b = corr.shape
    oh, ow = stack.output_extent(a, b)
    if (oh, ow) != (1, 1):
        raise ExtentMismatchError(f"stack reduces {a}x{b} slices to {oh}x{ow}, expected 1x1")
    if stack.in_channels != 1:
        raise ExtentMismatchError("correlation slices have a single channel")
    x = corr.reshape(n * h * w, a, b, 1)
    u, trace = stack.forward(x)
    return u.reshape(n, h, w, -1), trace


def correlation_uncertainty_backward(du, stack: ConvStack, trace, corr_shape):
    n, h, w, a, b = corr_shape
    dx, grads = stack.backward(trace, du.reshape(n * h * w, 1, 1, -1))
    return dx.reshape(corr_shape), grads


def predictor_layers(n_components: int, widths=(32, 16)):
    """Three 3x3 convolutions (stride 1, pad 1); the last emits ``2M`` linear channels."""
    return [conv(widths[0], pad=1), conv(widths[1], pad=1), conv(2 * n_components, pad=1, activation=None)]


def uncertainty_predictor(u, flow_features, stack: ConvStack, prev=None):
    """Predict ``(alpha_logits, h)`` from the uncertainty representation and flow features.

    ``prev`` is an optional field of previous-level parameters already
    resampled to the current extent.  Returns ``(alpha_logits, h, trace)``.
    """
    parts = [u]
    if flow_features is not None:
        parts.append(flow_features)
    if prev is not None:
        parts.append(prev)
    lead = u.shape[:3]
    for p in parts[1:]:
        if p.shape[:3] != lead:
            raise ExtentMismatchError(f"extent {p.shape[:3]} does not match {lead}")
    x = np.concatenate(parts, axis=-1)
    out, trace = stack.forward(x)
    M = out.shape[-1] // 2
    trace["split"] = [p.shape[-1] for p in parts]
    return out[..., :M], out[..., M:], trace


def uncertainty_predictor_backward(d_logits, d_h, stack: ConvStack, trace):
    dx, grads = stack.backward(trace, np.concatenate([d_logits, d_h], axis=-1))
    pieces = np.split(dx, np.cumsum(trace["split"])[:-1], axis=-1)
    return pieces, grads

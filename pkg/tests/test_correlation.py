import numpy as np
import pytest

from denseprob.correlation import (
    ExtentMismatchError,
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
from denseprob.gradcheck import numerical_grad, relative_error
from denseprob.nn import ConvStack


def loop_local(ref, query, r):
    n, h, w, c = ref.shape
    d = 2 * r + 1
    out = np.zeros((n, h, w, d, d))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(-r, r + 1):
                    for l in range(-r, r + 1):
                        qi, qj = i + k, j + l
                        if 0 <= qi < h and 0 <= qj < w:
                            s = 0.0
                            for ch in range(c):
                                s += ref[b, i, j, ch] * query[b, qi, qj, ch]
                            out[b, i, j, k + r, l + r] = s
    return out


def loop_global(ref, query):
    n, h, w, c = ref.shape
    out = np.zeros((n, h, w, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(h):
                    for l in range(w):
                        s = 0.0
                        for ch in range(c):
                            s += ref[b, i, j, ch] * query[b, k, l, ch]
                        out[b, i, j, k, l] = s
    return out


def integer_features(rng, shape):
    # small integers keep every product and partial sum exact in float64
    return rng.integers(-8, 9, size=shape).astype(float)


class TestLocalCorrelation:
    def test_self_similarity(self):
        f = np.full((1, 5, 5, 4), 0.5)
        C = local_correlation(f, f, 2)
        assert np.allclose(C[0, 1:-1, 1:-1, 2, 2], 1.0)

    def test_random_matches_loop(self):
        rng = np.random.default_rng(0)
        ref, query = rng.normal(size=(2, 1, 6, 6, 4))
        C = local_correlation(ref, query, 2)
        assert np.abs(C - loop_local(ref, query, 2)).max() < 1e-12

    @pytest.mark.parametrize("h,c,r", [(8, 8, 3), (5, 3, 2), (8, 8, 4)])
    def test_bit_exact_on_integer_features(self, h, c, r):
        rng = np.random.default_rng(h * c + r)
        ref = integer_features(rng, (2, h, h, c))
        query = integer_features(rng, (2, h, h, c))
        assert np.array_equal(local_correlation(ref, query, r), loop_local(ref, query, r))

    def test_planted_shift(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(1, 8, 9, 16))
        base /= np.linalg.norm(base, axis=-1, keepdims=True)
        ref = base[:, :, :8]
        # query[i, j + 1] == ref[i, j], so the best match sits one column right
        query = np.concatenate([ref[:, :, :1], ref[:, :, :-1]], axis=2)
        C = local_correlation(ref, query, 2)
        inner = C[0, 2:-2, 2:-3].reshape(4, 3, -1)
        k, l = np.unravel_index(inner.argmax(-1), (5, 5))
        assert np.all(k == 2) and np.all(l == 3)

    def test_extent_mismatch(self):
        with pytest.raises(ExtentMismatchError):
            local_correlation(np.zeros((1, 4, 4, 2)), np.zeros((1, 4, 5, 2)), 1)

    def test_backward(self):
        rng = np.random.default_rng(2)
        ref, query = rng.normal(size=(2, 2, 5, 4, 3))
        up = rng.normal(size=(2, 5, 4, 5, 5))
        loss = lambda: float((local_correlation(ref, query, 2) * up).sum())
        dref, dq = local_correlation_backward(up, ref, query, 2)
        assert relative_error(dref, numerical_grad(loss, ref)) < 1e-6
        assert relative_error(dq, numerical_grad(loss, query)) < 1e-6


class TestGlobalCorrelation:
    def test_one_hot_identity(self):
        f = np.eye(9).reshape(1, 3, 3, 9)
        C = global_correlation(f, f).reshape(9, 9)
        assert np.array_equal(C, np.eye(9))

    def test_random_matches_loop(self):
        rng = np.random.default_rng(3)
        ref, query = rng.normal(size=(2, 1, 4, 4, 3))
        assert np.abs(global_correlation(ref, query) - loop_global(ref, query)).max() < 1e-12

    def test_bit_exact_on_integer_features(self):
        rng = np.random.default_rng(4)
        ref = integer_features(rng, (1, 8, 8, 8))
        query = integer_features(rng, (1, 8, 8, 8))
        assert np.array_equal(global_correlation(ref, query), loop_global(ref, query))

    def test_zero_query(self):
        rng = np.random.default_rng(5)
        assert not global_correlation(rng.normal(size=(1, 4, 4, 3)), np.zeros((1, 4, 4, 3))).any()

    def test_backward(self):
        rng = np.random.default_rng(6)
        ref, query = rng.normal(size=(2, 2, 3, 4, 2))
        up = rng.normal(size=(2, 3, 4, 3, 4))
        loss = lambda: float((global_correlation(ref, query) * up).sum())
        dref, dq = global_correlation_backward(up, ref, query)
        assert relative_error(dref, numerical_grad(loss, ref)) < 1e-6
        assert relative_error(dq, numerical_grad(loss, query)) < 1e-6


def direct_slice_stack(stack, sl):
    """Reference evaluation of a conv stack on one 2D slice with explicit loops."""
    x = sl[:, :, None]
    for spec, p in zip(stack.layers, stack.params):
        H, W, C = x.shape
        if spec.kind == "maxpool":
            xp = np.pad(x, ((spec.pad, spec.pad), (spec.pad, spec.pad), (0, 0)), constant_values=-np.inf)
            ho = (H + 2 * spec.pad - spec.kernel) // spec.stride + 1
            wo = (W + 2 * spec.pad - spec.kernel) // spec.stride + 1
            y = np.zeros((ho, wo, C))
            for i in range(ho):
                for j in range(wo):
                    y[i, j] = xp[i * spec.stride:i * spec.stride + spec.kernel,
                                 j * spec.stride:j * spec.stride + spec.kernel].max(axis=(0, 1))
            x = y
            continue
        Wt, b = p
        k = spec.kernel
        ho, wo = H - k + 1, W - k + 1
        y = np.zeros((ho, wo, Wt.shape[-1]))
        for i in range(ho):
            for j in range(wo):
                y[i, j] = np.tensordot(x[i:i + k, j:j + k], Wt, axes=3) + b
        x = np.maximum(y, 0) if spec.activation == "relu" else y
    return x[0, 0]


class TestCorrelationUncertainty:
    def make_stack(self, seed=0, n=8):
        return ConvStack(1, local_uncertainty_layers(n), rng=np.random.default_rng(seed))

    def test_table_schedule_local(self):
        stack = self.make_stack()
        C = np.random.default_rng(1).normal(size=(1, 3, 3, 9, 9))
        u, trace = correlation_uncertainty(C, stack)
        assert u.shape == (1, 3, 3, 8)
        assert [a.shape[1] for a in trace["acts"]] == [7, 5, 3, 1]
        assert [a.shape[-1] for a in trace["acts"]] == [32, 32, 16, 8]

    def test_table_schedule_global(self):
        stack = ConvStack(1, global_uncertainty_layers(16, 8), rng=np.random.default_rng(0))
        C = np.random.default_rng(1).normal(size=(1, 2, 2, 16, 16))
        u, trace = correlation_uncertainty(C, stack)
        assert u.shape == (1, 2, 2, 8)
        assert [a.shape[1] for a in trace["acts"]] == [14, 7, 5, 3, 1]

    def test_generic_global_schedule(self):
        stack = ConvStack(1, global_uncertainty_layers(8, 4, widths=(6, 6, 6)), rng=np.random.default_rng(0))
        assert stack.output_extent(8, 8) == (1, 1)

    def test_identical_slices_identical_output(self):
        stack = self.make_stack()
        sl = np.random.default_rng(2).normal(size=(9, 9))
        C = np.broadcast_to(sl, (1, 2, 3, 9, 9)).copy()
        u, _ = correlation_uncertainty(C, stack)
        assert np.array_equal(u[0, 0, 0], u[0, 1, 2])

    def test_matches_direct_convolution(self):
        stack = self.make_stack(seed=3)
        C = np.random.default_rng(4).normal(size=(1, 2, 2, 9, 9))
        u, _ = correlation_uncertainty(C, stack)
        for i in range(2):
            for j in range(2):
                assert np.abs(u[0, i, j] - direct_slice_stack(stack, C[0, i, j])).max() < 1e-10

    def test_global_matches_direct_convolution(self):
        stack = ConvStack(1, global_uncertainty_layers(16, 4, widths=(4, 4, 4)), rng=np.random.default_rng(5))
        C = np.random.default_rng(6).normal(size=(1, 1, 2, 16, 16))
        u, _ = correlation_uncertainty(C, stack)
        for j in range(2):
            assert np.abs(u[0, 0, j] - direct_slice_stack(stack, C[0, 0, j])).max() < 1e-10

    def test_locality_and_permutation_equivariance(self):
        stack = self.make_stack(seed=7)
        rng = np.random.default_rng(8)
        C = rng.normal(size=(1, 3, 3, 9, 9))
        u, _ = correlation_uncertainty(C, stack)
        C2 = C.copy()
        C2[0, 2, 2] += rng.normal(size=(9, 9))
        u2, _ = correlation_uncertainty(C2, stack)
        assert np.array_equal(u[0, :2], u2[0, :2]) and np.array_equal(u[0, 2, :2], u2[0, 2, :2])
        perm = rng.permutation(9)
        Cp = C.reshape(1, 9, 9, 9)[:, perm].reshape(C.shape)
        up, _ = correlation_uncertainty(Cp, stack)
        assert np.allclose(up.reshape(1, 9, -1), u.reshape(1, 9, -1)[:, perm], rtol=0, atol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(ExtentMismatchError):
            correlation_uncertainty(np.zeros((1, 2, 2, 7, 7)), self.make_stack())

    def test_backward(self):
        stack = ConvStack(1, local_uncertainty_layers(3, widths=(4, 4, 4)), rng=np.random.default_rng(9))
        rng = np.random.default_rng(10)
        C = rng.normal(size=(1, 2, 2, 9, 9))
        u, trace = correlation_uncertainty(C, stack)
        up = rng.normal(size=u.shape)
        dC, grads = correlation_uncertainty_backward(up, stack, trace, C.shape)
        loss = lambda: float((correlation_uncertainty(C, stack)[0] * up).sum())
        assert relative_error(dC, numerical_grad(loss, C)) < 1e-4
        assert relative_error(grads[1][0], numerical_grad(loss, stack.params[1][0])) < 1e-4


class TestUncertaintyPredictor:
    def test_channel_schedule(self):
        stack = ConvStack(10, predictor_layers(2), rng=np.random.default_rng(0))
        assert [l.out_channels for l in stack.layers] == [32, 16, 4]
        assert stack.layers[-1].activation is None

    def test_zero_weights(self):
        stack = ConvStack(6, predictor_layers(2), rng=np.random.default_rng(0))
        for W, b in stack.params:
            W[...] = 0
            b[...] = 0
        rng = np.random.default_rng(1)
        logits, h, _ = uncertainty_predictor(rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(1, 4, 4, 2)), stack)
        assert not logits.any() and not h.any()

    def test_backward(self):
        rng = np.random.default_rng(2)
        stack = ConvStack(9, predictor_layers(2, widths=(6, 5)), rng=rng)
        u = rng.normal(size=(2, 4, 5, 4))
        flow = rng.normal(size=(2, 4, 5, 2))
        prev = rng.normal(size=(2, 4, 5, 3))
        logits, h, trace = uncertainty_predictor(u, flow, stack, prev)
        gl, gh = rng.normal(size=logits.shape), rng.normal(size=h.shape)

        def loss():
            a, b, _ = uncertainty_predictor(u, flow, stack, prev)
            return float((a * gl).sum() + (b * gh).sum())

        (du, dflow, dprev), grads = uncertainty_predictor_backward(gl, gh, stack, trace)
        assert relative_error(du, numerical_grad(loss, u)) < 1e-4
        assert relative_error(dflow, numerical_grad(loss, flow)) < 1e-4
        assert relative_error(dprev, numerical_grad(loss, prev)) < 1e-4
        assert relative_error(grads[0][0], numerical_grad(loss, stack.params[0][0], step=1e-6)) < 1e-5

    def test_flow_path_zeroed_makes_output_flow_invariant(self):
        rng = np.random.default_rng(3)
        stack = ConvStack(6, predictor_layers(2), rng=rng)
        stack.params[0][0][:, :, 4:] = 0  # weights reading the two flow channels
        u = rng.normal(size=(1, 4, 4, 4))
        flow = rng.normal(size=(1, 4, 4, 2))
        a1, h1, _ = uncertainty_predictor(u, flow, stack)
        a2, h2, _ = uncertainty_predictor(u, flow + np.array([3.0, -7.0]), stack)
        assert np.array_equal(a1, a2) and np.array_equal(h1, h2)

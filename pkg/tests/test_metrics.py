import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from denseprob.metrics import (
    GridMismatchError,
    NoValidPixelsError,
    SparsificationCurve,
    aepe,
    ause,
    ause_per_image,
    average_curves,
    f1_outlier_rate,
    map_at,
    oracle_curve,
    pck,
    removal_grid,
    rotation_error,
    sparsification,
    translation_error,
)


# ----------------------------------------------------------- loop oracles
def loop_errors(pred, gt, valid):
    out = []
    for idx in np.ndindex(valid.shape):
        if valid[idx]:
            du = float(pred[idx][0]) - float(gt[idx][0])
            dv = float(pred[idx][1]) - float(gt[idx][1])
            out.append(math.sqrt(du * du + dv * dv))
    return out


def loop_aepe(pred, gt, valid):
    e = loop_errors(pred, gt, valid)
    return math.fsum(e) / len(e)


def loop_pck(pred, gt, valid, T):
    e = loop_errors(pred, gt, valid)
    return 100.0 * sum(1 for x in e if x <= T) / len(e)


def loop_f1(pred, gt, valid):
    n = out = 0
    for idx in np.ndindex(valid.shape):
        if not valid[idx]:
            continue
        n += 1
        e = math.hypot(pred[idx][0] - gt[idx][0], pred[idx][1] - gt[idx][1])
        m = math.hypot(gt[idx][0], gt[idx][1])
        if e > 3.0 and (m == 0 or e / m > 0.05):
            out += 1
    return 100.0 * out / n


def loop_curve(errors, conf, steps=50):
    n = len(errors)
    order = sorted(range(n), key=lambda i: (conf[i], i))
    vals = []
    for k in range(steps):
        removed = (k * n) // steps
        keep = [errors[i] for i in order[removed:]]
        vals.append(math.fsum(keep) / len(keep))
    return [v / vals[0] for v in vals]


def loop_ause(errors, conf, steps=50):
    s = loop_curve(errors, conf, steps)
    o = loop_curve(errors, [-e for e in errors], steps)
    area = 0.0
    for k in range(steps - 1):
        area += 0.5 * ((s[k] - o[k]) + (s[k + 1] - o[k + 1])) / steps
    return area


def random_instance(rng, shape=(2, 9, 11)):
    gt = rng.normal(scale=6, size=shape + (2,))
    pred = gt + rng.standard_t(2, size=shape + (2,))
    valid = rng.uniform(size=shape) < 0.8
    valid.flat[0] = True
    return pred, gt, valid


class TestFlowMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).normal(size=(5, 5, 2))
        assert aepe(gt, gt) == 0.0
        assert pck(gt, gt, 0.5) == 100.0

    def test_three_four_five(self):
        gt = np.zeros((4, 6, 2))
        pred = gt + np.array([3.0, 4.0])
        assert aepe(pred, gt) == 5.0

    def test_pck_half(self):
        gt = np.zeros((2, 4, 2))
        pred = gt.copy()
        pred[1] = [10.0, 0.0]
        assert pck(pred, gt, 5.0) == 50.0

    def test_pck_needs_positive_threshold(self):
        with pytest.raises(ValueError):
            pck(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 0.0)

    def test_no_valid_pixels(self):
        z = np.zeros((3, 3, 2))
        for f in (lambda: aepe(z, z, np.zeros((3, 3), bool)), lambda: f1_outlier_rate(z, z, np.zeros((3, 3), bool))):
            with pytest.raises(NoValidPixelsError):
                f()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aepe(np.zeros((3, 3, 2)), np.zeros((3, 4, 2)))

    def test_match_loop_oracles(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred, gt, valid = random_instance(rng)
            assert abs(aepe(pred, gt, valid) - loop_aepe(pred, gt, valid)) < 1e-12
            T = float(rng.uniform(0.5, 6))
            assert abs(pck(pred, gt, T, valid) - loop_pck(pred, gt, valid, T)) < 1e-12
            assert abs(f1_outlier_rate(pred, gt, valid) - loop_f1(pred, gt, valid)) < 1e-12

    def test_pck_per_image_mode(self):
        gt = np.zeros((2, 2, 2, 2))
        pred = gt.copy()
        pred[0, 0, 0] = [9.0, 0.0]  # image 0: 75 %, image 1: 100 %
        valid = np.ones((2, 2, 2), bool)
        valid[1, 1] = False
        assert pck(pred, gt, 1.0, valid, per_image=True) == pytest.approx(87.5)
        assert pck(pred, gt, 1.0, valid) == pytest.approx(100.0 * 5 / 6)


class TestF1:
    def _one(self, err, mag):
        gt = np.array([[[mag, 0.0]]])
        pred = gt + np.array([0.0, err])
        return f1_outlier_rate(pred, gt)

    def test_outlier(self):
        assert self._one(4.0, 10.0) == 100.0

    def test_relative_gate(self):
        assert self._one(4.0, 100.0) == 0.0

    def test_absolute_gate(self):
        for mag in (0.0, 1.0, 1000.0):
            assert self._one(2.0, mag) == 0.0

    def test_zero_magnitude_counts_when_absolute_holds(self):
        assert self._one(4.0, 0.0) == 100.0


class TestSparsification:
    def test_grid(self):
        g = removal_grid()
        assert len(g) == 50 and g[0] == 0.0 and g[-1] == pytest.approx(0.98)
        assert np.all(np.diff(g) > 0)

    def test_perfect_confidence_is_oracle(self):
        e = np.random.default_rng(2).exponential(size=500)
        s = sparsification(e, -e)
        o = oracle_curve(e)
        np.testing.assert_array_equal(s.values, o.values)
        assert ause(s, o) == 0.0

    def test_hand_example(self):
        # confidence ranks the pixels in reverse: the worst pixel is the most confident
        errors = np.array([1.0, 2.0, 3.0, 4.0])
        conf = np.array([1.0, 2.0, 3.0, 4.0])
        s = sparsification(errors, conf)
        o = oracle_curve(errors)
        removed = [(k * 4) // 50 for k in range(50)]
        kept_s = {0: 2.5, 1: 3.0, 2: 3.5, 3: 4.0}
        kept_o = {0: 2.5, 1: 2.0, 2: 1.5, 3: 1.0}
        np.testing.assert_allclose(s.values, [kept_s[r] / 2.5 for r in removed], rtol=0, atol=1e-15)
        np.testing.assert_allclose(o.values, [kept_o[r] / 2.5 for r in removed], rtol=0, atol=1e-15)
        # 12 steps with gap 0.4, 13 with 0.8, 12 with 1.2; trapezoid drops half of the last gap
        assert ause(s, o) == pytest.approx(0.02 * (12 * 0.4 + 13 * 0.8 + 12 * 1.2 - 0.6), abs=1e-12)
        assert ause(s, o) == pytest.approx(0.58, abs=1e-12)

    def test_constant_confidence_flat_on_average(self):
        rng = np.random.default_rng(3)
        e = rng.exponential(size=400)
        curves = [sparsification(e, np.ones_like(e), rng=np.random.default_rng(s)).values for s in range(300)]
        mean = np.mean(curves, axis=0)
        assert np.max(np.abs(mean - 1.0)) < 0.08

    def test_truncates_when_remainder_empties(self):
        s = sparsification(np.array([1.0, 2.0]), np.array([0.0, 1.0]), steps=4)
        assert len(s.values) == 4  # removals 0, 0, 1, 1
        s = sparsification(np.array([1.0]), np.array([0.0]), steps=2)
        assert len(s.values) == 2

    def test_pck_metric_uses_complement(self):
        e = np.array([0.5, 2.0, 3.0, 0.1])
        s = sparsification(e, -e, metric="pck", T=1.0, normalize=False)
        assert s.values[0] == pytest.approx(0.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(5, 200))
            e = rng.exponential(size=n) + 1e-3
            c = rng.normal(size=n)
            assert abs(ause(sparsification(e, c), oracle_curve(e)) - loop_ause(list(e), list(c))) < 1e-12

    def test_grid_mismatch(self):
        a = SparsificationCurve(np.array([0.0, 0.5]), np.array([1.0, 1.0]))
        b = SparsificationCurve(np.array([0.0, 0.25]), np.array([1.0, 1.0]))
        with pytest.raises(GridMismatchError):
            ause(a, b)
        with pytest.raises(GridMismatchError):
            average_curves([a, b])

    def test_constant_gap_rectangle(self):
        x = np.linspace(0, 1, 11)
        a = SparsificationCurve(x, np.full(11, 0.3))
        b = SparsificationCurve(x, np.full(11, 0.2))
        assert ause(a, b) == pytest.approx(0.1)

    def test_per_image_average_before_integration(self):
        rng = np.random.default_rng(5)
        errs = [rng.exponential(size=n) for n in (60, 200, 90)]
        confs = [rng.normal(size=len(e)) for e in errs]
        val, sc, oc = ause_per_image(errs, confs)
        mean_s = np.mean([sparsification(e, c).values for e, c in zip(errs, confs)], axis=0)
        mean_o = np.mean([oracle_curve(e).values for e in errs], axis=0)
        np.testing.assert_allclose(sc.values, mean_s)
        assert val == pytest.approx(ause(SparsificationCurve(sc.fractions, mean_s),
                                         SparsificationCurve(sc.fractions, mean_o)))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=120), st.integers(0, 2**31 - 1))
    def test_oracle_curve_non_increasing_and_ause_nonnegative(self, errs, seed):
        e = np.asarray(errs)
        o = oracle_curve(e)
        assert np.all(np.diff(o.values) <= 1e-12)
        c = np.random.default_rng(seed).normal(size=len(e))
        assert ause(sparsification(e, c), o) >= -1e-12


class TestPose:
    def test_identity_rotation(self):
        assert rotation_error(np.eye(3), np.eye(3)) == 0.0

    def test_quarter_turn(self):
        Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
        assert rotation_error(np.eye(3), Rz) == pytest.approx(90.0)

    def test_antipodal_translation(self):
        t = np.array([0.3, -1.0, 2.0])
        assert translation_error(t, -t) == pytest.approx(180.0)
        assert translation_error(t, 2 * t) == pytest.approx(0.0, abs=1e-6)

    def test_zero_translation(self):
        with pytest.raises(ValueError):
            translation_error(np.zeros(3), np.ones(3))

    def test_map_all_zero(self):
        assert map_at(np.zeros(7)) == {5: 1.0, 10: 1.0, 20: 1.0}

    def test_map_enumeration(self):
        m = map_at(np.array([3.0, 12.0]), (5, 10))
        assert m[5] == 0.5 and m[10] == 0.5

    def test_map_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            errs = rng.uniform(0, 40, size=int(rng.integers(1, 50)))
            got = map_at(errs)
            for t in (5, 10, 20):
                accs = [sum(1 for e in errs if e < k) / len(errs) for k in range(5, t + 1, 5)]
                assert abs(got[t] - math.fsum(accs) / len(accs)) < 1e-12

    def test_map_empty_thresholds(self):
        with pytest.raises(ValueError):
            map_at(np.zeros(2), ())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rotation_error_in_range_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        q1, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q2, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q1 *= np.sign(np.linalg.det(q1))
        q2 *= np.sign(np.linalg.det(q2))
        a = rotation_error(q1, q2)
        assert 0.0 <= a <= 180.0
        assert a == pytest.approx(rotation_error(q2, q1), abs=1e-6)

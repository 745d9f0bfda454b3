"""Tests for depth regression, uncertainty, and the metric suite."""

import json

import numpy as np
import pytest

from dfvdepth.autodiff import Tensor, backward, softmax, sum_
from dfvdepth.errors import EmptyMaskError, ShapeError
from dfvdepth.regression import (
    MetricRecord,
    aggregate_records,
    evaluate,
    regress_depth,
    regress_frame_id,
    uncertainty,
    write_metric_lines,
)

from oracles import max_rel_err, metrics_loop, numeric_gradient


def prob(traces):
    """[1, N, 1, 1] probability array from an N-vector."""
    return np.asarray(traces, dtype=np.float64)[None, :, None, None]


def random_simplex(rng, n, extra_shape=()):
    raw = rng.random((n,) + extra_shape) + 1e-6
    return raw / raw.sum(axis=0, keepdims=True)


class TestRegressDepth:
    def test_one_hot_returns_focal_distance(self):
        p = prob([0.0, 0.0, 1.0, 0.0])
        depth = regress_depth(p, [0.1, 0.2, 0.4, 0.9])
        assert depth[0, 0, 0] == 0.4

    def test_uniform_is_midpoint(self):
        depth = regress_depth(prob([1 / 3, 1 / 3, 1 / 3]), [0.0, 0.5, 1.0])
        assert depth[0, 0, 0] == pytest.approx(0.5)

    def test_dot_product_example(self):
        depth = regress_depth(prob([0.2, 0.3, 0.5]), [0.1, 0.2, 0.4])
        assert depth[0, 0, 0] == pytest.approx(0.28, abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            regress_depth(prob([0.5, 0.5]), [0.1, 0.2, 0.3])

    def test_bounds_on_random_simplexes(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 11))
            p = random_simplex(rng, n, (4, 4))[None]
            l = np.sort(rng.uniform(0.1, 5.0, n))
            depth = regress_depth(p, l)
            assert depth.min() >= l[0] - 1e-12
            assert depth.max() <= l[-1] + 1e-12

    def test_tensor_path_is_differentiable(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((1, 4, 3, 3))
        l = np.array([0.2, 0.5, 0.8, 1.1])
        lt = Tensor(logits, requires_grad=True)
        depth = regress_depth(softmax(lt, axis=1), l)
        backward(sum_(depth))

        def run(a):
            z = a - a.max(axis=1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=1, keepdims=True)
            return float((p * l[None, :, None, None]).sum(axis=1).sum())

        num = numeric_gradient(run, [logits])
        assert max_rel_err(lt.grad, num[0]) < 1e-4


class TestFrameId:
    def test_one_hot(self):
        assert regress_frame_id(prob([0.0, 0.0, 1.0]))[0, 0, 0] == 3.0

    def test_between_two_frames(self):
        assert regress_frame_id(prob([0.5, 0.5]))[0, 0, 0] == 1.5

    def test_uniform_centers(self):
        got = regress_frame_id(prob([0.2] * 5))[0, 0, 0]
        assert got == pytest.approx(3.0)

    def test_range_invariant(self):
        rng = np.random.default_rng(2)
        p = random_simplex(rng, 7, (5, 5))[None]
        ids = regress_frame_id(p)
        assert ids.min() >= 1.0 - 1e-12 and ids.max() <= 7.0 + 1e-12


class TestUncertainty:
    def test_one_hot_is_zero(self):
        p = prob([0.0, 1.0, 0.0])
        assert uncertainty(p, [0.1, 0.5, 0.9])[0, 0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_two_point(self):
        p = prob([0.5, 0.5])
        phi = uncertainty(p, [0.0, 1.0])
        assert phi[0, 0, 0] == pytest.approx(0.5)

    def test_three_point_arithmetic(self):
        p = prob([0.25, 0.5, 0.25])
        phi = uncertainty(p, [0.0, 0.5, 1.0])
        assert phi[0, 0, 0] == pytest.approx(np.sqrt(0.125), abs=1e-12)

    def test_variance_identity_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(2, 11))
            p = random_simplex(rng, n, (3, 3))[None]
            l = np.sort(rng.uniform(0.05, 8.0, n))
            d = regress_depth(p, l)
            phi = uncertainty(p, l, d)
            alt = (p * l[None, :, None, None] ** 2).sum(axis=1) - d ** 2
            assert np.max(np.abs(phi ** 2 - alt)) < 1e-10

    def test_bound_is_half_span(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            p = random_simplex(rng, n, (4, 4))[None]
            l = np.sort(rng.uniform(0.1, 3.0, n))
            phi = uncertainty(p, l)
            assert phi.max() <= (l[-1] - l[0]) / 2.0 + 1e-12
            assert phi.min() >= 0.0

    def test_scale_equivariance(self):
        rng = np.random.default_rng(5)
        p = random_simplex(rng, 5, (3, 3))[None]
        l = np.sort(rng.uniform(0.2, 2.0, 5))
        c = 3.7
        assert np.allclose(regress_depth(p, c * l), c * regress_depth(p, l))
        assert np.allclose(uncertainty(p, c * l), c * uncertainty(p, l))
        assert np.allclose(regress_frame_id(p), regress_frame_id(p))


class TestEvaluate:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(0.5, 2.0, (12, 12))
        rec = evaluate(gt, gt)
        assert rec.mse == 0.0 and rec.rms == 0.0 and rec.log_rms == 0.0
        assert rec.abs_rel == 0.0 and rec.sqr_rel == 0.0
        assert rec.delta1 == rec.delta2 == rec.delta3 == 100.0

    def test_double_prediction_thresholds(self):
        gt = np.full((8, 8), 1.0)
        rec = evaluate(2.0 * gt, gt)
        assert rec.abs_rel == pytest.approx(1.0)
        # ratio 2 exceeds every 1.25^k threshold (1.25, 1.5625, 1.953125)
        assert rec.delta1 == 0.0 and rec.delta2 == 0.0 and rec.delta3 == 0.0

    def test_constant_plane_has_zero_bumpiness(self):
        gt = np.random.default_rng(7).uniform(0.5, 2.0, (10, 10))
        rec = evaluate(np.full((10, 10), 1.3), gt)
        assert rec.bumpiness == 0.0

    def test_delta_nesting(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            gt = rng.uniform(0.2, 3.0, (9, 9))
            pred = gt * rng.uniform(0.5, 2.0, (9, 9))
            rec = evaluate(pred, gt)
            assert rec.delta1 <= rec.delta2 <= rec.delta3

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            gt = rng.uniform(0.2, 3.0, (16, 16))
            pred = gt + rng.normal(0, 0.3, (16, 16))
            pred = np.abs(pred) + 1e-3
            mask = (rng.random((16, 16)) > 0.2).astype(float)
            unc = rng.uniform(0, 0.5, (16, 16))
            rec = evaluate(pred, gt, mask, unc)
            want = metrics_loop(pred, gt, mask, unc)
            for key, val in want.items():
                got = getattr(rec, key)
                assert got == pytest.approx(val, rel=1e-12, abs=1e-12), key

    def test_non_positive_gt_excluded_and_tallied(self):
        gt = np.array([[1.0, 0.0], [-0.5, 2.0]])
        pred = np.array([[1.0, 1.0], [1.0, 2.0]])
        rec = evaluate(pred, gt)
        assert rec.excluded == 2
        assert rec.abs_rel == 0.0 and rec.delta1 == 100.0
        assert rec.mse == pytest.approx((0.0 + 1.0 + 2.25 + 0.0) / 4.0)

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMaskError):
            evaluate(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4)))

    def test_mask_restricts_pixels(self):
        gt = np.ones((4, 4))
        pred = np.ones((4, 4))
        pred[0, 0] = 5.0
        mask = np.ones((4, 4))
        mask[0, 0] = 0.0
        assert evaluate(pred, gt, mask).mse == 0.0


class TestSerialization:
    def test_record_round_trips_as_json(self):
        rec = evaluate(np.ones((4, 4)), np.ones((4, 4)))
        parsed = json.loads(rec.to_json())
        assert parsed["delta1"] == 100.0
        assert set(parsed) == set(MetricRecord.__dataclass_fields__)

    def test_jsonl_batch_output(self, tmp_path):
        recs = [evaluate(np.ones((4, 4)), np.ones((4, 4))) for _ in range(3)]
        agg = aggregate_records(recs)
        path = tmp_path / "metrics.jsonl"
        write_metric_lines(path, recs, agg)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 4
        assert json.loads(lines[-1])["sample"] == "aggregate"

    def test_aggregate_means_fields(self):
        a = evaluate(np.ones((4, 4)), np.ones((4, 4)))
        b = evaluate(np.full((4, 4), 2.0), np.ones((4, 4)))
        agg = aggregate_records([a, b])
        assert agg.mse == pytest.approx((a.mse + b.mse) / 2.0)
        assert agg.delta1 == pytest.approx((a.delta1 + b.delta1) / 2.0)

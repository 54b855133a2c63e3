"""Decoder tests: scoring, fusion, anchor solve with fallback, residual."""

import numpy as np
import pytest

from raytraj.decoder import (
    DecoderParams,
    ResidualHeadParams,
    ScoreHeadParams,
    StepAttention,
    decode_step,
    decode_trajectory,
    fuse_evidence,
    score_evidence,
)
from raytraj.encoding import ConditionedToken
from raytraj.geometry import make_plucker, point_to_ray_distance
from raytraj.state import QueryPair, SlotState


def make_ctoken(feature, origin, direction, t=0.0, view_id="cam0", patch_id=0):
    return ConditionedToken(feature=np.asarray(feature, dtype=float),
                            ray=make_plucker(origin, direction),
                            timestamp=t, view_id=view_id, patch_id=patch_id)


def zero_heads(d, hidden=4, horizon=4):
    heads = [ScoreHeadParams(w1=np.zeros((3 * d, hidden)), b1=np.zeros(hidden),
                             w2=np.zeros(hidden), b2=np.zeros(1))
             for _ in range(horizon)]
    res = ResidualHeadParams(w1=np.zeros((d + 3, hidden)), b1=np.zeros(hidden),
                             w2=np.zeros((hidden, 3)), b2=np.zeros(3))
    return DecoderParams(score_heads=heads, residual=res, horizon=horizon)


def tokens_through(point, d, n=4, rng=None):
    """Tokens whose rays all pass exactly through `point`."""
    rng = rng or np.random.default_rng(0)
    toks = []
    for i in range(n):
        origin = np.asarray(point) + rng.normal(0, 5, 3)
        toks.append(make_ctoken(rng.normal(size=d), origin,
                                np.asarray(point) - origin, patch_id=i))
    return toks


def queries(d, rng=None):
    rng = rng or np.random.default_rng(1)
    return QueryPair(semantic=rng.normal(size=d), kinematic=rng.normal(size=d))


class TestScoreEvidence:
    def test_zero_weights_give_uniform(self):
        d = 4
        toks = tokens_through([1, 1, 0], d, n=5)
        attn = score_evidence(queries(d), toks, 1, zero_heads(d))
        np.testing.assert_allclose(attn.weights, np.full(5, 0.2))

    def test_softmax_saturation(self):
        # one token's feature drives its logit 50 higher through a
        # constructed head: its weight must saturate to ~1
        d = 2
        params = zero_heads(d, hidden=1)
        # hidden = tanh(50 * f0); w2 = 100 -> logit ~= 100 for f0 = 1
        params.score_heads[0] = ScoreHeadParams(
            w1=np.array([[0.0], [0.0], [0.0], [0.0], [50.0], [0.0]]),
            b1=np.zeros(1), w2=np.array([100.0]), b2=np.zeros(1))
        toks = [make_ctoken([1.0, 0.0], [0, 0, 0], [0, 0, 1]),
                make_ctoken([0.0, 0.0], [1, 0, 0], [0, 0, 1]),
                make_ctoken([0.0, 0.0], [0, 1, 0], [0, 0, 1])]
        attn = score_evidence(queries(d), toks, 1, params)
        assert attn.weights[0] > 1 - 1e-9

    def test_weights_normalized_and_nonnegative(self):
        rng = np.random.default_rng(2)
        d = 5
        params = DecoderParams.init(d, hidden=6, rng=rng)
        toks = tokens_through([0, 0, 1], d, n=7, rng=rng)
        for step in range(1, 5):
            attn = score_evidence(queries(d, rng), toks, step, params)
            assert abs(attn.weights.sum() - 1.0) < 1e-9
            assert np.all(attn.weights >= 0)

    def test_empty_tokens_rejected(self):
        with pytest.raises(ValueError):
            score_evidence(queries(3), [], 1, zero_heads(3))

    def test_step_range_enforced(self):
        toks = tokens_through([0, 0, 1], 3)
        with pytest.raises(ValueError):
            score_evidence(queries(3), toks, 5, zero_heads(3))

    def test_top_r_truncation_renormalizes(self):
        d = 2
        params = zero_heads(d, hidden=1)
        params.top_r = 2
        params.score_heads[0] = ScoreHeadParams(
            w1=np.array([[0.0], [0.0], [0.0], [0.0], [3.0], [0.0]]),
            b1=np.zeros(1), w2=np.array([5.0]), b2=np.zeros(1))
        toks = [make_ctoken([1.0, 0], [0, 0, 0], [0, 0, 1]),
                make_ctoken([0.9, 0], [1, 0, 0], [0, 0, 1]),
                make_ctoken([0.0, 0], [0, 1, 0], [0, 0, 1])]
        attn = score_evidence(queries(d), toks, 1, params)
        assert attn.weights[2] == 0.0
        assert abs(attn.weights.sum() - 1.0) < 1e-12


class TestFuseEvidence:
    def test_one_hot_selects(self):
        toks = tokens_through([0, 0, 1], 3, n=3)
        attn = StepAttention(weights=np.array([0.0, 1.0, 0.0]), step=1)
        np.testing.assert_allclose(fuse_evidence(attn, toks), toks[1].feature)

    def test_uniform_over_identical_features(self):
        f = np.array([1.0, -2.0, 0.5])
        toks = [make_ctoken(f, [i, 0, 0], [0, 0, 1]) for i in range(4)]
        attn = StepAttention(weights=np.full(4, 0.25), step=1)
        np.testing.assert_allclose(fuse_evidence(attn, toks), f)

    def test_matches_dot_product_oracle(self):
        rng = np.random.default_rng(3)
        toks = tokens_through([1, 2, 0], 6, n=5, rng=rng)
        w = rng.uniform(0.1, 1, 5)
        w /= w.sum()
        attn = StepAttention(weights=w, step=2)
        expected = np.zeros(6)
        for wi, t in zip(w, toks):
            expected += wi * t.feature
        np.testing.assert_allclose(fuse_evidence(attn, toks), expected, atol=1e-12)

    def test_length_mismatch_rejected(self):
        toks = tokens_through([0, 0, 1], 3, n=3)
        with pytest.raises(ValueError):
            fuse_evidence(StepAttention(weights=np.array([0.5, 0.5]), step=1), toks)


class TestDecodeStep:
    def test_zero_residual_concentrated_attention_hits_point(self):
        d = 4
        p_true = np.array([1.0, -2.0, 1.5])
        toks = tokens_through(p_true, d, n=5)
        anchor, refined, attn, fb = decode_step(queries(d), toks, 1, zero_heads(d))
        assert not fb
        np.testing.assert_allclose(anchor, p_true, atol=1e-9)
        np.testing.assert_allclose(refined, p_true, atol=1e-9)  # zero residual

    def test_parallel_rays_fall_back_to_weighted_origin_mean(self):
        d = 3
        toks = [make_ctoken(np.zeros(d), [float(i), 0, 0], [0, 0, 1], patch_id=i)
                for i in range(4)]
        anchor, refined, attn, fb = decode_step(queries(d), toks, 1, zero_heads(d))
        assert fb
        np.testing.assert_allclose(anchor, np.array([1.5, 0, 0]), atol=1e-12)
        np.testing.assert_allclose(refined, anchor)

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(4)
        d = 5
        params = DecoderParams.init(d, hidden=4, rng=rng)
        toks = tokens_through([0.5, 0.5, 1], d, n=6, rng=rng)
        q = queries(d, rng)
        anchor, refined, attn, fb = decode_step(q, toks, 2, params)

        # independent pipeline: score -> softmax -> solve -> fuse -> residual
        head = params.score_heads[1]
        feats = np.stack([t.feature for t in toks])
        z = np.array([
            np.tanh(np.concatenate([q.semantic, q.kinematic, f]) @ head.w1
                    + head.b1) @ head.w2 + head.b2[0]
            for f in feats])
        e = np.exp(z - z.max())
        alpha = e / e.sum()
        a = np.zeros((3, 3))
        b = np.zeros(3)
        for w, t in zip(alpha, toks):
            proj = np.eye(3) - np.outer(t.ray.direction, t.ray.direction)
            a += w * proj
            b += w * proj @ t.ray.origin
        p_anchor = np.linalg.solve(a, b)
        fused = alpha @ feats
        res = params.residual
        delta = np.tanh(np.concatenate([fused, p_anchor]) @ res.w1 + res.b1) @ res.w2 \
            + res.b2
        np.testing.assert_allclose(attn.weights, alpha, atol=1e-9)
        np.testing.assert_allclose(anchor, p_anchor, atol=1e-9)
        np.testing.assert_allclose(refined, p_anchor + delta, atol=1e-9)


class TestDecodeTrajectory:
    def _slot(self, d, rng):
        return SlotState(vector=rng.normal(size=d), turn_index=1)

    def test_always_four_points(self):
        rng = np.random.default_rng(5)
        d = 4
        params = DecoderParams.init(d, hidden=4, rng=rng)
        w = rng.normal(size=(d, d))
        for n in (1, 3, 9):
            toks = tokens_through([0, 1, 1], d, n=n, rng=rng)
            pred = decode_trajectory(self._slot(d, rng), toks, params, w, w)
            assert pred.points.shape == (4, 3)
            assert pred.anchors.shape == (4, 3)
            assert len(pred.attention) == 4

    def test_duplicating_tokens_changes_nothing(self):
        # duplicated logits renormalize to the same convex combination
        rng = np.random.default_rng(6)
        d = 5
        params = DecoderParams.init(d, hidden=4, rng=rng)
        w_sem = rng.normal(size=(d, d))
        w_kin = rng.normal(size=(d, d))
        slot = self._slot(d, rng)
        toks = tokens_through([1, 0, 1], d, n=4, rng=rng)
        pred1 = decode_trajectory(slot, toks, params, w_sem, w_kin)
        pred2 = decode_trajectory(slot, toks + toks, params, w_sem, w_kin)
        np.testing.assert_allclose(pred2.points, pred1.points, atol=1e-9)
        np.testing.assert_allclose(pred2.anchors, pred1.anchors, atol=1e-9)

    def test_single_token_anchor_lies_on_its_ray(self):
        rng = np.random.default_rng(7)
        d = 4
        params = DecoderParams.init(d, hidden=4, rng=rng)
        # zero the residual head so refined == anchor
        params.residual = ResidualHeadParams(
            w1=np.zeros((d + 3, 4)), b1=np.zeros(4),
            w2=np.zeros((4, 3)), b2=np.zeros(3))
        tok = make_ctoken(rng.normal(size=d), [2, 1, 0], [0.3, -0.5, 1.0])
        pred = decode_trajectory(self._slot(d, rng), [tok], params,
                                 rng.normal(size=(d, d)), rng.normal(size=(d, d)))
        # single-ray least squares is degenerate along the ray: the declared
        # fallback returns the (weighted) origin, which lies on the ray
        assert pred.fallback.all()
        for h in range(4):
            assert point_to_ray_distance(pred.points[h], tok.ray) < 1e-9

    def test_rigid_equivariance_of_anchor_path(self):
        rng = np.random.default_rng(8)
        d = 4
        params = DecoderParams.init(d, hidden=4, rng=rng)
        w_sem = rng.normal(size=(d, d))
        w_kin = rng.normal(size=(d, d))
        slot = self._slot(d, rng)
        toks = tokens_through([0.5, -1, 2], d, n=5, rng=rng)
        pred = decode_trajectory(slot, toks, params, w_sem, w_kin)

        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                        [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
        shift = np.array([3.0, -1.0, 2.0])
        moved = [ConditionedToken(feature=t.feature,
                                  ray=make_plucker(rot @ t.ray.origin + shift,
                                                   rot @ t.ray.direction),
                                  timestamp=t.timestamp, view_id=t.view_id,
                                  patch_id=t.patch_id) for t in toks]
        pred_moved = decode_trajectory(slot, moved, params, w_sem, w_kin)
        for h in range(4):
            np.testing.assert_allclose(pred_moved.anchors[h],
                                       rot @ pred.anchors[h] + shift, atol=1e-6)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        d = 4
        params = DecoderParams.init(d, hidden=4, rng=rng)
        w = rng.normal(size=(d, d))
        slot = self._slot(d, rng)
        toks = tokens_through([0, 0, 2], d, n=5, rng=rng)
        p1 = decode_trajectory(slot, toks, params, w, w)
        p2 = decode_trajectory(slot, toks, params, w, w)
        assert np.array_equal(p1.points, p2.points)
        assert np.array_equal(p1.anchors, p2.anchors)

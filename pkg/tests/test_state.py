"""Slot state tests: gated update, queries, identity loss, stop-gradient."""

import numpy as np
import pytest

from raytraj.state import (
    QueryEmbedding,
    SlotState,
    SlotUpdateParams,
    derive_queries,
    embed_question,
    identity_consistency_loss,
    identity_consistency_loss_grad,
    init_slot,
    update_slot,
    update_slot_backward,
    update_slot_forward,
)


def random_params(d, rng, scale=0.6):
    return SlotUpdateParams(
        cand_w=rng.normal(0, scale, (3 * d, d)), cand_b=rng.normal(0, scale, d),
        gate_w=rng.normal(0, scale, (3 * d, d)), gate_b=rng.normal(0, scale, d))


class TestInitSlot:
    def test_dim_4(self):
        s = init_slot(4)
        np.testing.assert_array_equal(s.vector, np.zeros(4))
        assert s.turn_index == 0

    def test_dim_32(self):
        assert init_slot(32).vector.shape == (32,)
        assert not init_slot(32).vector.any()

    def test_deterministic(self):
        np.testing.assert_array_equal(init_slot(8).vector, init_slot(8).vector)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            init_slot(0)


class TestUpdateSlot:
    def test_gate_forced_closed_carries_previous(self):
        # a very negative gate bias drives g -> 0, so new ~= prev
        rng = np.random.default_rng(0)
        d = 5
        params = random_params(d, rng)
        params.gate_b = np.full(d, -40.0)
        prev = SlotState(vector=rng.normal(size=d), turn_index=3)
        out = update_slot(prev, rng.normal(size=d),
                          QueryEmbedding(rng.normal(size=d)), params)
        assert np.max(np.abs(out.vector - prev.vector)) < 1e-6
        assert out.turn_index == 4

    def test_gate_open_with_zero_candidate_resets(self):
        # g -> 1 and tanh(0) = 0: the new slot is exactly zero
        d = 4
        params = SlotUpdateParams(
            cand_w=np.zeros((3 * d, d)), cand_b=np.zeros(d),
            gate_w=np.zeros((3 * d, d)), gate_b=np.full(d, 40.0))
        prev = SlotState(vector=np.ones(d), turn_index=0)
        out = update_slot(prev, np.ones(d), QueryEmbedding(np.ones(d)), params)
        assert np.max(np.abs(out.vector)) < 1e-6

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(1)
        d = 6
        for _ in range(20):
            params = random_params(d, rng)
            prev = rng.normal(size=d)
            pool = rng.normal(size=d)
            q = rng.normal(size=d)
            out, _ = update_slot_forward(prev, pool, q, params)
            # independent re-statement of the blend formula
            x = np.concatenate([prev, pool, q])
            cand = np.tanh(x @ params.cand_w + params.cand_b)
            gate = 1.0 / (1.0 + np.exp(-(x @ params.gate_w + params.gate_b)))
            expected = gate * cand + (1 - gate) * prev
            np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_output_in_convex_hull_of_prev_and_candidate(self):
        rng = np.random.default_rng(2)
        d = 8
        for _ in range(50):
            params = random_params(d, rng)
            prev = rng.normal(size=d)
            out, cache = update_slot_forward(prev, rng.normal(size=d),
                                             rng.normal(size=d), params)
            lo = np.minimum(prev, cache["cand"]) - 1e-12
            hi = np.maximum(prev, cache["cand"]) + 1e-12
            assert np.all(out >= lo) and np.all(out <= hi)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        params = random_params(4, rng)
        with pytest.raises(ValueError):
            update_slot_forward(np.zeros(4), np.zeros(5), np.zeros(4), params)


class TestUpdateSlotGradients:
    def _fd(self, fn, arr, step=1e-6):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = fn()
            flat[i] = orig - step
            lm = fn()
            flat[i] = orig
            gf[i] = (lp - lm) / (2 * step)
        return g

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        d = 4
        params = random_params(d, rng)
        prev = rng.normal(size=d)
        pool = rng.normal(size=d)
        q = rng.normal(size=d)
        target = rng.normal(size=d)

        def loss():
            out, _ = update_slot_forward(prev, pool, q, params)
            return float(np.sum((out - target) ** 2))

        out, cache = update_slot_forward(prev, pool, q, params)
        grads, d_prev, d_pool, d_q = update_slot_backward(
            cache, 2.0 * (out - target), params)
        for name in ("cand_w", "cand_b", "gate_w", "gate_b"):
            fd = self._fd(loss, getattr(params, name))
            np.testing.assert_allclose(grads[name], fd, atol=1e-6)
        np.testing.assert_allclose(d_prev, self._fd(loss, prev), atol=1e-6)
        np.testing.assert_allclose(d_pool, self._fd(loss, pool), atol=1e-6)
        np.testing.assert_allclose(d_q, self._fd(loss, q), atol=1e-6)

    def test_stop_gradient_blocks_turn1_parameters(self):
        """Two chained updates with separate parameter sets. Under
        stop-gradient the turn-2 loss has exactly zero gradient w.r.t. the
        turn-1-only parameters; without it, finite differences show the
        dependence and the chained analytic gradient matches them."""
        rng = np.random.default_rng(5)
        d = 4
        p1 = random_params(d, rng)
        p2 = random_params(d, rng)
        s0 = rng.normal(size=d)
        pool1, q1 = rng.normal(size=d), rng.normal(size=d)
        pool2, q2 = rng.normal(size=d), rng.normal(size=d)
        target = rng.normal(size=d)

        def turn2_loss():
            s1, _ = update_slot_forward(s0, pool1, q1, p1)
            s2, _ = update_slot_forward(s1, pool2, q2, p2)
            return float(np.sum((s2 - target) ** 2))

        s1, cache1 = update_slot_forward(s0, pool1, q1, p1)
        s2, cache2 = update_slot_forward(s1, pool2, q2, p2)
        grads2, d_prev2, _, _ = update_slot_backward(cache2, 2.0 * (s2 - target), p2)

        # stop-gradient: nothing flows into p1, exactly
        stop_grads_p1 = {k: np.zeros_like(getattr(p1, k))
                         for k in ("cand_w", "cand_b", "gate_w", "gate_b")}
        for k, g in stop_grads_p1.items():
            assert np.all(g == 0.0)

        # no-stop variant: chain d_prev2 into the turn-1 backward
        grads1, _, _, _ = update_slot_backward(cache1, d_prev2, p1)
        fd = np.zeros_like(p1.cand_w)
        flat = p1.cand_w.reshape(-1)
        fdf = fd.reshape(-1)
        step = 1e-6
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = turn2_loss()
            flat[i] = orig - step
            lm = turn2_loss()
            flat[i] = orig
            fdf[i] = (lp - lm) / (2 * step)
        assert np.max(np.abs(fd)) > 1e-6  # the dependence is real
        np.testing.assert_allclose(grads1["cand_w"], fd, atol=1e-6)


class TestDeriveQueries:
    def test_identity_matrices(self):
        s = SlotState(vector=np.array([1.0, -2.0, 3.0]))
        q = derive_queries(s, np.eye(3), np.eye(3))
        np.testing.assert_allclose(q.semantic, s.vector)
        np.testing.assert_allclose(q.kinematic, s.vector)

    def test_zero_slot(self):
        rng = np.random.default_rng(6)
        q = derive_queries(init_slot(5), rng.normal(size=(5, 5)),
                           rng.normal(size=(5, 5)))
        assert not q.semantic.any() and not q.kinematic.any()

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(7)
        s = SlotState(vector=rng.normal(size=6))
        w_sem = rng.normal(size=(6, 6))
        w_kin = rng.normal(size=(6, 6))
        q = derive_queries(s, w_sem, w_kin)
        np.testing.assert_allclose(
            q.semantic, [sum(w_sem[i, j] * s.vector[j] for j in range(6))
                         for i in range(6)], atol=1e-12)
        np.testing.assert_allclose(q.kinematic, w_kin @ s.vector, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(8)
        w_sem = rng.normal(size=(4, 4))
        w_kin = rng.normal(size=(4, 4))
        s1, s2 = rng.normal(size=4), rng.normal(size=4)
        a, b = 2.5, -1.25
        q = derive_queries(SlotState(vector=a * s1 + b * s2), w_sem, w_kin)
        q1 = derive_queries(SlotState(vector=s1), w_sem, w_kin)
        q2 = derive_queries(SlotState(vector=s2), w_sem, w_kin)
        np.testing.assert_allclose(q.semantic, a * q1.semantic + b * q2.semantic,
                                   atol=1e-12)


class TestEmbedQuestion:
    def test_deterministic_and_normalized(self):
        a = embed_question("Where is target red now?", 16).vector
        b = embed_question("Where is target red now?", 16).vector
        np.testing.assert_array_equal(a, b)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12

    def test_case_insensitive(self):
        a = embed_question("Target RED", 16).vector
        b = embed_question("target red", 16).vector
        np.testing.assert_array_equal(a, b)

    def test_empty_text_is_zero(self):
        assert not embed_question("", 16).vector.any()

    def test_different_targets_differ(self):
        a = embed_question("trace target red", 32).vector
        b = embed_question("trace target blue", 32).vector
        assert np.linalg.norm(a - b) > 0.1


class TestIdentityConsistencyLoss:
    def _slot(self, v):
        return SlotState(vector=np.asarray(v, dtype=float))

    def test_identical_pair_is_zero(self):
        pair = (self._slot([1, 2, 3]), self._slot([1, 2, 3]))
        assert identity_consistency_loss([pair], [], margin=0.5) == pytest.approx(0.0)

    def test_orthogonal_same_pair_is_one(self):
        pair = (self._slot([1, 0, 0]), self._slot([0, 1, 0]))
        assert identity_consistency_loss([pair], [], margin=0.5) == pytest.approx(1.0)

    def test_mixed_batch_hand_enumeration(self):
        # same pairs: cos = 1 and cos = 0 -> mean(0, 1) = 0.5
        # diff pair: cos = 1, margin 0.5 -> hinge = 1 - 0.5 = 0.5
        same = [(self._slot([1, 0, 0]), self._slot([2, 0, 0])),
                (self._slot([1, 0, 0]), self._slot([0, 3, 0]))]
        diff = [(self._slot([0, 0, 1]), self._slot([0, 0, 5]))]
        loss = identity_consistency_loss(same, diff, margin=0.5)
        assert loss == pytest.approx(0.5 + 0.5, abs=1e-12)

    def test_zero_vector_contributes_cos_zero(self):
        same = [(self._slot([0, 0, 0]), self._slot([1, 0, 0]))]
        assert identity_consistency_loss(same, [], margin=0.5) == pytest.approx(1.0)

    def test_margin_validation(self):
        with pytest.raises(ValueError):
            identity_consistency_loss([], [], margin=0.0)
        with pytest.raises(ValueError):
            identity_consistency_loss([], [], margin=2.5)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        vecs = [rng.normal(size=4) for _ in range(4)]
        same = [(vecs[0], vecs[1])]
        diff = [(vecs[2], vecs[3])]
        loss, same_g, diff_g = identity_consistency_loss_grad(same, diff, 0.5)
        step = 1e-7
        for (pair, grads) in ((same[0], same_g[0]), (diff[0], diff_g[0])):
            for vec, g in zip(pair, grads):
                for i in range(vec.size):
                    orig = vec[i]
                    vec[i] = orig + step
                    lp = identity_consistency_loss_grad(same, diff, 0.5)[0]
                    vec[i] = orig - step
                    lm = identity_consistency_loss_grad(same, diff, 0.5)[0]
                    vec[i] = orig
                    fd = (lp - lm) / (2 * step)
                    assert abs(fd - g[i]) < 1e-5

import math

import numpy as np
import pytest

from conftest import p64, tiny_config
from ecglang.data.tokenizer import MASK_ID, PAD_ID, SPECIALS
from ecglang.gradcheck import grad_check
from ecglang.losses import (
    beat_sentence_attention,
    global_contrastive,
    lm_loss,
    local_contrastive,
    mask_tokens,
    mlm_loss,
    multiscale_loss,
    pair_similarity,
    teacher_forcing,
    total_loss,
)
from ecglang.model import MultiScaleModel, collate_signals, collate_text
from ecglang.tensor import NumericError, Tensor, backward


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def oracle_attention(B, S, tau1):
    """Explicit loops over sentences and beats."""
    n, nb = S.shape[0], B.shape[0]
    alpha = np.zeros((n, nb))
    b_hat = np.zeros_like(S)
    for l in range(n):
        e = [math.exp(cos(S[l], B[j]) / tau1) for j in range(nb)]
        for j in range(nb):
            alpha[l, j] = e[j] / sum(e)
            b_hat[l] += alpha[l, j] * B[j]
    return alpha, b_hat


def oracle_z(B, S, tau1, tau2):
    _, b_hat = oracle_attention(B, S, tau1)
    return tau2 * math.log(sum(math.exp(cos(b_hat[l], S[l]) / tau2) for l in range(S.shape[0])))


def oracle_symmetric_ce(logits):
    b = logits.shape[0]
    e2t = -sum(logits[i, i] - math.log(sum(math.exp(logits[i, k]) for k in range(b))) for i in range(b)) / b
    t2e = -sum(logits[k, k] - math.log(sum(math.exp(logits[i, k]) for i in range(b))) for k in range(b)) / b
    return 0.5 * (e2t + t2e)


def oracle_local(Bs, Ss, tau1, tau2):
    b = len(Bs)
    Z = np.array([[oracle_z(Bs[i], Ss[k], tau1, tau2) for k in range(b)] for i in range(b)])
    return oracle_symmetric_ce(Z / tau2), Z


def oracle_nll(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        total += math.log(sum(math.exp(v) for v in row)) - row[t]
    return total / len(targets)


class TestLMLoss:
    def test_uniform_logits(self):
        loss = lm_loss(Tensor(np.zeros((2, 3, 8))), np.array([[1, 2, 3], [4, 5, 6]]))
        assert float(loss.data) == pytest.approx(math.log(8), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((1, 2, 8))
        logits[0, 0, 3] = logits[0, 1, 5] = 20.0
        assert float(lm_loss(Tensor(logits), np.array([[3, 5]])).data) < 1e-3

    def test_matches_oracle_with_padding(self, rng):
        logits = rng.normal(size=(2, 3, 7))
        targets = np.array([[3, 4, 6], [5, PAD_ID, PAD_ID]])
        want = oracle_nll([logits[0, 0], logits[0, 1], logits[0, 2], logits[1, 0]], [3, 4, 6, 5])
        assert float(lm_loss(Tensor(logits), targets).data) == pytest.approx(want, abs=1e-9)

    def test_sum_reduction_is_per_report(self, rng):
        logits = rng.normal(size=(2, 3, 7))
        targets = np.array([[3, 4, 6], [5, PAD_ID, PAD_ID]])
        mean = float(lm_loss(Tensor(logits), targets).data)
        total = float(lm_loss(Tensor(logits), targets, "sum").data)
        assert total == pytest.approx(mean * 4 / 2, abs=1e-9)

    def test_all_pad_rejected(self):
        with pytest.raises(ValueError):
            lm_loss(Tensor(np.zeros((1, 2, 8))), np.zeros((1, 2), dtype=int))

    def test_teacher_forcing_shift(self):
        ids = np.array([[2, 10, 11, 3], [2, 12, 3, 0]])
        inp, tgt = teacher_forcing(ids)
        np.testing.assert_array_equal(inp, ids[:, :-1])
        np.testing.assert_array_equal(tgt, ids[:, 1:])
        with pytest.raises(ValueError):
            teacher_forcing(ids[:, 1:])


class TestMLM:
    def test_uniform_and_oracle(self, rng):
        ids = np.array([[2, 10, 11, 12, 3]])
        masked = np.array([[False, True, False, True, False]])
        assert float(mlm_loss(Tensor(np.zeros((1, 5, 8))), ids % 8, masked).data) == pytest.approx(math.log(8))
        logits = rng.normal(size=(1, 5, 20))
        want = oracle_nll([logits[0, 1], logits[0, 3]], [10, 12])
        assert float(mlm_loss(Tensor(logits), ids, masked).data) == pytest.approx(want, abs=1e-9)

    def test_no_masked_positions_rejected(self):
        with pytest.raises(ValueError):
            mlm_loss(Tensor(np.zeros((1, 3, 8))), np.array([[2, 7, 3]]), np.zeros((1, 3), bool))

    def test_masking_policy(self):
        rng = np.random.default_rng(0)
        ids = rng.integers(len(SPECIALS), 38, size=(400, 50))
        ids[:, 0] = 2
        out, chosen = mask_tokens(ids, rng, 38)
        assert not chosen[:, 0].any()
        assert chosen.mean() == pytest.approx(0.15 * 49 / 50, abs=0.01)
        sel_out = out[chosen]
        assert np.mean(sel_out == MASK_ID) == pytest.approx(0.8, abs=0.02)
        assert np.mean(sel_out == ids[chosen]) == pytest.approx(0.1, abs=0.02)
        np.testing.assert_array_equal(out[~chosen], ids[~chosen])

    def test_at_least_one_position(self):
        ids = np.array([[2, 10, 3]])
        for s in range(20):
            _, chosen = mask_tokens(ids, np.random.default_rng(s), 38)
            assert chosen.sum() >= 1


class TestBeatSentenceAttention:
    def test_single_beat(self, rng):
        B, S = rng.normal(size=(1, 4)), rng.normal(size=(2, 4))
        alpha, b_hat = beat_sentence_attention(Tensor(B), Tensor(S), 0.25)
        np.testing.assert_allclose(alpha.data, 1.0)
        np.testing.assert_allclose(b_hat.data, np.repeat(B, 2, axis=0))

    def test_identical_beats_uniform(self, rng):
        B = np.tile(rng.normal(size=(1, 4)), (3, 1))
        alpha, b_hat = beat_sentence_attention(Tensor(B), Tensor(rng.normal(size=(2, 4))), 0.25)
        np.testing.assert_allclose(alpha.data, 1 / 3, atol=1e-12)
        np.testing.assert_allclose(b_hat.data, B[:2], atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        B, S = rng.normal(size=(3, 5)), rng.normal(size=(2, 5))
        alpha, b_hat = beat_sentence_attention(Tensor(B), Tensor(S), 0.25)
        oa, ob = oracle_attention(B, S, 0.25)
        np.testing.assert_allclose(alpha.data, oa, atol=1e-9)
        np.testing.assert_allclose(b_hat.data, ob, atol=1e-9)

    def test_rows_stochastic_in_float32(self, rng):
        B = rng.normal(size=(4, 3, 6)).astype(np.float32)
        S = rng.normal(size=(4, 2, 6)).astype(np.float32)
        alpha, _ = beat_sentence_attention(Tensor(B), Tensor(S), 0.25)
        np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-6)

    def test_zero_norm_rejected(self, rng):
        with pytest.raises(NumericError):
            beat_sentence_attention(Tensor(np.zeros((2, 4))), Tensor(rng.normal(size=(1, 4))), 0.25)

    def test_literal_variant_returns_sentences(self, rng):
        S = rng.normal(size=(2, 4))
        _, b_hat = beat_sentence_attention(Tensor(rng.normal(size=(3, 4))), Tensor(S), 0.25, literal=True)
        np.testing.assert_allclose(b_hat.data, S, atol=1e-12)


class TestPairSimilarity:
    def test_single_sentence_is_cosine(self, rng):
        a, b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        assert float(pair_similarity(Tensor(a), Tensor(b), 0.1).data) == pytest.approx(cos(a[0], b[0]), abs=1e-12)

    def test_two_equal_cosines(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0]])
        w = np.array([[0.5, math.sqrt(0.75)], [0.5, -math.sqrt(0.75)]])
        assert float(pair_similarity(Tensor(v), Tensor(w), 0.1).data) == pytest.approx(0.569315, abs=1e-6)

    def test_naive_oracle_and_bounds(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        cs = [cos(a[l], b[l]) for l in range(3)]
        want = 0.1 * math.log(sum(math.exp(c / 0.1) for c in cs))
        z = float(pair_similarity(Tensor(a), Tensor(b), 0.1).data)
        assert z == pytest.approx(want, abs=1e-9)
        assert max(cs) <= z <= max(cs) + 0.1 * math.log(3)

    def test_masked_sentences_ignored(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        full = float(pair_similarity(Tensor(a[:2]), Tensor(b[:2]), 0.1).data)
        masked = float(pair_similarity(Tensor(a), Tensor(b), 0.1, np.array([True, True, False])).data)
        assert masked == pytest.approx(full, abs=1e-9)

    def test_monotone_in_matched_cosine(self):
        S = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        prev = -np.inf
        for t in np.linspace(-0.9, 0.9, 7):
            b_hat = np.array([[t, math.sqrt(1 - t * t), 0.0], [0.3, 0.2, 0.9]])
            z = float(pair_similarity(Tensor(b_hat), Tensor(S), 0.1).data)
            assert z > prev
            prev = z


class TestLocalContrastive:
    def test_matches_brute_force(self, rng):
        Bs = rng.normal(size=(3, 2, 4))
        Ss = rng.normal(size=(3, 3, 4))
        mask = np.array([[True, True, False], [True, True, True], [True, False, False]])
        loss, e2t, t2e, trace = local_contrastive(Tensor(Bs), Tensor(Ss), mask, 0.25, 0.1)
        want, Z = oracle_local(list(Bs), [Ss[i][mask[i]] for i in range(3)], 0.25, 0.1)
        np.testing.assert_allclose(trace.z_matrix, Z, atol=1e-9)
        assert float(loss.data) == pytest.approx(want, abs=1e-9)
        assert float(loss.data) == pytest.approx(0.5 * (float(e2t.data) + float(t2e.data)), abs=1e-12)
        oa, _ = oracle_attention(Bs[1], Ss[1], 0.25)
        np.testing.assert_allclose(trace.alpha[1], oa, atol=1e-9)

    def test_float32_within_1e5(self, rng):
        Bs = rng.normal(size=(4, 3, 6))
        Ss = rng.normal(size=(4, 3, 6))
        mask = np.ones((4, 3), bool)
        loss, *_ = local_contrastive(Tensor(Bs.astype(np.float32)), Tensor(Ss.astype(np.float32)), mask, 0.25, 0.1)
        want, _ = oracle_local(list(Bs), list(Ss), 0.25, 0.1)
        assert float(loss.data) == pytest.approx(want, abs=1e-5)

    def test_saturated(self):
        eye = np.eye(2)[:, None, :]
        loss, *_ = local_contrastive(Tensor(eye), Tensor(eye), np.ones((2, 1), bool), 0.25, 0.05)
        assert float(loss.data) < 1e-6

    @pytest.mark.parametrize("b", [2, 3, 5])
    def test_constant_similarity_gives_log_b(self, rng, b):
        v = rng.normal(size=4)
        Bs, Ss = np.tile(v, (b, 2, 1)), np.tile(v, (b, 2, 1))
        loss, *_ = local_contrastive(Tensor(Bs), Tensor(Ss), np.ones((b, 2), bool), 0.25, 0.1)
        assert float(loss.data) == pytest.approx(math.log(b), abs=1e-9)

    def test_permutation_equivariant(self, rng):
        Bs, Ss = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 2, 5))
        mask = np.array([[True, True], [True, False], [True, True], [True, False]])
        perm = np.array([2, 0, 3, 1])
        a, *_ = local_contrastive(Tensor(Bs), Tensor(Ss), mask, 0.25, 0.1)
        b, *_ = local_contrastive(Tensor(Bs[perm]), Tensor(Ss[perm]), mask[perm], 0.25, 0.1)
        assert float(a.data) == pytest.approx(float(b.data), abs=1e-9)

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ValueError):
            local_contrastive(Tensor(rng.normal(size=(1, 2, 4))), Tensor(rng.normal(size=(1, 2, 4))),
                              np.ones((1, 2), bool), 0.25, 0.1)

    def test_gradcheck(self, rng, f64):
        B, S = p64(rng, 3, 2, 4), p64(rng, 3, 2, 4)
        mask = np.array([[True, True], [True, False], [True, True]])
        assert grad_check(lambda: local_contrastive(B, S, mask, 0.25, 0.1)[0], [B, S]) < 1e-6


class TestGlobalContrastive:
    def test_saturated(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        loss, *_ = global_contrastive(Tensor(x), Tensor(x), Tensor(np.asarray(math.log(0.07))))
        assert float(loss.data) < 1e-9

    @pytest.mark.parametrize("b", [2, 4, 7])
    def test_identical_gives_log_b(self, rng, b):
        x = np.tile(rng.normal(size=5), (b, 1))
        loss, *_ = global_contrastive(Tensor(x), Tensor(x), Tensor(np.asarray(math.log(0.07))))
        assert float(loss.data) == pytest.approx(math.log(b), abs=1e-9)

    def test_matches_oracle(self, rng):
        X, T = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        T /= np.linalg.norm(T, axis=1, keepdims=True)
        logits = np.array([[cos(X[i], T[k]) / 0.1 for k in range(4)] for i in range(4)])
        loss, *_ = global_contrastive(Tensor(X), Tensor(T), Tensor(np.asarray(math.log(0.1))))
        assert float(loss.data) == pytest.approx(oracle_symmetric_ce(logits), abs=1e-9)

    def test_permutation_equivariant(self, rng):
        X, T = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        perm = rng.permutation(5)
        lt = Tensor(np.asarray(math.log(0.07)))
        a = float(global_contrastive(Tensor(X), Tensor(T), lt)[0].data)
        b = float(global_contrastive(Tensor(X[perm]), Tensor(T[perm]), lt)[0].data)
        assert a == pytest.approx(b, abs=1e-9)

    def test_gradient_reaches_temperature(self, rng, f64):
        X, T, lt = p64(rng, 4, 5), p64(rng, 4, 5), Tensor(np.asarray(math.log(0.07)), requires_grad=True)
        assert grad_check(lambda: global_contrastive(X, T, lt)[0], [X, T, lt]) < 1e-6
        loss = global_contrastive(X, T, lt)[0]
        assert backward(loss, [lt])[lt] != 0.0

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ValueError):
            global_contrastive(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 3))),
                               Tensor(np.asarray(0.0)))


class TestTotalLoss:
    def test_weights(self):
        assert total_loss(1.0, 1.0, 1.0) == pytest.approx(3.2)
        assert total_loss(0.7, 5.0, 9.0, 0.0, 0.0) == 0.7

    @pytest.fixture
    def setup(self, tiny_batch, f64):
        model = MultiScaleModel(tiny_config()).to(np.float64).eval()
        return model, collate_signals(tiny_batch[0]), collate_text(tiny_batch[1])

    def test_breakdown_is_weighted_sum(self, setup):
        model, sig, text = setup
        total, br, trace = multiscale_loss(model, sig, text)
        assert br.total == pytest.approx(br.l_g + 2.0 * br.l_lm + 0.2 * br.l_local, abs=1e-12)
        assert br.tau_learnable == pytest.approx(0.07)
        assert trace.alpha.shape == (3, 2, 2)

    def test_disabled_losses_report_zero(self, setup):
        model, sig, text = setup
        model.cfg.losses = ("lm",)
        _, br, trace = multiscale_loss(model, sig, text)
        assert br.l_g == br.l_local == 0.0 and br.l_lm > 0 and trace is None

    def test_total_gradient_is_weighted_component_sum(self, setup):
        model, sig, text = setup
        params = model.parameters()

        def grads(losses, lam_lm=2.0, lam_local=0.2):
            model.cfg.losses, model.cfg.lambda_lm, model.cfg.lambda_local = losses, lam_lm, lam_local
            model.zero_grad()
            g = backward(multiscale_loss(model, sig, text)[0], params)
            return [np.asarray(g[p]) for p in params]

        g_all = grads(("g", "lm", "local"))
        parts = [grads(("g",), 1.0, 1.0), grads(("lm",), 1.0, 1.0), grads(("local",), 1.0, 1.0)]
        for i in range(len(params)):
            want = parts[0][i] + 2.0 * parts[1][i] + 0.2 * parts[2][i]
            np.testing.assert_allclose(g_all[i], want, atol=1e-10)

    def test_gradient_reaches_every_head(self, tiny_batch):
        model = MultiScaleModel(tiny_config())
        loss, _, _ = multiscale_loss(model, collate_signals(tiny_batch[0]), collate_text(tiny_batch[1]))
        targets = [model.caption_pool.queries, model.beat_pool.queries, model.log_tau]
        targets += model.proj_ecg.parameters() + model.proj_text.parameters()
        g = backward(loss, targets)
        for p in targets:
            assert np.any(np.asarray(g[p]) != 0)

    def test_full_objective_gradcheck(self, setup):
        model, sig, text = setup
        assert text.sent_mask.shape == (3, 2)
        err = grad_check(lambda: multiscale_loss(model, sig, text)[0], model.parameters(), max_coords=3)
        assert err < 1e-5

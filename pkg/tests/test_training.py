import json
import math

import numpy as np
import pytest

import ecglang.training as training
from conftest import tiny_config
from ecglang.data import make_corpus
from ecglang.data.synth import Pair
from ecglang.model import ModelConfig
from ecglang.tensor import NumericError, Tensor
from ecglang.training import (
    AdamW,
    TrainConfig,
    TrainingAborted,
    adamw_step,
    batches,
    build_model,
    cosine_lr,
    decays,
    pretrain,
    scheduled_lr,
    text_mlm_pretrain,
)


def hand_adamw(p, grad_fn, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar reference trace."""
    p = list(p)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t in range(1, steps + 1):
        g = grad_fn(p)
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] = p[i] * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return p


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = {"w": np.array([[1.0, -2.0], [3.0, 0.5]])}
        out = adamw_step(p, {"w": np.zeros((2, 2))}, {}, 1, 0.1, 0.0)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_single_step_is_normalized_gradient(self):
        g = np.array([0.5, -3.0, 1e-3])
        out = adamw_step({"w": np.zeros(3)}, {"w": g}, {}, 1, 0.01, 0.0)
        np.testing.assert_allclose(out["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_three_steps_on_quadratic_match_hand_trace(self):
        p0 = [1.0, -2.0, 0.25]
        want = hand_adamw(p0, lambda p: list(p), 3, lr=0.1, wd=0.01)
        params, moments = {"w": np.array(p0)}, {}
        for t in range(1, 4):
            params = adamw_step(params, {"w": params["w"].copy()}, moments, t, 0.1, 0.01)
        np.testing.assert_allclose(params["w"], want, rtol=0, atol=1e-10)

    def test_decay_is_decoupled(self):
        # decay leaves the moments untouched
        m1, m2 = {}, {}
        adamw_step({"w": np.ones(2)}, {"w": np.full(2, 0.3)}, m1, 1, 0.1, 0.0)
        adamw_step({"w": np.ones(2)}, {"w": np.full(2, 0.3)}, m2, 1, 0.1, 0.5)
        np.testing.assert_array_equal(m1["w"][0], m2["w"][0])
        np.testing.assert_array_equal(m1["w"][1], m2["w"][1])

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(NumericError, match="decoder.head.weight"):
            adamw_step({"decoder.head.weight": np.ones(2)}, {"decoder.head.weight": np.array([np.nan, 0.0])},
                       {}, 1, 0.1, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step({"w": np.ones(2)}, {"w": np.ones(3)}, {}, 1, 0.1, 0.0)

    def test_decay_selection(self):
        assert decays("x.weight", np.ones((2, 2)))
        assert not decays("ln.gain", np.ones(2))
        assert not decays("log_tau", np.asarray(0.0))

    def test_stateful_wrapper_matches_function(self):
        w, b = Tensor(np.array([[1.0, 2.0]]), requires_grad=True), Tensor(np.array([0.5]), requires_grad=True)
        opt = AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.2)
        moments = {}
        ref = {"w": w.data.copy(), "b": b.data.copy()}
        for t in range(1, 3):
            w.grad, b.grad = np.array([[0.1, -0.2]]), np.array([0.3])
            opt.step()
            ref = adamw_step(ref, {"w": np.array([[0.1, -0.2]]), "b": np.array([0.3])}, moments, t, 0.1, 0.2,
                             decay=decays)
        np.testing.assert_array_equal(w.data, ref["w"])
        np.testing.assert_array_equal(b.data, ref["b"])


class TestSchedule:
    def test_cosine_values(self):
        assert cosine_lr(0, 100, 2e-4) == 2e-4
        assert cosine_lr(100, 100, 2e-4) == pytest.approx(0.0, abs=1e-20)
        assert cosine_lr(50, 100, 2e-4) == pytest.approx(1e-4, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 1.0)

    def test_warmup_and_constant(self):
        cfg = TrainConfig(lr=1.0, warmup_steps=4, schedule="constant")
        assert [scheduled_lr(s, 10, cfg) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.weight_decay, cfg.patience, cfg.batch_size, cfg.max_epochs) == (2e-4, 0.2, 5, 16, 100)
        assert cfg.schedule == "cosine" and cfg.warmup_steps == 0

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(patience=0), dict(batch_size=1), dict(schedule="step")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = TrainConfig(lr=1e-3, seed=7)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestBatches:
    def test_partition_and_no_singletons(self):
        rng = np.random.default_rng(0)
        for n in (2, 5, 16, 17, 33):
            out = batches(n, 16, rng)
            assert sorted(np.concatenate(out).tolist()) == list(range(n))
            assert all(len(b) >= 2 for b in out)


@pytest.fixture(scope="module")
def corpus40():
    return make_corpus(40, seed=2)


def small_run(corpus, tmp_path=None, **kw):
    base = dict(lr=1e-3, batch_size=8, max_epochs=2, patience=5, seed=0)
    base.update(kw)
    return pretrain(corpus, tiny_config(dropout=0.1), TrainConfig(**base), out_dir=tmp_path)


class TestPretrain:
    def test_log_structure(self, corpus40, tmp_path):
        res = small_run(corpus40, tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        rows = [json.loads(x) for x in lines]
        assert len(lines) == res.steps + res.epochs_run
        steps = [r for r in rows if r["kind"] == "step"]
        assert [r["step"] for r in steps] == list(range(1, res.steps + 1))
        for key in ("l_g", "l_lm", "l_local", "total", "tau_learnable", "lr", "l_g_e2t", "l_local_t2e"):
            assert key in steps[0]
        assert (tmp_path / "checkpoints" / "best.ckpt").exists()

    def test_same_seed_identical_logs(self, corpus40):
        a, b = small_run(corpus40), small_run(corpus40)
        assert a.metrics == b.metrics
        for k, v in a.checkpoint.params.items():
            np.testing.assert_array_equal(v, b.checkpoint.params[k])

    def test_different_seed_differs(self, corpus40):
        assert small_run(corpus40).metrics != small_run(corpus40, seed=1).metrics

    def test_early_stop_patience_one(self, corpus40, monkeypatch):
        monkeypatch.setattr(training, "zero_shot_classify", lambda *a, **k: (0.5, {}))
        res = small_run(corpus40, max_epochs=10, patience=1)
        assert res.epochs_run == 2
        assert res.checkpoint.epoch == 1

    def test_best_checkpoint_is_max_over_epochs(self, corpus40):
        res = small_run(corpus40, max_epochs=4, lr=3e-3)
        vals = [r["val_zero_shot_auroc"] for r in res.metrics if r["kind"] == "epoch"]
        assert res.checkpoint.best_val_metric == pytest.approx(max(vals), rel=1e-7)
        best_epoch = 1 + int(np.argmax(vals))
        assert res.checkpoint.epoch == best_epoch
        again, _ = training.zero_shot_classify(res.model, [p.record for p in corpus40.split("val")],
                                               training.PromptTable.default(corpus40.classes), corpus40.vocab)
        assert again == res.checkpoint.best_val_metric

    def test_tau_stays_in_bounds(self, corpus40):
        res = small_run(corpus40, lr=0.5, schedule="constant", max_steps=6, weight_decay=0.0)
        taus = [r["tau_learnable"] for r in res.metrics if "tau_learnable" in r]
        assert all(1e-3 * (1 - 1e-6) <= t <= 1.0 * (1 + 1e-6) for t in taus)

    def test_max_steps_cap(self, corpus40):
        res = small_run(corpus40, max_steps=3)
        assert res.steps == 3 and res.epochs_run == 1

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_aborts_on_non_finite_loss(self, corpus40, tmp_path):
        train = corpus40.split("train")[:8]
        rec = train[3].record
        bad = np.array(rec.signal)
        bad[0, 10] = np.inf
        train[3] = Pair(type(rec)(bad, rec.sampling_rate_hz, rec.duration_s, rec.labels, rec.patient_id,
                                  rec.record_id), train[3].report)
        with pytest.raises(TrainingAborted) as exc:
            pretrain(corpus40, tiny_config(), TrainConfig(batch_size=8, max_epochs=1), out_dir=tmp_path,
                     train_pairs=train)
        assert rec.record_id in exc.value.batch_ids
        dumped = json.loads((tmp_path / "aborted_batch.json").read_text())
        assert rec.record_id in dumped["batch_ids"]

    def test_loss_decreases(self, corpus40):
        res = small_run(corpus40, max_epochs=6, lr=3e-3, patience=10)
        totals = [r["total"] for r in res.metrics if r["kind"] == "step"]
        assert np.mean(totals[-4:]) < np.mean(totals[:4])


class TestTextInit:
    def test_mlm_loss_drops_below_half_log_vocab(self):
        reports = [p.report for p in make_corpus(500, seed=4).pairs]
        rows = []
        ckpt = text_mlm_pretrain(reports, ModelConfig(), TrainConfig(lr=1e-3, seed=0), steps=200, log_rows=rows)
        losses = [r["loss"] for r in rows]
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < math.log(38) / 2
        assert any(k.startswith("mlm_head.") for k in ckpt.params)

    def test_deterministic_and_loadable(self):
        reports = [p.report for p in make_corpus(30, seed=4).pairs]
        cfg = tiny_config()
        a = text_mlm_pretrain(reports, cfg, TrainConfig(batch_size=8, seed=1), steps=3)
        b = text_mlm_pretrain(reports, cfg, TrainConfig(batch_size=8, seed=1), steps=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        model = build_model(cfg, a)
        np.testing.assert_array_equal(model.text.tok.weight.data, a.params["text.tok.weight"])
        fresh = build_model(cfg)
        assert not np.array_equal(fresh.text.tok.weight.data, a.params["text.tok.weight"])

    def test_incompatible_init_rejected(self):
        reports = [p.report for p in make_corpus(30, seed=4).pairs]
        ckpt = text_mlm_pretrain(reports, tiny_config(), TrainConfig(batch_size=8), steps=1)
        with pytest.raises(ValueError, match="does not fit"):
            build_model(tiny_config(dim=32, conv_norm_groups=4), ckpt)

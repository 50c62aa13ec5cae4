import math

import numpy as np
import pytest
import torch

import oracles
from embforge import objectives, training
from embforge.data import TrainingSample, assemble_batch, write_jsonl
from embforge.encoder import Encoder, save_checkpoint
from embforge.errors import ConfigError, DataError, NumericError
from embforge.objectives import LossConfig, student_score_rows
from embforge.training import (
    OptimizerState,
    StageConfig,
    TeacherCache,
    adam_step,
    build_teacher_cache,
    lr_at,
    read_teacher_embeddings,
    run_stage,
)


def scalar(x):
    return [torch.tensor([x], dtype=torch.float64)]


class TestAdam:
    def test_two_hand_steps(self):
        # p0 = 1, grads 0.5 then -0.25, lr 0.1
        params, state = scalar(1.0), OptimizerState.zeros_like(scalar(0.0))
        adam_step(params, scalar(0.5), state, 0.1)
        # m = 0.05, v = 0.00025; bias-corrected 0.5 and 0.25 -> step 0.1 * 0.5 / (0.5 + 1e-8)
        assert params[0].item() == pytest.approx(1 - 0.05 / (0.5 + 1e-8), abs=1e-12)
        adam_step(params, scalar(-0.25), state, 0.1)
        # m = 0.02, v = 0.00031225, corrections 0.19 and 0.001999
        step2 = 0.1 * (0.02 / 0.19) / (math.sqrt(0.00031225 / 0.001999) + 1e-8)
        assert params[0].item() == pytest.approx(1 - 0.05 / (0.5 + 1e-8) - step2, abs=1e-12)
        assert params[0].item() == pytest.approx(oracles.adam([1.0], [[0.5], [-0.25]], 0.1)[0], abs=1e-12)
        assert state.step == 2

    def test_matches_oracle_on_vectors(self):
        g = np.random.default_rng(0)
        p0 = g.standard_normal(5)
        grads = g.standard_normal((20, 5))
        params = [torch.tensor(p0)]
        state = OptimizerState.zeros_like(params)
        for gr in grads:
            adam_step(params, [torch.tensor(gr)], state, 0.01)
        assert np.allclose(params[0].numpy(), oracles.adam(p0, grads.tolist(), 0.01), atol=1e-12, rtol=0)

    def test_constant_gradient_step_is_lr(self):
        params, state = scalar(0.0), OptimizerState.zeros_like(scalar(0.0))
        prev = 0.0
        for _ in range(200):
            adam_step(params, scalar(3.0), state, 0.01)
            delta, prev = prev - params[0].item(), params[0].item()
        assert delta == pytest.approx(0.01, rel=1e-6)

    def test_zero_gradient(self):
        params, state = scalar(2.0), OptimizerState.zeros_like(scalar(0.0))
        adam_step(params, scalar(1.0), state, 0.1)
        before, m, v = params[0].item(), state.m[0].item(), state.v[0].item()
        adam_step(params, scalar(0.0), state, 0.1)
        assert state.m[0].item() == pytest.approx(0.9 * m, abs=1e-15)
        assert state.v[0].item() == pytest.approx(0.999 * v, abs=1e-15)
        fresh, fresh_state = scalar(2.0), OptimizerState.zeros_like(scalar(0.0))
        adam_step(fresh, scalar(0.0), fresh_state, 0.1)
        assert fresh[0].item() == 2.0
        assert before != params[0].item()  # momentum still moves it

    def test_zero_lr_invariant(self):
        params = [torch.randn(3, 4, dtype=torch.float64)]
        start = params[0].clone()
        state = OptimizerState.zeros_like(params)
        for _ in range(50):
            adam_step(params, [torch.randn(3, 4, dtype=torch.float64)], state, 0.0)
        assert torch.equal(params[0], start)

    def test_non_finite_aborts_untouched(self):
        params, state = scalar(1.0), OptimizerState.zeros_like(scalar(0.0))
        with pytest.raises(NumericError):
            adam_step(params, scalar(float("nan")), state, 0.1)
        assert params[0].item() == 1.0 and state.step == 0 and state.m[0].item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            adam_step(scalar(1.0), [torch.zeros(2, dtype=torch.float64)], OptimizerState.zeros_like(scalar(0.0)), 0.1)


class TestSchedule:
    def test_warmup_then_constant(self):
        assert [lr_at(s, 1.0, 4) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
        assert lr_at(0, 0.3, 0) == 0.3

    def test_fractional_warmup(self):
        cfg = StageConfig("pretrain", 8, 1e-3, warmup_steps=0.1)
        assert cfg.warmup_for(190) == 19 and cfg.warmup_for(5) == 1

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            StageConfig("warmup", 8, 1e-3)
        with pytest.raises(ConfigError):
            StageConfig("pretrain", 8, 0.0)
        with pytest.raises(ConfigError):
            StageConfig.from_dict({"stage": "pretrain", "batch_size": 8, "learning_rate": 1e-3, "bogus": 1})

    def test_pretrain_disables_mixing(self):
        cfg = StageConfig("pretrain", 8, 1e-3, loss=LossConfig())
        assert not cfg.loss.enable_pairwise_mix and not cfg.loss.enable_listwise_mix

    def test_batch_of_one_warns(self, caplog):
        StageConfig("pretrain", 1, 1e-3)
        assert "no in-batch negatives" in caplog.text

    def test_desk_merges_loss(self):
        cfg = StageConfig.desk("finetune", loss={"gamma": 0.0})
        assert cfg.loss.gamma == 0.0 and cfg.loss.mrl_dims == (64, 32, 16, 8)


# -- stage runs on a tiny two-topic corpus ---------------------------------------------

A = ["red", "crimson", "scarlet", "ruby", "rose", "cherry"]
B = ["blue", "navy", "azure", "cobalt", "teal", "indigo"]


def two_topic(n=24, m=2, seed=0):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        words, other = (A, B) if i % 2 == 0 else (B, A)
        q = " ".join(g.choice(words, 2, replace=False))
        p = " ".join(g.choice(words, 3, replace=False)) + f" {i}"
        negs = [" ".join(g.choice(other, 3, replace=False)) + f" {i} {k}" for k in range(m)]
        out.append(TrainingSample("", q, p, negs))
    return out


def tiny_encoder(samples, seed=0, **kw):
    texts = [s.query for s in samples] + [t for s in samples for t in (s.positive, *s.hard_negatives)]
    return Encoder.from_texts(texts, seed=seed, **{"dim": 8, "layers": 1, "heads": 2, **kw})


def tiny_cfg(stage, **kw):
    loss = {"tau_cl": 0.1, "mrl_dims": (8, 4), "mrl_weights": (1.0, 0.3), **kw.pop("loss", {})}
    return StageConfig(stage, batch_size=kw.pop("batch_size", 6), learning_rate=kw.pop("learning_rate", 3e-3),
                       warmup_steps=kw.pop("warmup_steps", 2), epochs=kw.pop("epochs", 1), loss=loss, **kw)


class TestRunStage:
    def test_pretrain_loss_falls(self):
        samples = two_topic(40)
        enc = tiny_encoder(samples)
        log = run_stage(tiny_cfg("pretrain", epochs=30, batch_size=8), samples, enc).log
        assert len(log) == 150
        first, last = np.mean([r["loss"] for r in log[:10]]), np.mean([r["loss"] for r in log[-10:]])
        assert last < first

    def test_log_schema(self, tmp_path):
        samples = two_topic()
        run_stage(tiny_cfg("finetune"), samples, tiny_encoder(samples), log_path=tmp_path / "m.jsonl",
                  checkpoint_path=tmp_path / "c.bin")
        import json

        rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert set(rows[0]) == {"step", "loss", "cl", "kl", "lr"}
        assert rows[0]["kl"] is None and rows[0]["lr"] == pytest.approx(1.5e-3)
        assert (tmp_path / "c.bin").exists()

    def test_deterministic_to_the_bit(self, tmp_path):
        samples = two_topic()
        logs = []
        for name in ("a", "b"):
            logs.append(run_stage(tiny_cfg("finetune", epochs=2, seed=7), samples, tiny_encoder(samples),
                                  checkpoint_path=tmp_path / f"{name}.bin").log)
        assert logs[0] == logs[1]
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        other = run_stage(tiny_cfg("finetune", epochs=2, seed=8), samples, tiny_encoder(samples)).log
        assert other != logs[0]

    def test_pretrain_never_touches_negative_code(self, monkeypatch):
        calls, with_negs = {}, []

        def probe(name, fn):
            def wrapped(*a, **kw):
                calls[name] = calls.get(name, 0) + 1
                return fn(*a, **kw)
            return wrapped

        for name in ("synthetic_negatives", "mix_pairwise", "mix_listwise", "draw_mix_plan"):
            monkeypatch.setattr(objectives, name, probe(name, getattr(objectives, name)))
        monkeypatch.setattr(training, "contrastive_objective", probe("full", training.contrastive_objective))
        real_batch = training.assemble_batch

        def batch_spy(part, enc, with_negatives=True):
            with_negs.append(with_negatives)
            return real_batch(part, enc, with_negatives=with_negatives)

        monkeypatch.setattr(training, "assemble_batch", batch_spy)
        samples = two_topic(12, m=3)
        run_stage(tiny_cfg("pretrain"), samples, tiny_encoder(samples))
        assert calls == {} and with_negs == [False, False]
        # the control: fine-tuning does reach the mixing code
        run_stage(tiny_cfg("finetune"), samples, tiny_encoder(samples))
        assert calls["synthetic_negatives"] > 0 and calls["mix_pairwise"] > 0 and calls["full"] == 2

    def test_non_finite_loss_reports_step(self, monkeypatch):
        samples = two_topic()
        steps = iter(range(100))

        def bad(batch, cfg, rng=None, **kw):
            return torch.tensor(float("nan")) if next(steps) == 2 else objectives.contrastive_objective(batch, cfg, rng)

        monkeypatch.setattr(training, "contrastive_objective", bad)
        with pytest.raises(NumericError, match="step 2"):
            run_stage(tiny_cfg("finetune"), samples, tiny_encoder(samples))

    def test_distill_needs_teacher(self):
        samples = two_topic()
        with pytest.raises(ConfigError):
            run_stage(tiny_cfg("distill"), samples, tiny_encoder(samples))

    def test_distill_from_own_rows_starts_at_zero_kl(self):
        samples = two_topic()
        enc = tiny_encoder(samples).double()
        cache = build_teacher_cache(enc, samples)
        cfg = tiny_cfg("distill", loss={"mrl_dims": (), "mrl_weights": ()})
        log = run_stage(cfg, samples, enc, teacher=cache).log
        assert abs(log[0]["kl"]) < 1e-12
        assert log[0]["loss"] == pytest.approx(0.3 * log[0]["cl"] + 0.7 * log[0]["kl"], abs=1e-12)
        assert log[0]["loss"] == pytest.approx(0.3 * log[0]["cl"], abs=1e-12)


class TestTeacherCache:
    def test_self_distillation_identity(self):
        samples = two_topic(10)
        enc = tiny_encoder(samples, seed=3).double()
        cache = build_teacher_cache(enc, samples)
        with torch.no_grad():
            rows = student_score_rows(assemble_batch(samples, enc)).numpy()
        got = cache.batch_rows([str(i) for i in range(10)])
        assert np.allclose(got, rows, atol=1e-12, rtol=0)

    def teacher_file(self, tmp_path, samples, d=4, seed=0):
        g = np.random.default_rng(seed)
        recs = [{"sample_id": str(i), "q": g.standard_normal(d).tolist(), "pos": g.standard_normal(d).tolist(),
                 "negs": g.standard_normal((len(s.hard_negatives), d)).tolist()} for i, s in enumerate(samples)]
        write_jsonl(tmp_path / "t.jsonl", recs)
        return recs

    def test_external_file(self, tmp_path):
        samples = two_topic(9)
        recs = self.teacher_file(tmp_path, samples)
        cache = build_teacher_cache(read_teacher_embeddings(tmp_path / "t.jsonl"), samples)
        assert len(cache) == 9
        r = recs[4]
        want = [oracles.cos(r["q"], r["pos"])] + [oracles.cos(r["q"], n) for n in r["negs"]]
        assert np.allclose(cache.rows["4"], want, atol=1e-15)

    def test_locality(self, tmp_path):
        samples = two_topic(9)
        recs = self.teacher_file(tmp_path, samples)
        base = build_teacher_cache(read_teacher_embeddings(tmp_path / "t.jsonl"), samples)
        recs[6]["negs"][1][0] += 0.5
        write_jsonl(tmp_path / "t.jsonl", recs)
        moved = build_teacher_cache(read_teacher_embeddings(tmp_path / "t.jsonl"), samples)
        changed = [k for k in base.rows if not np.array_equal(base.rows[k], moved.rows[k])]
        assert changed == ["6"]

    def test_coverage_gaps_listed(self, tmp_path):
        samples = two_topic(5)
        recs = self.teacher_file(tmp_path, samples)
        write_jsonl(tmp_path / "t.jsonl", recs[:3])
        with pytest.raises(DataError, match=r"\['3', '4'\]"):
            build_teacher_cache(read_teacher_embeddings(tmp_path / "t.jsonl"), samples)
        cache = TeacherCache({"0": [1.0, 0.2, 0.1]})
        with pytest.raises(DataError):
            cache.check(samples)

    def test_frozen_and_round_trip(self, tmp_path):
        cache = TeacherCache({"a": [0.5, 0.25], "b": [0.1, -0.3]})
        with pytest.raises(ValueError):
            cache.rows["a"][0] = 2.0
        cache.save(tmp_path / "c.jsonl")
        back = TeacherCache.load(tmp_path / "c.jsonl")
        assert all(np.array_equal(back.rows[k], cache.rows[k]) for k in cache.rows)

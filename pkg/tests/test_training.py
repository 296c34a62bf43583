import json
import math
import struct

import numpy as np
import pytest

from tcen.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tcen.data import AsrRecord, SyntheticTaskSpec, gen_synthetic
from tcen.errors import ConfigError, DataError, NumericError
from tcen.model import ModelConfig, TcenModel
from tcen.numerics import Parameter
from tcen.optim import Adam, ScheduleConfig, clip_gradients, lrate
from tcen.training import (StageConfig, TaskRatios, TrainCorpora, Trainer, TrainingLog,
                           model_checkpoint, model_from_checkpoint, sample_task)


@pytest.fixture(scope="module")
def corpora():
    spec = SyntheticTaskSpec(vocab_size_src=5, vocab_size_trg=5, feature_dim=4,
                             frames_per_token=(3, 4), sentence_len=(2, 4), n_asr=16, n_mt=16,
                             n_st=16, n_dev=4, n_test=4, seed=4)
    return gen_synthetic(spec)


def tiny_model(seed=0, **kw):
    base = dict(feat_dim=4, d=6, att_dim=4, speech_layers=1, n_src=5, n_trg=8, seed=seed)
    base.update(kw)
    return TcenModel(ModelConfig(**base))


def train_corpora(c, noisy=()):
    return TrainCorpora(c.vocabs, asr=c.asr, mt=c.mt, st=c.st, dev=c.dev, mt_noisy=list(noisy))


def stage(name="finetune", steps=6, **kw):
    base = dict(steps=steps, batch_size=4, eval_every=3, schedule=ScheduleConfig(1.0, 6, 4))
    base.update(kw)
    return StageConfig(name, **base)


class TestRatios:
    def test_frequencies(self):
        r = TaskRatios({"st": 0.6, "asr": 0.2, "mt": 0.2})
        rng = np.random.default_rng(0)
        draws = [sample_task(r, rng) for _ in range(20_000)]
        for task, alpha in r.alpha.items():
            assert abs(draws.count(task) / len(draws) - alpha) < 0.015

    def test_zero_weight_never_drawn(self):
        r = TaskRatios({"asr": 0.0, "mt": 1.0})
        rng = np.random.default_rng(1)
        assert {sample_task(r, rng) for _ in range(100)} == {"mt"}

    @pytest.mark.parametrize("alpha", [{"asr": -1.0, "mt": 1.0}, {"asr": 0.0}, {"ocr": 1.0}])
    def test_invalid(self, alpha):
        with pytest.raises(ConfigError):
            TaskRatios(alpha)


class TestStageConfig:
    def test_defaults_per_stage(self):
        assert StageConfig("pretrain").ratios.alpha == {"asr": 0.2, "mt": 0.8}
        assert StageConfig("finetune").ratios.alpha == {"st": 0.6, "asr": 0.2, "mt": 0.2}

    def test_pretrain_cannot_train_st(self):
        with pytest.raises(ConfigError, match="pretrain"):
            StageConfig("pretrain", {"st": 1.0})

    def test_subset_allowed(self):
        assert StageConfig("finetune", {"st": 1.0}).ratios.tasks == ["st"]

    @pytest.mark.parametrize("kw", [{"stage": "warmup"}, {"dropout": 1.0}, {"clip_norm": 0.0},
                                    {"batch_size": 0}, {"noise_k": 2.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            StageConfig(**kw)

    def test_dict_roundtrip(self):
        s = stage()
        assert StageConfig(**s.to_dict()) == s


class TestSchedule:
    def test_formula(self):
        cfg = ScheduleConfig(10.0, 256, 25000)
        for n in (1, 6250, 25000, 100000):
            want = 10.0 / math.sqrt(256) * min(n ** -0.5, n * 25000 ** -1.5)
            assert abs(lrate(n, cfg) - want) <= 1e-12

    def test_peak_at_warmup(self):
        cfg = ScheduleConfig(1.0, 64, 400)
        assert lrate(399, cfg) < lrate(400, cfg) > lrate(401, cfg)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            lrate(0, ScheduleConfig())
        with pytest.raises(ConfigError):
            ScheduleConfig(warmup_n=0)


class TestOptimizer:
    def test_clip_scales_to_norm(self):
        p = Parameter(np.zeros(2))
        p.grad[:] = [3.0, 4.0]
        assert clip_gradients([("p", p)], 1.0) == pytest.approx(0.2)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)

    def test_clip_flat_buffer(self):
        p, q = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        opt = Adam([("p", p), ("q", q)])
        p.grad[:] = [3.0, 0.0]
        q.grad[:] = [4.0]
        clip_gradients(list(opt.params.items()), 2.5, opt.grad)
        np.testing.assert_allclose(np.concatenate([p.grad, q.grad]), [1.5, 0.0, 2.0])

    def test_non_finite_gradient_named(self):
        p = Parameter(np.zeros(2))
        p.grad[0] = np.nan
        with pytest.raises(NumericError, match="'w'"):
            clip_gradients([("w", p)], 1.0)

    def test_zero_lr_keeps_parameters(self):
        p = Parameter(np.ones(3))
        opt = Adam([("p", p)])
        p.grad[:] = 1.0
        opt.step(0.0)
        assert np.array_equal(p.data, np.ones(3))

    def test_first_step_moves_by_lr(self):
        p = Parameter(np.zeros(2))
        opt = Adam([("p", p)])
        p.grad[:] = [2.0, -0.5]
        opt.step(0.1)
        np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-8)

    def test_views_survive(self):
        p = Parameter(np.arange(6.0).reshape(2, 3))
        Adam([("p", p)])
        assert p.data.shape == (2, 3) and p.data[1, 2] == 5.0

    def test_state_roundtrip(self):
        p = Parameter(np.zeros(2))
        opt = Adam([("p", p)])
        p.grad[:] = 1.0
        opt.step(0.1)
        other = Adam([("p", Parameter(np.zeros(2)))])
        other.load_state_arrays(opt.state_arrays(), opt.t)
        assert other.t == 1 and np.array_equal(other.m["p"], opt.m["p"])
        with pytest.raises(DataError, match="adam.m.p"):
            other.load_state_arrays({}, 1)


class TestTrainer:
    def test_log_rows(self, corpora):
        t = Trainer(tiny_model(), train_corpora(corpora), stage(steps=7))
        log = t.run()
        assert [s for s, *_ in log.steps] == list(range(1, 8))
        assert [s for s, _ in log.evals] == [0, 3, 6, 7]
        assert {task for _, task, _, _ in log.steps} <= {"st", "asr", "mt"}
        assert all(lr == lrate(s, t.cfg.schedule) for s, _, _, lr in log.steps)

    def test_training_lowers_loss(self, corpora):
        cfg = stage(steps=80, eval_every=0, dropout=0.0, ratios={"st": 1.0},
                    schedule=ScheduleConfig(2.0, 6, 20))
        log = Trainer(tiny_model(), train_corpora(corpora), cfg).run()
        losses = [l for *_, l, _ in log.steps]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_unsupported_task(self, corpora):
        with pytest.raises(ConfigError, match="vanilla"):
            Trainer(tiny_model(arch="vanilla"), train_corpora(corpora), stage())

    def test_missing_corpus(self, corpora):
        tc = TrainCorpora(corpora.vocabs, st=corpora.st, dev=corpora.dev)
        with pytest.raises(DataError, match="'asr'"):
            Trainer(tiny_model(), tc, stage())

    def test_infeasible_asr_batch_is_skipped(self, corpora):
        # four frames leave one encoder step: no room for three labels
        short = [AsrRecord(np.zeros((4, 4)), ["s00", "s01", "s02"]) for _ in range(4)]
        tc = TrainCorpora(corpora.vocabs, asr=short, mt=corpora.mt)
        model = tiny_model()
        before = model_checkpoint(model).arrays["param.enc_pre.weight"].copy()
        log = Trainer(model, tc, stage("pretrain", steps=1, eval_every=0,
                                       ratios={"asr": 1.0})).run()
        assert math.isnan(log.steps[0][2])
        assert np.array_equal(model.enc_pre.weight.data, before)

    def test_noisy_mt_is_mixed(self, corpora):
        noisy = [type(r)(["-"] + r.source, r.target) for r in corpora.mt]
        t = Trainer(tiny_model(), train_corpora(corpora, noisy), stage(noise_k=0.5))
        assert t.streams["mt"].sampler.k == 0.5


class TestLogIO:
    def test_csv_roundtrip(self, corpora, tmp_path):
        log = Trainer(tiny_model(), train_corpora(corpora), stage(steps=4)).run()
        log.to_csv(tmp_path / "log.csv")
        back = TrainingLog.from_csv(tmp_path / "log.csv")
        assert back.steps == log.steps and back.evals == log.evals

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n")
        with pytest.raises(DataError, match="x.csv"):
            TrainingLog.from_csv(tmp_path / "x.csv")


class TestCheckpoint:
    def test_save_load_save_identical(self, corpora, tmp_path):
        t = Trainer(tiny_model(), train_corpora(corpora), stage(steps=3))
        t.run()
        t.save(tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_model_roundtrip(self, tmp_path):
        m = tiny_model(seed=3, tie=False)
        save_checkpoint(model_checkpoint(m), tmp_path / "m.ckpt")
        back = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
        assert back.config == m.config
        for (ka, a), (kb, b) in zip(m.named_parameters(), back.named_parameters()):
            assert ka == kb and np.array_equal(a.data, b.data)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 8)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(model_checkpoint(tiny_model()), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_version_mismatch(self, tmp_path):
        header = json.dumps({"version": 99}).encode()
        (tmp_path / "v.ckpt").write_bytes(b"TCENCKPT" + struct.pack("<I", len(header)) + header)
        with pytest.raises(DataError, match="version 99"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_shape_mismatch(self):
        ck = model_checkpoint(tiny_model())
        ck.config["d"] = 8
        with pytest.raises(DataError, match="shape"):
            model_from_checkpoint(ck)

    def test_wrong_kind(self):
        with pytest.raises(DataError, match="noiser"):
            model_from_checkpoint(Checkpoint("noiser", {}, {}))

    def test_stage_mismatch_on_resume(self, corpora, tmp_path):
        t = Trainer(tiny_model(), train_corpora(corpora), stage(steps=2))
        t.run()
        t.save(tmp_path / "t.ckpt")
        other = Trainer(tiny_model(), train_corpora(corpora), stage(steps=2, seed=9))
        with pytest.raises(DataError, match="stage configuration"):
            other.restore(load_checkpoint(tmp_path / "t.ckpt"))

    def test_resume_equals_uninterrupted(self, corpora, tmp_path):
        full = Trainer(tiny_model(), train_corpora(corpora), stage(steps=8))
        full.run()
        full.save(tmp_path / "full.ckpt")
        part = Trainer(tiny_model(), train_corpora(corpora), stage(steps=8))
        part.run(until=5)
        part.save(tmp_path / "part.ckpt")
        resumed = Trainer(tiny_model(), train_corpora(corpora), stage(steps=8))
        resumed.opt.data[:] = 0.0
        resumed.restore(load_checkpoint(tmp_path / "part.ckpt"))
        resumed.run()
        resumed.save(tmp_path / "resumed.ckpt")
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()

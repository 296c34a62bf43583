"""Two-stage multi-task training: task sampling, the step loop, evaluation
logging and resumable checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, load_parameters, save_checkpoint
from .data import AsrRecord, MtRecord, StRecord, Vocabs, batch_order, make_batch
from .errors import ConfigError, DataError
from .evaluation import token_accuracy
from .model import ModelConfig, TcenModel
from .numerics import Tape
from .optim import Adam, ScheduleConfig, clip_gradients, lrate
from .transforms import MixSampler, NoiseMixConfig

TASKS = ("asr", "mt", "st")
STAGE_TASKS = {"pretrain": {"asr", "mt"}, "finetune": {"asr", "mt", "st"}}
PRETRAIN_RATIOS = {"asr": 0.2, "mt": 0.8}
FINETUNE_RATIOS = {"st": 0.6, "asr": 0.2, "mt": 0.2}


@dataclass
class TaskRatios:
    alpha: dict[str, float]

    def __post_init__(self):
        self.alpha = {k: float(v) for k, v in self.alpha.items()}
        bad = set(self.alpha) - set(TASKS)
        if bad:
            raise ConfigError(f"unknown task(s) in ratios: {sorted(bad)}")
        if any(v < 0 or not math.isfinite(v) for v in self.alpha.values()):
            raise ConfigError(f"task ratios must be finite and non-negative, got {self.alpha}")
        if not any(v > 0 for v in self.alpha.values()):
            raise ConfigError("at least one task ratio must be positive")

    @property
    def tasks(self) -> list[str]:
        """Tasks with positive weight, in canonical order."""
        return [t for t in TASKS if self.alpha.get(t, 0.0) > 0]

    def cumulative(self) -> tuple[list[str], np.ndarray]:
        tasks = self.tasks
        w = np.array([self.alpha[t] for t in tasks])
        return tasks, np.cumsum(w / w.sum())


def sample_task(ratios: TaskRatios, rng: np.random.Generator) -> str:
    tasks, cum = ratios.cumulative()
    i = int(np.searchsorted(cum, rng.random(), side="right"))
    return tasks[min(i, len(tasks) - 1)]


@dataclass
class StageConfig:
    """One training stage.  ``noise_k`` is the probability an MT draw comes
    from the noisy corpus (used only when one is supplied)."""

    stage: str = "pretrain"
    ratios: TaskRatios = None  # type: ignore[assignment]
    steps: int = 3000
    batch_size: int = 16
    clip_norm: float = 5.0
    dropout: float = 0.1
    eval_every: int = 100
    noise_k: float = 0.3
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_TASKS:
            raise ConfigError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.ratios is None:
            self.ratios = TaskRatios(dict(PRETRAIN_RATIOS if self.stage == "pretrain" else FINETUNE_RATIOS))
        elif isinstance(self.ratios, dict):
            self.ratios = TaskRatios(self.ratios.get("alpha", self.ratios))
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        outside = set(self.ratios.tasks) - STAGE_TASKS[self.stage]
        if outside:
            raise ConfigError(f"{self.stage} stage cannot train {sorted(outside)}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise ConfigError("steps and eval_every must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        NoiseMixConfig(self.noise_k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = dict(self.ratios.alpha)
        return d


@dataclass
class TrainCorpora:
    vocabs: Vocabs
    asr: Sequence[AsrRecord] = ()
    mt: Sequence[MtRecord] = ()
    st: Sequence[StRecord] = ()
    dev: Sequence[StRecord] = ()
    mt_noisy: Sequence[MtRecord] = ()


# ---------------------------------------------------------------- log

@dataclass
class TrainingLog:
    steps: list[tuple[int, str, float, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)

    HEADER = ["step", "task", "loss", "lrate", "dev_token_accuracy"]

    def to_csv(self, path: str | Path) -> None:
        rows = [(s, 0, [s, t, repr(l), repr(lr), ""]) for s, t, l, lr in self.steps]
        rows += [(s, 1, [s, "eval", "", "", repr(a)]) for s, a in self.evals]
        rows.sort(key=lambda r: (r[0], r[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for _, _, row in rows:
                w.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != cls.HEADER:
                raise DataError(f"{path}: not a training log (header {header})")
            for lineno, row in enumerate(reader, start=2):
                try:
                    if row[1] == "eval":
                        log.evals.append((int(row[0]), float(row[4])))
                    else:
                        log.steps.append((int(row[0]), row[1], float(row[2]), float(row[3])))
                except (ValueError, IndexError):
                    raise DataError(f"{path}:{lineno}: malformed log row {row}") from None
        return log

    def to_meta(self) -> dict:
        return {"steps": [list(r) for r in self.steps], "evals": [list(r) for r in self.evals]}

    @classmethod
    def from_meta(cls, meta: dict) -> "TrainingLog":
        return cls([tuple(r) for r in meta["steps"]], [tuple(r) for r in meta["evals"]])


# ---------------------------------------------------------------- batch streams

class EpochStream:
    """Endless length-bucketed epochs over one corpus."""

    def __init__(self, records, batch_size: int, rng: np.random.Generator, vocabs: Vocabs):
        self.records, self.batch_size, self.rng, self.vocabs = records, batch_size, rng, vocabs
        self.order: list[list[int]] = []
        self.pos = 0
        self.epoch = 0

    def next(self):
        if self.pos >= len(self.order):
            self.order = batch_order(self.records, self.batch_size, self.rng)
            self.pos = 0
            self.epoch += 1
        group = self.order[self.pos]
        self.pos += 1
        return make_batch([self.records[i] for i in group], self.vocabs)

    def state(self) -> dict:
        return {"order": self.order, "pos": self.pos, "epoch": self.epoch,
                "rng": self.rng.bit_generator.state}

    def set_state(self, s: dict) -> None:
        self.order, self.pos, self.epoch = s["order"], s["pos"], s["epoch"]
        self.rng.bit_generator.state = s["rng"]


class MixStream:
    """MT batches drawn through the clean/noisy sampler."""

    def __init__(self, sampler: MixSampler, batch_size: int, vocabs: Vocabs):
        self.sampler, self.batch_size, self.vocabs = sampler, batch_size, vocabs

    def next(self):
        return make_batch(self.sampler.draw(self.batch_size), self.vocabs)

    def state(self) -> dict:
        return {"rng": self.sampler.rng.bit_generator.state}

    def set_state(self, s: dict) -> None:
        self.sampler.rng.bit_generator.state = s["rng"]


# ---------------------------------------------------------------- trainer

_STAGE_ID = {"pretrain": 1, "finetune": 2}


class Trainer:
    """Runs one stage step by step; every source of randomness is a seeded
    generator whose state goes into checkpoints, so a resumed run continues
    bit-exactly."""

    def __init__(self, model: TcenModel, corpora: TrainCorpora, cfg: StageConfig):
        self.model, self.corpora, self.cfg = model, corpora, cfg
        tasks = cfg.ratios.tasks
        unsupported = set(tasks) - set(model.config.tasks)
        if unsupported:
            raise ConfigError(f"arch {model.config.arch!r} cannot train {sorted(unsupported)}")
        for t in tasks:
            if not getattr(corpora, t):
                raise DataError(f"{cfg.stage} stage samples task {t!r} but its corpus is empty")
        if cfg.eval_every and not corpora.dev:
            raise DataError("evaluation requested but the dev set is empty")
        sid = _STAGE_ID[cfg.stage]
        self.rng = np.random.default_rng([cfg.seed, sid, 0])
        self.streams = {}
        for k, t in enumerate(TASKS, start=1):
            if t not in tasks:
                continue
            rng = np.random.default_rng([cfg.seed, sid, k])
            if t == "mt":
                noisy = list(corpora.mt_noisy)
                mix = NoiseMixConfig(cfg.noise_k if noisy else 0.0)
                self.streams[t] = MixStream(MixSampler(corpora.mt, noisy, mix, rng),
                                            cfg.batch_size, corpora.vocabs)
            else:
                self.streams[t] = EpochStream(getattr(corpora, t), cfg.batch_size, rng, corpora.vocabs)
        self.named = list(model.named_parameters())
        self.opt = Adam(self.named)
        self.step = 0
        self.log = TrainingLog()

    # -------------------------------------------------------- loop

    def evaluate(self) -> float:
        acc = token_accuracy(self.model, self.corpora.dev, self.corpora.vocabs, task="st")
        self.log.evals.append((self.step, acc))
        return acc

    def train_step(self) -> None:
        cfg = self.cfg
        n = self.step + 1
        self.model.train(cfg.dropout, self.rng)
        task = sample_task(cfg.ratios, self.rng)
        batch = self.streams[task].next()
        self.opt.zero_grad()
        lr = lrate(n, cfg.schedule)
        with Tape() as tape:
            result = self.model.task_loss(task, batch)
        if result.loss is None:
            loss = float("nan")     # every utterance infeasible: skip the update
        else:
            tape.backward(result.loss)
            clip_gradients(self.named, cfg.clip_norm, self.opt.grad)
            self.opt.step(lr)
            loss = result.loss.item()
        self.log.steps.append((n, task, loss, lr))
        self.step = n

    def run(self, until: int | None = None) -> TrainingLog:
        """Train up to step ``until`` (default: the configured total)."""
        end = self.cfg.steps if until is None else min(until, self.cfg.steps)
        every = self.cfg.eval_every
        if every and self.step == 0 and not self.log.evals:
            self.evaluate()
        while self.step < end:
            self.train_step()
            if every and (self.step % every == 0 or self.step == self.cfg.steps):
                self.evaluate()
        self.model.eval()
        return self.log

    # -------------------------------------------------------- checkpoints

    def checkpoint(self) -> Checkpoint:
        arrays = {f"param.{k}": p.data for k, p in self.named}
        arrays.update(self.opt.state_arrays())
        meta = {
            "stage": self.cfg.to_dict(),
            "step": self.step,
            "adam_t": self.opt.t,
            "rng": self.rng.bit_generator.state,
            "streams": {t: s.state() for t, s in sorted(self.streams.items())},
            "log": self.log.to_meta(),
        }
        return Checkpoint("tcen", asdict(self.model.config), arrays, meta)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.checkpoint(), path)

    def restore(self, ckpt: Checkpoint) -> None:
        meta = ckpt.meta
        if meta.get("stage") != self.cfg.to_dict():
            raise DataError("checkpoint was written by a different stage configuration")
        load_parameters(self.model, ckpt.arrays, prefix="param.")
        self.opt.load_state_arrays(ckpt.arrays, meta["adam_t"])
        self.rng.bit_generator.state = meta["rng"]
        for t, s in meta["streams"].items():
            self.streams[t].set_state(s)
        self.step = meta["step"]
        self.log = TrainingLog.from_meta(meta["log"])


def model_checkpoint(model: TcenModel) -> Checkpoint:
    arrays = {f"param.{k}": p.data for k, p in model.named_parameters()}
    return Checkpoint("tcen", asdict(model.config), arrays, {})


def model_from_checkpoint(ckpt: Checkpoint) -> TcenModel:
    if ckpt.kind != "tcen":
        raise DataError(f"expected a model checkpoint, found kind {ckpt.kind!r}")
    model = TcenModel(ModelConfig(**ckpt.config))
    load_parameters(model, {k: v for k, v in ckpt.arrays.items() if k.startswith("param.")},
                    prefix="param.")
    return model


def train_stage(model: TcenModel, corpora: TrainCorpora, cfg: StageConfig) -> TrainingLog:
    return Trainer(model, corpora, cfg).run()


def resume(path: str | Path, model: TcenModel, corpora: TrainCorpora, cfg: StageConfig) -> Trainer:
    trainer = Trainer(model, corpora, cfg)
    trainer.restore(load_checkpoint(path))
    return trainer

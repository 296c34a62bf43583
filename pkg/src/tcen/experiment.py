"""End-to-end seeded runs: noise pipeline, the compared systems and ablations."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .data import SyntheticCorpora, SyntheticTaskSpec, gen_synthetic
from .errors import ConfigError, DataError
from .evaluation import BeamConfig, BleuReport, bleu, emit_curves, token_accuracy, translate
from .model import ModelConfig, TcenModel
from .optim import ScheduleConfig
from .training import (FINETUNE_RATIOS, PRETRAIN_RATIOS, StageConfig, TrainCorpora, Trainer,
                       TrainingLog)
from .transforms import (NoiserConfig, NoiserModel, NoiserTrainConfig, build_path_dataset,
                         noise_corpus, train_noiser)

SYSTEMS = ("tcen", "many2many", "vanilla")
VARIANTS = ("full", "mt-noise-off", "weight-sharing-off", "pretrain-off")


@dataclass
class NoisePipelineConfig:
    """The CTC model whose greedy paths train the noiser, and the noiser itself."""

    ctc_steps: int = 400
    path_utterances: int = 600
    noiser_steps: int = 500
    sample: bool = False

    def __post_init__(self):
        if self.ctc_steps < 1 or self.path_utterances < 1 or self.noiser_steps < 1:
            raise ConfigError("noise pipeline step and utterance counts must be >= 1")


@dataclass
class ExperimentConfig:
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain_steps: int = 3000
    finetune_steps: int = 3000
    batch_size: int = 16
    eval_every: int = 100
    dropout: float = 0.1
    clip_norm: float = 5.0
    noise_k: float = 0.3
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    noise: NoisePipelineConfig = field(default_factory=NoisePipelineConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)

    def __post_init__(self):
        for name, cls in (("data", SyntheticTaskSpec), ("model", ModelConfig),
                          ("schedule", ScheduleConfig), ("noise", NoisePipelineConfig),
                          ("beam", BeamConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("stage step counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def stage(self, stage: str, seed: int, ratios: dict, steps: int, noise_k: float) -> StageConfig:
        return StageConfig(stage, dict(ratios), steps, self.batch_size, self.clip_norm, self.dropout,
                           self.eval_every, noise_k, self.schedule, seed)


@dataclass
class RunConfig(ExperimentConfig):
    """Everything a CLI run needs: the experiment settings plus the seed and
    an optional corpus directory (empty means "generate from ``data``")."""

    seed: int = 0
    corpus_dir: str = ""


def _check_value(default, value, where: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and len(value) == len(default)
        if ok:
            return tuple(_check_value(d, v, f"{where}[{i}]")
                         for i, (d, v) in enumerate(zip(default, value)))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {where!r}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def strict_from_dict(cls, raw: dict, where: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys and
    values whose type differs from the field default's."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {where or '<root>'!r} must be a mapping")
    base = cls()
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        default = getattr(base, key)
        if is_dataclass(default):
            kwargs[key] = strict_from_dict(type(default), value, path)
        else:
            kwargs[key] = _check_value(default, value, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (DataError, TypeError, ValueError) as exc:
        raise ConfigError(f"config section {where or '<root>'!r}: {exc}") from None


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to nested dict ``raw``; ``value`` is parsed as JSON
    when possible and kept as a string otherwise."""
    key, sep, text = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} must look like key.sub=value")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {part!r} is not a section")
    node[parts[-1]] = value


@dataclass
class SystemResult:
    name: str
    pretrain_log: TrainingLog | None
    finetune_log: TrainingLog
    dev_accuracy: float
    bleu: BleuReport | None
    seconds: float
    model: TcenModel = field(repr=False, default=None)  # type: ignore[assignment]


def corpora_for(cfg: ExperimentConfig, seed: int) -> SyntheticCorpora:
    return gen_synthetic(replace(cfg.data, seed=seed))


def model_config(cfg: ExperimentConfig, corpora: SyntheticCorpora, seed: int, **changes) -> ModelConfig:
    v = corpora.vocabs
    return replace(cfg.model, feat_dim=cfg.data.feature_dim, n_src=v.src.n_labels,
                   n_trg=len(v.trg), seed=seed, **changes)


def build_noiser(cfg: ExperimentConfig, corpora: SyntheticCorpora, seed: int) -> NoiserModel:
    """Train a CTC-only speech model, collect its greedy paths over part of
    the ASR corpus and fit the noiser to them."""
    nc = cfg.noise
    ctc_model = TcenModel(model_config(cfg, corpora, seed + 1000))
    stage = replace(cfg.stage("pretrain", seed + 1000, {"asr": 1.0}, nc.ctc_steps, 0.0), eval_every=0)
    Trainer(ctc_model, TrainCorpora(corpora.vocabs, asr=corpora.asr), stage).run()
    paths = build_path_dataset(ctc_model, corpora.asr[:nc.path_utterances], corpora.vocabs)
    ncfg = NoiserConfig(n_src=corpora.vocabs.src.n_labels, d=cfg.model.d, att_dim=cfg.model.att_dim,
                        seed=seed)
    tcfg = NoiserTrainConfig(steps=nc.noiser_steps, batch_size=cfg.batch_size,
                             clip_norm=cfg.clip_norm, dropout=cfg.dropout,
                             schedule=cfg.schedule, seed=seed)
    noiser, _ = train_noiser(paths, ncfg, tcfg)
    return noiser


def noisy_mt(cfg: ExperimentConfig, corpora: SyntheticCorpora, seed: int):
    noiser = build_noiser(cfg, corpora, seed)
    rng = np.random.default_rng([seed, 7])
    return noise_corpus(noiser, corpora.mt, corpora.vocabs, rng, cfg.noise.sample)


def run_system(cfg: ExperimentConfig, corpora: SyntheticCorpora, seed: int, system: str,
               variant: str = "full", mt_noisy=(), test_bleu: bool = True) -> SystemResult:
    """Pretrain (unless vanilla or ``pretrain-off``) then fine-tune one system."""
    if system not in SYSTEMS:
        raise ConfigError(f"system must be one of {SYSTEMS}, got {system!r}")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant != "full" and system != "tcen":
        raise ConfigError("ablation variants apply to the tcen system only")
    start = time.perf_counter()
    changes = {"arch": system}
    if variant == "weight-sharing-off":
        changes["tie"] = False
    model = TcenModel(model_config(cfg, corpora, seed, **changes))
    k = cfg.noise_k if system == "tcen" and variant != "mt-noise-off" else 0.0
    noisy = list(mt_noisy) if k > 0 else []
    tc = TrainCorpora(corpora.vocabs, asr=corpora.asr, mt=corpora.mt, st=corpora.st,
                      dev=corpora.dev, mt_noisy=noisy)
    pre_log = None
    if system != "vanilla" and variant != "pretrain-off" and cfg.pretrain_steps > 0:
        stage = cfg.stage("pretrain", seed, PRETRAIN_RATIOS, cfg.pretrain_steps, k)
        pre_log = Trainer(model, tc, stage).run()
    ratios = {"st": 1.0} if system == "vanilla" else FINETUNE_RATIOS
    stage = cfg.stage("finetune", seed, ratios, cfg.finetune_steps, k)
    log = Trainer(model, tc, stage).run()
    acc = log.evals[-1][1] if log.evals else token_accuracy(model, corpora.dev, corpora.vocabs)
    report = None
    if test_bleu:
        hyps = translate(model, "st", corpora.test, corpora.vocabs, cfg.beam)
        report = bleu(hyps, [r.target for r in corpora.test])
    name = system if variant == "full" else f"{system}:{variant}"
    return SystemResult(name, pre_log, log, acc, report, time.perf_counter() - start, model)


def run_comparison(cfg: ExperimentConfig, seed: int, systems=SYSTEMS, variants=("full",),
                   out: str | Path | None = None) -> dict[str, SystemResult]:
    """Every requested system (and tcen variant) on one seed's corpora."""
    corpora = corpora_for(cfg, seed)
    wants_noise = cfg.noise_k > 0 and "tcen" in systems and any(v != "mt-noise-off" for v in variants)
    mt_noisy = noisy_mt(cfg, corpora, seed) if wants_noise else []
    results = {}
    for system in systems:
        for variant in (variants if system == "tcen" else ("full",)):
            r = run_system(cfg, corpora, seed, system, variant, mt_noisy)
            results[r.name] = r
    if out is not None:
        write_results(results, out)
    return results


def write_results(results: dict[str, SystemResult], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, r in results.items():
        tag = name.replace(":", "_")
        r.finetune_log.to_csv(out / f"{tag}.finetune.csv")
        if r.pretrain_log is not None:
            r.pretrain_log.to_csv(out / f"{tag}.pretrain.csv")
        if r.bleu is not None:
            (out / f"{tag}.bleu.json").write_text(r.bleu.to_json() + "\n")
    emit_curves([(n, r.finetune_log) for n, r in results.items()], out / "curves.csv")

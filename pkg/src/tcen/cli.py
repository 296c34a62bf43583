"""Command-line entry point: ``tcen <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (JSON run config), repeated
``--set key.sub=value`` overrides, ``--seed`` and ``--out``.  The resolved
config is written to ``<out>/config.json``.  Exit codes: 0 success, 1 usage
or config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SyntheticCorpora, Vocabs, Vocabulary, gen_synthetic, read_corpus,
                   write_corpus)
from .errors import ConfigError, DataError, NumericError, TcenError
from .evaluation import bleu, emit_curves, token_accuracy, translate
from .experiment import (VARIANTS, RunConfig, apply_override, build_noiser, model_config,
                         run_comparison, strict_from_dict)
from .model import TcenModel
from .runtime import tune_allocator
from .training import (FINETUNE_RATIOS, PRETRAIN_RATIOS, TrainCorpora, Trainer, TrainingLog,
                       model_checkpoint, model_from_checkpoint)
from .transforms import noise_corpus, noiser_checkpoint, noiser_from_checkpoint

SPLITS = ("asr", "mt", "st", "dev", "test")
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config and files

def resolve_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"{args.config}: cannot read config ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    for assignment in args.set or []:
        apply_override(raw, assignment)
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "data", None):
        raw["corpus_dir"] = str(args.data)
    return strict_from_dict(RunConfig, raw)


def echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def write_corpora(corpora: SyntheticCorpora, out: Path) -> None:
    for split in SPLITS:
        write_corpus(getattr(corpora, split), out / f"{split}.jsonl")
    corpora.vocabs.src.save(out / "vocab.src")
    corpora.vocabs.trg.save(out / "vocab.trg")


def read_corpora(cfg: RunConfig) -> SyntheticCorpora:
    """Corpora from ``cfg.corpus_dir``, or generated from ``cfg.data`` with ``cfg.seed``."""
    if not cfg.corpus_dir:
        return gen_synthetic(replace(cfg.data, seed=cfg.seed))
    root = Path(cfg.corpus_dir)
    if not root.is_dir():
        raise DataError(f"{root}: corpus directory does not exist")
    vocabs = Vocabs(Vocabulary.load(root / "vocab.src"), Vocabulary.load(root / "vocab.trg"))
    splits = {}
    for split in SPLITS:
        path = root / f"{split}.jsonl"
        splits[split] = read_corpus(path) if path.exists() else []
    return SyntheticCorpora(vocabs=vocabs, **splits)


def _read_noisy(path) -> list:
    return read_corpus(path) if path else []


def _load_model(path) -> TcenModel:
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> None:
    write_corpora(gen_synthetic(replace(cfg.data, seed=cfg.seed)), out)


def _train(args, cfg: RunConfig, out: Path, stage: str) -> None:
    corpora = read_corpora(cfg)
    noisy = _read_noisy(args.noisy)
    if stage == "pretrain" or args.init is None:
        model = TcenModel(model_config(cfg, corpora, cfg.seed))
    else:
        model = _load_model(args.init)
    arch = model.config.arch
    if stage == "pretrain":
        ratios, steps = PRETRAIN_RATIOS, cfg.pretrain_steps
    else:
        ratios, steps = ({"st": 1.0} if arch == "vanilla" else FINETUNE_RATIOS), cfg.finetune_steps
    k = cfg.noise_k if noisy else 0.0
    tc = TrainCorpora(corpora.vocabs, asr=corpora.asr, mt=corpora.mt, st=corpora.st,
                      dev=corpora.dev, mt_noisy=noisy)
    trainer = Trainer(model, tc, cfg.stage(stage, cfg.seed, ratios, steps, k))
    if args.resume:
        trainer.restore(load_checkpoint(args.resume))
    every = args.save_every
    while every and trainer.step < steps:
        trainer.run(until=trainer.step + every - trainer.step % every)
        trainer.save(out / f"trainer.step{trainer.step}.ckpt")
    trainer.run()
    trainer.save(out / "trainer.ckpt")
    save_checkpoint(model_checkpoint(model), out / "model.ckpt")
    trainer.log.to_csv(out / "log.csv")


def cmd_pretrain(args, cfg, out):
    _train(args, cfg, out, "pretrain")


def cmd_finetune(args, cfg, out):
    _train(args, cfg, out, "finetune")


def cmd_train_noiser(args, cfg: RunConfig, out: Path) -> None:
    noiser = build_noiser(cfg, read_corpora(cfg), cfg.seed)
    save_checkpoint(noiser_checkpoint(noiser), out / "noiser.ckpt")


def cmd_noise_corpus(args, cfg: RunConfig, out: Path) -> None:
    corpora = read_corpora(cfg)
    noiser = noiser_from_checkpoint(load_checkpoint(args.noiser))
    rng = np.random.default_rng([cfg.seed, 7])
    write_corpus(noise_corpus(noiser, corpora.mt, corpora.vocabs, rng, cfg.noise.sample),
                 out / "mt_noisy.jsonl")


def cmd_decode(args, cfg: RunConfig, out: Path) -> None:
    corpora = read_corpora(cfg)
    model = _load_model(args.model)
    hyps = translate(model, "st", getattr(corpora, args.split), corpora.vocabs, cfg.beam)
    (out / f"{args.split}.hyp").write_text("".join(" ".join(h) + "\n" for h in hyps))


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> None:
    corpora = read_corpora(cfg)
    records = getattr(corpora, args.split)
    report = {}
    if args.hyps:
        lines = Path(args.hyps).read_text().splitlines()
        report["bleu"] = asdict(bleu(lines, [r.target for r in records]))
    if args.model:
        report["token_accuracy"] = token_accuracy(_load_model(args.model), records, corpora.vocabs)
    if not report:
        raise ConfigError("evaluate needs --hyps and/or --model")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    (out / f"{args.split}.eval.json").write_text(text)
    sys.stdout.write(text)


def cmd_curves(args, cfg: RunConfig, out: Path) -> None:
    logs = []
    for item in args.log:
        label, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--log {item!r} must look like label=path")
        logs.append((label, TrainingLog.from_csv(path)))
    emit_curves(logs, out / "curves.csv")


def cmd_ablate(args, cfg: RunConfig, out: Path) -> None:
    results = run_comparison(cfg, cfg.seed, systems=("tcen",), variants=("full", args.variant),
                             out=out)
    summary = {name: {"dev_token_accuracy": r.dev_accuracy,
                      "bleu": r.bleu.score if r.bleu else None} for name, r in results.items()}
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    (out / "summary.json").write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")

    data = _Parser(add_help=False)
    data.add_argument("--data", type=Path, help="corpus directory (default: generate from config)")

    parser = _Parser(prog="tcen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write synthetic corpora")
    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, parents=[common, data], help=f"{name} stage")
        p.add_argument("--noisy", type=Path, help="noised MT corpus to mix in")
        p.add_argument("--resume", type=Path, help="trainer checkpoint to continue from")
        p.add_argument("--save-every", type=int, default=0, help="checkpoint interval in steps")
        if name == "finetune":
            p.add_argument("--init", type=Path, help="model checkpoint (default: random init)")
    sub.add_parser("train-noiser", parents=[common, data], help="train the CTC-path noiser")
    p = sub.add_parser("noise-corpus", parents=[common, data], help="noise the MT sources")
    p.add_argument("--noiser", type=Path, required=True)
    p = sub.add_parser("decode", parents=[common, data], help="beam-search translate a split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--split", choices=("dev", "test", "st"), default="test")
    p = sub.add_parser("evaluate", parents=[common, data], help="BLEU and/or token accuracy")
    p.add_argument("--hyps", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--split", choices=("dev", "test", "st"), default="test")
    p = sub.add_parser("curves", parents=[common], help="merge dev-accuracy logs")
    p.add_argument("--log", action="append", required=True, metavar="LABEL=PATH")
    p = sub.add_parser("ablate", parents=[common, data], help="full tcen vs. one ablation")
    p.add_argument("--variant", choices=[v for v in VARIANTS if v != "full"], required=True)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "train-noiser": cmd_train_noiser, "noise-corpus": cmd_noise_corpus, "decode": cmd_decode,
    "evaluate": cmd_evaluate, "curves": cmd_curves, "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        if not argv:
            raise ConfigError(parser.format_usage().strip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError(parser.format_usage().strip())
        cfg = resolve_config(args)
        out = Path(args.out)
        echo_config(cfg, out)
        tune_allocator()
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"tcen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"tcen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"tcen: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TcenError as exc:
        print(f"tcen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())

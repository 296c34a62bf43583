"""Inference and scoring: beam search, corpus BLEU, teacher-forced token
accuracy and learning-curve tables."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import MtRecord, Record, StRecord, Vocabs, make_batch
from .errors import ConfigError, DataError
from .model.layers import EncoderOutput
from .numerics import Tensor, no_tape


# ---------------------------------------------------------------- beam search

@dataclass
class BeamConfig:
    """``normalize="add"`` ranks finished hypotheses by ``logprob + w * len``;
    ``"div"`` uses ``logprob / len**w`` instead.  Lengths count the end token."""

    beam: int = 10
    length_weight: float = 0.2
    max_len: int = 40
    normalize: str = "add"

    def __post_init__(self):
        if self.beam < 1 or self.max_len < 1:
            raise ConfigError("beam and max_len must be >= 1")
        if self.normalize not in ("add", "div"):
            raise ConfigError(f"normalize must be 'add' or 'div', got {self.normalize!r}")

    def final_score(self, logprob: float, length: int) -> float:
        if self.normalize == "add":
            return logprob + self.length_weight * length
        return logprob / max(length, 1) ** self.length_weight


@dataclass
class Hypothesis:
    tokens: list[int]       # without bos/eos
    logprob: float
    score: float
    truncated: bool         # max_len reached before the end token
    finished_at: int


def _select_rows(state, rows: np.ndarray):
    return [(Tensor(h.data[rows]), Tensor(c.data[rows])) for h, c in state]


def beam_search(model, task: str, record: Record, vocabs: Vocabs, cfg: BeamConfig) -> Hypothesis:
    """Beam search over ``model.decode_step`` for one ``st`` or ``mt`` record.

    Candidates are ranked by cumulative log-probability; a candidate ending
    in the end token leaves the beam and is scored with ``cfg.final_score``.
    Search ends when no live hypothesis remains or ``max_len`` tokens have
    been produced (remaining live hypotheses are then finished with the
    truncation flag).  Ties go to the earlier finisher, then to the
    lexicographically smaller token sequence.
    """
    trg = vocabs.trg
    model.eval()
    with no_tape():
        batch = make_batch([record], vocabs)
        memory = model.encode(task, batch)
        _, attention = model.route(task)
        keys, mask_add = attention.prepare(memory)
        live_tokens: list[list[int]] = [[]]
        live_lp = np.zeros(1)
        decoder = model.route(task)[0]
        state = decoder.initial_state(1)
        prev = np.array([trg.bos_id])
        finished: list[Hypothesis] = []
        for step in range(1, cfg.max_len + 1):
            n = len(live_tokens)
            rows = np.zeros(n, dtype=int)
            mem = EncoderOutput(Tensor(memory.states.data[rows]), memory.lengths[rows])
            prepared = (Tensor(keys.data[rows]), mask_add[rows])
            state, log_dist, _ = model.decode_step(task, state, prev, mem, prepared)
            cand = live_lp[:, None] + log_dist.data
            flat = cand.ravel()
            # stable sort on -score: ties fall to the lower (hypothesis, token) index
            order = np.argsort(-flat, kind="stable")[:cfg.beam]
            parents, toks = np.divmod(order, cand.shape[1])
            keep_parent, keep_tok, keep_lp = [], [], []
            for p, t, lp in zip(parents, toks, flat[order]):
                seq = live_tokens[p] + [int(t)]
                if t == trg.eos_id:
                    finished.append(Hypothesis(seq[:-1], float(lp), cfg.final_score(float(lp), len(seq)),
                                               False, step))
                else:
                    keep_parent.append(p)
                    keep_tok.append(int(t))
                    keep_lp.append(lp)
            if not keep_parent:
                break
            rows = np.array(keep_parent)
            state = _select_rows(state, rows)
            live_tokens = [live_tokens[p] + [t] for p, t in zip(keep_parent, keep_tok)]
            live_lp = np.array(keep_lp)
            prev = np.array(keep_tok)
        else:
            for seq, lp in zip(live_tokens, live_lp):
                finished.append(Hypothesis(seq, float(lp), cfg.final_score(float(lp), len(seq)),
                                           True, cfg.max_len))
    return min(finished, key=lambda h: (-h.score, h.finished_at, h.tokens))


def translate(model, task: str, records: Sequence[Record], vocabs: Vocabs,
              cfg: BeamConfig) -> list[list[str]]:
    return [vocabs.trg.decode(beam_search(model, task, r, vocabs, cfg).tokens) for r in records]


# ---------------------------------------------------------------- BLEU

@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _tokens(x) -> list[str]:
    return (x.split() if isinstance(x, str) else [str(t) for t in x])


def _ngrams(toks: list[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> BleuReport:
    """Corpus-level BLEU (one reference per sentence), case-folded, no smoothing.

    Any zero n-gram precision gives a score of 0.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise DataError("BLEU needs at least one sentence")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = [t.lower() for t in _tokens(hyp)]
        r = [t.lower() for t in _tokens(ref)]
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(match, total)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


# ---------------------------------------------------------------- accuracy

def token_accuracy(model, records: Sequence[StRecord | MtRecord], vocabs: Vocabs,
                   task: str = "st", batch_size: int = 50) -> float:
    """Teacher-forced next-token top-1 accuracy over all non-pad target positions."""
    if not records:
        raise DataError("token accuracy needs a non-empty dev set")
    hits = total = 0
    model.eval()
    with no_tape():
        for lo in range(0, len(records), batch_size):
            b = make_batch(list(records[lo:lo + batch_size]), vocabs)
            logits = model.teacher_forced_logits(task, b).data
            pred = logits.argmax(axis=-1)
            mask = b.target_mask > 0
            hits += int((pred == b.target_out)[mask].sum())
            total += int(mask.sum())
    return hits / total if total else 0.0


# ---------------------------------------------------------------- curves

def emit_curves(logs: Sequence[tuple[str, "object"]], path: str | Path) -> None:
    """Wide CSV: ``step`` then one dev-accuracy column per labelled log.

    Every log must have been evaluated at the same steps.
    """
    labels = [label for label, _ in logs]
    series = [log.evals for _, log in logs]
    steps = [s for s, _ in series[0]] if series else []
    for label, ev in zip(labels, series):
        if [s for s, _ in ev] != steps:
            raise DataError(f"log {label!r} was evaluated at different steps than {labels[0]!r}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + labels)
        for i, s in enumerate(steps):
            w.writerow([s] + [repr(ev[i][1]) for ev in series])

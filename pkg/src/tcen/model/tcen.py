"""Tandem speech/text encoders with an attention decoder, plus baseline layouts.

``arch`` selects what gets built from the shared pieces:

* ``tcen``: speech encoder -> text encoder -> decoder.  The source
  embedding table doubles as the CTC classification matrix unless
  ``tie=False``.
* ``vanilla``: speech encoder -> decoder, trained on ST data only.
* ``many2many``: speech and text encoders, an attention ASR decoder and a
  target decoder shared by MT and ST, with one attention module per task.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..ctc import ctc_loss_batch
from ..data import Batch
from ..errors import ConfigError, DataError
from ..numerics import (
    Parameter,
    Tensor,
    embedding,
    gather,
    log_softmax,
    matmul,
    mean,
    reshape,
    tanh,
    transpose,
    tsum,
)
from .layers import AdditiveAttention, BiLstm, Decoder, EncoderOutput, Linear, Module, glorot

ARCHS = ("tcen", "vanilla", "many2many")
TASKS = ("asr", "mt", "st")
ASR_SPECIALS = 3  # the attention ASR decoder reuses the target-side pad/bos/eos ids 0/1/2


@dataclass
class ModelConfig:
    """Network shape.

    Defaults are sized for a few minutes of CPU training.  A full-size
    configuration would be closer to ``speech_layers=5, d=1024, dec_layers=2``.
    """

    arch: str = "tcen"
    feat_dim: int = 12
    d: int = 64
    att_dim: int = 64
    speech_layers: int = 2
    text_layers: int = 1
    dec_layers: int = 1
    n_src: int = 30
    n_trg: int = 33
    tie: bool = True
    downsample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("feat_dim", "d", "att_dim", "speech_layers", "text_layers", "dec_layers",
                     "n_src", "n_trg", "downsample"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.d % 2:
            raise ConfigError("model.d must be even (two recurrent directions of d/2)")

    @property
    def tasks(self) -> tuple[str, ...]:
        return ("st",) if self.arch == "vanilla" else TASKS


class SourceTable(Module):
    """Source embedding matrix with ``n_src + 1`` rows; the last row is the blank.

    When tied, ``classifier`` *is* ``embedding``: one storage read through
    two roles.
    """

    def __init__(self, rows: int, d: int, tie: bool, rng: np.random.Generator):
        self.embedding = Parameter(glorot(rng, (rows, d), rows, d))
        self.classifier = self.embedding if tie else Parameter(glorot(rng, (rows, d), rows, d))

    @property
    def tied(self) -> bool:
        return self.classifier is self.embedding

    def lookup(self, ids: np.ndarray) -> Tensor:
        return embedding(self.embedding, ids)

    def logits(self, states: Tensor) -> Tensor:
        return matmul(states, transpose(self.classifier))


class LossResult(NamedTuple):
    loss: Tensor | None     # None when every example was skipped
    tokens: int             # normalizer: target tokens (MT/ST/attention-ASR) or CTC utterances
    skipped: int            # infeasible CTC examples dropped from the batch


class TcenModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.enc_pre = Linear(c.downsample * c.feat_dim, c.d, rng)
        self.enc_body = BiLstm(c.d, c.d, c.speech_layers, rng)
        if c.arch != "vanilla":
            self.src = SourceTable(c.n_src + 1, c.d, c.tie and c.arch == "tcen", rng)
            self.enc_t = BiLstm(c.d, c.d, c.text_layers, rng)
        self.att = AdditiveAttention(c.d, c.d, c.att_dim, rng)
        self.dec = Decoder(c.n_trg, c.d, c.dec_layers, rng)
        if c.arch == "many2many":
            self.att_st = AdditiveAttention(c.d, c.d, c.att_dim, rng)
            self.asr_att = AdditiveAttention(c.d, c.d, c.att_dim, rng)
            self.asr_dec = Decoder(c.n_src + ASR_SPECIALS, c.d, c.dec_layers, rng)
        self.calls: Counter = Counter()

    # ------------------------------------------------------------ encoders

    def encode_pre(self, frames: np.ndarray, lengths: np.ndarray) -> EncoderOutput:
        """Stack ``downsample`` consecutive frames (zero-padding the last window) -> affine -> tanh."""
        n, steps, dim = frames.shape
        k = self.config.downsample
        if steps == 0 or np.any(np.asarray(lengths) <= 0):
            raise DataError("the front end needs at least one frame per utterance")
        if dim != self.config.feat_dim:
            raise DataError(f"feature dim {dim} != configured {self.config.feat_dim}")
        out_steps = -(-steps // k)
        if out_steps * k != steps:
            frames = np.concatenate([frames, np.zeros((n, out_steps * k - steps, dim))], axis=1)
        stacked = Tensor(frames.reshape(n, out_steps, k * dim))
        out_lengths = -(-np.asarray(lengths, dtype=int) // k)
        return EncoderOutput(tanh(self.enc_pre(stacked)), out_lengths)

    def speech_encode(self, frames: np.ndarray, lengths: np.ndarray) -> EncoderOutput:
        pre = self.encode_pre(frames, lengths)
        states = self.enc_body(self.drop(pre.states), pre.lengths)
        return EncoderOutput(self.drop(states), pre.lengths)

    def embed_source(self, ids: np.ndarray, lengths: np.ndarray) -> EncoderOutput:
        """Rows of the (possibly tied) source table; blank ids use the last row."""
        return EncoderOutput(self.drop(self.src.lookup(ids)), np.asarray(lengths))

    def text_encode(self, inp: EncoderOutput) -> EncoderOutput:
        """Same code path whether ``inp`` holds speech-encoder states or embeddings."""
        if inp.states.shape[-1] != self.config.d:
            raise DataError(f"text encoder input width {inp.states.shape[-1]} != d={self.config.d}")
        self.calls["text_encode"] += 1
        return EncoderOutput(self.drop(self.enc_t(inp.states, inp.lengths)), inp.lengths)

    def ctc_head(self, hs: EncoderOutput) -> Tensor:
        """Log-probabilities ``(B, T', n_src + 1)`` from the classifier role of the source table."""
        return log_softmax(self.src.logits(hs.states), axis=-1)

    # ------------------------------------------------------------ routing

    def encode(self, task: str, batch: Batch) -> EncoderOutput:
        """Memory the decoder attends over for ``task`` (``mt`` or ``st``; ``asr`` for many2many)."""
        arch = self.config.arch
        if task == "st":
            hs = self.speech_encode(batch.frames, batch.frame_lengths)
            return hs if arch in ("vanilla", "many2many") else self.text_encode(hs)
        if task == "mt":
            return self.text_encode(self.embed_source(batch.source, batch.source_lengths))
        if task == "asr" and arch == "many2many":
            return self.speech_encode(batch.frames, batch.frame_lengths)
        raise ConfigError(f"no decoder route for task {task!r} in arch {arch!r}")

    def route(self, task: str) -> tuple[Decoder, AdditiveAttention]:
        if self.config.arch == "many2many":
            return {"asr": (self.asr_dec, self.asr_att), "mt": (self.dec, self.att),
                    "st": (self.dec, self.att_st)}[task]
        return self.dec, self.att

    def decode_step(self, task: str, state, y_prev: np.ndarray, memory: EncoderOutput,
                    prepared=None):
        """One decoder step: returns ``(state, log_dist, attention_weights)``."""
        decoder, attention = self.route(task)
        if prepared is None:
            prepared = attention.prepare(memory)
        state, weights = decoder.step(state, y_prev, memory, attention, prepared)
        return state, log_softmax(decoder.out(state[-1][0]), axis=-1), weights

    # ------------------------------------------------------------ losses

    def _check_schema(self, task: str, batch: Batch) -> None:
        if task not in self.config.tasks:
            raise ConfigError(f"arch {self.config.arch!r} does not train task {task!r}")
        if batch.task != task:
            raise DataError(f"batch holds {batch.task!r} records, expected {task!r}")

    def teacher_forced_logits(self, task: str, batch: Batch) -> Tensor:
        decoder, attention = self.route(task)
        memory = self.encode(task, batch)
        target_in = batch.target_in
        if task == "asr":
            target_in = _asr_targets(batch)[0]
        return decoder.teacher_forced(memory, target_in, attention)

    def task_loss(self, task: str, batch: Batch) -> LossResult:
        """Mean CTC loss per utterance (TCEN ASR) or token-averaged cross-entropy."""
        self._check_schema(task, batch)
        if task == "asr" and self.config.arch == "tcen":
            hs = self.speech_encode(batch.frames, batch.frame_lengths)
            losses, feasible = ctc_loss_batch(self.ctc_head(hs), hs.lengths, batch.labels)
            skipped = int((~feasible).sum())
            if losses is None:
                return LossResult(None, 0, skipped)
            return LossResult(mean(losses), int(feasible.sum()), skipped)

        logits = self.teacher_forced_logits(task, batch)
        if task == "asr":
            _, target_out, mask = _asr_targets(batch)
        else:
            target_out, mask = batch.target_out, batch.target_mask
        return LossResult(*token_nll(logits, target_out, mask), 0)


def token_nll(logits: Tensor, target_out: np.ndarray, mask: np.ndarray) -> tuple[Tensor, int]:
    n, steps = target_out.shape
    picked = gather(log_softmax(logits, axis=-1), target_out[:, :, None], axis=2)
    ntok = int(mask.sum())
    nll = tsum(reshape(picked, (n, steps)) * Tensor(mask)) * (-1.0 / max(ntok, 1))
    return nll, ntok


def _asr_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention-ASR targets: labels shifted past the pad/bos/eos ids."""
    ys = [[y + ASR_SPECIALS for y in lab] for lab in batch.labels]
    width = max(len(y) for y in ys) + 1
    target_in = np.zeros((len(ys), width), dtype=int)
    target_out = np.zeros((len(ys), width), dtype=int)
    mask = np.zeros((len(ys), width))
    for k, y in enumerate(ys):
        target_in[k, :len(y) + 1] = [1] + y
        target_out[k, :len(y) + 1] = y + [2]
        mask[k, :len(y) + 1] = 1.0
    return target_in, target_out, mask


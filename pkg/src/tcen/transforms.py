"""Length-consistency tools: run-length transform of CTC paths, the noiser
model that turns clean sentences into CTC-path-like sequences, and the
clean/noisy MT sampler.

A CTC path ``[a, a, -, b]`` is written as unique runs ``u = [a, -, b]`` with
repetition counts ``l = [2, 1, 1]``.  The noiser is trained on such pairs
(taken from greedy decodes of a CTC model) to predict, from a clean source
sentence, the next run token and its count at the same step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_parameters
from .ctc import greedy_decode
from .data import AsrRecord, MtRecord, Vocabs, make_batch
from .errors import ConfigError, DataError
from .model.layers import AdditiveAttention, BiLstm, Decoder, EncoderOutput, Linear, Module, glorot
from .model.tcen import token_nll
from .numerics import NEG, Parameter, Tape, Tensor, embedding, no_tape
from .optim import Adam, ScheduleConfig, clip_gradients, lrate


class NoiserTruncationWarning(RuntimeWarning):
    """A noised path hit the length cap and was cut short."""


# ---------------------------------------------------------------- run-length transform

@dataclass(frozen=True)
class RleSequence:
    u: tuple[int, ...]
    l: tuple[int, ...]  # noqa: E741

    def __post_init__(self):
        object.__setattr__(self, "u", tuple(int(x) for x in self.u))
        object.__setattr__(self, "l", tuple(int(x) for x in self.l))
        if len(self.u) != len(self.l):
            raise DataError(f"run tokens ({len(self.u)}) and counts ({len(self.l)}) differ in length")
        if any(n < 1 for n in self.l):
            raise DataError(f"repetition counts must be >= 1, got {list(self.l)}")
        for k in range(1, len(self.u)):
            if self.u[k] == self.u[k - 1]:
                raise DataError(f"runs {k - 1} and {k} repeat token {self.u[k]}; the expansion "
                                "would merge them and could not be inverted")

    @property
    def frames(self) -> int:
        return sum(self.l)


def rle_encode(path: Sequence[int]) -> RleSequence:
    if len(path) == 0:
        raise DataError("cannot run-length encode an empty path")
    u, l = [int(path[0])], [1]  # noqa: E741
    for tok in path[1:]:
        if tok == u[-1]:
            l[-1] += 1
        else:
            u.append(int(tok))
            l.append(1)
    return RleSequence(u, l)


def rle_decode(r: RleSequence) -> list[int]:
    out: list[int] = []
    for tok, n in zip(r.u, r.l):
        out.extend([tok] * n)
    return out


# ---------------------------------------------------------------- path dataset

@dataclass
class PathRecord:
    labels: list[int]
    u: list[int]
    l: list[int]  # noqa: E741

    @property
    def rle(self) -> RleSequence:
        return RleSequence(self.u, self.l)


@dataclass
class PathDataset:
    records: list[PathRecord]
    n_labels: int

    def __len__(self) -> int:
        return len(self.records)

    @property
    def frames_per_label(self) -> float:
        labels = sum(len(r.labels) for r in self.records)
        return sum(sum(r.l) for r in self.records) / max(labels, 1)


def build_path_dataset(model, corpus: Sequence[AsrRecord], vocabs: Vocabs,
                       batch_size: int = 64) -> PathDataset:
    """Greedy CTC paths of ``model`` over ``corpus``, stored run-length encoded."""
    if not corpus:
        raise DataError("cannot build a path dataset from an empty ASR corpus")
    records = []
    model.eval()
    with no_tape():
        for lo in range(0, len(corpus), batch_size):
            chunk = list(corpus[lo:lo + batch_size])
            b = make_batch(chunk, vocabs)
            hs = model.speech_encode(b.frames, b.frame_lengths)
            logp = model.ctc_head(hs).data
            for k, rec in enumerate(chunk):
                rle = rle_encode(greedy_decode(logp[k, :hs.lengths[k]]))
                records.append(PathRecord(b.labels[k], list(rle.u), list(rle.l)))
    return PathDataset(records, vocabs.src.n_labels)


# ---------------------------------------------------------------- noiser

@dataclass
class NoiserConfig:
    """Shape of the noiser.

    Token ids: ``0..n_src-1`` real labels, ``n_src`` the blank, ``n_src + 1``
    an end marker that doubles as the start input.  Counts above
    ``max_rep`` are clamped.  ``frames_per_label`` is learned from the path
    dataset and sets the decoding cap.
    """

    n_src: int = 30
    d: int = 64
    att_dim: int = 64
    layers: int = 1
    max_rep: int = 20
    frames_per_label: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_src, self.d, self.att_dim, self.layers, self.max_rep) <= 0:
            raise ConfigError("noiser sizes must be positive")
        if self.d % 2:
            raise ConfigError("noiser.d must be even")

    @property
    def end_id(self) -> int:
        return self.n_src + 1


class NoiserModel(Module):
    """Encoder over clean source ids; decoder with a token head and a repetition head.

    Both heads read the same decoder state.  The decoder input at each step
    is the sum of the previous run's token and count embeddings.
    """

    def __init__(self, config: NoiserConfig):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        self.src_embed = Parameter(glorot(rng, (c.n_src, c.d), c.n_src, c.d))
        self.enc = BiLstm(c.d, c.d, c.layers, rng)
        self.att = AdditiveAttention(c.d, c.d, c.att_dim, rng)
        self.dec = Decoder(c.n_src + 2, c.d, c.layers, rng)
        self.rep_embed = Parameter(glorot(rng, (c.max_rep + 1, c.d), c.max_rep + 1, c.d))
        self.rep_head = Linear(c.d, c.max_rep, rng)

    def encode(self, ids: np.ndarray, lengths: np.ndarray) -> EncoderOutput:
        x = self.drop(embedding(self.src_embed, ids))
        return EncoderOutput(self.drop(self.enc(x, lengths)), np.asarray(lengths))

    def loss(self, batch: "NoiserBatch") -> Tensor:
        """Token cross-entropy per run (plus end) + count cross-entropy per run."""
        memory = self.encode(batch.source, batch.source_lengths)
        inputs = embedding(self.dec.embed, batch.in_tok) + embedding(self.rep_embed, batch.in_rep)
        z = self.drop(self.dec.run(memory, inputs, self.att))
        tok_loss, _ = token_nll(self.dec.out(z), batch.out_tok, batch.tok_mask)
        rep_loss, _ = token_nll(self.rep_head(z), batch.out_rep, batch.rep_mask)
        return tok_loss + rep_loss


@dataclass
class NoiserBatch:
    source: np.ndarray
    source_lengths: np.ndarray
    in_tok: np.ndarray
    in_rep: np.ndarray
    out_tok: np.ndarray
    out_rep: np.ndarray    # class index: count - 1
    tok_mask: np.ndarray
    rep_mask: np.ndarray


def make_noiser_batch(records: Sequence[PathRecord], config: NoiserConfig) -> NoiserBatch:
    n = len(records)
    src_len = np.array([len(r.labels) for r in records])
    runs = np.array([len(r.u) for r in records])
    source = np.zeros((n, max(src_len.max(), 1)), dtype=int)
    width = runs.max() + 1
    in_tok = np.zeros((n, width), dtype=int)
    in_rep = np.zeros((n, width), dtype=int)
    out_tok = np.zeros((n, width), dtype=int)
    out_rep = np.zeros((n, width), dtype=int)
    tok_mask = np.zeros((n, width))
    rep_mask = np.zeros((n, width))
    end = config.end_id
    for k, r in enumerate(records):
        counts = [min(c, config.max_rep) for c in r.l]
        m = len(r.u)
        source[k, :len(r.labels)] = r.labels
        in_tok[k, :m + 1] = [end] + list(r.u)
        in_rep[k, :m + 1] = [0] + counts
        out_tok[k, :m + 1] = list(r.u) + [end]
        out_rep[k, :m] = [c - 1 for c in counts]
        tok_mask[k, :m + 1] = 1.0
        rep_mask[k, :m] = 1.0
    return NoiserBatch(source, src_len, in_tok, in_rep, out_tok, out_rep, tok_mask, rep_mask)


@dataclass
class NoiserTrainConfig:
    steps: int = 800
    batch_size: int = 16
    clip_norm: float = 5.0
    dropout: float = 0.1
    schedule: ScheduleConfig = None  # type: ignore[assignment]
    seed: int = 0

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = ScheduleConfig()
        elif isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("noiser training needs steps >= 0 and batch_size >= 1")


def train_noiser(dataset: PathDataset, config: NoiserConfig | None = None,
                 train: NoiserTrainConfig | None = None) -> tuple[NoiserModel, list[float]]:
    """Fit a noiser to ``dataset``; returns the model and per-step losses."""
    if not len(dataset):
        raise DataError("cannot train the noiser on an empty path dataset")
    for i, r in enumerate(dataset.records):
        try:
            r.rle
        except DataError as exc:
            raise DataError(f"path record {i}: {exc}") from None
    train = train or NoiserTrainConfig()
    config = replace(config or NoiserConfig(n_src=dataset.n_labels),
                     frames_per_label=dataset.frames_per_label)
    if config.n_src != dataset.n_labels:
        raise ConfigError(f"noiser n_src={config.n_src} but the dataset has {dataset.n_labels} labels")
    model = NoiserModel(config)
    rng = np.random.default_rng(train.seed)
    model.train(train.dropout, rng)
    named = list(model.named_parameters())
    opt = Adam(named)
    losses = []
    order: list[int] = []
    for step in range(1, train.steps + 1):
        if len(order) < train.batch_size:
            order += rng.permutation(len(dataset)).tolist()
        picked, order = order[:train.batch_size], order[train.batch_size:]
        batch = make_noiser_batch([dataset.records[i] for i in picked], config)
        opt.zero_grad()
        with Tape() as tape:
            loss = model.loss(batch)
        tape.backward(loss)
        clip_gradients(named, train.clip_norm, opt.grad)
        opt.step(lrate(step, train.schedule))
        losses.append(loss.item())
    model.eval()
    return model, losses


@dataclass
class NoisedPath:
    path: list[int]
    rle: RleSequence
    truncated: bool


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def noise_sentences(model: NoiserModel, sentences: Sequence[Sequence[int]],
                    rng: np.random.Generator | None = None, sample: bool = False,
                    batch_size: int = 256) -> list[NoisedPath]:
    """Decode run tokens and counts for each clean sentence, then expand.

    Greedy by default (ties to the lowest id); ``sample=True`` draws from the
    heads with ``rng``.  A token equal to the previous run's token is never
    chosen, and the end marker is not allowed first, so every output is a
    valid non-empty run sequence.  Decoding stops at the end marker or at a
    cap of ``3 * frames_per_label * len(y)`` frames.
    """
    if sample and rng is None:
        raise ConfigError("sampled noising needs an rng")
    c = model.config
    out: list[NoisedPath] = []
    model.eval()
    with no_tape():
        for lo in range(0, len(sentences), batch_size):
            chunk = [list(s) for s in sentences[lo:lo + batch_size]]
            out += _noise_chunk(model, chunk, rng, sample)
    n_cut = sum(p.truncated for p in out)
    if n_cut:
        warnings.warn(f"{n_cut} noised path(s) reached the length cap "
                      f"(3 x {c.frames_per_label:.2f} frames per label)", NoiserTruncationWarning)
    return out


def _noise_chunk(model: NoiserModel, chunk, rng, sample) -> list[NoisedPath]:
    c = model.config
    if any(len(s) == 0 for s in chunk):
        raise DataError("cannot noise an empty sentence")
    n = len(chunk)
    lengths = np.array([len(s) for s in chunk])
    ids = np.zeros((n, lengths.max()), dtype=int)
    for k, s in enumerate(chunk):
        ids[k, :len(s)] = s
    caps = np.array([max(1, math.ceil(3 * c.frames_per_label * len(s))) for s in chunk])
    memory = model.encode(ids, lengths)
    prepared = model.att.prepare(memory)
    state = model.dec.initial_state(n)
    prev_tok = np.full(n, c.end_id)
    prev_rep = np.zeros(n, dtype=int)
    runs: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    used = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    truncated = np.zeros(n, dtype=bool)
    for _ in range(int(caps.max()) + 1):
        emb = Tensor(model.dec.embed.data[prev_tok] + model.rep_embed.data[prev_rep])
        state, _ = model.dec.step(state, emb, memory, model.att, prepared)
        z = state[-1][0]
        tok_logits = model.dec.out(z).data.copy()
        rep_logits = model.rep_head(z).data
        rows = np.arange(n)
        first = prev_tok == c.end_id
        tok_logits[rows[~first], prev_tok[~first]] = NEG
        tok_logits[first, c.end_id] = NEG
        if sample:
            tok = np.array([rng.choice(tok_logits.shape[1], p=p) for p in _softmax_rows(tok_logits)])
            rep = np.array([rng.choice(c.max_rep, p=p) for p in _softmax_rows(rep_logits)]) + 1
        else:
            tok = tok_logits.argmax(axis=1)
            rep = rep_logits.argmax(axis=1) + 1
        for k in np.flatnonzero(~done):
            if tok[k] == c.end_id:
                done[k] = True
                continue
            count = int(min(rep[k], caps[k] - used[k]))
            runs[k].append((int(tok[k]), count))
            used[k] += count
            if used[k] >= caps[k]:
                done[k] = True
                truncated[k] = True
        if done.all():
            break
        prev_tok, prev_rep = tok, rep
    result = []
    for k in range(n):
        rle = RleSequence([t for t, _ in runs[k]], [m for _, m in runs[k]])
        result.append(NoisedPath(rle_decode(rle), rle, bool(truncated[k])))
    return result


def apply_noiser(model: NoiserModel, y: Sequence[int], rng: np.random.Generator | None = None,
                 sample: bool = False) -> NoisedPath:
    return noise_sentences(model, [y], rng, sample)[0]


def noise_corpus(model: NoiserModel, records: Sequence[MtRecord], vocabs: Vocabs,
                 rng: np.random.Generator | None = None, sample: bool = False) -> list[MtRecord]:
    """MT pairs whose sources are replaced by noised CTC-path sequences."""
    ys = [vocabs.src.encode(r.source) for r in records]
    paths = noise_sentences(model, ys, rng, sample)
    return [MtRecord(vocabs.src.decode(p.path), list(r.target)) for p, r in zip(paths, records)]


# ---------------------------------------------------------------- mixing

@dataclass
class NoiseMixConfig:
    k: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.k <= 1.0:
            raise ConfigError(f"mixing probability k must lie in [0, 1], got {self.k}")


class MixSampler:
    """Draws MT pairs: noisy with probability ``k``, uniformly within the chosen corpus."""

    def __init__(self, clean: Sequence[MtRecord], noisy: Sequence[MtRecord],
                 cfg: NoiseMixConfig, rng: np.random.Generator):
        if cfg.k > 0 and not noisy:
            raise DataError("mixing probability k > 0 but the noisy MT corpus is empty")
        if cfg.k < 1 and not clean:
            raise DataError("mixing probability k < 1 but the clean MT corpus is empty")
        self.clean, self.noisy, self.k, self.rng = list(clean), list(noisy), cfg.k, rng

    def draw_flags(self, n: int) -> tuple[list[MtRecord], np.ndarray]:
        """``n`` independent draws plus a boolean array marking the noisy ones."""
        flags = self.rng.random(n) < self.k
        i_clean = self.rng.integers(0, max(len(self.clean), 1), size=n)
        i_noisy = self.rng.integers(0, max(len(self.noisy), 1), size=n)
        recs = [self.noisy[j] if f else self.clean[i] for f, i, j in zip(flags, i_clean, i_noisy)]
        return recs, flags

    def draw(self, n: int) -> list[MtRecord]:
        return self.draw_flags(n)[0]


def mix_corpora(clean: Sequence[MtRecord], noisy: Sequence[MtRecord], cfg: NoiseMixConfig,
                rng: np.random.Generator) -> MixSampler:
    return MixSampler(clean, noisy, cfg, rng)


# ---------------------------------------------------------------- persistence

def noiser_checkpoint(model: NoiserModel) -> Checkpoint:
    arrays = {f"param.{k}": p.data for k, p in model.named_parameters()}
    return Checkpoint("noiser", asdict(model.config), arrays, {})


def noiser_from_checkpoint(ckpt: Checkpoint) -> NoiserModel:
    if ckpt.kind != "noiser":
        raise DataError(f"expected a noiser checkpoint, found kind {ckpt.kind!r}")
    try:
        model = NoiserModel(NoiserConfig(**ckpt.config))
    except TypeError as exc:
        raise DataError(f"noiser checkpoint config is invalid ({exc})") from None
    load_parameters(model, ckpt.arrays, prefix="param.")
    model.eval()
    return model

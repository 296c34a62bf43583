"""Synthetic ASR/MT/ST corpora, vocabularies, JSONL storage and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import DataError

BLANK = "-"
PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
MAX_FRAMES = 3000
DOWNSAMPLE = 4


# ---------------------------------------------------------------- vocabulary

@dataclass
class Vocabulary:
    """Ordered token list; ids are positions.

    A source vocabulary carries the blank as its final entry, so the blank id
    equals the number of real labels.  A target vocabulary starts with the
    pad/bos/eos specials.
    """

    tokens: list[str]
    kind: str = "source"

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        if self.kind == "source":
            if self.tokens[-1:] != [BLANK] or self.tokens.count(BLANK) != 1:
                raise DataError("source vocabulary must end with the blank token")
        elif self.kind == "target":
            if self.tokens[:3] != [PAD, BOS, EOS] or BLANK in self._index:
                raise DataError("target vocabulary must start with <pad> <bos> <eos> and has no blank")
        else:
            raise DataError(f"unknown vocabulary kind {self.kind!r}")

    @classmethod
    def source(cls, words: Sequence[str]) -> "Vocabulary":
        return cls(list(words) + [BLANK], "source")

    @classmethod
    def target(cls, words: Sequence[str]) -> "Vocabulary":
        return cls([PAD, BOS, EOS] + list(words), "target")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._index

    @property
    def n_labels(self) -> int:
        """Real labels, i.e. without the blank (source) or the specials (target)."""
        return len(self.tokens) - 1 if self.kind == "source" else len(self.tokens) - 3

    @property
    def blank_id(self) -> int:
        return self._index[BLANK]

    pad_id = property(lambda self: self._index[PAD])
    bos_id = property(lambda self: self._index[BOS])
    eos_id = property(lambda self: self._index[EOS])

    def encode(self, toks: Iterable[str]) -> list[int]:
        try:
            return [self._index[t] for t in toks]
        except KeyError as e:
            raise DataError(f"token {e.args[0]!r} not in {self.kind} vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        toks = Path(path).read_text().splitlines()
        kind = "target" if toks[:1] == [PAD] else "source"
        try:
            return cls(toks, kind)
        except DataError as e:
            raise DataError(f"{path}: {e}") from None


@dataclass
class Vocabs:
    src: Vocabulary
    trg: Vocabulary


# ---------------------------------------------------------------- records

@dataclass
class AsrRecord:
    frames: np.ndarray
    transcript: list[str]


@dataclass
class MtRecord:
    source: list[str]
    target: list[str]


@dataclass
class StRecord:
    frames: np.ndarray
    target: list[str]


Record = Union[AsrRecord, MtRecord, StRecord]
_SCHEMAS = {
    frozenset({"frames", "transcript"}): AsrRecord,
    frozenset({"source", "target"}): MtRecord,
    frozenset({"frames", "target"}): StRecord,
}


def validate(rec: Record, max_frames: int = MAX_FRAMES) -> None:
    frames = getattr(rec, "frames", None)
    if frames is not None:
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise DataError(f"frames must be a nonempty (T, D) array, got shape {frames.shape}")
        if frames.shape[0] > max_frames:
            raise DataError(f"utterance has {frames.shape[0]} frames, more than {max_frames}")
        if not np.all(np.isfinite(frames)):
            raise DataError("frames contain non-finite values")


def source_length(rec: Record) -> int:
    if isinstance(rec, MtRecord):
        return len(rec.source)
    return int(rec.frames.shape[0])


def _fmt_frames(frames: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join("%.17g" % v for v in row) + "]" for row in frames) + "]"


def record_to_json(rec: Record) -> str:
    parts = []
    for name in rec.__dataclass_fields__:
        value = getattr(rec, name)
        body = _fmt_frames(value) if name == "frames" else json.dumps(list(value))
        parts.append(f'"{name}": {body}')
    return "{" + ", ".join(parts) + "}"


def record_from_obj(obj: dict) -> Record:
    cls = _SCHEMAS.get(frozenset(obj))
    if cls is None:
        raise DataError(f"unknown record fields {sorted(obj)}")
    kwargs = {}
    for k, v in obj.items():
        if k == "frames":
            kwargs[k] = np.asarray(v, dtype=np.float64)
        elif not isinstance(v, list) or not all(isinstance(t, str) for t in v):
            raise DataError(f"field {k!r} must be a list of token strings")
        else:
            kwargs[k] = list(v)
    rec = cls(**kwargs)
    validate(rec)
    return rec


def write_corpus(records: Iterable[Record], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_corpus(path: str | Path) -> list[Record]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_obj(json.loads(line)))
            except (json.JSONDecodeError, DataError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return out


# ---------------------------------------------------------------- synthetic generation

@dataclass
class SyntheticTaskSpec:
    """Desk-scale stand-in for the ASR/MT/ST corpora.

    Each source token owns a fixed "pronunciation" (a run of feature
    vectors); utterances concatenate pronunciations and add Gaussian noise.
    Targets map every source token through a fixed dictionary and, with
    ``reorder``, swap adjacent pairs.  Sentences come from a sparse random
    bigram chain so a decoder has some language structure to learn.
    """

    vocab_size_src: int = 30
    vocab_size_trg: int = 30
    feature_dim: int = 12
    frames_per_token: tuple[int, int] = (6, 10)
    noise_sigma: float = 0.6
    reorder: bool = True
    sentence_len: tuple[int, int] = (3, 7)
    bigram_concentration: float = 0.3
    n_asr: int = 2000
    n_mt: int = 5000
    n_st: int = 500
    n_dev: int = 100
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        self.frames_per_token = tuple(self.frames_per_token)
        self.sentence_len = tuple(self.sentence_len)
        ints = [self.vocab_size_src, self.vocab_size_trg, self.feature_dim, *self.frames_per_token,
                *self.sentence_len, self.n_asr, self.n_mt, self.n_st, self.n_dev, self.n_test]
        if min(ints) <= 0 or self.noise_sigma < 0 or self.bigram_concentration <= 0:
            raise DataError("synthetic corpus sizes must be positive")
        if self.frames_per_token[0] > self.frames_per_token[1] or self.sentence_len[0] > self.sentence_len[1]:
            raise DataError("ranges must be (low, high) with low <= high")
        if self.n_mt < self.n_st:
            raise DataError("the MT corpus must be at least as large as the ST corpus")
        if self.frames_per_token[1] * self.sentence_len[1] > MAX_FRAMES:
            raise DataError(f"longest utterance would exceed {MAX_FRAMES} frames")


@dataclass
class SyntheticCorpora:
    asr: list[AsrRecord]
    mt: list[MtRecord]
    st: list[StRecord]
    dev: list[StRecord]
    test: list[StRecord]
    vocabs: Vocabs
    codebook: list[np.ndarray] = field(repr=False, default_factory=list)


def gen_synthetic(spec: SyntheticTaskSpec) -> SyntheticCorpora:
    if spec.vocab_size_trg < spec.vocab_size_src:
        raise DataError(f"target vocabulary ({spec.vocab_size_trg}) too small for a one-to-one "
                        f"map of {spec.vocab_size_src} source tokens")
    rng = np.random.default_rng(spec.seed)
    n_src = spec.vocab_size_src
    src_words = [f"s{i:02d}" for i in range(n_src)]
    trg_words = [f"t{i:02d}" for i in range(spec.vocab_size_trg)]
    vocabs = Vocabs(Vocabulary.source(src_words), Vocabulary.target(trg_words))

    lo, hi = spec.frames_per_token
    durations = rng.integers(lo, hi + 1, size=n_src)
    codebook = [rng.normal(size=(int(n), spec.feature_dim)) for n in durations]
    dictionary = rng.permutation(spec.vocab_size_trg)[:n_src]
    start = np.full(n_src, 1.0 / n_src)
    bigram = rng.dirichlet(np.full(n_src, spec.bigram_concentration), size=n_src)

    sizes = [spec.n_asr, spec.n_mt, spec.n_st, spec.n_dev, spec.n_test]
    seen: set[tuple[int, ...]] = set()
    pools: list[list[tuple[int, ...]]] = []
    for size in sizes:
        pool = []
        attempts = 0
        while len(pool) < size:
            attempts += 1
            if attempts > 50 * size + 1000:
                raise DataError("could not draw enough distinct sentences; enlarge the vocabulary or lengths")
            n = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
            sent = [int(rng.choice(n_src, p=start))]
            for _ in range(n - 1):
                sent.append(int(rng.choice(n_src, p=bigram[sent[-1]])))
            key = tuple(sent)
            if key not in seen:
                seen.add(key)
                pool.append(key)
        pools.append(pool)

    def speak(sent):
        frames = np.concatenate([codebook[k] for k in sent])
        if spec.noise_sigma > 0:
            frames = frames + rng.normal(scale=spec.noise_sigma, size=frames.shape)
        return frames

    def translate(sent):
        out = [trg_words[dictionary[k]] for k in sent]
        if spec.reorder:
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        return out

    words = lambda sent: [src_words[k] for k in sent]  # noqa: E731
    asr = [AsrRecord(speak(s), words(s)) for s in pools[0]]
    mt = [MtRecord(words(s), translate(s)) for s in pools[1]]
    st, dev, test = ([StRecord(speak(s), translate(s)) for s in pool] for pool in pools[2:])
    return SyntheticCorpora(asr, mt, st, dev, test, vocabs, codebook)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    """Padded arrays for one task.  Masks are 1.0 at real positions, 0.0 at padding."""

    task: str
    size: int
    frames: np.ndarray | None = None          # (B, T, D)
    frame_lengths: np.ndarray | None = None   # (B,)
    source: np.ndarray | None = None          # (B, S) source ids
    source_lengths: np.ndarray | None = None
    labels: list[list[int]] | None = None     # transcripts for CTC
    target_in: np.ndarray | None = None       # (B, K) bos + y
    target_out: np.ndarray | None = None      # (B, K) y + eos
    target_mask: np.ndarray | None = None     # (B, K)

    @property
    def frame_mask(self) -> np.ndarray:
        return (np.arange(self.frames.shape[1])[None, :] < self.frame_lengths[:, None]).astype(float)

    @property
    def source_mask(self) -> np.ndarray:
        return (np.arange(self.source.shape[1])[None, :] < self.source_lengths[:, None]).astype(float)


def task_of(rec: Record) -> str:
    return {AsrRecord: "asr", MtRecord: "mt", StRecord: "st"}[type(rec)]


def _pad_ids(seqs: Sequence[Sequence[int]], fill: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=int)
    out = np.full((len(seqs), max(lengths.max(initial=0), 1)), fill, dtype=int)
    for k, s in enumerate(seqs):
        out[k, :len(s)] = s
    return out, lengths


def make_batch(records: Sequence[Record], vocabs: Vocabs, pad_to: int | None = None) -> Batch:
    """Collate same-task records; ``pad_to`` forces a wider padded dimension."""
    if not records:
        raise DataError("cannot build an empty batch")
    task = task_of(records[0])
    if any(task_of(r) != task for r in records):
        raise DataError("batch mixes record types")
    b = Batch(task=task, size=len(records))
    if task in ("asr", "st"):
        lengths = np.array([r.frames.shape[0] for r in records], dtype=int)
        width = max(int(lengths.max()), pad_to or 0)
        frames = np.zeros((len(records), width, records[0].frames.shape[1]))
        for k, r in enumerate(records):
            frames[k, :lengths[k]] = r.frames
        b.frames, b.frame_lengths = frames, lengths
    if task == "asr":
        b.labels = [vocabs.src.encode(r.transcript) for r in records]
    if task == "mt":
        ids = [vocabs.src.encode(r.source) for r in records]
        b.source, b.source_lengths = _pad_ids(ids, 0)
        if pad_to and pad_to > b.source.shape[1]:
            b.source = np.pad(b.source, ((0, 0), (0, pad_to - b.source.shape[1])))
    if task in ("mt", "st"):
        trg = vocabs.trg
        ys = [trg.encode(r.target) for r in records]
        b.target_in, _ = _pad_ids([[trg.bos_id] + y for y in ys], trg.pad_id)
        b.target_out, lengths = _pad_ids([y + [trg.eos_id] for y in ys], trg.pad_id)
        b.target_mask = (np.arange(b.target_out.shape[1])[None, :] < lengths[:, None]).astype(float)
    return b


def batch_order(records: Sequence[Record], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """One epoch of index groups: length-sorted buckets of ``4 * batch_size``,
    shuffled inside each bucket, cut into batches, batch order shuffled."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(records)
    jitter = rng.permutation(n)
    lengths = np.array([source_length(records[i]) for i in jitter])
    ordered = jitter[np.argsort(lengths, kind="stable")]
    bucket = 4 * batch_size
    groups = []
    for lo in range(0, n, bucket):
        chunk = ordered[lo:lo + bucket].copy()
        rng.shuffle(chunk)
        groups += [chunk[i:i + batch_size].tolist() for i in range(0, len(chunk), batch_size)]
    return [groups[i] for i in rng.permutation(len(groups))]


def batchify(records: Sequence[Record], batch_size: int, rng: np.random.Generator,
             vocabs: Vocabs) -> Iterator[Batch]:
    for group in batch_order(records, batch_size, rng):
        yield make_batch([records[i] for i in group], vocabs)

"""Feature files, vocabularies, batching and synthetic desk-scale tasks.

The ``SGNF`` feature format (little-endian)::

    b"SGNF" | version u32 = 1 | F u32 | N u32
    N x ( id_len u16 | id utf-8 | T u32 | T*F float32 | L u32 | L x u32 )
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .model import BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS

FEATURE_MAGIC = b"SGNF"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """Malformed binary or text input; carries the byte offset (or line)."""

    def __init__(self, message: str, offset: Optional[int] = None):
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")
        self.offset = offset


@dataclass
class Sample:
    id: str
    frames: np.ndarray  # [T, F] float32
    target: List[int]


@dataclass
class FeatureDataset:
    sequences: List[Sample]
    vocab: List[str] = field(default_factory=lambda: list(RESERVED_TOKENS))
    feature_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.feature_dim is None and self.sequences:
            self.feature_dim = int(self.sequences[0].frames.shape[1])

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def validate(self) -> None:
        for s in self.sequences:
            if s.frames.ndim != 2 or s.frames.shape[0] < 1:
                raise ValueError(f"sample {s.id}: frames must be [T>=1, F], got {s.frames.shape}")
            if s.frames.shape[1] != self.feature_dim:
                raise ValueError(f"sample {s.id}: feature dim {s.frames.shape[1]} != {self.feature_dim}")
            if self.vocab and any(t < 0 or t >= len(self.vocab) for t in s.target):
                raise ValueError(f"sample {s.id}: target id outside vocabulary of size {len(self.vocab)}")

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.vocab[i] for i in ids]


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_features(path, dataset: FeatureDataset) -> None:
    """Serialise frames and targets (the vocabulary goes to a separate file)."""
    f = dataset.feature_dim if dataset.feature_dim is not None else 0
    parts = [FEATURE_MAGIC, struct.pack("<III", FEATURE_VERSION, f, len(dataset.sequences))]
    for s in dataset.sequences:
        frames = np.ascontiguousarray(s.frames, dtype="<f4")
        if frames.ndim != 2 or frames.shape[1] != f:
            raise ValueError(f"sample {s.id}: frames {frames.shape} inconsistent with F={f}")
        name = s.id.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValueError(f"sample id too long ({len(name)} bytes)")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", frames.shape[0]))
        parts.append(frames.tobytes())
        parts.append(struct.pack("<I", len(s.target)))
        parts.append(np.asarray(s.target, dtype="<u4").tobytes())
    _atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated input while reading {what} (need {n} bytes, {len(self.buf) - self.pos} left)",
                              self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count, what), dtype=dtype).copy()

    def string(self, length_fmt: str, what: str) -> str:
        (n,) = self.unpack(length_fmt, what + " length")
        start = self.pos
        raw = self.take(n, what)
        try:
            return bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}", start) from exc


def read_features(path, vocab: Optional[Sequence[str]] = None) -> FeatureDataset:
    """Load an ``SGNF`` file; every error reports the failing byte offset."""
    r = _Reader(Path(path).read_bytes())
    magic = bytes(r.take(4, "magic"))
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    version, f, n = r.unpack("<III", "header")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    seqs = []
    for _ in range(n):
        sid = r.string("<H", "sequence id")
        (t,) = r.unpack("<I", "frame count")
        frames = r.array("<f4", t * f, f"frames of {sid!r}").astype(np.float32).reshape(t, f)
        (length,) = r.unpack("<I", "target length")
        target = r.array("<u4", length, f"target of {sid!r}").astype(np.int64).tolist()
        seqs.append(Sample(sid, frames, target))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return FeatureDataset(seqs, list(vocab) if vocab is not None else list(RESERVED_TOKENS), f)


def read_vocab(path) -> List[str]:
    """One token per line; ids follow line order; lines 0-3 are reserved."""
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
        raise FormatError(f"vocabulary must start with reserved tokens {', '.join(RESERVED_TOKENS)}")
    seen = {}
    for line_no, tok in enumerate(tokens):
        if tok in seen:
            raise FormatError(f"duplicate token {tok!r} on lines {seen[tok] + 1} and {line_no + 1}")
        seen[tok] = line_no
    return tokens


def write_vocab(path, tokens: Sequence[str]) -> None:
    _atomic_write(path, ("\n".join(tokens) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: List[str]
    frames: np.ndarray  # [B, T, F]
    src_mask: np.ndarray  # [B, T] float32, 1 = real frame
    tgt_in: np.ndarray  # [B, L] BOS + target, PAD-filled
    tgt_out: np.ndarray  # [B, L] target + EOS, PAD-filled
    targets: List[List[int]]

    @property
    def src_lengths(self) -> np.ndarray:
        return self.src_mask.sum(axis=1).astype(np.int64)

    @property
    def causal_mask(self) -> np.ndarray:
        n = self.tgt_in.shape[1]
        return np.tril(np.ones((n, n), dtype=np.float32))

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[Sample]) -> Batch:
    b = len(samples)
    t = max(s.frames.shape[0] for s in samples)
    f = samples[0].frames.shape[1]
    length = max(len(s.target) for s in samples) + 1
    frames = np.zeros((b, t, f), dtype=np.float32)
    mask = np.zeros((b, t), dtype=np.float32)
    tgt_in = np.full((b, length), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(samples):
        n = s.frames.shape[0]
        frames[i, :n] = s.frames
        mask[i, :n] = 1.0
        seq = list(s.target)
        tgt_in[i, : len(seq) + 1] = [BOS_ID] + seq
        tgt_out[i, : len(seq) + 1] = seq + [EOS_ID]
    return Batch([s.id for s in samples], frames, mask, tgt_in, tgt_out, [list(s.target) for s in samples])


def make_batches(dataset, batch_size: int, seed: int = 0, shuffle: bool = False) -> List[Batch]:
    """Split into padded batches; the order is a pure function of ``seed``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    seqs = list(dataset.sequences if isinstance(dataset, FeatureDataset) else dataset)
    order = np.arange(len(seqs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(seqs))
    return [collate([seqs[j] for j in order[i:i + batch_size]]) for i in range(0, len(seqs), batch_size)]


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

SYNTH_TASKS = ("copy", "order", "segment")


@dataclass
class SynthSpec:
    """Synthetic stand-in for sign-language features.

    Every token owns a fixed random direction in feature space (drawn from
    ``projection_seed``); frames are that direction plus Gaussian noise.
    """

    task: str = "copy"
    vocab_size: int = 30
    min_len: int = 4
    max_len: int = 8
    frames_min: int = 4
    frames_max: int = 12
    repeat_prob: float = 0.5
    noise: float = 0.1
    feature_dim: int = 1024
    projection_seed: int = 1234
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.task not in SYNTH_TASKS:
            raise ValueError(f"task: must be one of {SYNTH_TASKS}, got {self.task!r}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size: must be >= 5, got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"min_len/max_len: need 1 <= min_len <= max_len, got {self.min_len}/{self.max_len}")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("frames_min/frames_max: need 1 <= frames_min <= frames_max")
        if self.noise < 0 or self.feature_dim < 1:
            raise ValueError("noise must be >= 0 and feature_dim >= 1")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("sample counts must be >= 0")

    def vocab(self) -> List[str]:
        return list(RESERVED_TOKENS) + [f"w{i}" for i in range(self.vocab_size)]


def _projection(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.projection_seed)
    return rng.standard_normal((spec.vocab_size, spec.feature_dim))


def _token_frames(tokens, proj, noise_rows) -> np.ndarray:
    return (proj[np.asarray(tokens) - len(RESERVED_TOKENS)] + noise_rows).astype(np.float32)


def _gen_split(spec: SynthSpec, proj: np.ndarray, n: int, rng: np.random.Generator, prefix: str) -> List[Sample]:
    base = len(RESERVED_TOKENS)
    out: List[Sample] = []
    f = spec.feature_dim

    def tokens_of(length):
        return (rng.integers(0, spec.vocab_size, length) + base).tolist()

    while len(out) < n:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        if spec.task == "copy":
            toks = tokens_of(length)
            frames = _token_frames(toks, proj, spec.noise * rng.standard_normal((length, f)))
            out.append(Sample(f"{prefix}-{len(out):06d}", frames, toks))
        elif spec.task == "order":
            toks = tokens_of(length)
            noise = spec.noise * rng.standard_normal((length, f))
            first = _token_frames(toks, proj, noise)
            perm = rng.permutation(length)
            for _ in range(16):
                if len(set(toks)) == 1 or [toks[i] for i in perm] != toks:
                    break
                perm = rng.permutation(length)
            out.append(Sample(f"{prefix}-{len(out):06d}", first, toks))
            if len(out) < n:
                out.append(Sample(f"{prefix}-{len(out):06d}", first[perm].copy(), [toks[i] for i in perm]))
        else:
            toks = [int(rng.integers(0, spec.vocab_size)) + base]
            while len(toks) < length:
                if rng.random() < spec.repeat_prob:
                    toks.append(toks[-1])
                else:
                    toks.append(int(rng.integers(0, spec.vocab_size)) + base)
            runs = rng.integers(spec.frames_min, spec.frames_max + 1, length)
            rows = np.repeat(np.asarray(toks), runs)
            frames = _token_frames(rows, proj, spec.noise * rng.standard_normal((len(rows), f)))
            out.append(Sample(f"{prefix}-{len(out):06d}", frames, toks))
    return out


def synth_generate(spec: SynthSpec, seed: Optional[int] = None) -> dict:
    """Generate ``{"train", "dev", "test"}`` datasets; pure in (spec, seed)."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    proj = _projection(spec)
    vocab = spec.vocab()
    splits = {}
    for i, (name, n) in enumerate((("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test))):
        rng = np.random.default_rng([seed, i])
        splits[name] = FeatureDataset(_gen_split(spec, proj, n, rng, f"{spec.task}-{name}"), vocab, spec.feature_dim)
    return splits

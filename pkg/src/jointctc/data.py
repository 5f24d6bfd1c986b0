"""Synthetic transduction corpora and their TSV file format.

Each line is ``source<TAB>transcript<TAB>target``, every field a
space-separated list of decimal token ids.  The transcript field is empty
for text-to-text tasks.  Real token ids start at 1 (0 is reserved).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

TASKS = ("copy", "map", "expand", "reverse", "frames")
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Example:
    source: tuple
    transcript: tuple
    target: tuple

    def ctc_source_labels(self) -> tuple:
        """Labels for the source-oriented CTC head: the transcript if present, else the source."""
        return self.transcript if self.transcript else self.source


@dataclass
class SyntheticTaskSpec:
    task: str = "reverse"
    src_vocab: int = 12  # MT source symbols / ST latent (transcript) symbols
    min_len: int = 3
    max_len: int = 8
    n_train: int = 20000
    n_valid: int = 1000
    n_test: int = 1000
    seed: int = 0
    repeat_min: int = 2  # frames: per-token repeat range
    repeat_max: int = 4
    noise_rate: float = 0.0  # frames: probability a frame is replaced by a jitter symbol
    n_jitter: int = 2  # frames: number of jitter symbols
    block: int = 2  # frames: block size for the target block swap

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.src_vocab < 2:
            raise ValueError("src_vocab must be >= 2")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.task == "frames":
            if not 1 <= self.repeat_min <= self.repeat_max:
                raise ValueError("need 1 <= repeat_min <= repeat_max")
            if not 0.0 <= self.noise_rate < 1.0:
                raise ValueError("noise_rate must lie in [0, 1)")
            if self.block < 1:
                raise ValueError("block must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown task spec keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    # vocabulary sizes as seen by the model
    @property
    def model_src_vocab(self) -> int:
        if self.task == "frames":
            return self.src_vocab + self.n_jitter
        return self.src_vocab

    @property
    def transcript_vocab(self) -> int:
        return self.src_vocab if self.task == "frames" else 0

    @property
    def tgt_vocab(self) -> int:
        if self.task == "expand":
            return 2 * self.src_vocab + 1
        return self.src_vocab


def token_map(spec: SyntheticTaskSpec) -> np.ndarray:
    """Fixed bijection on 1..n used by map/reverse/frames (index 0 unused)."""
    rng = np.random.default_rng([spec.seed, 7919])
    perm = rng.permutation(spec.src_vocab) + 1
    return np.concatenate(([0], perm))


def expand_token(c: int) -> tuple:
    return (2 * c, 2 * c + 1)


def block_swap(seq: tuple, block: int) -> tuple:
    """Swap each adjacent pair of ``block``-sized chunks: [b1 b2 b3 b4 b5] -> [b2 b1 b4 b3 b5]."""
    chunks = [seq[i:i + block] for i in range(0, len(seq), block)]
    for i in range(0, len(chunks) - 1, 2):
        chunks[i], chunks[i + 1] = chunks[i + 1], chunks[i]
    return tuple(c for ch in chunks for c in ch)


def make_example(spec: SyntheticTaskSpec, latent: tuple, rng: np.random.Generator,
                 pi: np.ndarray | None = None) -> Example:
    if pi is None:
        pi = token_map(spec)
    t = spec.task
    if t == "copy":
        return Example(latent, (), latent)
    if t == "map":
        return Example(latent, (), tuple(int(pi[c]) for c in latent))
    if t == "expand":
        return Example(latent, (), tuple(x for c in latent for x in expand_token(c)))
    if t == "reverse":
        return Example(latent, (), tuple(int(pi[c]) for c in reversed(latent)))
    # frames: each latent symbol held for r frames, some frames replaced by jitter
    frames = []
    for c in latent:
        r = int(rng.integers(spec.repeat_min, spec.repeat_max + 1))
        for _ in range(r):
            if spec.noise_rate > 0 and rng.random() < spec.noise_rate:
                frames.append(spec.src_vocab + 1 + int(rng.integers(spec.n_jitter)))
            else:
                frames.append(c)
    target = block_swap(tuple(int(pi[c]) for c in latent), spec.block)
    return Example(tuple(frames), latent, target)


def _has_adjacent_repeat(seq) -> bool:
    return any(a == b for a, b in zip(seq, seq[1:]))


def gen_corpus(spec: SyntheticTaskSpec) -> dict[str, list[Example]]:
    """Deterministic train/valid/test splits with pairwise-disjoint latent sequences."""
    rng = np.random.default_rng(spec.seed)
    pi = token_map(spec)
    need = spec.n_train + spec.n_valid + spec.n_test
    space = sum(spec.src_vocab ** n for n in range(spec.min_len, spec.max_len + 1))
    if need > space // 2:
        raise ValueError(f"cannot draw {need} distinct sequences from a space of {space}")
    seen: set[tuple] = set()
    latents: list[tuple] = []
    attempts = 0
    while len(latents) < need:
        attempts += 1
        if attempts > 50 * need + 1000:
            raise ValueError("task constraints leave too few distinct sequences")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq = tuple(int(c) for c in rng.integers(1, spec.src_vocab + 1, size=n))
        if seq in seen:
            continue
        if spec.task == "frames":
            # keep latent and swapped target free of adjacent repeats so segments stay separable
            tgt = block_swap(tuple(int(pi[c]) for c in seq), spec.block)
            if _has_adjacent_repeat(seq) or _has_adjacent_repeat(tgt):
                continue
        seen.add(seq)
        latents.append(seq)
    bounds = np.cumsum([0, spec.n_train, spec.n_valid, spec.n_test])
    out = {}
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        out[name] = [make_example(spec, latents[i], rng, pi) for i in range(lo, hi)]
    return out


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _fmt(seq: Iterable[int]) -> str:
    return " ".join(str(int(c)) for c in seq)


def _parse(field: str, where: str) -> tuple:
    field = field.strip()
    if not field:
        return ()
    try:
        return tuple(int(tok) for tok in field.split(" ") if tok)
    except ValueError as e:
        raise ValueError(f"{where}: bad token list {field!r}") from e


def format_line(ex: Example) -> str:
    return f"{_fmt(ex.source)}\t{_fmt(ex.transcript)}\t{_fmt(ex.target)}"


def parse_line(line: str, where: str = "<line>") -> Example:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise ValueError(f"{where}: expected 3 tab-separated fields, got {len(parts)}")
    return Example(_parse(parts[0], where), _parse(parts[1], where), _parse(parts[2], where))


def write_corpus(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(format_line(ex) + "\n")


def read_corpus(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, 1):
            if line.strip() == "" and line.count("\t") < 2:
                continue
            out.append(parse_line(line, f"{path}:{i}"))
    return out


def write_splits(directory, splits: dict[str, list[Example]]) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, exs in splits.items():
        paths[name] = d / f"{name}.tsv"
        write_corpus(paths[name], exs)
    return paths

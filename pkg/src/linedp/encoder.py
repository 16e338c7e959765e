"""Per-line embeddings: a trainable bag (mean) encoder and precomputed vectors.

Precomputed-embedding file (UTF-8 text)::

    #dim=<d>
    <file_id>\t<line_number>\t<d space-separated floats>
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .corpus import NUM_TOKEN, STR_TOKEN, PreparedFile

PAD, OOV = "<pad>", "<oov>"
RESERVED = (PAD, OOV, STR_TOKEN, NUM_TOKEN)
DEFAULT_CODEBERT_DIM = 768


class EmbeddingError(KeyError):
    """A required precomputed vector is missing or malformed."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class LineEncoderSpec:
    kind: str = "bag"
    dim: int = 64
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in ("bag", "precomputed"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("encoder dimension must be positive")
        if self.kind == "precomputed" and self.trainable:
            raise ValueError("precomputed embeddings cannot be trainable")


class Vocab:
    """Token -> index map with reserved slots 0..3 for pad/oov/str/num."""

    def __init__(self, tokens: Iterable[str] = (), min_frequency: int = 2):
        self.min_frequency = min_frequency
        self.itos: list[str] = list(RESERVED)
        for t in tokens:
            if t not in RESERVED:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, 1)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in tokens]

    def to_json(self) -> str:
        return json.dumps({"min_frequency": self.min_frequency, "tokens": self.itos[len(RESERVED):]},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        return cls(d["tokens"], d["min_frequency"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos and \
            self.min_frequency == other.min_frequency


def build_vocab(files: Sequence[PreparedFile], min_frequency: int = 2) -> Vocab:
    """Vocabulary of the training release; rare tokens fall back to <oov>."""
    counts = Counter(t for f in files for _, toks in f.lines for t in toks)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    # frequency-descending, ties alphabetical: stable across runs
    kept = sorted((t for t, c in counts.items() if c >= min_frequency),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept, min_frequency)


def init_embedding(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    table = rng.uniform(-0.05, 0.05, size=(vocab_size, dim))
    table[0] = 0.0
    return table


def averaging_matrix(lengths: Sequence[int]) -> np.ndarray:
    """n x sum(lengths) matrix whose row i averages the i-th token run."""
    total = int(np.sum(lengths))
    avg = np.zeros((len(lengths), total))
    start = 0
    for i, n in enumerate(lengths):
        avg[i, start:start + n] = 1.0 / n
        start += n
    return avg


def encode_line_bag(token_ids: Sequence[int], table: nc.Node) -> nc.Node:
    """Mean of the embedding rows of one line's tokens (1 x d)."""
    if not len(token_ids):
        raise ValueError("encode_line_bag: empty token list")
    return nc.mean(nc.take_rows(table, token_ids), axis=0)


def encode_file_bag(lines: Sequence[Sequence[int]], table: nc.Node) -> nc.Node:
    """Stack of per-line mean embeddings for a whole file (n x d)."""
    flat = [i for ids in lines for i in ids]
    rows = nc.take_rows(table, flat)
    return nc.matmul(nc.constant(averaging_matrix([len(ids) for ids in lines])), rows)


class PrecomputedEmbeddings:
    """Read-only (file_id, line_number) -> 1 x d vectors, served as constants."""

    def __init__(self, vectors: Mapping[tuple[str, int], np.ndarray], dim: int):
        self.dim = dim
        self._vectors = dict(vectors)

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key) -> bool:
        return key in self._vectors

    def get(self, file_id: str, line_number: int) -> np.ndarray:
        try:
            return self._vectors[(file_id, line_number)]
        except KeyError:
            raise EmbeddingError(
                f"no precomputed embedding for file {file_id!r} line {line_number}") from None

    def encode_file(self, f: PreparedFile) -> nc.Node:
        return nc.constant(np.vstack([self.get(f.file_id, n) for n in f.line_numbers]))

    def missing(self, files: Iterable[PreparedFile]) -> list[tuple[str, int]]:
        return [(f.file_id, n) for f in files for n in f.line_numbers
                if (f.file_id, n) not in self._vectors]


def load_precomputed(path: str | Path, expected_dim: int | None = None) -> PrecomputedEmbeddings:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#dim="):
        raise EmbeddingError(f"{path}: missing '#dim=<d>' header")
    dim = int(lines[0][5:])
    if expected_dim is not None and dim != expected_dim:
        raise EmbeddingError(f"{path}: dimension {dim} does not match configured {expected_dim}")
    vectors = {}
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise EmbeddingError(f"{path}:{i}: expected 3 tab-separated fields")
        vec = np.array(parts[2].split(), dtype=np.float64)
        if vec.size != dim:
            raise EmbeddingError(f"{path}:{i}: expected {dim} values, got {vec.size}")
        vectors[(parts[0], int(parts[1]))] = vec.reshape(1, dim)
    return PrecomputedEmbeddings(vectors, dim)


def save_precomputed(emb: Mapping[tuple[str, int], np.ndarray], dim: int,
                     path: str | Path) -> None:
    out = [f"#dim={dim}"]
    for (fid, num), vec in emb.items():
        out.append(f"{fid}\t{num}\t" + " ".join(repr(float(x)) for x in np.ravel(vec)))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")

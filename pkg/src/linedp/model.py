"""Model assembly, training, prediction and checkpoint persistence.

Checkpoint container (little-endian)::

    magic    8 bytes   b"LINEDPCK"
    version  uint32
    hlen     uint64    length of the header
    header   hlen bytes of canonical JSON: config, vocab, training log, best epoch,
                       parameter index [[name, [rows, cols]], ...]
    blocks   per parameter: uint16 name length, name (utf-8), uint32 rows,
             uint32 cols, rows*cols float64
    trailer  b"END!"
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .bafn import BafnParams, bafn_forward, consolidate_heads, line_scores, rank_lines
from .context import GruParams, bigru_forward
from .corpus import MAX_LINE_TOKENS, PreparedFile
from .encoder import (LineEncoderSpec, PrecomputedEmbeddings, Vocab, build_vocab,
                      encode_file_bag, init_embedding)
from .metrics import UndefinedMetricError, auc

log = logging.getLogger(__name__)

MAGIC = b"LINEDPCK"
FORMAT_VERSION = 1
TRAILER = b"END!"


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


class TrainingError(RuntimeError):
    """Training cannot proceed (bad data or a diverged loss)."""


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "bag"
    embed_dim: int = 64
    hidden: int = 64
    k: int = 768
    stride: int = 3
    dropout: float = 0.2
    layer_norm: bool = True
    pool_activation: bool = True
    batch_size: int = 16
    learning_rate: float = 0.001
    epochs: int = 10
    seed: int = 0
    max_line_tokens: int = MAX_LINE_TOKENS
    max_lines: int = 0
    min_frequency: int = 2
    no_bigru: bool = False
    no_bafn: bool = False

    def __post_init__(self):
        LineEncoderSpec(self.encoder, self.embed_dim, self.encoder == "bag")
        if self.k < 1 or self.stride < 1 or self.k % self.stride:
            raise nc.ConfigError(f"k={self.k} must be a positive multiple of stride s={self.stride}")
        if not 0.0 <= self.dropout < 1.0:
            raise nc.ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.learning_rate < 1.0:
            raise nc.ConfigError(f"learning_rate must lie in (0, 1), got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise nc.ConfigError("epochs, batch_size and hidden must be >= 1")
        if self.max_line_tokens < 1 or self.max_lines < 0:
            raise nc.ConfigError("max_line_tokens must be >= 1 and max_lines >= 0")

    @property
    def context_dim(self) -> int:
        return 2 * self.hidden

    @property
    def feature_dim(self) -> int:
        return self.k // self.stride

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise nc.ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardResult:
    p: nc.Node
    scores: list[tuple[int, float]]
    maps: list[np.ndarray] = field(default_factory=list)


@dataclass
class PredictionRecord:
    file_id: str
    prob: float
    lines: list[tuple[int, float]]


class LineDefectModel:
    """Encoder -> Bi-GRU -> two-head bilinear fusion -> logistic file head."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None = None,
                 embeddings: PrecomputedEmbeddings | None = None):
        self.config = config
        self.vocab = vocab
        self.embeddings = embeddings
        self.history: list[dict] = []
        self.best_epoch: int | None = None
        if config.encoder == "bag" and vocab is None:
            raise nc.ConfigError("bag encoder needs a vocabulary")
        if embeddings is not None and embeddings.dim != config.embed_dim:
            raise nc.ConfigError(
                f"embedding dimension {embeddings.dim} != configured {config.embed_dim}")
        self.params: dict[str, nc.Node] = self._init_params(np.random.default_rng(config.seed))

    def _init_params(self, rng: np.random.Generator) -> dict[str, nc.Node]:
        c = self.config
        d, dc, out = c.embed_dim, c.context_dim, c.feature_dim
        params: dict[str, nc.Node] = {}
        if c.encoder == "bag":
            params["embedding"] = nc.parameter(init_embedding(len(self.vocab), d, rng), "embedding")
        if c.no_bigru:
            params["context.proj"] = nc.parameter(np.eye(d, dc), "context.proj")
        else:
            params.update(GruParams.init(d, c.hidden, rng, "gru.fwd").named("gru.fwd"))
            params.update(GruParams.init(d, c.hidden, rng, "gru.bwd").named("gru.bwd"))
        if c.no_bafn:
            lim = math.sqrt(6.0 / (dc + out))
            params["fallback.proj"] = nc.parameter(rng.uniform(-lim, lim, (dc, out)),
                                                   "fallback.proj")
        else:
            params.update(BafnParams.init(d, dc, c.k, c.stride, rng).named())
        lim = math.sqrt(6.0 / (out + 1))
        params["head.W0"] = nc.parameter(rng.uniform(-lim, lim, (1, out)), "head.W0")
        params["head.b0"] = nc.parameter(np.zeros((1, 1)), "head.b0")
        return params

    # ------------------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def encode(self, f: PreparedFile) -> nc.Node:
        if self.config.encoder == "precomputed":
            if self.embeddings is None:
                raise nc.ConfigError("precomputed encoder has no embedding provider attached")
            return self.embeddings.encode_file(f)
        return encode_file_bag([self.vocab.encode(t) for t in f.tokens], self.params["embedding"])

    def context(self, H_l: nc.Node) -> nc.Node:
        c = self.config
        if c.no_bigru:
            H_c = nc.matmul(H_l, self.params["context.proj"])
        else:
            H_c = bigru_forward(H_l, GruParams.from_named(self.params, "gru.fwd"),
                                GruParams.from_named(self.params, "gru.bwd"))
        if c.layer_norm:
            H_c = nc.layer_norm_rows(H_c)
        return H_c

    def forward_file(self, f: PreparedFile, train: bool = False,
                     rng: np.random.Generator | None = None,
                     mask: Sequence[bool] | None = None) -> ForwardResult:
        c = self.config
        if not f.lines:
            raise ValueError(f"{f.file_id}: file has no lines")
        if train and c.dropout > 0 and rng is None:
            raise ValueError("training forward pass needs an rng for dropout")
        f = self._capped(f)
        H_l = nc.dropout(self.encode(f), c.dropout, rng, train)
        H_c = self.context(H_l)
        numbers = f.line_numbers
        if c.no_bafn:
            keep = np.ones(len(numbers), bool) if mask is None else np.asarray(mask, bool)
            w = np.where(keep, 1.0 / max(keep.sum(), 1), 0.0).reshape(1, -1)
            feat = nc.matmul(nc.matmul(nc.constant(w), H_c), self.params["fallback.proj"])
            norms = np.linalg.norm(H_c.value, axis=1)
            scores = rank_lines(norms, numbers, mask)
            maps: list[np.ndarray] = []
        else:
            out = bafn_forward(H_l, H_c, BafnParams.from_named(self.params, c.stride), mask,
                               c.pool_activation)
            feat = out.f
            maps = [A.value for A in out.maps]
            scores = line_scores(consolidate_heads(maps), numbers, mask)
        feat = nc.dropout(feat, c.dropout, rng, train)
        logit = nc.add(nc.matmul(feat, nc.transpose(self.params["head.W0"])),
                       self.params["head.b0"])
        return ForwardResult(nc.sigmoid(logit), scores, maps)

    def _capped(self, f: PreparedFile) -> PreparedFile:
        cap = self.config.max_lines
        if cap and len(f.lines) > cap:
            log.warning("%s: %d lines beyond max_lines=%d ignored", f.file_id,
                        len(f.lines) - cap, cap)
            return PreparedFile(f.file_id, f.lines[:cap], f.file_label, f.line_labels[:cap])
        return f

    def file_loss(self, f: PreparedFile, pos_weight: float, train: bool = True,
                  rng: np.random.Generator | None = None) -> nc.Node:
        res = self.forward_file(f, train=train, rng=rng)
        return nc.weighted_bce(res.p, float(f.file_label), pos_weight)

    def predict_file(self, f: PreparedFile) -> PredictionRecord:
        with nc.no_grad():
            res = self.forward_file(f, train=False)
        return PredictionRecord(f.file_id, float(res.p.value.item()), res.scores)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].value = v.copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def positive_weight(files: Sequence[PreparedFile]) -> float:
    """#clean / #defective files; the class weight of the positive BCE term."""
    pos = sum(1 for f in files if f.file_label)
    neg = len(files) - pos
    if pos == 0 or neg == 0:
        raise TrainingError("training release needs both defective and clean files")
    return neg / pos


def _usable(files: Iterable[PreparedFile], what: str) -> list[PreparedFile]:
    out = []
    for f in files:
        if f.lines:
            out.append(f)
        else:
            log.info("%s: empty file %s skipped", what, f.file_id)
    return out


def train(train_files: Sequence[PreparedFile], valid_files: Sequence[PreparedFile],
          config: ModelConfig, embeddings: PrecomputedEmbeddings | None = None,
          progress: bool = False) -> LineDefectModel:
    """Train with Adam on weighted file-level BCE; keep the best-validation-AUC epoch."""
    train_files = _usable(train_files, "train")
    valid_files = _usable(valid_files, "validation")
    pos_weight = positive_weight(train_files)
    vocab = build_vocab(train_files, config.min_frequency) if config.encoder == "bag" else None
    model = LineDefectModel(config, vocab, embeddings)
    names = list(model.params)
    opt = nc.Adam([model.params[n] for n in names], lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    best_auc, best_state = -math.inf, None
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_files))
        total = 0.0
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [train_files[i] for i in order[start:start + bs]]
            opt.zero_grad()
            batch_loss = 0.0
            for f in batch:
                loss = nc.scale(model.file_loss(f, pos_weight, True, rng), 1.0 / len(batch))
                nc.backward(loss)
                batch_loss += loss.value.item()
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b + 1}")
            opt.step()
            total += batch_loss * len(batch)
        mean_loss = total / len(train_files)
        try:
            val_auc = auc([model.predict_file(f).prob for f in valid_files],
                          [f.file_label for f in valid_files]) if valid_files else None
        except UndefinedMetricError:
            val_auc = None
        model.history.append({"epoch": epoch, "loss": mean_loss, "val_auc": val_auc})
        if progress:
            log.info("epoch %d: loss %.5f, validation AUC %s", epoch, mean_loss,
                     "n/a" if val_auc is None else f"{val_auc:.4f}")
        # without a usable validation AUC the latest epoch wins
        score = val_auc if val_auc is not None else -math.inf
        if best_state is None or score > best_auc or val_auc is None:
            best_auc, best_state, model.best_epoch = score, model.snapshot(), epoch
    opt.zero_grad()
    model.restore(best_state)
    return model


def predict_release(model: LineDefectModel, files: Sequence[PreparedFile]) -> list[PredictionRecord]:
    """One record per non-empty file, in input order, dropout disabled."""
    cfg = model.config
    out = []
    for f in files:
        if not f.lines:
            log.info("predict: empty file %s omitted", f.file_id)
            continue
        longest = max(len(t) for t in f.tokens)
        if longest > cfg.max_line_tokens:
            raise CheckpointError(
                f"{f.file_id}: line with {longest} tokens exceeds the model's "
                f"max_line_tokens={cfg.max_line_tokens}; re-prepare the release")
        out.append(model.predict_file(f))
    return out


# ---------------------------------------------------------------------------
# prediction report
# ---------------------------------------------------------------------------

def write_predictions(records: Sequence[PredictionRecord], path: str | Path,
                      header: dict | None = None) -> None:
    """JSON lines; an optional first ``{"header": ...}`` object carries provenance."""
    rows = []
    if header is not None:
        rows.append(json.dumps({"header": header}, sort_keys=True))
    for r in records:
        rows.append(json.dumps({"file_id": r.file_id, "prob": r.prob,
                                "lines": [[n, s] for n, s in r.lines]}))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "header" in obj:
            continue
        out.append(PredictionRecord(obj["file_id"], float(obj["prob"]),
                                    [(int(n), float(s)) for n, s in obj["lines"]]))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: LineDefectModel, path: str | Path) -> None:
    header = {
        "config": model.config.to_dict(),
        "vocab": None if model.vocab is None else json.loads(model.vocab.to_json()),
        "history": model.history,
        "best_epoch": model.best_epoch,
        "params": [[n, list(p.shape)] for n, p in model.params.items()],
    }
    htext = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(htext)))
    buf.write(htext)
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        rows, cols = p.shape
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    buf.write(TRAILER)
    Path(path).write_bytes(buf.getvalue())


def _read(stream: io.BytesIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint is truncated")
    return data


def load_checkpoint(path: str | Path, embeddings: PrecomputedEmbeddings | None = None,
                    expect: dict | None = None) -> LineDefectModel:
    """Rebuild a model; ``expect`` pins config fields (e.g. ``{"no_bafn": True}``)."""
    stream = io.BytesIO(Path(path).read_bytes())
    if _read(stream, 8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", _read(stream, 12))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(_read(stream, hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    config = ModelConfig.from_dict(header["config"])
    for key, want in (expect or {}).items():
        have = getattr(config, key)
        if have != want:
            raise CheckpointError(f"{path}: checkpoint has {key}={have!r}, expected {want!r}")
    vocab = None
    if header["vocab"] is not None:
        vocab = Vocab(header["vocab"]["tokens"], header["vocab"]["min_frequency"])
    values = {}
    for name, shape in header["params"]:
        (nlen,) = struct.unpack("<H", _read(stream, 2))
        got = _read(stream, nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", _read(stream, 8))
        if got != name or [rows, cols] != shape:
            raise CheckpointError(f"{path}: block {got!r} {rows}x{cols} does not match index "
                                  f"entry {name!r} {shape}")
        raw = _read(stream, 8 * rows * cols)
        values[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if stream.read(len(TRAILER)) != TRAILER or stream.read(1):
        raise CheckpointError(f"{path}: missing or misplaced trailer")
    model = LineDefectModel(config, vocab, embeddings)
    if set(values) != set(model.params):
        raise CheckpointError(f"{path}: parameter set does not match the configured architecture")
    for name, v in values.items():
        if model.params[name].shape != v.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {v.shape}, "
                                  f"architecture expects {model.params[name].shape}")
    model.restore(values)
    model.history = header["history"]
    model.best_epoch = header["best_epoch"]
    return model

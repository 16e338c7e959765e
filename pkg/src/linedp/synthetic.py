"""Synthetic Java-like releases with planted defective lines.

Defective files carry one to three lines that call a marker method; clean files
never mention it.  Everything is driven by a seeded generator, so a release is
fully determined by ``(n_files, seed, prefix)``.
"""
from __future__ import annotations

import numpy as np

from .corpus import RawLineRecord

MARKER = "unsafeRelease"

_VARS = ["count", "name", "buffer", "result", "index", "config", "session", "entry",
         "value", "node", "stream", "handler", "cache", "request", "response", "item",
         "offset", "parent", "child", "total", "size", "key", "queue", "writer"]
_TYPES = ["int", "long", "String", "Object", "List", "Map", "boolean", "double"]
_METHODS = ["get", "put", "add", "remove", "close", "open", "read", "write", "flush",
            "size", "clear", "contains", "apply", "update", "reset", "init"]
_FIELDS = ["length", "next", "prev", "owner", "state", "data"]


def _statement(rng: np.random.Generator) -> str:
    v = _VARS[rng.integers(len(_VARS))]
    w = _VARS[rng.integers(len(_VARS))]
    m = _METHODS[rng.integers(len(_METHODS))]
    t = _TYPES[rng.integers(len(_TYPES))]
    fld = _FIELDS[rng.integers(len(_FIELDS))]
    kind = rng.integers(12)
    if kind == 0:
        return f"    {t} {v} = {int(rng.integers(0, 1000))};"
    if kind == 1:
        return f"    {v}.{m}({w});"
    if kind == 2:
        return f"    if ({v} != null) {{"
    if kind == 3:
        return "    }"
    if kind == 4:
        return f"    return {v};"
    if kind == 5:
        return f"    for (int i = 0; i < {v}.{m}(); i++) {{"
    if kind == 6:
        return f'    String {v} = "{w}-{int(rng.integers(100))}";'
    if kind == 7:
        return f"    // {m} the {v} before {w}"
    if kind == 8:
        return f"    {v}.{fld} = {w}.{fld};"
    if kind == 9:
        return f"    {t} {v} = {w}.{m}();"
    if kind == 10:
        return ""
    return f"    {v} = {v} + {w}.{m}({int(rng.integers(10))});"


def _defective_statement(rng: np.random.Generator) -> str:
    v = _VARS[rng.integers(len(_VARS))]
    w = _VARS[rng.integers(len(_VARS))]
    return f"    {v}.{MARKER}({w});"


def generate_release(n_files: int = 300, seed: int = 0, prefix: str = "rel",
                     mean_lines: int = 40, defective_rate: float = 0.1,
                     max_defective_lines: int = 3) -> dict[str, list[RawLineRecord]]:
    """One release as ``{file_id: [RawLineRecord, ...]}``."""
    rng = np.random.default_rng(seed)
    n_def = int(round(defective_rate * n_files))
    defective = set(rng.choice(n_files, size=n_def, replace=False).tolist())
    out: dict[str, list[RawLineRecord]] = {}
    for i in range(n_files):
        fid = f"{prefix}/src/Module{i:04d}.java"
        n_lines = int(rng.integers(mean_lines // 2, mean_lines * 3 // 2 + 1))
        body = [f"public class Module{i:04d} {{"]
        body += [_statement(rng) for _ in range(n_lines - 2)]
        body.append("}")
        bad: set[int] = set()
        if i in defective:
            k = int(rng.integers(1, max_defective_lines + 1))
            bad = set(rng.choice(np.arange(1, n_lines - 1), size=k, replace=False).tolist())
            for j in bad:
                body[j] = _defective_statement(rng)
        is_def = i in defective
        out[fid] = [RawLineRecord(fid, j + 1, text, j in bad, is_def)
                    for j, text in enumerate(body)]
    return out


def synthetic_splits(n_files: int = 300, seed: int = 0, **kw):
    """Prepared (train, validation, test) releases drawn with distinct seeds."""
    from .corpus import prepare_release

    return tuple(prepare_release(generate_release(n_files, 3 * seed + i + 1, name, **kw))
                 for i, name in enumerate(("train", "valid", "test")))

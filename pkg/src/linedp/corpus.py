"""Line-level defect datasets: loading, token preprocessing and task splits.

Dataset CSV layout (UTF-8, comma separated, quoting allowed)::

    filename,file-label,code_line,line_number,line-label

Booleans are ``True``/``False`` (case-insensitive).  One CSV holds one release.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

COLUMNS = ("filename", "file-label", "code_line", "line_number", "line-label")
STR_TOKEN = "<str>"
NUM_TOKEN = "<num>"
MAX_LINE_TOKENS = 75
PREPARED_MAGIC = "#linedp-prepared v1"

# separators removed from code: { } ( ) , . : ; ' ! " and whitespace
_SEPARATORS = re.compile(r"[{}(),.:;'!\"\s]+")
_STRING_LITERAL = re.compile(r'"(?:\\.|[^"\\\n])*"|\'(?:\\.|[^\'\\\n])*\'')
_NUMBER = (
    r"(?:0[xX][0-9a-fA-F]+|0[bB][01]+|(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)[lLfFdD]?"
)
# a literal is standalone when it is not glued to an identifier character
_NUMERIC_LITERAL = re.compile(r"(?<![\w.$])" + _NUMBER + r"(?![\w$])")


class SchemaError(ValueError):
    """The CSV header does not match the documented column set."""


class ParseError(ValueError):
    """A data row could not be parsed."""


@dataclass(frozen=True)
class RawLineRecord:
    file_id: str
    line_number: int
    content: str
    line_label: bool
    file_label: bool


@dataclass
class PreparedFile:
    file_id: str
    lines: list[tuple[int, list[str]]]
    file_label: bool
    line_labels: list[bool]
    # defective lines that could not be kept (blank after preprocessing)
    dropped_defective: list[int] = field(default_factory=list)
    truncated_lines: int = 0

    @property
    def line_numbers(self) -> list[int]:
        return [n for n, _ in self.lines]

    @property
    def tokens(self) -> list[list[str]]:
        return [t for _, t in self.lines]

    def __len__(self) -> int:
        return len(self.lines)


@dataclass(frozen=True)
class TaskSplit:
    train_release: str
    validation_release: str
    test_releases: tuple[str, ...]
    mode: str

    def __post_init__(self):
        ids = (self.train_release, self.validation_release, *self.test_releases)
        if len(set(ids)) != len(ids):
            raise ValueError(f"task releases must be distinct: {ids}")
        if self.mode not in ("WPDP", "CPDP"):
            raise ValueError(f"unknown mode {self.mode!r}")


def _parse_bool(text: str, row: int, column: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1"):
        return True
    if t in ("false", "0"):
        return False
    raise ParseError(f"row {row}: column {column!r} is not a boolean: {text!r}")


def load_dataset(path: str | Path) -> dict[str, list[RawLineRecord]]:
    """Read one release CSV, grouped by file and ordered by line number."""
    path = Path(path)
    groups: dict[str, list[RawLineRecord]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {','.join(COLUMNS)}")
        header = [h.strip() for h in header]
        for col in COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        pos = {c: header.index(c) for c in COLUMNS}
        for row_idx, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                number = int(row[pos["line_number"]])
            except (ValueError, IndexError):
                raise ParseError(f"row {row_idx}: line_number is not an integer") from None
            if number < 1:
                raise ParseError(f"row {row_idx}: line_number must be positive, got {number}")
            rec = RawLineRecord(
                file_id=row[pos["filename"]],
                line_number=number,
                content=row[pos["code_line"]],
                line_label=_parse_bool(row[pos["line-label"]], row_idx, "line-label"),
                file_label=_parse_bool(row[pos["file-label"]], row_idx, "file-label"),
            )
            groups.setdefault(rec.file_id, []).append(rec)

    for fid, recs in groups.items():
        recs.sort(key=lambda r: r.line_number)
        for a, b in zip(recs, recs[1:]):
            if a.line_number == b.line_number:
                raise ParseError(f"{fid}: duplicate line number {a.line_number}")
        if len({r.file_label for r in recs}) > 1:
            raise ParseError(f"{fid}: inconsistent file-label values within one file")
        if any(r.line_label for r in recs) and not recs[0].file_label:
            log.warning("%s: defective lines present but file-label is False (kept False)", fid)

    n_lines = sum(len(r) for r in groups.values())
    n_def_files = sum(1 for r in groups.values() if r[0].file_label)
    n_def_lines = sum(x.line_label for r in groups.values() for x in r)
    log.info("%s: %d files (%d defective), %d lines (%d defective)",
             path.name, len(groups), n_def_files, n_lines, n_def_lines)
    return groups


def write_dataset(groups: Mapping[str, Sequence[RawLineRecord]], path: str | Path) -> None:
    """Serialize records back into the release CSV layout."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for recs in groups.values():
            for r in recs:
                w.writerow([r.file_id, str(r.file_label), r.content, r.line_number,
                            str(r.line_label)])


def preprocess_line(content: str) -> list[str]:
    """Tokenize one code line, abstracting string and numeric literals."""
    text = _STRING_LITERAL.sub(f" {STR_TOKEN} ", content)
    text = _NUMERIC_LITERAL.sub(f" {NUM_TOKEN} ", text)
    return [t for t in _SEPARATORS.split(text) if t]


def prepare_file(records: Sequence[RawLineRecord],
                 max_line_tokens: int = MAX_LINE_TOKENS) -> PreparedFile:
    if not records:
        raise ValueError("prepare_file: no records")
    fid = records[0].file_id
    if any(r.file_id != fid for r in records):
        raise ValueError("prepare_file: records span more than one file")
    lines, labels, dropped = [], [], []
    truncated = 0
    for r in records:
        toks = preprocess_line(r.content)
        if not toks:
            if r.line_label:
                dropped.append(r.line_number)
            continue
        if len(toks) > max_line_tokens:
            toks = toks[:max_line_tokens]
            truncated += 1
        lines.append((r.line_number, toks))
        labels.append(r.line_label)
    if dropped:
        log.warning("%s: defective blank line(s) %s dropped", fid, dropped)
    if not lines:
        log.warning("%s: no non-blank lines; excluded from training", fid)
    return PreparedFile(fid, lines, records[0].file_label, labels, dropped, truncated)


def prepare_release(groups: Mapping[str, Sequence[RawLineRecord]],
                    max_line_tokens: int = MAX_LINE_TOKENS) -> list[PreparedFile]:
    return [prepare_file(recs, max_line_tokens) for recs in groups.values()]


def integrity_report(files: Iterable[PreparedFile]) -> dict:
    files = list(files)
    return {
        "files": len(files),
        "empty_files": [f.file_id for f in files if not f.lines],
        "dropped_defective_lines": sum(len(f.dropped_defective) for f in files),
        "truncated_lines": sum(f.truncated_lines for f in files),
    }


# ---------------------------------------------------------------------------
# prepared-corpus cache
# ---------------------------------------------------------------------------

def save_prepared(files: Sequence[PreparedFile], path: str | Path, header: str = "") -> None:
    """Write the tab-separated cache.

    ``#file<TAB>file_id<TAB>file_label`` opens each file; every following
    record is ``file_id<TAB>line_number<TAB>line_label<TAB>tok<TAB>tok...``.
    """
    out = [PREPARED_MAGIC]
    if header:
        out.extend("# " + h for h in header.splitlines())
    for f in files:
        if "\t" in f.file_id or "\n" in f.file_id:
            raise ValueError(f"file id {f.file_id!r} contains a tab or newline")
        out.append(f"#file\t{f.file_id}\t{int(f.file_label)}")
        if f.dropped_defective:
            out.append("#dropped\t" + "\t".join(str(n) for n in f.dropped_defective))
        if f.truncated_lines:
            out.append(f"#truncated\t{f.truncated_lines}")
        for (num, toks), lab in zip(f.lines, f.line_labels):
            out.append("\t".join([f.file_id, str(num), str(int(lab)), *toks]))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def load_prepared(path: str | Path) -> list[PreparedFile]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != PREPARED_MAGIC:
        raise ParseError(f"{path}: not a prepared-corpus file")
    files: list[PreparedFile] = []
    cur: PreparedFile | None = None
    for i, line in enumerate(text[1:], start=2):
        if line.startswith("#file\t"):
            _, fid, lab = line.split("\t")
            cur = PreparedFile(fid, [], lab == "1", [])
            files.append(cur)
        elif line.startswith("#dropped\t"):
            cur.dropped_defective = [int(x) for x in line.split("\t")[1:]]
        elif line.startswith("#truncated\t"):
            cur.truncated_lines = int(line.split("\t")[1])
        elif line.startswith("#") or not line:
            continue
        else:
            parts = line.split("\t")
            if cur is None or parts[0] != cur.file_id or len(parts) < 4:
                raise ParseError(f"{path}:{i}: malformed record")
            cur.lines.append((int(parts[1]), parts[3:]))
            cur.line_labels.append(parts[2] == "1")
    return files


# ---------------------------------------------------------------------------
# task construction
# ---------------------------------------------------------------------------

def build_tasks(catalog: Mapping[str, Sequence[str]], mode: str = "WPDP") -> list[TaskSplit]:
    """Enumerate train/validation/test splits from ``{project: [releases...]}``.

    Releases are listed oldest first.  Within-project: train on release 1,
    validate on release 2, one task per later release.  Cross-project: each
    project's first two releases paired with every later release of every
    other project.
    """
    mode = mode.upper()
    if mode not in ("WPDP", "CPDP"):
        raise ValueError(f"unknown mode {mode!r}")
    tasks = []
    if mode == "WPDP":
        for proj, rels in catalog.items():
            if len(rels) < 3:
                log.warning("%s: %d release(s), need 3 for WPDP; skipped", proj, len(rels))
                continue
            tasks.extend(TaskSplit(rels[0], rels[1], (r,), "WPDP") for r in rels[2:])
        return tasks
    for src, rels in catalog.items():
        if len(rels) < 2:
            log.warning("%s: fewer than 2 releases, cannot act as CPDP source; skipped", src)
            continue
        for tgt, trels in catalog.items():
            if tgt == src:
                continue
            tasks.extend(TaskSplit(rels[0], rels[1], (r,), "CPDP") for r in trels[2:])
    return tasks


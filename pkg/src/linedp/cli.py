"""Command-line entry point: ``linedp <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Progress goes to stderr; data artifacts go to the files named by ``--out``.

File formats
------------
release CSV        filename,file-label,code_line,line_number,line-label
prepared corpus    "#linedp-prepared v1" then per file "#file<TAB>id<TAB>label"
                   and per line "id<TAB>line_number<TAB>label<TAB>tok<TAB>tok..."
embeddings         "#dim=<d>" then "file_id<TAB>line_number<TAB>v1 v2 ... vd"
checkpoint         binary: b"LINEDPCK", uint32 version, uint64 header length,
                   canonical JSON header, named float64 little-endian blocks, b"END!"
predictions        JSON lines: {"header": {...}} then
                   {"file_id": ..., "prob": p, "lines": [[line_number, score], ...]}
metric report      JSON object (config, task, method, five metrics, counts)
aggregate CSV      task,method,metric,value (lines starting with '#' are comments)
config file        flat "key = value" lines; '#' starts a comment
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus
from . import numcore as nc
from .corpus import PreparedFile
from .encoder import EmbeddingError, load_precomputed
from .metrics import evaluate_release
from .model import (CheckpointError, ModelConfig, TrainingError, load_checkpoint,
                    predict_release, read_predictions, save_checkpoint, train,
                    write_predictions)
from .skesd import scott_knott_esd

log = logging.getLogger("linedp")

METRICS = ("auc", "ba", "mcc", "recall_top20_loc", "effort_top20_recall")
LOWER_IS_BETTER = {"effort_top20_recall"}


class UsageError(ValueError):
    """Invalid command-line input."""


VALIDATION_ERRORS = (UsageError, FileNotFoundError, corpus.SchemaError, corpus.ParseError,
                     nc.ConfigError, EmbeddingError, CheckpointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(name: str, value):
    typ = type(getattr(ModelConfig(), name))
    if isinstance(value, typ):
        return value
    text = str(value).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise UsageError(f"config key {name!r}: cannot parse {text!r} as {typ.__name__}") from None


def effective_config(args) -> ModelConfig:
    """Defaults < config file < command-line flags."""
    values: dict = {}
    if getattr(args, "config", None):
        for key, val in read_config_file(args.config).items():
            if key in _CONFIG_FIELDS:
                values[key] = _coerce(key, val)
            elif key not in ("train", "valid", "out", "embeddings"):
                raise UsageError(f"{args.config}: unknown config key {key!r}")
            elif getattr(args, key, None) is None:
                setattr(args, key, val)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _coerce(name, flag)
    try:
        return ModelConfig(**values)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration (override --config)")
    for name, f in _CONFIG_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        default = getattr(ModelConfig(), name)
        if isinstance(default, bool):
            g.add_argument(flag, dest=name, default=None, metavar="BOOL",
                           help=f"true/false (default {default})")
        else:
            g.add_argument(flag, dest=name, default=None, type=str,
                           help=f"default {default}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _need(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def load_release(path: str | Path, max_line_tokens: int = corpus.MAX_LINE_TOKENS) -> list[PreparedFile]:
    """A release from a dataset CSV or from a prepared-corpus cache."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    if first == corpus.PREPARED_MAGIC:
        return corpus.load_prepared(path)
    return corpus.prepare_release(corpus.load_dataset(path), max_line_tokens)


def _provenance(config: ModelConfig | None = None, **extra) -> dict:
    out = {"tool": "linedp"}
    if config is not None:
        out["config"] = config.to_dict()
        out["seed"] = config.seed
    out.update({k: v for k, v in extra.items() if v is not None})
    return out


def _write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    files = load_release(_need(args.input, "--input"), args.max_line_tokens)
    header = json.dumps(_provenance(input=str(args.input), max_line_tokens=args.max_line_tokens),
                        sort_keys=True)
    corpus.save_prepared(files, args.out, header=header)
    rep = corpus.integrity_report(files)
    log.info("prepared %d files -> %s (%d empty, %d defective blank lines dropped)",
             rep["files"], args.out, len(rep["empty_files"]), rep["dropped_defective_lines"])
    return 0


def _embeddings(args, config: ModelConfig):
    if config.encoder == "precomputed":
        return load_precomputed(_need(args.embeddings, "--embeddings"), config.embed_dim)
    return None


def cmd_train(args) -> int:
    config = effective_config(args)
    tr = load_release(_need(args.train, "--train"), config.max_line_tokens)
    va = load_release(_need(args.valid, "--valid"), config.max_line_tokens)
    if not args.out:
        raise UsageError("missing required --out")
    emb = _embeddings(args, config)
    if emb is not None:
        missing = emb.missing(tr + va)
        if missing:
            fid, num = missing[0]
            raise EmbeddingError(f"no precomputed embedding for file {fid!r} line {num} "
                                 f"({len(missing)} missing)")
    start = time.time()
    model = train(tr, va, config, emb, progress=True)
    save_checkpoint(model, args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".log.json"))
    _write_json(_provenance(config, train=str(args.train), valid=str(args.valid),
                            history=model.history, best_epoch=model.best_epoch), log_path)
    log.info("trained in %.1fs; best epoch %s; checkpoint -> %s", time.time() - start,
             model.best_epoch, args.out)
    return 0


def cmd_predict(args) -> int:
    ckpt = _need(args.checkpoint, "--checkpoint")
    model = load_checkpoint(ckpt)
    if model.config.encoder == "precomputed":
        model.embeddings = load_precomputed(_need(args.embeddings, "--embeddings"),
                                            model.config.embed_dim)
    files = load_release(_need(args.input, "--input"), model.config.max_line_tokens)
    records = predict_release(model, files)
    write_predictions(records, args.out,
                      _provenance(model.config, checkpoint=str(args.checkpoint),
                                  input=str(args.input)))
    log.info("%d predictions -> %s", len(records), args.out)
    return 0


def cmd_evaluate(args) -> int:
    records = read_predictions(_need(args.predictions, "--predictions"))
    files = load_release(_need(args.truth, "--truth"))
    with open(args.predictions, encoding="utf-8") as fh:
        first = json.loads(fh.readline() or "{}")
    header = first.get("header", {})
    report = evaluate_release(records, [f for f in files if f.lines], args.threshold, args.order)
    prov = dict(header)
    prov.update(predictions=str(args.predictions), truth=str(args.truth), order=args.order,
                threshold=args.threshold)
    out = {"provenance": prov,
           "task": args.task, "method": args.method}
    out.update(report.to_dict())
    _write_json(out, args.out)
    if args.csv:
        _append_aggregate(args.csv, args.task, args.method, report.metric_items())
    log.info("AUC %s  BA %s  MCC %s  Recall@20%%LOC %s  Effort@20%%Recall %s",
             *(_fmt(v) for _, v in report.metric_items()))
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _append_aggregate(path, task, method, items) -> None:
    p = Path(path)
    new = not p.exists()
    with p.open("a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["task", "method", "metric", "value"])
        for name, value in items:
            if value is not None:
                w.writerow([task, method, name, repr(float(value))])


def read_aggregate(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(lines))))
    if rows and set(rows[0]) != {"task", "method", "metric", "value"}:
        raise corpus.SchemaError(f"{path}: expected columns task,method,metric,value")
    return rows


def cmd_rank(args) -> int:
    records = read_predictions(_need(args.predictions, "--predictions"))
    if args.file:
        records = [r for r in records if r.file_id == args.file]
        if not records:
            raise UsageError(f"file {args.file!r} not found in predictions")
    rows = []
    for r in sorted(records, key=lambda r: (-r.prob, r.file_id)):
        rows.extend((r.file_id, r.prob, n, s) for n, s in r.lines)
    rows = rows[: args.top]
    width = max([len("file")] + [len(r[0]) for r in rows])
    out = [f"# linedp rank: predictions={args.predictions} top={args.top}",
           f"{'rank':>4}  {'file':<{width}}  {'prob':>8}  {'line':>6}  {'score':>12}"]
    for i, (fid, p, n, s) in enumerate(rows, start=1):
        out.append(f"{i:>4}  {fid:<{width}}  {p:>8.4f}  {n:>6}  {s:>12.6g}")
    text = "\n".join(out) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_skesd(args) -> int:
    rows = read_aggregate(_need(args.csv, "--csv"))
    metrics = [args.metric] if args.metric else sorted({r["metric"] for r in rows})
    result = {"provenance": _provenance(csv=str(args.csv), alpha=args.alpha), "metrics": {}}
    for metric in metrics:
        table: dict[str, dict[str, float]] = {}
        for r in rows:
            if r["metric"] == metric:
                table.setdefault(r["method"], {})[r["task"]] = float(r["value"])
        if not table:
            raise UsageError(f"metric {metric!r} not present in {args.csv}")
        tasks = sorted(set.intersection(*(set(v) for v in table.values())))
        data = {m: [v[t] for t in tasks] for m, v in table.items()}
        res = scott_knott_esd(data, alpha=args.alpha,
                              higher_is_better=metric not in LOWER_IS_BETTER)
        result["metrics"][metric] = {
            "ranks": res.ranks, "clusters": res.clusters, "effect_sizes": res.effect_sizes,
            "log_transformed": res.transformed, "tasks": len(tasks),
            "means": {m: float(np.mean(v)) for m, v in data.items()},
        }
        log.info("%s: %s", metric, " | ".join(",".join(c) for c in res.clusters))
    _write_json(result, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_gradient_suite

    start = time.time()
    results = run_gradient_suite(seed=args.seed)
    elapsed = time.time() - start
    worst = max(err for _, err in results)
    for name, err in results:
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{status:4}  {err:.3e}  {name}")
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g}); {elapsed:.1f}s")
    return 0 if worst < args.tolerance else 2


def cmd_validate_embeddings(args) -> int:
    emb = load_precomputed(_need(args.embeddings, "--embeddings"), args.dim)
    files = load_release(_need(args.input, "--input"))
    missing = emb.missing(files)
    if missing:
        for fid, num in missing[:20]:
            log.error("missing embedding: file %r line %d", fid, num)
        fid, num = missing[0]
        raise EmbeddingError(f"no precomputed embedding for file {fid!r} line {num} "
                             f"({len(missing)} missing)")
    print(f"ok: {sum(len(f) for f in files)} lines covered (dim={emb.dim})")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate_release

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(("train", "valid", "test")):
        rel = generate_release(args.files, seed=args.seed * 10 + i + 1, prefix=name,
                               mean_lines=args.lines, defective_rate=args.defective_rate)
        corpus.write_dataset(rel, out / f"{name}.csv")
    log.info("synthetic releases written to %s", out)
    return 0


def _run_task(payload) -> list[list]:
    task, data_dir, config, order = payload
    d = Path(data_dir)
    tr = load_release(d / f"{task.train_release}.csv", config.max_line_tokens)
    va = load_release(d / f"{task.validation_release}.csv", config.max_line_tokens)
    model = train(tr, va, config)
    rows = []
    for rel in task.test_releases:
        te = load_release(d / f"{rel}.csv", config.max_line_tokens)
        rep = evaluate_release(predict_release(model, te), [f for f in te if f.lines],
                               order=order)
        name = f"{task.train_release}->{rel}"
        rows.extend([name, m, v] for m, v in rep.metric_items() if v is not None)
    return rows


def cmd_experiment(args) -> int:
    config = effective_config(args)
    catalog = json.loads(_need(args.catalog, "--catalog").read_text(encoding="utf-8"))
    tasks = corpus.build_tasks(catalog, args.mode)
    if not tasks:
        raise UsageError("catalog yields no tasks")
    for t in tasks:
        for rel in (t.train_release, t.validation_release, *t.test_releases):
            _need(str(Path(args.data_dir) / f"{rel}.csv"), f"release {rel}")
    payloads = [(t, args.data_dir, config, args.order) for t in tasks]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_run_task, payloads))
    else:
        results = [_run_task(p) for p in payloads]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(_provenance(config, mode=args.mode), sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["task", "method", "metric", "value"])
        for rows in results:
            for task, metric, value in rows:
                w.writerow([task, args.method, metric, repr(float(value))])
    log.info("%d %s task(s) -> %s", len(tasks), args.mode, args.out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="linedp", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("prepare", help="preprocess a release CSV into a prepared-corpus cache")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-line-tokens", type=int, default=corpus.MAX_LINE_TOKENS)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", help="flat key = value configuration file")
    s.add_argument("--train", default=None, help="training release (CSV or prepared cache)")
    s.add_argument("--valid", default=None, help="validation release (CSV or prepared cache)")
    s.add_argument("--embeddings", default=None, help="precomputed embedding file")
    s.add_argument("--out", default=None, help="checkpoint path")
    s.add_argument("--log", default=None, help="training log JSON (default <out>.log.json)")
    _add_model_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="file probabilities and ranked lines for a release")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--embeddings", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="AUC, BA, MCC, Recall@Top20%%LOC, Effort@Top20%%Recall")
    s.add_argument("--predictions", required=True)
    s.add_argument("--truth", required=True, help="ground-truth release (CSV or prepared)")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--order", choices=("file-first", "product"), default="file-first")
    s.add_argument("--task", default="task")
    s.add_argument("--method", default="linedp")
    s.add_argument("--csv", default=None, help="append task,method,metric,value rows here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rank", help="print the top-N risky lines")
    s.add_argument("--predictions", required=True)
    s.add_argument("--top", type=int, default=20)
    s.add_argument("--file", default=None, help="restrict to one file id")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("skesd", help="Scott-Knott ESD ranks from an aggregate CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--metric", default=None)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_skesd)

    s = sub.add_parser("gradcheck", help="finite-difference verification of every gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("validate-embeddings", help="check precomputed-vector coverage")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--dim", type=int, default=None)
    s.set_defaults(func=cmd_validate_embeddings)

    s = sub.add_parser("synth", help="write synthetic train/valid/test releases")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--files", type=int, default=300)
    s.add_argument("--lines", type=int, default=40)
    s.add_argument("--defective-rate", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("experiment", help="train/evaluate every task of a release catalog")
    s.add_argument("--catalog", required=True, help='JSON {"project": ["rel1", "rel2", ...]}')
    s.add_argument("--data-dir", required=True, help="directory holding <release>.csv")
    s.add_argument("--mode", choices=("WPDP", "CPDP"), default="WPDP")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--order", choices=("file-first", "product"), default="file-first")
    s.add_argument("--method", default="linedp")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True, help="aggregate CSV")
    _add_model_flags(s)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        log.error("%s", e)
        return 1
    except (TrainingError, Exception) as e:  # noqa: BLE001
        log.error("runtime failure: %s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``synth``, ``aggregate``, ``evaluate``, ``select-h``.

Exit codes: 0 success, 1 usage error, 2 data error. Every run writes a
``manifest.txt`` of ``key=value`` lines; passing it back through
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from dataclasses import replace
from io import StringIO
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (DataError, SynthConfig, generate_synthetic_detailed, parse_ground_truth,
                      parse_labels, read_index_map, write_ground_truth, write_index_map,
                      write_labels)
from .evaluation import difficulty_quality, error_rate, select_h
from .gibbs import Hyperparams
from .initpredict import DEFAULT_SCALE
from .runner import INITS, LEVEL_METHODS, METHODS, fit

logger = logging.getLogger("idbla")

EXIT_USAGE = 1
EXIT_DATA = 2
MANIFEST_SKIP = {"config", "out", "func", "verbose", "command"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{x:.6f}"
    return str(x)


def _write_files(out: Path, files: dict) -> None:
    """Write all files or none: stage in temp files, then rename."""
    try:
        out.mkdir(parents=True, exist_ok=True)
        staged = []
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out / name))
        for tmp, final in staged:
            os.replace(tmp, final)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc


def _manifest(command: str, args: argparse.Namespace) -> str:
    lines = ["# idbla run manifest", f"command={command}", f"version={__version__}"]
    for key in sorted(vars(args)):
        if key in MANIFEST_SKIP:
            continue
        value = getattr(args, key)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _read_config(path: str) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _open(path: str):
    try:
        return open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _table(header, rows) -> str:
    cells = [list(header)] + [[fmt(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells) + "\n"


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_FLAGS = {"items": "num_items", "workers": "num_workers", "classes": "num_classes",
               "seed": "seed", "skill_mean": "skill_mean",
               "skill_concentration": "skill_concentration"}


def cmd_synth(args) -> int:
    text = ""
    if args.config:
        with _open(args.config) as fh:
            text = fh.read()
    overrides = {field: getattr(args, flag) for flag, field in SYNTH_FLAGS.items()}
    if "cover_items" not in text or args.allow_unlabeled:
        overrides["cover_items"] = not args.allow_unlabeled
    if args.classes is not None and "class_probs" not in text:
        overrides["class_probs"] = (1.0 / args.classes,) * args.classes
    try:
        cfg = SynthConfig.from_text(text, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = generate_synthetic_detailed(cfg)
    files = {}
    for name, writer in [("labels.csv", lambda fh: write_labels(data.labels, fh)),
                         ("truth.csv", lambda fh: write_ground_truth(data.truth, data.labels, fh)),
                         ("index_map.csv", lambda fh: write_index_map(data.labels, fh))]:
        buf = StringIO()
        writer(buf)
        files[name] = buf.getvalue()
    files["levels.csv"] = _csv_text(
        ["item", "level"],
        [(data.labels.item_ids[i], int(h) + 1) for i, h in enumerate(data.levels)])
    files["manifest.txt"] = "# idbla synth manifest\n" + cfg.to_text()
    _write_files(Path(args.out), files)
    print(f"wrote {cfg.num_items} items, {cfg.num_workers} workers, "
          f"{data.labels.num_labels} labels to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------

def _hyper(args) -> Hyperparams:
    try:
        return Hyperparams(omega=args.omega, gamma_alpha=args.gamma_alpha,
                           gamma_beta=args.gamma_beta, psi=args.psi, nu=args.nu,
                           delta=args.delta, H=args.levels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_labels(args):
    index_map = None
    if getattr(args, "index_map", None):
        with _open(args.index_map) as fh:
            index_map = read_index_map(fh)
    with _open(args.labels) as fh:
        return parse_labels(fh, num_classes=args.classes, index_map=index_map)


def cmd_aggregate(args) -> int:
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    if args.method in ("mv", "idbla", "fidbla") and args.seed is None:
        raise UsageError(f"--seed is required for method {args.method}")
    if args.evaluate and not args.truth:
        raise UsageError("--evaluate needs --truth")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    hyper = _hyper(args)
    if args.method == "fidbla" and hyper.H < 3:
        raise UsageError("fidbla needs --levels >= 3")
    seed0 = 0 if args.seed is None else args.seed

    labels = _load_labels(args)
    truth = None
    if args.truth:
        with _open(args.truth) as fh:
            truth = parse_ground_truth(fh, labels)
        if args.evaluate and not truth:
            raise DataError("no ground-truth item matches the label file")

    C = labels.num_classes
    files, summary_rows = {}, []
    for r in range(args.repeat):
        seed = seed0 + r
        res = fit(args.method, labels, hyper=hyper, seed=seed, init=args.init, scale=args.scale,
                  samples=args.samples, burn_in=args.burnin, tol=args.tol,
                  max_iters=args.max_iters)
        header = ["item", "label"]
        if res.Q_hat is not None:
            header.append("level")
        header += [f"p_{c + 1}" for c in range(C)]
        rows = []
        for i, name in enumerate(labels.item_ids):
            row = [name, int(res.T_hat[i]) + 1]
            if res.Q_hat is not None:
                row.append(int(res.Q_hat[i]) + 1)
            rows.append(row + [float(p) for p in res.t_marginal[i]])
        files[f"predictions_run{r}.csv"] = _csv_text(header, rows)
        if args.method == "cvi":
            files[f"trace_run{r}.csv"] = _csv_text(
                ["iteration", "max_change"], [(n + 1, float(v)) for n, v in enumerate(res.trace)])
        err = error_rate(res.T_hat, truth) if args.evaluate else float("nan")
        summary_rows.append([r, seed, err, res.nll, len(res.trace), str(res.converged).lower()])

    errs = np.array([row[2] for row in summary_rows])
    nlls = np.array([row[3] for row in summary_rows])
    summary_rows.append(["mean", "", float(errs.mean()), float(nlls.mean()), "", ""])
    summary_rows.append(["std", "", float(errs.std()), float(nlls.std()), "", ""])
    header = ["run", "seed", "error_rate", "nll", "iterations", "converged"]
    files["summary.csv"] = _csv_text(header, summary_rows)
    files["manifest.txt"] = _manifest("aggregate", args)
    _write_files(Path(args.out), files)
    sys.stdout.write(_table(header, summary_rows))
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _read_predictions(path: str):
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["item", "label"]:
            raise DataError(f"{path}: expected a header starting with item,label")
        has_level = len(header) > 2 and header[2] == "level"
        preds, levels = {}, {}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields")
            try:
                label = int(row[1])
                level = int(row[2]) if has_level else None
            except ValueError:
                raise DataError(f"{path}:{reader.line_num}: non-integer label or level") from None
            if label < 1 or (level is not None and level < 1):
                raise DataError(f"{path}:{reader.line_num}: label/level must be >= 1")
            if row[0] in preds:
                raise DataError(f"{path}:{reader.line_num}: duplicate item {row[0]!r}")
            preds[row[0]] = label - 1
            if has_level:
                levels[row[0]] = level - 1
    if not preds:
        raise DataError(f"{path}: no predictions")
    return preds, (levels if has_level else None)


class _Ids:
    def __init__(self, ids, num_classes):
        self.item_ids = tuple(ids)
        self.num_classes = num_classes


def cmd_evaluate(args) -> int:
    preds, levels = _read_predictions(args.pred)
    ids = list(preds)
    with _open(args.truth) as fh:
        rows = list(csv.reader(fh))
    truth_ids = [r[0].strip() for r in rows[1:] if r]
    missing = [t for t in truth_ids if t not in preds]
    if missing:
        raise DataError(f"{len(missing)} ground-truth item(s) have no prediction, "
                        f"e.g. {missing[0]!r}")
    max_label = max(preds.values()) + 1
    with _open(args.truth) as fh:
        truth = parse_ground_truth(fh, _Ids(ids, max(max_label, args.classes or 0) or None))
    predicted = np.array([preds[i] for i in ids])
    report = [("items_evaluated", len(truth)), ("error_rate", error_rate(predicted, truth)),
              ("accuracy", 1.0 - error_rate(predicted, truth))]

    if args.labels:
        labels = _load_labels(args)
        unknown = [name for name in labels.item_ids if name not in preds]
        if unknown:
            raise DataError(f"label file has {len(unknown)} item(s) without prediction, "
                            f"e.g. {unknown[0]!r}")
        if levels is None:
            raise DataError("difficulty report needs a level column in the prediction file")
        with _open(args.truth) as fh:
            label_truth = parse_ground_truth(fh, labels)
        q = np.array([levels[name] for name in labels.item_ids])
        H = args.levels or int(q.max()) + 1
        for h, v in enumerate(difficulty_quality(labels, label_truth, q, H)):
            report.append((f"level_{h + 1}_label_error", float(v)))

    text = _table(["metric", "value"], report)
    if args.out:
        _write_files(Path(args.out), {"report.csv": _csv_text(["metric", "value"], report),
                                      "manifest.txt": _manifest("evaluate", args)})
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# select-h
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_select_h(args) -> int:
    if args.method not in LEVEL_METHODS:
        raise UsageError(f"select-h needs one of {', '.join(LEVEL_METHODS)}")
    candidates = _int_list(args.candidates)
    seeds = _int_list(args.seeds)
    if not candidates or not seeds:
        raise UsageError("need at least one candidate and one seed")
    minimum = 3 if args.method == "fidbla" else 1
    if min(candidates) < minimum:
        raise UsageError(f"candidates must be >= {minimum} for {args.method}")
    hyper = replace(_hyper(args), H=max(candidates))
    labels = _load_labels(args)
    best, table = select_h(labels, candidates, args.method, seeds, hyper=hyper, init=args.init,
                           scale=args.scale, samples=args.samples, burn_in=args.burnin,
                           tol=args.tol, max_iters=args.max_iters)
    header = ["H", "nll_mean", "nll_std"] + [f"nll_seed{s}" for s in seeds]
    rows = [[row.H, row.nll_mean, row.nll_std] + list(row.nlls) for row in table]
    note = ("# likelihood uses plug-in estimates: posterior-mean pi, "
            "per-item argmax T and Q\n")
    files = {"select_h.csv": _csv_text(header, rows), "manifest.txt": _manifest("select-h", args)}
    if args.out:
        _write_files(Path(args.out), files)
    sys.stdout.write(note + _table(header, rows) + f"selected H = {best}\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_flags(p) -> None:
    p.add_argument("--levels", type=int, default=2, help="number of difficulty levels H")
    p.add_argument("--init", choices=INITS, default="glad")
    p.add_argument("--omega", type=float, default=1.0)
    p.add_argument("--gamma-alpha", type=float, default=1.0)
    p.add_argument("--gamma-beta", type=float, default=1.0)
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.8)
    p.add_argument("--scale", type=float, default=DEFAULT_SCALE,
                   help="ability scale x in ability = x * correct_rate")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--burnin", type=int, default=100)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=200)


def _input_flags(p) -> None:
    p.add_argument("--labels", required=True, help="item,worker,label file")
    p.add_argument("--index-map", help="kind,index,id file pinning the id order")
    p.add_argument("--classes", type=int, help="number of classes (default: max label)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idbla", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic crowd dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value generator settings")
    p.add_argument("--items", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--skill-mean", type=float)
    p.add_argument("--skill-concentration", type=float)
    p.add_argument("--allow-unlabeled", action="store_true",
                   help="keep items that no worker happened to label")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="infer true labels")
    p.add_argument("--config", help="key=value defaults, e.g. a previous manifest")
    _input_flags(p)
    p.add_argument("--truth", help="item,label ground truth")
    p.add_argument("--method", default="mv", help=f"one of {', '.join(METHODS)}")
    _model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--evaluate", action="store_true", help="report error rates against --truth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("evaluate", help="score a prediction file")
    p.add_argument("--config")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--labels", help="label file, enables the per-level difficulty report")
    p.add_argument("--index-map")
    p.add_argument("--classes", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select-h", help="choose the number of difficulty levels")
    p.add_argument("--config")
    _input_flags(p)
    p.add_argument("--candidates", default="1,2,3,4")
    p.add_argument("--method", default="idbla")
    p.add_argument("--seeds", default="0")
    _model_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select_h)
    parser.commands = sub.choices
    return parser


def _apply_config(parser, argv) -> None:
    """Install ``--config`` key=value pairs as defaults of the chosen subcommand.

    Explicit flags still win because they are parsed afterwards.
    """
    sub_name = next((a for a in argv if a in parser.commands), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if sub_name in (None, "synth") or not known.config:
        return
    config = _read_config(known.config)
    command = config.pop("command", sub_name)
    config.pop("version", None)
    if command != sub_name:
        raise UsageError(f"config is a {command!r} manifest, not {sub_name!r}")
    subparser = parser.commands[sub_name]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in config.items():
        if key not in actions or key in MANIFEST_SKIP:
            raise UsageError(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() == "true"
        else:
            try:
                defaults[key] = action.type(value) if action.type else value
            except ValueError:
                raise UsageError(f"bad value for {key!r}: {value!r}") from None
        action.required = False
    subparser.set_defaults(**defaults)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"idbla: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError) as exc:
        print(f"idbla: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

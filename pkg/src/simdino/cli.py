"""Command-line entry point: ``simdino {generate,train,eval,verify,report}``.

Exit codes: 0 success, 1 bad input (config, paths, formats), 2 usage,
3 training diverged, 4 checkpoint/config hash mismatch, 5 a gradient bound
or check was violated.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .coding_rate import CERTIFIED_CONSTANT, QUOTED_CONSTANT, verify_theorem
from .config import CLI_MODES, ConfigError, RunConfig
from .data import Dataset, SyntheticDatasetSpec, generate, load_dataset, save_dataset
from .evaluation import FeatureTable, collapse_metrics, extract_features, knn_probe, linear_probe
from .plotting import write_line_plot
from .serialization import FormatError, write_features
from .trainer import (METRIC_COLUMNS, HashMismatch, TrainingDiverged, init_state, load_state,
                      run_training)

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_DIVERGED, EXIT_HASH, EXIT_VIOLATION = 0, 1, 2, 3, 4, 5
EXTRA_COLUMNS = ("wd", "gamma", "patch", "masked_tokens")
EVAL_COLUMNS = ("network", "knn", "linear", "coding_rate", "effective_rank", "mean_pairwise_cosine", "note")

log = logging.getLogger("simdino")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.for_mode(getattr(args, "mode", None) or "simdino")
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    if getattr(args, "out", None) is not None:
        over["out_dir"] = str(args.out)
    return cfg.with_overrides(**over) if over else cfg


def synthetic_spec(cfg: RunConfig) -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec(n_classes=cfg.n_classes, per_class=cfg.per_class,
                                image_size=cfg.image_size, noise=cfg.noise, seed=cfg.seed)


def resolve_dataset(cfg: RunConfig, override=None) -> Dataset:
    path = override or cfg.dataset
    if path:
        return load_dataset(path)
    return generate(synthetic_spec(cfg))


class MetricsWriter:
    """Incremental metrics CSV; on resume keeps rows with step < ``start``."""

    def __init__(self, path: Path, columns, start: int = 0):
        self.path = Path(path)
        self.columns = list(columns)
        kept = []
        if start > 0 and self.path.exists():
            with open(self.path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["step"]) < start]
        self.fh = open(self.path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(self.columns)
        for r in kept:
            self.writer.writerow([r.get(c, "") for c in self.columns])
        self.fh.flush()

    def write(self, metrics: dict) -> None:
        self.writer.writerow([_fmt(metrics.get(c)) for c in self.columns])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    ds = generate(synthetic_spec(cfg))
    try:
        save_dataset(ds, out)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}") from exc
    print(f"wrote {len(ds)} images ({cfg.n_classes} classes) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    ds = resolve_dataset(cfg, args.dataset)
    state = None
    if args.resume:
        state = load_state(args.resume, cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from exc
    columns = list(METRIC_COLUMNS) + [c for c in EXTRA_COLUMNS
                                      if c not in ("patch", "masked_tokens") or cfg.loss_mode == "simdinov2"]
    writer = MetricsWriter(out / "metrics.csv", columns, 0 if state is None else state.step)
    try:
        state, _ = run_training(cfg, ds, state, out, on_step=lambda st, res: writer.write(res.metrics))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        writer.close()
    print(f"trained {state.step} steps; artifacts in {out}")
    return EXIT_OK


def _probe_row(name, params, ds, cfg, seed, note=""):
    feats = extract_features(params, ds.images, cfg.eval_short_edge, cfg.eval_size)
    tr, va = ds.indices("train"), ds.indices("val")
    train = FeatureTable(feats[:, tr], ds.labels[tr], "train")
    val = FeatureTable(feats[:, va], ds.labels[va], "val")
    row = {"network": name, "note": note,
           "knn": knn_probe(train, val, min(cfg.knn_k, train.M)),
           "linear": linear_probe(train, val, cfg.probe_epochs, cfg.probe_lr, seed)}
    row.update(collapse_metrics(feats, cfg.eps))
    return row, feats


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    ds = resolve_dataset(cfg, args.dataset)
    try:
        state = load_state(args.checkpoint, cfg)
    except HashMismatch as exc:
        print(f"error: refusing to evaluate: checkpoint hash {exc.checkpoint_hash} "
              f"!= config hash {exc.config_hash}", file=sys.stderr)
        return EXIT_HASH
    seed = cfg.seed if args.seed is None else args.seed
    student_note = "student; identical to teacher (no-distill)" if cfg.mode == "no-distill" else "student"
    rows = []
    n_cls = int(ds.labels.max()) + 1
    out.mkdir(parents=True, exist_ok=True)
    for name, params, note in (("teacher", state.teacher, "reported network"),
                               ("student", state.student, student_note)):
        row, feats = _probe_row(name, params, ds, cfg, seed, note)
        rows.append(row)
        write_features(out / f"features_{name}.bin", feats, ds.labels, n_cls)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in EVAL_COLUMNS])
    lines = [f"evaluated {args.checkpoint} at step {state.step} ({cfg.mode})",
             f"generated {_dt.datetime.now().isoformat(timespec='seconds')}"]
    for r in rows:
        lines.append(f"{r['network']:>8}: knn {r['knn']:.4f}  linear {r['linear']:.4f}  "
                     f"eff_rank {r['effective_rank']:.3f}  R_eps {r['coding_rate']:.4f}  [{r['note']}]")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_verify(args) -> int:
    ds, ns, epss = _int_list(args.d), _int_list(args.n), _float_list(args.eps)
    if not ds or not ns or not epss or min(ds) < 1 or min(ns) < 1 or min(epss) <= 0 or args.trials < 1:
        raise CliError("grids must be non-empty and positive; trials >= 1", EXIT_USAGE)
    rng = np.random.default_rng(args.seed)
    rows = [verify_theorem(d, n, e, args.trials, rng, args.fd_trials)
            for d in ds for n in ns for e in epss]
    header = ("d", "n", "eps", "trials", "fd_max_rel_err", "empirical_max", "bound", "ratio",
              "quoted_bound", "quoted_ratio", "sandwich_checked", "sandwich_ok", "ok")
    table = [[r.d, r.n, r.eps, r.trials, r.fd_max_rel_err, r.empirical_max, r.bound, r.ratio,
              r.quoted_bound, r.quoted_ratio, r.sandwich_checked, r.sandwich_ok, r.ok] for r in rows]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "verify.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[_fmt(v) for v in row] for row in table])
    print(f"{'d':>3} {'n':>3} {'eps':>5} {'fd_err':>9} {'max|grad|':>10} {'bound':>9} {'ratio':>6} "
          f"{'q.ratio':>7} sandwich")
    for r in rows:
        sw = ("ok" if r.sandwich_ok else "FAIL") if r.sandwich_checked else "n/a"
        print(f"{r.d:>3} {r.n:>3} {r.eps:>5.2f} {r.fd_max_rel_err:>9.2e} {r.empirical_max:>10.5f} "
              f"{r.bound:>9.5f} {r.ratio:>6.3f} {r.quoted_ratio:>7.3f} {sw}")
    worst = max(rows, key=lambda r: r.ratio)
    quoted_viol = sum(r.quoted_ratio > 1 for r in rows)
    print(f"certified bound sqrt(d*min(d,n)/n)*C/eps with C={CERTIFIED_CONSTANT}; "
          f"max ratio {worst.ratio:.4f} at (d={worst.d}, n={worst.n}, eps={worst.eps})")
    print(f"with the tighter constant C={QUOTED_CONSTANT}: {quoted_viol} of {len(rows)} grid points exceed it")
    bad = [r for r in rows if not r.ok]
    if bad:
        print(f"{len(bad)} grid point(s) failed", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _read_log(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise CliError(f"{path}: not a metrics log (no 'step' column)")
        return list(reader.fieldnames), list(reader)


def _label(path: Path, taken: set) -> str:
    base = path.parent.name if path.name == "metrics.csv" and path.parent.name else path.stem
    label, k = base, 1
    while label in taken:
        k += 1
        label = f"{base}#{k}"
    taken.add(label)
    return label


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.logs]
    logs = [_read_log(p) for p in paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    union: list[str] = []
    for cols, _ in logs:
        union += [c for c in cols if c not in union]
    if any(cols != logs[0][0] for cols, _ in logs):
        print("warning: metric columns differ between logs; missing entries left blank", file=sys.stderr)
    metrics = [c for c in union if c != "step"]
    if len(logs) == 1:
        cols, rows = logs[0]
        header, body, truncated = union, [[r.get(c, "") or "" for c in union] for r in rows], False
        labels = [_label(paths[0], set())]
    else:
        n = min(len(rows) for _, rows in logs)
        truncated = any(len(rows) != n for _, rows in logs)
        taken: set = set()
        labels = [_label(p, taken) for p in paths]
        header = ["step"] + [f"{lab}:{m}" for m in metrics for lab in labels] + ["truncated"]
        body = []
        for i in range(n):
            row = [logs[0][1][i]["step"]]
            for m in metrics:
                row += [(rows[i].get(m) or "") for _, rows in logs]
            body.append(row + [int(truncated)])
        if truncated:
            print(f"note: logs aligned to the shortest ({n} rows); truncated=1", file=sys.stderr)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
    for m in metrics:
        series = []
        for _, rows in logs:
            x = np.array([float(r["step"]) for r in rows])
            y = np.array([float(r[m]) if r.get(m) not in (None, "") else np.nan for r in rows])
            series.append((x, y))
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in m)
        write_line_plot(out / f"{safe}.png", series)
    print(f"report for {', '.join(labels)} written to {out}" + (" (truncated)" if truncated else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simdino", description="Simplified self-distillation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", type=Path, help="key = value run configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    g = sub.add_parser("generate", help="write the synthetic blob dataset")
    common(g, out_required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and write checkpoints plus metrics.csv")
    common(t)
    t.add_argument("--mode", choices=CLI_MODES)
    t.add_argument("--dataset", type=Path, help="dataset directory (default: config or synthetic)")
    t.add_argument("--resume", type=Path, help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="kNN / linear / collapse probes of a checkpoint")
    common(e)
    e.add_argument("--mode", choices=CLI_MODES)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="check the coding-rate gradient bound on a grid")
    v.add_argument("--d", default="4,16,32")
    v.add_argument("--n", default="8,16,64")
    v.add_argument("--eps", default="0.1,0.5,1.0")
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--fd-trials", type=int, default=3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="align metrics logs by step and plot each metric")
    r.add_argument("logs", nargs="+", type=Path)
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except HashMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``switchkd <command>``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import data as D
from . import engine as E
from . import verify as V
from .config import Layout, RunConfig, cell_key, load_config
from .errors import CompatibilityError, MissingArtifact, SwitchKDError
from .losses import StrategyName
from .model import ToyVLM, check_switch_compatible, load_checkpoint, save_checkpoint

log = logging.getLogger("switchkd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

# One row per run, plus one mean-over-seeds row per (scheme, strategy, switch).
CSV_COLUMNS = [
    "row_type",           # "run" or "mean"
    "scheme",
    "strategy",
    "switch",             # 1 with the visual-switch term, 0 without
    "seed",               # run seed; empty on mean rows
    "n_seeds",            # 1 on run rows
    "val_accuracy",
    "val_accuracy_std",   # sample std over seeds; empty on run rows
    "teacher_agreement",
    "L_CE",               # loss components at the last logged step
    "L_Align",
    "L_VSD",
    "total",
    "steps",
]


class UsageError(SwitchKDError):
    pass


# -- helpers ------------------------------------------------------------------------------
def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_rows(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    path.write_text(buf.getvalue())
    return path


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _load_split(path: Path, hint: str) -> list[D.SyntheticSample]:
    if not path.exists():
        raise MissingArtifact("dataset", path, hint)
    return D.load(path)


def _load_teacher(layout: Layout) -> ToyVLM:
    manifest = layout.teacher_checkpoint.with_suffix(".json")
    if not manifest.exists():
        raise MissingArtifact("teacher checkpoint", manifest, "run `switchkd train-teacher` first")
    teacher, _ = load_checkpoint(layout.teacher_checkpoint)
    return teacher


def worker_count(requested: int | None = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("SWITCHKD_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError as exc:
            raise UsageError(f"SWITCHKD_THREADS must be an integer, got {cap!r}") from exc
    return max(1, n)


# -- commands -----------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, layout: Layout) -> dict:
    """Write train/val JSON-lines files (and the teacher's, when it has its own spec)."""
    jobs = [(cfg.dataset, layout.train_path, layout.val_path)]
    if cfg.teacher_dataset is not None:
        jobs.append((cfg.teacher_dataset, layout.teacher_train_path(cfg), layout.teacher_val_path(cfg)))
    written = {}
    for spec, train_path, val_path in jobs:
        train, val = D.generate(spec)
        meta = {"spec": spec.model_dump(mode="json")}
        D.persist(train, train_path, {**meta, "split": "train"})
        D.persist(val, val_path, {**meta, "split": "val"})
        written[str(train_path)] = len(train)
        written[str(val_path)] = len(val)
    return {"files": written}


def cmd_train_teacher(cfg: RunConfig, layout: Layout) -> dict:
    hint = "run `switchkd gen-data` first"
    train = _load_split(layout.teacher_train_path(cfg), hint)
    val = _load_split(layout.teacher_val_path(cfg), hint)
    tt = cfg.teacher_training
    teacher = ToyVLM(cfg.teacher, seed=tt.seed)
    log_path = layout.teacher_dir / "run_log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.unlink(missing_ok=True)
    for stage, hyper in ((E.PT, tt.pt), (E.SFT, tt.sft)):
        log.info("teacher stage %s", stage.name)
        E.train_stage(teacher, None, train, stage, cfg.distill, seed=tt.seed, log_path=log_path,
                      hyper=hyper)
    result = E.evaluate(teacher, val)
    metrics = {"val_accuracy": result.accuracy, "n_val": result.n}
    save_checkpoint(teacher, layout.teacher_checkpoint, extra=metrics)
    _write_json(layout.teacher_dir / "metrics.json", metrics)
    return metrics


def run_cell(cfg: RunConfig, layout: Layout, scheme: str, strategy: str, switch: bool, seed: int,
             cell_dir: Path) -> dict:
    """One distillation run; returns its CSV row."""
    teacher = _load_teacher(layout)
    check_switch_compatible(teacher.cfg, cfg.student)
    hint = "run `switchkd gen-data` first"
    train, val = _load_split(layout.train_path, hint), _load_split(layout.val_path, hint)
    dcfg = E.DistillConfig.model_validate({
        **cfg.distill.model_dump(mode="json"),
        "strategy": StrategyName.parse(strategy).value,
        "switch_enabled": switch,
        "scheme": E.Scheme.parse(scheme).value,
    })
    student = ToyVLM(cfg.student, seed=E.derive_seed(seed, 1))
    result = E.run_scheme(dcfg.scheme, teacher, student, train, val, dcfg, seed=seed,
                          out_dir=cell_dir)
    row = {"row_type": "run", "scheme": dcfg.scheme.value, "strategy": dcfg.strategy.value,
           "switch": switch, "seed": seed, "n_seeds": 1, "val_accuracy": result.val_accuracy,
           "teacher_agreement": result.teacher_agreement, "steps": len(result.trace),
           **result.final_components()}
    write_rows(cell_dir / "summary.csv", [row])
    return row


def cmd_distill(cfg: RunConfig, layout: Layout, *, strategy: str, switch: bool, scheme: str,
                seed: int) -> dict:
    cell_dir = layout.distill_dir(scheme, strategy, switch, seed)
    return run_cell(cfg, layout, scheme, strategy, switch, seed, cell_dir)


def _ablate_cell(payload: tuple) -> dict:
    cfg_json, root, scheme, strategy, switch, seed = payload
    cfg = RunConfig.model_validate_json(cfg_json)
    layout = Layout(root)
    key = cell_key(scheme, strategy, switch, seed)
    cells = layout.ablate_dir / "cells"
    row = run_cell(cfg, layout, scheme, strategy, switch, seed, cells / key)
    _write_json(cells / f"{key}.json", row)
    return row


def summarize(rows: list[dict]) -> list[dict]:
    """Mean-over-seeds rows, in first-appearance order of their cell."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scheme"], r["strategy"], bool(r["switch"])), []).append(r)
    out = []
    for (scheme, strategy, switch), members in groups.items():
        acc = np.array([float(m["val_accuracy"]) for m in members])
        agree = [m.get("teacher_agreement") for m in members]
        mean_row = {"row_type": "mean", "scheme": scheme, "strategy": strategy, "switch": switch,
                    "seed": "", "n_seeds": len(members), "val_accuracy": float(acc.mean()),
                    "val_accuracy_std": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0}
        if all(a is not None for a in agree):
            mean_row["teacher_agreement"] = float(np.mean(agree))
        for comp in ("L_CE", "L_Align", "L_VSD", "total"):
            vals = [m[comp] for m in members if m.get(comp) is not None]
            if len(vals) == len(members):
                mean_row[comp] = float(np.mean(vals))
        out.append(mean_row)
    return out


def cmd_ablate(cfg: RunConfig, layout: Layout, *, strategies, switches, schemes, seeds,
               workers: int | None = None) -> dict:
    """Sweep schemes x strategies x switch x seeds; completed cells are reused on rerun."""
    _load_teacher(layout)
    cells_dir = layout.ablate_dir / "cells"
    grid = list(itertools.product(schemes, strategies, switches, seeds))
    rows: dict[str, dict] = {}
    todo = []
    for scheme, strategy, switch, seed in grid:
        key = cell_key(scheme, strategy, switch, seed)
        done = cells_dir / f"{key}.json"
        if done.exists():
            rows[key] = json.loads(done.read_text())
        else:
            todo.append((cfg.model_dump_json(), str(layout.root), scheme, strategy, switch, seed))
    n_workers = min(worker_count(workers), max(1, len(todo)))
    log.info("ablate: %d cells, %d cached, %d workers", len(grid), len(grid) - len(todo), n_workers)
    if n_workers == 1:
        results = map(_ablate_cell, todo)
    else:
        pool = ProcessPoolExecutor(max_workers=n_workers)
        results = pool.map(_ablate_cell, todo)
    try:
        for payload, row in zip(todo, results):
            rows[cell_key(*payload[2:])] = row
    finally:
        if n_workers > 1:
            pool.shutdown()
    ordered = [rows[cell_key(*g)] for g in grid]
    table = ordered + summarize(ordered)
    path = write_rows(layout.ablate_dir / "results.csv", table)
    return {"csv": str(path), "cells": len(grid), "reused": len(grid) - len(todo),
            "summary": summarize(ordered)}


def cmd_eval(cfg: RunConfig, layout: Layout, *, checkpoint: str | None, split: str) -> dict:
    hint = "run `switchkd gen-data` first"
    path = layout.val_path if split == "val" else layout.train_path
    samples = _load_split(path, hint)
    if checkpoint is None:
        model = _load_teacher(layout)
        reference = None
    else:
        if not Path(checkpoint).with_suffix(".json").exists():
            raise MissingArtifact("checkpoint", Path(checkpoint).with_suffix(".json"),
                                  "pass the path printed by `switchkd distill`")
        model, _ = load_checkpoint(checkpoint)
        manifest = layout.teacher_checkpoint.with_suffix(".json")
        reference = load_checkpoint(layout.teacher_checkpoint)[0] if manifest.exists() else None
    result = E.evaluate(model, samples, reference)
    return {"split": split, **result.as_dict()}


def cmd_verify(seed: int, checks: list[str] | None) -> tuple[bool, str]:
    results = V.run_checks(seed, checks)
    return all(r.passed for r in results), V.format_report(results)


# -- argument parsing ---------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _strategy(text: str) -> str:
    try:
        return StrategyName.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _scheme(text: str) -> str:
    try:
        return E.Scheme.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return value


def _csv_list(kind):
    def parse(text: str) -> list:
        return [kind(t) for t in text.split(",") if t.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="switchkd", description="Visual-switch knowledge distillation on a toy VLM.")
    p.add_argument("--config", help="run config document (JSON or YAML)")
    p.add_argument("--seed", type=_u64, help="seed override (see README per command)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", help="generate train/val datasets")
    sub.add_parser("train-teacher", help="train the teacher (PT then SFT)")

    d = sub.add_parser("distill", help="train one student with a distillation scheme")
    d.add_argument("--strategy", type=_strategy, default=None)
    d.add_argument("--switch", action=argparse.BooleanOptionalAction, default=None)
    d.add_argument("--scheme", type=_scheme, default=None)
    d.add_argument("--seed", type=_u64, dest="run_seed", default=None)

    a = sub.add_parser("ablate", help="sweep strategies, switch and schemes over seeds")
    a.add_argument("--strategies", type=_csv_list(_strategy), default=None)
    a.add_argument("--switch", choices=["on", "off", "both"], default=None)
    a.add_argument("--schemes", type=_csv_list(_scheme), default=None)
    a.add_argument("--seeds", type=_csv_list(_u64), default=None)
    a.add_argument("--workers", type=int, default=None)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--checks", type=_csv_list(str), default=None,
                   help=f"subset of: {', '.join(V.CHECKS)}")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", default=None, help="defaults to the teacher checkpoint")
    e.add_argument("--split", choices=["val", "train"], default="val")
    return p


def _resolve(args) -> tuple[RunConfig, Layout]:
    if args.config and not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.updated(out_dir=args.out)
    if args.seed is not None and args.command == "gen-data":
        cfg = cfg.updated(dataset={**cfg.dataset.model_dump(mode="json"), "seed": args.seed})
    if args.seed is not None and args.command == "train-teacher":
        cfg = cfg.updated(teacher_training={**cfg.teacher_training.model_dump(mode="json"),
                                            "seed": args.seed})
    return cfg, Layout(cfg.out_dir)


def _dispatch(args) -> int:
    if args.command == "verify":
        if args.checks:
            unknown = [c for c in args.checks if c not in V.CHECKS]
            if unknown:
                raise UsageError(f"unknown check(s) {unknown}; valid values: {', '.join(V.CHECKS)}")
        ok, report = cmd_verify(args.seed or 0, args.checks)
        print(report)
        return EXIT_OK if ok else EXIT_VERIFY

    cfg, layout = _resolve(args)
    if args.command == "gen-data":
        out = cmd_gen_data(cfg, layout)
    elif args.command == "train-teacher":
        out = cmd_train_teacher(cfg, layout)
    elif args.command == "distill":
        seed = args.run_seed if args.run_seed is not None else (
            args.seed if args.seed is not None else cfg.seeds[0])
        out = cmd_distill(
            cfg, layout,
            strategy=args.strategy or cfg.distill.strategy.value,
            switch=cfg.distill.switch_enabled if args.switch is None else args.switch,
            scheme=args.scheme or cfg.distill.scheme.value,
            seed=seed)
    elif args.command == "ablate":
        switches = {"on": [True], "off": [False], "both": [True, False], None: cfg.ablate.switch}
        seeds = args.seeds or ([args.seed] if args.seed is not None else cfg.seeds)
        out = cmd_ablate(
            cfg, layout,
            strategies=args.strategies or [s.value for s in cfg.ablate.strategies],
            switches=switches[args.switch],
            schemes=args.schemes or [s.value for s in cfg.ablate.schemes],
            seeds=seeds, workers=args.workers)
    else:
        out = cmd_eval(cfg, layout, checkpoint=args.checkpoint, split=args.split)
    print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ValidationError, UsageError, CompatibilityError) as exc:
        print(f"switchkd: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SwitchKDError, OSError, ValueError) as exc:
        print(f"switchkd: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

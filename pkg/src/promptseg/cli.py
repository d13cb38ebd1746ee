"""Command-line front door: ``promptseg {synth,train,eval,ablate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import plots
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetIOError, DatasetManifest, SplitManifest, build_dataset, default_tasks
from .experiment import find_records, read_history, run_experiment, summary_rows, write_rows
from .metrics import TaskReport, format_csv, format_table
from .training import ArrayData, TrainConfig, evaluate

log = logging.getLogger("promptseg")

# flag name -> TrainConfig field
OVERRIDES = {
    "seed_model": "seed_model",
    "seed_data": "seed_data",
    "seed_perturb": "seed_perturb",
    "labeled_fraction": "labeled_fraction",
    "epochs": "epochs",
    "batch": "batch_size",
    "lr": "init_lr",
    "power": "power",
    "uplc_n": "uplc_n",
    "uplc_kind": "uplc_kind",
    "uplc_rate": "uplc_rate",
    "lambda_u": "lambda_u",
    "eval_every": "eval_every",
}

GRID = [
    ("pud+uplc", True, True),
    ("pud", True, False),
    ("uplc", False, True),
    ("none", False, False),
]


class CliError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW")
    return parts[0], parts[1]


def _train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    g.add_argument("--config", type=Path, help="JSON file of training settings; flags override it")
    g.add_argument("--seed-model", type=int)
    g.add_argument("--seed-data", type=int)
    g.add_argument("--seed-perturb", type=int)
    g.add_argument("--labeled-fraction")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--power", type=float)
    g.add_argument("--uplc-n", type=int)
    g.add_argument("--uplc-kind", choices=["dropout", "gaussian"])
    g.add_argument("--uplc-rate", type=float)
    g.add_argument("--lambda-u", type=float)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--no-prompt", action="store_true", help="disable the prompt pathway (PuD ablation)")
    g.add_argument("--no-uplc", action="store_true", help="use uncalibrated pseudo-labels")
    g.add_argument("--no-pd-prompt", action="store_true", help="build the pseudo-supervised decoder without prompt blocks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-task dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tasks", type=int, default=2)
    p.add_argument("--n-samples", type=int, default=400)
    p.add_argument("--size", type=parse_size, default=(64, 64))
    p.add_argument("--seed-data", type=int, default=0)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("train", help="train one model and write its record")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--force", action="store_true")
    _train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split's test set")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=Path, help="split.json (default: next to the checkpoint)")
    p.add_argument("--decoder", choices=["sd", "pd"], default="sd", help="decoder that produces predictions")
    p.add_argument("--out", type=Path, help="also write the report to this CSV file")
    p.add_argument("--format", choices=["table", "csv"], default="table")

    p = sub.add_parser("ablate", help="2x2 prompt/calibration grid and perturbation-count sweep")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--force", action="store_true")
    p.add_argument("--sweep", type=int, nargs="+", default=[2, 3, 4], metavar="N")
    p.add_argument("--skip-grid", action="store_true")
    p.add_argument("--skip-sweep", action="store_true")
    _train_flags(p)

    p = sub.add_parser("report", help="summary tables and figures from a directory of records")
    p.add_argument("records", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: <records>/report)")
    p.add_argument("--format", choices=["table", "csv"], default="table")
    return parser


def config_from_args(args) -> TrainConfig:
    """Config file (if any) with explicitly given flags layered on top."""
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {field: getattr(args, flag) for flag, field in OVERRIDES.items() if getattr(args, flag) is not None}
    if args.no_prompt:
        changes["prompt_enabled"] = False
    if args.no_uplc:
        changes["uplc_enabled"] = False
    if args.no_pd_prompt:
        changes["pud_in_pd"] = False
    return replace(base, **changes)


def _check_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"{out} exists and is not empty; pass --force to write into it")


def _reports(record: dict) -> list[TaskReport]:
    fields = ("task_id", "dice", "iou", "hd95", "n_samples", "hd95_excluded")
    nan = float("nan")
    return [TaskReport(**{k: (nan if r[k] is None else r[k]) for k in fields}) for r in record["reports"]]


def _emit(reports, mdice, miou, fmt, names=None):
    print(format_csv(reports, mdice, miou) if fmt == "csv" else format_table(reports, mdice, miou, names), end="")


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    _check_out(args.out, args.force)
    tasks = default_tasks(args.tasks)
    manifest = build_dataset(args.n_samples, tasks, args.size, args.seed_data, args.out)
    print(args.out / "manifest.json")
    for task in tasks:
        n = sum(task.task_id in s.task_ids for s in manifest.samples)
        print(f"task {task.task_id} {task.name}: {n} samples")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    _check_out(args.out, args.force)
    record = run_experiment(cfg, args.data, args.out, label=args.out.name)
    names = {r["task_id"]: r["name"] for r in record["reports"]}
    _emit(_reports(record), record["mdice"], record["miou"], args.format, names)
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint.is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    split_path = args.split or args.checkpoint.parent / "split.json"
    if not split_path.is_file():
        raise CliError(f"split file not found: {split_path}")
    model, meta = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"]) if "config" in meta else TrainConfig()
    split = SplitManifest.from_dict(json.loads(split_path.read_text()))
    manifest = DatasetManifest.load(args.data)
    data = ArrayData.from_manifest(manifest, cfg.image_size)
    model.eval()
    reports, mdice, miou = evaluate(model, data, split.test_ids, cfg.prompt_enabled, args.decoder)
    if args.out:
        args.out.write_text(format_csv(reports, mdice, miou))
    _emit(reports, mdice, miou, args.format, data.names)
    return 0


def _arm(cfg, data_dir, out, label, data, done, failed):
    try:
        done.append(run_experiment(cfg, data_dir, out, label=label, data=data))
    except Exception as e:  # keep going; the other arms are still informative
        log.error("arm %s failed: %s", label, e)
        failed.append(label)


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    _check_out(args.out, args.force)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(args.data)
    data = ArrayData.from_manifest(manifest, base.image_size)
    failed: list[str] = []

    if not args.skip_grid:
        grid: list[dict] = []
        for label, prompt, uplc in GRID:
            cfg = replace(base, prompt_enabled=prompt, uplc_enabled=uplc)
            _arm(cfg, args.data, args.out / "grid" / label, label, data, grid, failed)
        fields, rows = summary_rows(grid)
        write_rows(args.out / "ablation.csv", fields, rows)
        print(_format_rows(fields, rows, args.format), end="")

    if not args.skip_sweep:
        sweep: list[dict] = []
        for n in args.sweep:
            cfg = replace(base, prompt_enabled=True, uplc_enabled=True, uplc_n=n)
            _arm(cfg, args.data, args.out / "sweep" / f"n{n}", f"n{n}", data, sweep, failed)
        sweep.sort(key=lambda r: r["config"]["uplc_n"])
        ns = [r["config"]["uplc_n"] for r in sweep]
        rows = [{"uplc_n": n, "mdice": f"{r['mdice']:.4f}", "miou": f"{r['miou']:.4f}"} for n, r in zip(ns, sweep)]
        write_rows(args.out / "nsweep.csv", ["uplc_n", "mdice", "miou"], rows)
        if sweep:
            plots.n_sweep_curve(ns, [r["mdice"] for r in sweep], args.out / "nsweep.svg", [r["miou"] for r in sweep])
        print(_format_rows(["uplc_n", "mdice", "miou"], rows, args.format), end="")

    if failed:
        print(f"failed arms: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _format_rows(fields, rows, fmt) -> str:
    if fmt == "csv":
        lines = [",".join(fields)] + [",".join(str(r.get(f, "")) for f in fields) for r in rows]
        return "\n".join(lines) + "\n"
    widths = [max([len(f)] + [len(str(r.get(f, ""))) for r in rows]) for f in fields]
    fmt_row = lambda vals: "  ".join(str(v).rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([fmt_row(fields)] + [fmt_row([r.get(f, "") for f in fields]) for r in rows]) + "\n"


def cmd_report(args) -> int:
    records = find_records(args.records) if args.records.is_dir() else []
    if not records:
        raise CliError(f"no experiment records under {args.records}")
    out = args.out or args.records / "report"
    out.mkdir(parents=True, exist_ok=True)
    fields, rows = summary_rows(records)
    write_rows(out / "summary.csv", fields, rows)
    print(_format_rows(fields, rows, args.format), end="")
    if len(records) < 2:
        return 0

    labels = [row["label"] for row in rows]
    if len(set(labels)) != len(labels):  # disambiguate same-named runs from different folders
        labels = [str(Path(r["_dir"]).relative_to(args.records)) for r in records]

    histories, curve_rows = {}, []
    for label, rec in zip(labels, records):
        hist = read_history(Path(rec["_dir"]) / rec["history"])
        histories[label] = hist
        curve_rows += [{"run": label, "epoch": h["epoch"], "l_sup": h["l_sup"], "l_unsup": h["l_unsup"]} for h in hist]
    write_rows(out / "loss_curves.csv", ["run", "epoch", "l_sup", "l_unsup"], curve_rows)
    plots.loss_curves(histories, out / "loss_curves.svg")

    names = {r["task_id"]: r["name"] for rec in records for r in rec["reports"]}
    bars = {label: {r["task_id"]: r["dice"] for r in rec["reports"]} for label, rec in zip(labels, records)}
    bar_rows = [{"run": lb, "task": t, "dice": f"{d:.4f}"} for lb in sorted(bars) for t, d in sorted(bars[lb].items())]
    write_rows(out / "task_dice.csv", ["run", "task", "dice"], bar_rows)
    plots.task_dice_bars(bars, names, out / "task_dice.svg")

    by_n = {}
    for rec in records:
        cfg = rec["config"]
        if cfg["prompt_enabled"] and cfg["uplc_enabled"]:
            by_n.setdefault(cfg["uplc_n"], []).append(rec)
    if len(by_n) >= 2:
        ns = sorted(by_n)
        md = [sum(r["mdice"] for r in by_n[n]) / len(by_n[n]) for n in ns]
        mi = [sum(r["miou"] for r in by_n[n]) / len(by_n[n]) for n in ns]
        write_rows(out / "nsweep.csv", ["uplc_n", "mdice", "miou"],
                   [{"uplc_n": n, "mdice": f"{a:.4f}", "miou": f"{b:.4f}"} for n, a, b in zip(ns, md, mi)])
        plots.n_sweep_curve(ns, md, out / "nsweep.svg", mi)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, CheckpointError, DatasetIOError, FileNotFoundError, ValueError) as e:
        print(f"promptseg {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

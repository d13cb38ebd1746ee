"""Experiment runs and their self-describing records."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

from . import __version__
from .data import DatasetManifest, SplitManifest, split_partition
from .training import ArrayData, TrainConfig, train

RECORD = "record.json"


def code_hash(version: str = __version__) -> str:
    """git blob hash of the code version string."""
    payload = f"promptseg {version}".encode()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_split(manifest: DatasetManifest, cfg: TrainConfig) -> SplitManifest:
    return split_partition(manifest, Fraction(cfg.labeled_fraction), cfg.seed_data)


def write_json(path, obj):
    Path(path).write_text(json.dumps(_json_safe(obj), indent=1, sort_keys=True) + "\n")


def run_experiment(cfg: TrainConfig, data_dir, out_dir, label: str = "", data: ArrayData | None = None) -> dict:
    """Split, train, evaluate, and write config/split/history/checkpoints/record under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(data_dir)
    split = make_split(manifest, cfg)
    write_json(out / "config.json", cfg.to_dict())
    write_json(out / "split.json", split.to_dict())

    start = time.perf_counter()
    data = data or ArrayData.from_manifest(manifest, cfg.image_size)
    state, paths = train(cfg, manifest, split, out, data=data)
    seconds = time.perf_counter() - start

    task_reports, mdice, miou = state.last_eval
    reports = [dict(asdict(r), name=data.names[r.task_id]) for r in task_reports]
    record = {
        "label": label,
        "config": cfg.to_dict(),
        "code_version": __version__,
        "code_hash": code_hash(),
        "dataset": str(Path(data_dir).resolve()),
        "split": {"path": "split.json", "sha256": file_sha256(out / "split.json")},
        "history": "history.csv",
        "checkpoint": "final.ckpt",
        "reports": reports,
        "mdice": mdice,
        "miou": miou,
        "wall_seconds": seconds,
    }
    write_json(out / RECORD, record)
    return record


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def load_record(path) -> dict:
    path = Path(path)
    rec = json.loads((path / RECORD if path.is_dir() else path).read_text())
    rec["_dir"] = str(path if path.is_dir() else path.parent)
    return rec


def find_records(root) -> list[dict]:
    return [load_record(p) for p in sorted(Path(root).rglob(RECORD))]


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_rows(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def summary_rows(records: list[dict]) -> tuple[list[str], list[dict]]:
    task_ids = sorted({r["task_id"] for rec in records for r in rec["reports"]})
    fields = ["label", "prompt", "uplc", "uplc_n", "labeled_fraction", "seed_model"]
    fields += [f"{k}_{t}" for t in task_ids for k in ("dice", "iou")] + ["mdice", "miou"]
    rows = []
    for rec in records:
        cfg = rec["config"]
        row = {
            "label": rec.get("label") or Path(rec["_dir"]).name,
            "prompt": int(cfg["prompt_enabled"]),
            "uplc": int(cfg["uplc_enabled"] and cfg["lambda_u"] > 0),
            "uplc_n": cfg["uplc_n"],
            "labeled_fraction": cfg["labeled_fraction"],
            "seed_model": cfg["seed_model"],
            "mdice": f"{rec['mdice']:.4f}",
            "miou": f"{rec['miou']:.4f}",
        }
        for r in rec["reports"]:
            row[f"dice_{r['task_id']}"] = f"{r['dice']:.4f}"
            row[f"iou_{r['task_id']}"] = f"{r['iou']:.4f}"
        rows.append(row)
    return fields, rows


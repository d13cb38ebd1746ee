"""Synthetic two-structure "ultrasound-like" datasets, manifests and splits.

Each image holds one structure per task. Which structure is the target depends
on the task, so a model that ignores the prompt cannot solve two tasks at once.

On-disk layout::

    <root>/manifest.json
    <root>/images/<sample_id>.png
    <root>/masks/<task_id>/<sample_id>.png     (0/255)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import CounterRNG, splitmix64

GENERATOR_VERSION = "promptseg-synth/1"
MIN_AREA = 0.02
MAX_AREA = 0.30
MAX_OVERLAP = 0.10
_MAX_ATTEMPTS = 200


class GenerationError(ValueError):
    pass


class DatasetIOError(OSError):
    pass


class SampleLoadError(ValueError):
    pass


# shape family per task index (cycled): (polarity, shape)
_FAMILIES = [("bright", "ellipse"), ("dark", "blob"), ("bright", "blob"), ("dark", "ellipse")]
_DEFAULT_NAMES = ["bright-ellipse", "dark-blob", "bright-blob", "dark-ellipse"]


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    prompt_text: str = ""

    def __post_init__(self):
        if not self.prompt_text:
            object.__setattr__(self, "prompt_text", prompt_for(self.name))

    @property
    def family(self) -> tuple[str, str]:
        return _FAMILIES[self.task_id % len(_FAMILIES)]


def prompt_for(name: str) -> str:
    return f"Segment the {name} in the ultrasound image."


def default_tasks(n: int = 2) -> list[TaskSpec]:
    tasks = []
    for i in range(n):
        name = _DEFAULT_NAMES[i % 4] if i < 4 else f"{_DEFAULT_NAMES[i % 4]}-{i // 4}"
        tasks.append(TaskSpec(i, name))
    return tasks


def _check_tasks(tasks):
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    prompts = [t.prompt_text for t in tasks]
    if len(set(prompts)) != len(prompts):
        raise ValueError("task prompts must be distinct")


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    masks: dict[int, np.ndarray]  # task_id -> (H, W) uint8 in {0, 1}
    sample_id: str
    provenance_seed: int


@dataclass
class SampleEntry:
    sample_id: str
    image: str
    masks: dict[int, str]

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.masks)


@dataclass
class DatasetManifest:
    tasks: list[TaskSpec]
    samples: list[SampleEntry]
    image_size: tuple[int, int]
    generator_version: str
    root_seed: int
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def entry(self, sample_id: str) -> SampleEntry:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(f"unknown sample id {sample_id!r}")

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def to_dict(self) -> dict:
        d = dict(self.extra)
        d.update(
            generator_version=self.generator_version,
            root_seed=self.root_seed,
            image_size=list(self.image_size),
            tasks=[{"task_id": t.task_id, "name": t.name, "prompt_text": t.prompt_text} for t in self.tasks],
            samples=[
                {
                    "sample_id": s.sample_id,
                    "image": s.image,
                    "masks": {str(k): v for k, v in sorted(s.masks.items())},
                    "task_ids": s.task_ids,
                }
                for s in self.samples
            ],
        )
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        known = {"generator_version", "root_seed", "image_size", "tasks", "samples"}
        tasks = [TaskSpec(int(t["task_id"]), t["name"], t["prompt_text"]) for t in d["tasks"]]
        samples = [
            SampleEntry(s["sample_id"], s["image"], {int(k): v for k, v in s["masks"].items()})
            for s in d["samples"]
        ]
        return cls(
            tasks=tasks,
            samples=samples,
            image_size=tuple(d["image_size"]),
            generator_version=d["generator_version"],
            root_seed=int(d["root_seed"]),
            root=root,
            extra={k: v for k, v in d.items() if k not in known},
        )

    def save(self, path: Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)


@dataclass
class SplitManifest:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    test_ids: list[str]
    labeled_fraction: Fraction
    split_seed: int

    def to_dict(self) -> dict:
        return {
            "labeled_fraction": str(self.labeled_fraction),
            "split_seed": self.split_seed,
            "labeled_ids": self.labeled_ids,
            "unlabeled_ids": self.unlabeled_ids,
            "test_ids": self.test_ids,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            list(d["labeled_ids"]),
            list(d["unlabeled_ids"]),
            list(d["test_ids"]),
            Fraction(d["labeled_fraction"]),
            int(d["split_seed"]),
        )


# ---------------------------------------------------------------- generation


def _shape_mask(rng: CounterRNG, shape: str, h: int, w: int) -> np.ndarray:
    area = rng.uniform(low=0.04, high=0.14) * h * w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if shape == "ellipse":
        ratio = rng.uniform(low=0.55, high=1.0)
        a = math.sqrt(area / (math.pi * ratio))
        b = a * ratio
        theta = rng.uniform(low=0.0, high=math.pi)
        reach = a
    else:
        r0 = math.sqrt(area / math.pi)
        coeffs = rng.uniform(4, low=-0.18, high=0.18)
        phases = rng.uniform(4, low=0.0, high=2 * math.pi)
        reach = r0 * (1 + np.abs(coeffs).sum())
    cy = rng.uniform(low=min(reach, h / 2), high=max(h - reach, h / 2))
    cx = rng.uniform(low=min(reach, w / 2), high=max(w - reach, w / 2))
    dy, dx = yy - cy, xx - cx
    if shape == "ellipse":
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:
        phi = np.arctan2(dy, dx)
        radius = np.full_like(phi, r0)
        for m, (c, p) in enumerate(zip(coeffs, phases), start=2):
            radius = radius + r0 * c * np.cos(m * phi + p)
        inside = np.hypot(dy, dx) <= radius
    return inside.astype(np.uint8)


def synth_image(tasks: list[TaskSpec], seed: int, size: tuple[int, int] = (64, 64), sample_id: str = "") -> ImageSample:
    """Render one image with one structure per task plus speckle and shadows.

    Pure function of ``(tasks, seed, size)``.
    """
    if len(tasks) < 2:
        raise ValueError("need at least 2 tasks per image")
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"image size {size} below the 32x32 minimum")
    _check_tasks(tasks)
    rng = CounterRNG(seed)
    n_pix = h * w

    masks: dict[int, np.ndarray] = {}
    for task in tasks:
        _, shape = task.family
        violation = "area"
        for _ in range(_MAX_ATTEMPTS):
            m = _shape_mask(rng, shape, h, w)
            area = int(m.sum())
            if not MIN_AREA * n_pix <= area <= MAX_AREA * n_pix:
                violation = f"area bound [{MIN_AREA}, {MAX_AREA}] of image"
                continue
            ok = True
            for other in masks.values():
                inter = int((m & other).sum())
                if inter > MAX_OVERLAP * min(area, int(other.sum())):
                    ok = False
                    violation = f"overlap bound {MAX_OVERLAP} of smaller structure"
                    break
            if ok:
                masks[task.task_id] = m
                break
        else:
            raise GenerationError(f"could not place task {task.task_id} in {size}: violated {violation}")

    yy = (np.arange(h, dtype=np.float64)[:, None] + 0.5) / h
    base = rng.uniform(low=0.35, high=0.5)
    img = np.broadcast_to(base * (1.0 - 0.3 * yy), (h, w)).copy()
    for task in tasks:
        polarity, _ = task.family
        level = rng.uniform(low=0.82, high=0.95) if polarity == "bright" else rng.uniform(low=0.04, high=0.12)
        img[masks[task.task_id] == 1] = level

    n_shadows = rng.integers(0, 3)
    for _ in range(n_shadows):
        bw = rng.integers(max(1, w // 16), max(2, w // 6) + 1)
        x0 = rng.integers(0, w - bw + 1)
        img[:, x0 : x0 + bw] *= rng.uniform(low=0.55, high=0.8)

    # multiplicative speckle, mean 1: 0.5 + mean of four uniforms
    speckle = 0.5 + rng.uniform((4, h, w)).mean(axis=0)
    img = np.clip(img * speckle, 0.0, 1.0)
    image = np.repeat(img[:, :, None], 3, axis=2)
    return ImageSample(image=image, masks=masks, sample_id=sample_id, provenance_seed=seed)


def sample_seed(root_seed: int, index: int) -> int:
    return (int(root_seed) ^ splitmix64(index)) & ((1 << 64) - 1)


def sample_name(index: int) -> str:
    return f"s{index:05d}"


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def build_dataset(
    n_samples: int,
    tasks: list[TaskSpec],
    size: tuple[int, int],
    root_seed: int,
    out_dir,
) -> DatasetManifest:
    if n_samples < 8:
        raise ValueError("n_samples must be >= 8")
    _check_tasks(tasks)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        for t in tasks:
            (out / "masks" / str(t.task_id)).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset directories under {out}: {e}") from e

    entries = []
    for i in range(n_samples):
        sid = sample_name(i)
        sample = synth_image(tasks, sample_seed(root_seed, i), size, sample_id=sid)
        written = []
        rel_img = f"images/{sid}.png"
        rel_masks = {t.task_id: f"masks/{t.task_id}/{sid}.png" for t in tasks}
        try:
            Image.fromarray(quantize(sample.image)).save(out / rel_img)
            written.append(out / rel_img)
            for tid, rel in rel_masks.items():
                Image.fromarray(sample.masks[tid] * np.uint8(255)).save(out / rel)
                written.append(out / rel)
        except OSError as e:
            for p in written:
                p.unlink(missing_ok=True)
            raise DatasetIOError(f"failed writing sample {sid} under {out}: {e}") from e
        entries.append(SampleEntry(sid, rel_img, rel_masks))

    manifest = DatasetManifest(list(tasks), entries, tuple(size), GENERATOR_VERSION, int(root_seed), root=out)
    try:
        manifest.save(out / "manifest.json")
    except OSError as e:
        raise DatasetIOError(f"failed writing {out / 'manifest.json'}: {e}") from e
    return manifest


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_partition(
    manifest: DatasetManifest,
    labeled_fraction,
    split_seed: int,
    test_fraction=Fraction(1, 4),
) -> SplitManifest:
    frac = Fraction(labeled_fraction)
    if not 0 < frac < 1:
        raise ValueError(f"labeled fraction must lie in (0, 1), got {frac}")
    ids = manifest.sample_ids
    perm = CounterRNG(split_seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_test = _round_half_up(Fraction(test_fraction) * len(ids))
    test, train = shuffled[:n_test], shuffled[n_test:]
    n_lab = _round_half_up(frac * len(train))
    if n_lab == 0:
        raise ValueError(f"fraction {frac} of {len(train)} training samples yields no labeled samples")
    return SplitManifest(train[:n_lab], train[n_lab:], test, frac, int(split_seed))


def load_sample(manifest: DatasetManifest, sample_id: str) -> ImageSample:
    entry = manifest.entry(sample_id)
    root = manifest.root or Path(".")

    def read(rel):
        path = root / rel
        try:
            with Image.open(path) as im:
                return np.asarray(im)
        except (OSError, ValueError) as e:
            raise SampleLoadError(f"cannot read {path}: {e}") from e

    raw = read(entry.image)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    image = raw[:, :, :3].astype(np.float64) / 255.0
    masks = {}
    for tid, rel in entry.masks.items():
        m = read(rel)
        if m.ndim == 3:
            m = m[:, :, 0]
        bad = (m != 0) & (m != 255)
        if bad.any():
            raise SampleLoadError(f"mask {root / rel} has values other than 0/255 (e.g. {int(m[bad][0])})")
        masks[tid] = (m == 255).astype(np.uint8)
    seed = sample_seed(manifest.root_seed, int(sample_id.lstrip("s"))) if sample_id.startswith("s") else 0
    return ImageSample(image, masks, sample_id, seed)

"""Joint semi-supervised training.

Each step: BCE+Dice on ``sd`` against ground truth for a labeled batch, plus
BCE+Dice on ``pd`` against detached pseudo-labels for an unlabeled batch,
optimized with SGD (momentum, coupled weight decay) under a poly LR schedule.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import metrics
from .calibration import pseudo_labels_from_features
from .checkpoint import save_checkpoint
from .data import DatasetManifest, SplitManifest, load_sample
from .model import ModelConfig, PromptSegNet, build_model
from .rng import CounterRNG, fnv1a64

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at iter {record['iter']}: {record}")
        self.record = record


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    init_lr: float = 0.05
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-5
    image_size: tuple[int, int] = (64, 64)
    labeled_fraction: str = "1/4"
    uplc_n: int = 2
    uplc_kind: str = "dropout"
    uplc_rate: float = 0.3
    uplc_threshold: float | None = None
    lambda_u: float = 1.0
    w_bce: float = 1.0
    w_dice: float = 1.0
    seed_model: int = 0
    seed_data: int = 0
    seed_perturb: int = 0
    prompt_enabled: bool = True
    uplc_enabled: bool = True
    augment: bool = True
    eval_every: int = 1
    widths: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    prompt_dim: int = 64
    heads: int = 4
    alpha_init: float = 1.0
    pud_in_pd: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.widths = tuple(int(v) for v in self.widths)
        self.depths = tuple(int(v) for v in self.depths)
        self.labeled_fraction = str(Fraction(self.labeled_fraction))
        for name in ("batch_size", "epochs", "uplc_n", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("init_lr", "power"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_u < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lambda_u, momentum and weight_decay must be non-negative")
        if self.uplc_enabled and self.uplc_n < 2:
            raise ValueError("calibration needs uplc_n >= 2")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=self.widths,
            depths=self.depths,
            prompt_dim=self.prompt_dim,
            heads=self.heads,
            alpha_init=self.alpha_init,
            pud_in_pd=self.pud_in_pd,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_size", "widths", "depths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ losses


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def bce_loss(pred, target, eps: float = EPS):
    """Mean binary cross-entropy; soft targets allowed."""
    _check(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def dice_loss(pred, target, smooth: float = 1.0):
    """1 - (2 sum(pt) + s) / (sum p + sum t + s), per map then averaged over the batch.

    A 2-D input is treated as one map.
    """
    _check(pred, target)
    if pred.ndim <= 2:
        pred, target = pred[None], target[None]
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    score = (2.0 * (p * t).sum(1) + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return (1.0 - score).mean()


def combined_loss(pred, target, w_bce: float = 1.0, w_dice: float = 1.0):
    target = target.detach()
    return w_bce * bce_loss(pred, target) + w_dice * dice_loss(pred, target)


def poly_lr(it: int, max_iter: int, init_lr: float, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iter {it} outside [0, {max_iter}]")
    return init_lr * (1.0 - it / max_iter) ** power


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.SGD(model.parameters(), lr=cfg.init_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


# ------------------------------------------------------------ augmentation

ANGLE_RANGE = (-25.0, 25.0)
SCALE_RANGE = (0.8, 1.25)


def affine(image, mask, angle_deg: float, scale: float):
    """Rotate by ``angle_deg`` and scale by ``scale`` about the image centre, zero fill."""
    h, w = image.shape[:2]
    th = math.radians(angle_deg)
    # output -> input coordinates: inverse rotation, inverse scale
    mat = np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]]) / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - mat @ centre
    img = np.stack(
        [ndimage.affine_transform(image[..., c], mat, offset, order=1, mode="constant", cval=0.0) for c in range(image.shape[2])],
        axis=-1,
    )
    if mask is None:
        return img, None
    m = ndimage.affine_transform(mask.astype(np.float64), mat, offset, order=0, mode="constant", cval=0.0)
    return img, (m > 0.5).astype(mask.dtype)


def augment(image, mask, rng: CounterRNG):
    angle = rng.uniform(low=ANGLE_RANGE[0], high=ANGLE_RANGE[1])
    scale = rng.uniform(low=SCALE_RANGE[0], high=SCALE_RANGE[1])
    return affine(image, mask, angle, scale)


# -------------------------------------------------------------------- data


@dataclass
class ArrayData:
    """A manifest's samples decoded into memory."""

    ids: list[str]
    images: np.ndarray  # (N, H, W, 3) float32
    masks: dict[int, np.ndarray]  # task_id -> (N, H, W) uint8
    prompts: dict[int, str]
    names: dict[int, str]

    def index(self, sample_ids) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.ids)}
        return np.array([pos[s] for s in sample_ids], dtype=np.int64)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, image_size=None) -> "ArrayData":
        ids = manifest.sample_ids
        samples = [load_sample(manifest, s) for s in ids]
        images = np.stack([s.image for s in samples]).astype(np.float32)
        task_ids = [t.task_id for t in manifest.tasks]
        masks = {tid: np.stack([s.masks[tid] for s in samples]) for tid in task_ids}
        if image_size is not None and tuple(image_size) != images.shape[1:3]:
            images, masks = _resize(images, masks, tuple(image_size))
        return cls(
            ids,
            images,
            masks,
            {t.task_id: t.prompt_text for t in manifest.tasks},
            {t.task_id: t.name for t in manifest.tasks},
        )


def _resize(images, masks, size):
    x = torch.from_numpy(images).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False).permute(0, 2, 3, 1).numpy()
    out = {}
    for tid, m in masks.items():
        mm = F.interpolate(torch.from_numpy(m[:, None].astype(np.float32)), size=size, mode="nearest")
        out[tid] = (mm[:, 0].numpy() > 0.5).astype(np.uint8)
    return np.ascontiguousarray(x), out


def _stream(seed: int, *tags) -> CounterRNG:
    key = int(seed)
    for tag in tags:
        key ^= fnv1a64(str(tag))
        key = (key * 0x100000001B3) & ((1 << 64) - 1)
    return CounterRNG(key)


def epoch_order(n: int, n_needed: int, seed: int, epoch: int, tag: str) -> np.ndarray:
    """Shuffled positions for one epoch, cycled to ``n_needed`` entries."""
    out = []
    rep = 0
    while len(out) < n_needed:
        out.extend(_stream(seed, tag, epoch, rep).permutation(n).tolist())
        rep += 1
    return np.array(out[:n_needed], dtype=np.int64)


def make_batch(data: ArrayData, rows, task_ids, rng: CounterRNG | None, with_masks=True):
    images, masks, prompts = [], [], []
    for r, tid in zip(rows, task_ids):
        img = data.images[r]
        m = data.masks[tid][r] if with_masks else None
        if rng is not None:
            img, m = augment(img, m, rng)
        images.append(img)
        masks.append(m)
        prompts.append(data.prompts[tid])
    x = torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32))
    y = torch.from_numpy(np.stack(masks).astype(np.float32)) if with_masks else None
    return x, y, prompts


# -------------------------------------------------------------- train step


@dataclass
class TrainState:
    model: PromptSegNet
    optimizer: torch.optim.Optimizer
    iter: int
    max_iter: int
    generator: torch.Generator
    history: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    last_eval: tuple | None = None


def new_state(cfg: TrainConfig, max_iter: int, model: PromptSegNet | None = None) -> TrainState:
    model = model or build_model(cfg.model_config(), seed=cfg.seed_model)
    gen = torch.Generator().manual_seed(cfg.seed_perturb)
    return TrainState(model, make_optimizer(model, cfg), 0, max_iter, gen)


def train_step(state: TrainState, labeled, unlabeled, cfg: TrainConfig) -> dict:
    """One SGD update; ``labeled`` = (x, y, prompts), ``unlabeled`` = (x, prompts) or None."""
    model, opt = state.model, state.optimizer
    lr = poly_lr(state.iter, state.max_iter, cfg.init_lr, cfg.power)
    for group in opt.param_groups:
        group["lr"] = lr

    x_l, y_l, p_l = labeled
    t_l, v_l = model.encode_prompts(p_l)
    pred = torch.sigmoid(model.decode(model.encode(x_l), t_l, v_l, "sd", cfg.prompt_enabled))
    l_sup = combined_loss(pred, y_l, cfg.w_bce, cfg.w_dice)

    l_unsup = torch.zeros((), dtype=l_sup.dtype)
    if unlabeled is not None and len(unlabeled[1]) > 0 and cfg.lambda_u > 0:
        x_u, p_u = unlabeled
        t_u, v_u = model.encode_prompts(p_u)
        feats_u = model.encode(x_u)
        target = pseudo_target(model, feats_u, t_u, v_u, cfg, state.generator)
        pred_u = torch.sigmoid(model.decode(feats_u, t_u, v_u, "pd", cfg.prompt_enabled))
        l_unsup = combined_loss(pred_u, target, cfg.w_bce, cfg.w_dice)

    total = l_sup + cfg.lambda_u * l_unsup
    record = {
        "iter": state.iter,
        "lr": lr,
        "l_sup": l_sup.item(),
        "l_unsup": l_unsup.item(),
        "loss": total.item(),
    }
    if not math.isfinite(record["loss"]):
        raise TrainingDiverged(record)
    opt.zero_grad(set_to_none=True)
    total.backward()
    opt.step()
    state.iter += 1
    state.steps.append(record)
    return record


@torch.no_grad()
def pseudo_target(model, feats, t, valid, cfg: TrainConfig, generator):
    """Detached target for ``pd``: calibrated ensemble, or the plain ``sd`` output."""
    feats = feats.detach()
    if cfg.uplc_enabled:
        target = pseudo_labels_from_features(
            model, feats, t, valid, cfg.uplc_n, cfg.uplc_kind, cfg.uplc_rate, generator, cfg.prompt_enabled
        ).y_hat
    else:
        target = torch.sigmoid(model.decode(feats, t, valid, "sd", cfg.prompt_enabled))
    if cfg.uplc_threshold is not None:
        target = (target >= cfg.uplc_threshold).to(target.dtype)
    return target


# -------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(model, images: np.ndarray, prompt: str, prompt_enabled=True, which="sd", batch=32) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        x = torch.from_numpy(np.ascontiguousarray(chunk.transpose(0, 3, 1, 2), dtype=np.float32))
        out.append(model(x.to(model.dtype), [prompt] * len(chunk), which, prompt_enabled).numpy())
    return np.concatenate(out)


def evaluate(model, data: ArrayData, sample_ids, prompt_enabled=True, which="sd", threshold=0.5):
    """Per-task reports plus (mDice, mIoU) in percent."""
    rows = data.index(sample_ids)
    images = data.images[rows]
    per_sample = {}
    for tid in sorted(data.masks):
        probs = predict(model, images, data.prompts[tid], prompt_enabled, which)
        gts = data.masks[tid][rows]
        per_sample[tid] = [
            (metrics.dice_score(p >= threshold, g), metrics.iou_score(p >= threshold, g), metrics.hd95(p >= threshold, g))
            for p, g in zip(probs, gts)
        ]
    return metrics.aggregate(per_sample)


# ------------------------------------------------------------------- train


HISTORY_BASE = ["epoch", "iter", "lr", "l_sup", "l_unsup"]


def history_fields(task_ids) -> list[str]:
    per_task = [f"{k}_{tid}" for tid in task_ids for k in ("dice", "iou")]
    return HISTORY_BASE + per_task + ["mdice", "miou"]


def write_history(path, rows, task_ids):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=history_fields(task_ids), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def iters_per_epoch(n_labeled: int, batch_size: int) -> int:
    return math.ceil(n_labeled / batch_size)


def train(cfg: TrainConfig, manifest: DatasetManifest, split: SplitManifest, out_dir=None, data: ArrayData | None = None):
    """Run the full schedule; returns ``(state, paths)``.

    ``paths`` holds ``final``/``best`` checkpoint and ``history`` locations
    when ``out_dir`` is given.
    """
    data = data or ArrayData.from_manifest(manifest, cfg.image_size)
    task_ids = sorted(data.masks)
    lab_rows = data.index(split.labeled_ids)
    unl_rows = data.index(split.unlabeled_ids)
    n_iter = iters_per_epoch(len(lab_rows), cfg.batch_size)
    state = new_state(cfg, cfg.epochs * n_iter)
    out = Path(out_dir) if out_dir is not None else None
    paths = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"final": out / "final.ckpt", "best": out / "best.ckpt", "history": out / "history.csv", "steps": out / "steps.csv"}
    best = -1.0
    use_unlabeled = len(unl_rows) > 0 and cfg.lambda_u > 0

    for epoch in range(cfg.epochs):
        order_l = epoch_order(len(lab_rows), len(lab_rows), cfg.seed_data, epoch, "labeled")
        order_u = epoch_order(len(unl_rows), n_iter * cfg.batch_size, cfg.seed_data, epoch, "unlabeled") if use_unlabeled else None
        aug_l = _stream(cfg.seed_data, "aug-labeled", epoch) if cfg.augment else None
        aug_u = _stream(cfg.seed_data, "aug-unlabeled", epoch) if cfg.augment else None
        sums = np.zeros(2)
        for i in range(n_iter):
            pos = order_l[i * cfg.batch_size : (i + 1) * cfg.batch_size]
            tids = [task_ids[(p + epoch) % len(task_ids)] for p in pos]
            labeled = make_batch(data, lab_rows[pos], tids, aug_l)
            unlabeled = None
            if use_unlabeled:
                upos = order_u[i * cfg.batch_size : i * cfg.batch_size + len(pos)]
                utids = [task_ids[(p + epoch) % len(task_ids)] for p in upos]
                x_u, _, p_u = make_batch(data, unl_rows[upos], utids, aug_u, with_masks=False)
                unlabeled = (x_u, p_u)
            rec = train_step(state, labeled, unlabeled, cfg)
            sums += (rec["l_sup"], rec["l_unsup"])
        row = {
            "epoch": epoch + 1,
            "iter": state.steps[-1]["iter"],
            "lr": state.steps[-1]["lr"],
            "l_sup": float(sums[0] / n_iter),
            "l_unsup": float(sums[1] / n_iter),
        }
        last = epoch == cfg.epochs - 1
        if split.test_ids and ((epoch + 1) % cfg.eval_every == 0 or last):
            reports, mdice, miou = evaluate(state.model, data, split.test_ids, cfg.prompt_enabled)
            state.last_eval = (reports, mdice, miou)
            for r in reports:
                row[f"dice_{r.task_id}"] = r.dice
                row[f"iou_{r.task_id}"] = r.iou
            row["mdice"], row["miou"] = mdice, miou
            if out is not None and mdice > best:
                best = mdice
                save_checkpoint(state.model, paths["best"], {"epoch": epoch + 1, "mdice": mdice})
        state.history.append(row)
        log.info("epoch %d iter %d lr %.3g l_sup %.4f l_unsup %.4f mDice %s", row["epoch"], row["iter"], row["lr"],
                 row["l_sup"], row["l_unsup"], row.get("mdice"))
        if out is not None:
            write_history(paths["history"], state.history, task_ids)

    if out is not None:
        save_checkpoint(state.model, paths["final"], {"epoch": cfg.epochs, "config": cfg.to_dict()})
        with open(paths["steps"], "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iter", "lr", "l_sup", "l_unsup", "loss"], lineterminator="\n")
            writer.writeheader()
            for r in state.steps:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return state, paths

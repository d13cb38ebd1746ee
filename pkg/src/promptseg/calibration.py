"""Uncertainty-calibrated pseudo-labels.

The deepest encoder feature is perturbed N times, each copy is decoded by the
supervised decoder, and the resulting probability maps are reduced to

    mu    = mean_i y_i
    gamma = mean_i (y_i - mu)^2        (population variance)
    y_hat = exp(-gamma) * mu
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PERTURB_KINDS = ("dropout", "gaussian")


@dataclass
class PseudoLabelTriple:
    mu: torch.Tensor
    gamma: torch.Tensor
    y_hat: torch.Tensor
    n_passes: int
    perturb_kind: str = "dropout"
    perturb_rate: float = 0.3


def perturb_feature(v4: torch.Tensor, kind: str, rate: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout (``rate`` = drop probability) or additive Gaussian noise
    with std ``rate * std(v4)``."""
    if kind == "dropout":
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        if rate == 0.0:
            return v4.clone()
        keep = torch.rand(v4.shape, generator=generator, dtype=v4.dtype, device=v4.device) >= rate
        return v4 * keep / (1.0 - rate)
    if kind == "gaussian":
        if rate <= 0.0:
            raise ValueError(f"gaussian noise scale must be > 0, got {rate}")
        noise = torch.randn(v4.shape, generator=generator, dtype=v4.dtype, device=v4.device)
        return v4 + noise * (rate * v4.std())
    raise ValueError(f"unknown perturbation kind {kind!r}; expected one of {PERTURB_KINDS}")


def calibrate(masks, kind: str = "dropout", rate: float = 0.3) -> PseudoLabelTriple:
    """Reduce an ensemble of N >= 2 probability maps to (mu, gamma, y_hat)."""
    if isinstance(masks, torch.Tensor):
        stack = masks
    else:
        masks = [torch.as_tensor(m) for m in masks]
        if len({tuple(m.shape) for m in masks}) > 1:
            raise ValueError("all ensemble members must share one shape")
        stack = torch.stack(masks) if masks else torch.empty(0)
    n = stack.shape[0] if stack.ndim else 0
    if n < 2:
        raise ValueError("need at least two ensemble members: variance is undefined as an uncertainty signal")
    # Sorting the members makes every reduction order-free, so the result is
    # exactly permutation invariant; averaging offsets from the smallest member
    # keeps identical members an exact fixed point (mu == member, gamma == 0).
    ordered = stack.sort(dim=0).values
    low, high = ordered[0], ordered[-1]
    mu = torch.minimum(torch.maximum(low + (ordered - low).mean(dim=0), low), high)
    gamma = ((ordered - mu) ** 2).mean(dim=0)
    y_hat = torch.exp(-gamma) * mu
    return PseudoLabelTriple(mu, gamma, y_hat, n, kind, rate)


@torch.no_grad()
def pseudo_labels_from_features(model, feats, t, t_valid, n, kind="dropout", rate=0.3, generator=None, prompt_enabled=True):
    """Decode ``n`` perturbed copies of the deepest feature through ``sd``; skips stay clean."""
    feats = feats.detach()
    probs = []
    for _ in range(n):
        v4 = perturb_feature(feats.maps[3], kind, rate, generator)
        logits = model.decode(feats.with_deepest(v4), t, t_valid, "sd", prompt_enabled)
        probs.append(torch.sigmoid(logits))
    return calibrate(torch.stack(probs), kind, rate)


@torch.no_grad()
def generate_pseudo_labels(model, image, prompts, n=2, kind="dropout", rate=0.3, generator=None, prompt_enabled=True):
    """Encode once, then calibrate ``n`` perturbed ``sd`` decodes. Carries no gradient."""
    if n < 2:
        raise ValueError("need n >= 2 perturbation passes")
    if isinstance(prompts, str):
        prompts = [prompts] * image.shape[0]
    feats = model.encode(image)
    t, valid = model.encode_prompts(prompts)
    return pseudo_labels_from_features(model, feats, t, valid, n, kind, rate, generator, prompt_enabled)


def calibrate_loop(masks: np.ndarray):
    """Per-pixel scalar reference for :func:`calibrate` (slow; for checks)."""
    masks = np.asarray(masks, dtype=np.float64)
    n = masks.shape[0]
    flat = masks.reshape(n, -1)
    mu = np.empty(flat.shape[1])
    gamma = np.empty(flat.shape[1])
    y_hat = np.empty(flat.shape[1])
    for j in range(flat.shape[1]):
        s = 0.0
        for i in range(n):
            s += flat[i, j]
        m = s / n
        v = 0.0
        for i in range(n):
            v += (flat[i, j] - m) ** 2
        v /= n
        mu[j], gamma[j], y_hat[j] = m, v, np.exp(-v) * m
    shape = masks.shape[1:]
    return mu.reshape(shape), gamma.reshape(shape), y_hat.reshape(shape)

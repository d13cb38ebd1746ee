"""Deterministic text-prompt encoder.

Tokens come from a whitespace/punctuation tokenizer (hyphenated words stay
whole). Each token maps to a D-vector of norm sqrt(D) (unit RMS entries),
uniformly distributed on that sphere and drawn from :class:`CounterRNG`
seeded with the FNV-1a 64 hash of the lower-cased token, so the table never
has to be stored. Precomputed embeddings can be supplied instead as a JSON
file mapping prompt text to a list of rows (or a single row).
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .rng import CounterRNG, fnv1a64

_TOKEN = re.compile(r"[\w\-]+|[^\w\s]")
TABLE_SALT = 0x70726F6D7074  # keeps token vectors independent of other hash uses


class PromptError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text)


@lru_cache(maxsize=4096)
def token_vector(token: str, dim: int) -> np.ndarray:
    rng = CounterRNG(fnv1a64(token.lower()) ^ TABLE_SALT)
    v = rng.normal(dim)
    return v * (np.sqrt(dim) / np.linalg.norm(v))


def load_embedding_file(path) -> dict[str, np.ndarray]:
    raw = json.loads(Path(path).read_text())
    out = {}
    for text, rows in raw.items():
        arr = np.asarray(rows, dtype=np.float64)
        out[text] = arr[None, :] if arr.ndim == 1 else arr
    return out


class PromptEncoder:
    """Maps prompt text to token features ``t`` of shape (L, D)."""

    def __init__(self, dim: int = 64, embeddings: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self.embeddings = embeddings

    @classmethod
    def from_file(cls, path, dim: int | None = None):
        emb = load_embedding_file(path)
        widths = {v.shape[1] for v in emb.values()}
        if len(widths) != 1:
            raise PromptError(f"inconsistent embedding widths in {path}: {sorted(widths)}")
        width = widths.pop()
        if dim is not None and dim != width:
            raise PromptError(f"embedding file width {width} != configured width {dim}")
        return cls(width, emb)

    def __call__(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise PromptError("prompt text is empty")
        if self.embeddings is not None:
            if text not in self.embeddings:
                raise PromptError(f"prompt {text!r} not found in the external embedding file")
            return self.embeddings[text]
        return np.stack([token_vector(tok, self.dim) for tok in tokenize(text)])

    def batch(self, texts, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad a list of prompts to ``(B, L_max, D)`` plus a ``(B, L_max)`` validity mask."""
        feats = [self(t) for t in texts]
        lmax = max(f.shape[0] for f in feats)
        out = np.zeros((len(feats), lmax, self.dim))
        valid = np.zeros((len(feats), lmax), dtype=bool)
        for i, f in enumerate(feats):
            out[i, : f.shape[0]] = f
            valid[i, : f.shape[0]] = True
        return torch.as_tensor(out, dtype=dtype), torch.as_tensor(valid)

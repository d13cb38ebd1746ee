"""Prompt-guided dual-decoder segmentation network.

Shared ConvNeXt-style encoder -> four multi-scale features, two structurally
identical decoders (``sd`` is supervised by ground truth, ``pd`` by calibrated
pseudo-labels). Every decoder stage ends with a :class:`PudBlock` that injects
the text prompt through gated cross-attention.

Tensors are NCHW internally; spatial maps are flattened to (B, h*w, C) token
sequences for attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .prompt import PromptEncoder

DECODERS = ("sd", "pd")


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    strides: tuple[int, ...] = (4, 8, 16, 32)
    prompt_dim: int = 64
    heads: int = 4
    prompt_kernel: int = 3
    head_width: int = 16
    pud_in_pd: bool = True
    alpha_init: float = 1.0
    prompt_embeddings: dict | None = None  # prompt text -> rows; overrides the hash table

    def __post_init__(self):
        self.widths = tuple(int(c) for c in self.widths)
        self.depths = tuple(int(c) for c in self.depths)
        self.strides = tuple(int(c) for c in self.strides)
        if len(self.widths) != 4 or len(self.depths) != 4 or len(self.strides) != 4:
            raise ConfigError("need exactly four encoder stages")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must strictly increase: {self.widths}")
        if self.strides[0] != 4 or any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigError(f"strides must be (4, 8, 16, 32): {self.strides}")
        for c in self.widths:
            if c % self.heads:
                raise ConfigError(f"{self.heads} heads do not divide stage width {c}")
        if self.prompt_kernel % 2 == 0:
            raise ConfigError("prompt conv kernel must be odd to keep M = L")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "depths", "strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MultiScaleFeatures:
    maps: list[torch.Tensor]  # v1..v4, each (B, C_k, H/d_k, W/d_k)
    strides: tuple[int, ...]
    widths: tuple[int, ...]

    def with_deepest(self, v4: torch.Tensor) -> "MultiScaleFeatures":
        return MultiScaleFeatures(self.maps[:3] + [v4], self.strides, self.widths)

    def detach(self) -> "MultiScaleFeatures":
        return MultiScaleFeatures([m.detach() for m in self.maps], self.strides, self.widths)


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, 4 * dim)
        self.pw2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.pw2(F.gelu(self.pw1(self.norm(y))))
        return x + y.permute(0, 3, 1, 2)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, in_ch: int = 3):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.down = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(in_ch, w[0], 4, stride=4), LayerNorm2d(w[0]))]
            + [nn.Sequential(LayerNorm2d(w[i - 1]), nn.Conv2d(w[i - 1], w[i], 2, stride=2)) for i in range(1, 4)]
        )
        self.stages = nn.ModuleList(
            nn.Sequential(*[ConvNeXtBlock(w[i]) for _ in range(cfg.depths[i])]) for i in range(4)
        )

    def forward(self, x) -> MultiScaleFeatures:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} is not divisible by 32")
        maps = []
        for down, stage in zip(self.down, self.stages):
            x = stage(down(x))
            maps.append(x)
        return MultiScaleFeatures(maps, self.cfg.strides, self.cfg.widths)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide width {dim}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, value, key_valid=None):
        b, n, c = query.shape
        m = key.shape[1]
        dh = c // self.heads
        q = self.q(query).view(b, n, self.heads, dh).transpose(1, 2)
        k = self.k(key).view(b, m, self.heads, dh).transpose(1, 2)
        v = self.v(value).view(b, m, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, c))


class PudBlock(nn.Module):
    """Prompt injection for one decoder stage.

    z' = z + LN(MHSA(z))
    tau = Conv1d(t) @ W
    h = z' + alpha * LN(MHCA(q=z', k=tau, v=tau))
    """

    def __init__(self, channels, prompt_dim, heads=4, kernel=3, alpha_init=0.0):
        super().__init__()
        self.self_attn = Attention(channels, heads)
        self.norm_sa = nn.LayerNorm(channels)
        self.prompt_conv = nn.Conv1d(prompt_dim, prompt_dim, kernel, padding=kernel // 2)
        self.proj = nn.Linear(prompt_dim, channels, bias=False)
        self.cross_attn = Attention(channels, heads)
        self.norm_ca = nn.LayerNorm(channels)
        self.alpha = nn.Parameter(torch.full((), float(alpha_init)))

    def project_prompt(self, t):
        return self.proj(self.prompt_conv(t.transpose(1, 2)).transpose(1, 2))

    def forward(self, z, t, t_valid=None, cross=True):
        b, c, h, w = z.shape
        x = z.flatten(2).transpose(1, 2)
        x = x + self.norm_sa(self.self_attn(x, x, x))
        if cross:
            tau = self.project_prompt(t)
            x = x + self.alpha * self.norm_ca(self.cross_attn(x, tau, tau, t_valid))
        return x.transpose(1, 2).reshape(b, c, h, w)


class SubPixelUpsample(nn.Module):
    """3x3 conv to r^2 * C_out channels followed by pixel shuffle."""

    def __init__(self, c_in, c_out, r):
        super().__init__()
        if r < 2:
            raise ConfigError("sub-pixel factor must be >= 2")
        self.r = r
        self.conv = nn.Conv2d(c_in, c_out * r * r, 3, padding=1)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), self.r)


def _groups(c):
    return math.gcd(c, 8)


class ConvBlock(nn.Module):
    """Residual conv-norm-act block (UNETR-style)."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        y = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        y = self.norm2(self.conv2(y))
        return F.leaky_relu(y + self.skip(x), 0.01)


class SkipConv(nn.Sequential):
    def __init__(self, c):
        super().__init__(nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(_groups(c), c), nn.LeakyReLU(0.01))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, with_pud: bool = True):
        super().__init__()
        w = cfg.widths
        self.with_pud = with_pud
        self.skips = nn.ModuleList(SkipConv(c) for c in w)
        self.bottom = ConvBlock(w[3], w[3])
        self.ups = nn.ModuleList(SubPixelUpsample(w[i + 1], w[i], 2) for i in range(3))
        self.fuse = nn.ModuleList(ConvBlock(2 * w[i], w[i]) for i in range(3))
        if with_pud:
            self.pud = nn.ModuleList(PudBlock(c, cfg.prompt_dim, cfg.heads, cfg.prompt_kernel, cfg.alpha_init) for c in w)
        self.final_up = SubPixelUpsample(w[0], cfg.head_width, 4)
        self.head = nn.Conv2d(cfg.head_width, 1, 1)

    def _pud(self, k, z, t, t_valid, prompt_enabled, cross):
        if not (self.with_pud and prompt_enabled):
            return z
        return self.pud[k](z, t, t_valid, cross=cross)

    def forward(self, feats: MultiScaleFeatures, t, t_valid=None, prompt_enabled=True, cross=True):
        v = feats.maps
        z = self.bottom(self.skips[3](v[3]))
        z = self._pud(3, z, t, t_valid, prompt_enabled, cross)
        for k in (2, 1, 0):
            up = self.ups[k](z)
            z = self.fuse[k](torch.cat([up, self.skips[k](v[k])], dim=1))
            z = self._pud(k, z, t, t_valid, prompt_enabled, cross)
        return self.head(self.final_up(z))[:, 0]


class PromptSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = Encoder(cfg)
        self.decoders = nn.ModuleDict({"sd": Decoder(cfg, True), "pd": Decoder(cfg, cfg.pud_in_pd)})
        emb = None
        if cfg.prompt_embeddings is not None:
            emb = {k: np.asarray(v, dtype=np.float64).reshape(-1, cfg.prompt_dim) for k, v in cfg.prompt_embeddings.items()}
        self.prompt_encoder = PromptEncoder(cfg.prompt_dim, emb)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode(self, image) -> MultiScaleFeatures:
        return self.encoder(image)

    def encode_prompts(self, prompts):
        return self.prompt_encoder.batch(prompts, dtype=self.dtype)

    def decode(self, feats, t, t_valid=None, which="sd", prompt_enabled=True, cross=True):
        if which not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {which!r}")
        return self.decoders[which](feats, t, t_valid, prompt_enabled, cross)

    def logits(self, image, prompts, which="sd", prompt_enabled=True):
        t, valid = self.encode_prompts(prompts)
        return self.decode(self.encode(image), t, valid, which, prompt_enabled)

    def forward(self, image, prompts, which="sd", prompt_enabled=True):
        """Foreground probabilities of shape (B, H, W)."""
        return torch.sigmoid(self.logits(image, prompts, which, prompt_enabled))


def to_tensor(images) -> torch.Tensor:
    """(B, H, W, 3) or (H, W, 3) arrays in [0, 1] -> NCHW float32."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def encode_prompt(prompt_text: str, embed_width: int = 64) -> np.ndarray:
    return PromptEncoder(embed_width)(prompt_text)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> PromptSegNet:
    torch.manual_seed(seed)
    return PromptSegNet(cfg)

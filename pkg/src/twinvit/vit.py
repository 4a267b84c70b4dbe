"""Small Vision Transformer encoder.

Parameters are a flat ``dict`` of named tensors (optionally prefixed, e.g.
``"backbone."``) so that EMA updates, optimizers and checkpoints can all
treat models as plain name -> array maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, ShapeError
from .resample import grid_interpolation
from .tensor import Tensor

Params = dict  # name -> Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "depth", "dim", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid ** 2 + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def param_count(cfg: ViTConfig) -> int:
    """Closed form for the number of scalars in :func:`init_vit`.

    patch projection 3p²·d + d, [CLS] d, positions (g²+1)·d, final norm 2d,
    and per block: two norms 4d, qkv 3d² + 3d, output d² + d,
    MLP 2·d·h + h + d with h = int(d·mlp_ratio).
    """
    d, h, p = cfg.dim, cfg.mlp_hidden, cfg.patch_size
    per_block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (2 * d * h + h + d)
    return (3 * p * p * d + d) + d + cfg.token_count * d + 2 * d + cfg.depth * per_block


def _uniform(name: str, shape, fan_in: int, seed: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    gen = rngmod.stream(seed, rngmod.INIT, rngmod.name_tag(name))
    return T.parameter(gen.uniform(-bound, bound, size=shape))


def _normal(name: str, shape, std: float, seed: int) -> Tensor:
    gen = rngmod.stream(seed, rngmod.INIT, rngmod.name_tag(name))
    return T.parameter(gen.normal(0.0, std, size=shape))


def linear_params(params: Params, name: str, fan_in: int, fan_out: int, seed: int, bias: bool = True) -> None:
    params[f"{name}.weight"] = _uniform(f"{name}.weight", (fan_in, fan_out), fan_in, seed)
    if bias:
        params[f"{name}.bias"] = T.parameter(np.zeros(fan_out))


def init_vit(cfg: ViTConfig, seed: int = 0, prefix: str = "") -> Params:
    """Randomly initialized backbone parameters.

    Each tensor draws from its own stream keyed by (seed, name), so adding a
    parameter never perturbs the others.
    """
    d, p = cfg.dim, cfg.patch_size
    params: Params = {}

    def norm(name):
        params[f"{name}.weight"] = T.parameter(np.ones(d))
        params[f"{name}.bias"] = T.parameter(np.zeros(d))

    linear_params(params, "patch_embed", 3 * p * p, d, seed)
    params["cls_token"] = _normal("cls_token", (1, d), 0.02, seed)
    params["pos_embed"] = _normal("pos_embed", (cfg.token_count, d), 0.02, seed)
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        norm(f"{b}.norm1")
        linear_params(params, f"{b}.attn.qkv", d, 3 * d, seed)
        linear_params(params, f"{b}.attn.proj", d, d, seed)
        norm(f"{b}.norm2")
        linear_params(params, f"{b}.mlp.fc1", d, cfg.mlp_hidden, seed)
        linear_params(params, f"{b}.mlp.fc2", cfg.mlp_hidden, d, seed)
    norm("norm")
    return {prefix + k: v for k, v in params.items()}


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias over the last axis, for inputs of any rank."""
    x = T.as_tensor(x)
    lead = x.shape[:-1]
    out = T.matmul(x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x, weight)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, weight.shape[-1]) if x.ndim != 2 else out


def patchify(images, patch_size: int) -> Tensor:
    """Split (3, H, W) or (B, 3, H, W) into raster-ordered flattened patches.

    Each patch is flattened channel-major: (c, row, col).
    """
    x = T.as_tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise ShapeError(f"patchify expects (3, H, W) or (B, 3, H, W), got {x.shape}")
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    out = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return out.reshape(gh * gw, c * p * p) if single else out


def _positions(params: Params, cfg: ViTConfig, grid: int, prefix: str) -> Tensor:
    pos = params[prefix + "pos_embed"]
    if grid == cfg.grid:
        return pos
    resample = Tensor(grid_interpolation(cfg.grid, grid))
    return T.concat([pos[0:1], T.matmul(resample, pos[1:])], axis=0)


def _block(params: Params, x: Tensor, cfg: ViTConfig, b: str):
    n, t, d = x.shape
    h = T.layer_norm(x, params[f"{b}.norm1.weight"], params[f"{b}.norm1.bias"])
    qkv = linear(h, params[f"{b}.attn.qkv.weight"], params[f"{b}.attn.qkv.bias"])
    qkv = qkv.reshape(n, t, 3, cfg.heads, cfg.head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = T.softmax_temp(T.matmul(q, k.transpose(0, 1, 3, 2)), math.sqrt(cfg.head_dim))
    mixed = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, d)
    x = x + linear(mixed, params[f"{b}.attn.proj.weight"], params[f"{b}.attn.proj.bias"])
    h = T.layer_norm(x, params[f"{b}.norm2.weight"], params[f"{b}.norm2.bias"])
    h = T.gelu(linear(h, params[f"{b}.mlp.fc1.weight"], params[f"{b}.mlp.fc1.bias"]))
    x = x + linear(h, params[f"{b}.mlp.fc2.weight"], params[f"{b}.mlp.fc2.bias"])
    return x, attn


def forward(params: Params, cfg: ViTConfig, images, prefix: str = "") -> tuple[Tensor, Tensor]:
    """Encode a batch of square images.

    Returns the final-layer [CLS] embeddings ``(B, dim)`` and the last
    block's post-softmax attention ``(B, heads, T, T)``.  Inputs whose side
    differs from ``cfg.image_size`` use bilinearly resampled positions.
    """
    x = T.as_tensor(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected images shaped (B, 3, H, W), got {x.shape}")
    _, _, h, w = x.shape
    if h != w or h % cfg.patch_size:
        raise ConfigError(
            f"unsupported resolution {h}x{w}: needs a square side divisible by patch {cfg.patch_size}"
        )
    grid = h // cfg.patch_size
    tokens = linear(patchify(x, cfg.patch_size), params[prefix + "patch_embed.weight"],
                    params[prefix + "patch_embed.bias"])
    n = tokens.shape[0]
    cls = params[prefix + "cls_token"].reshape(1, 1, cfg.dim) + T.zeros((n, 1, cfg.dim))
    pos = _positions(params, cfg, grid, prefix)
    x = T.concat([cls, tokens], axis=1) + pos.reshape(1, grid * grid + 1, cfg.dim)
    attn = None
    for i in range(cfg.depth):
        x, attn = _block(params, x, cfg, f"{prefix}blocks.{i}")
    x = T.layer_norm(x, params[prefix + "norm.weight"], params[prefix + "norm.bias"])
    return x[:, 0], attn


def cls_attention_map(attn, grid: tuple[int, int]) -> np.ndarray:
    """[CLS]-query attention over patches, shaped (B, heads, h, w).

    The [CLS]->[CLS] weight is dropped and each head's map renormalized to
    sum to 1.
    """
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    gh, gw = grid
    if a.ndim != 4 or a.shape[-1] != gh * gw + 1 or a.shape[-2] != a.shape[-1]:
        raise ShapeError(f"attention of shape {a.shape} does not match a {gh}x{gw} patch grid")
    row = a[:, :, 0, 1:].astype(np.float64)
    row = row / row.sum(axis=-1, keepdims=True)
    return row.reshape(a.shape[0], a.shape[1], gh, gw).astype(a.dtype)

"""Patch tokenizer: (image || ray map) -> tokens, and tokens -> raw splat maps.

Patchify is a p x p, stride-p linear convolution over the 6 concatenated
channels, implemented as reshape + matmul over non-overlapping windows
(each window flattened row-major as (p, p, channels)). Unpatchify is the
matching stride-p transposed convolution: one token expands to one
p x p x d_G block. Both carry bias terms; patch grids flatten row-major,
grid cell (r, c) -> r * (W/p) + c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import params as pp
from .autodiff import ShapeMismatch

__all__ = ["TokenizerConfig", "init_tokenizer_params", "patchify",
           "flatten_and_normalize", "unpatchify"]

IN_CHANNELS = 6


@dataclass(frozen=True)
class TokenizerConfig:
    patch_size: int
    dim: int
    splat_channels: int

    def __post_init__(self):
        if self.patch_size < 1 or self.dim < 1 or self.splat_channels < 1:
            raise ValueError("patch size, dim and splat channels must be positive")

    def grid(self, height, width):
        if height % self.patch_size or width % self.patch_size:
            raise ShapeMismatch(
                f"patch size {self.patch_size} must divide image {height}x{width}")
        return height // self.patch_size, width // self.patch_size


def init_tokenizer_params(cfg: TokenizerConfig, rng, dtype=np.float64, prefix="tok"):
    p = {}
    window = cfg.patch_size * cfg.patch_size * IN_CHANNELS
    pp.dense(p, rng, f"{prefix}/patch", window, cfg.dim, dtype=dtype)
    pp.ln_affine(p, f"{prefix}/ln", cfg.dim, dtype=dtype)
    pp.dense(p, rng, f"{prefix}/unpatch", cfg.dim,
             cfg.patch_size * cfg.patch_size * cfg.splat_channels, dtype=dtype)
    return p


def _window_split(x, p):
    """(N, H, W, C) Tensor -> (N, H/p, W/p, p*p*C) of flattened windows."""
    n, h, w, c = x.shape
    x = ad.reshape(x, (n, h // p, p, w // p, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (n, h // p, w // p, p * p * c))


def patchify(images, raymaps, cfg: TokenizerConfig, p, prefix="tok"):
    """(N,H,W,3) images in [0,1] + (N,H,W,3) ray maps -> (N, H/p, W/p, d)."""
    images = np.asarray(images)
    raymaps = np.asarray(raymaps)
    if images.shape != raymaps.shape or images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeMismatch(
            f"images {images.shape} and raymaps {raymaps.shape} must both be (N,H,W,3)")
    cfg.grid(images.shape[1], images.shape[2])
    dtype = p[f"{prefix}/patch/w"].dtype
    x = ad.constant(np.concatenate([images, raymaps], axis=-1).astype(dtype))
    windows = _window_split(x, cfg.patch_size)
    return ad.matmul(windows, p[f"{prefix}/patch/w"]) + p[f"{prefix}/patch/b"]


def flatten_and_normalize(grid, p, prefix="tok"):
    """Token grid (N, Hp, Wp, d) -> (N, Hp*Wp, d), layer-normed per token."""
    n, hp, wp, d = grid.shape
    flat = ad.reshape(grid, (n, hp * wp, d))
    return ad.layer_norm(flat) * p[f"{prefix}/ln/scale"] + p[f"{prefix}/ln/offset"]


def unpatchify(tokens, cfg: TokenizerConfig, height, width, p, prefix="tok"):
    """(N, T, d) final tokens -> (N, H, W, d_G) raw splat parameter maps."""
    n, t, d = tokens.shape
    hp, wp = cfg.grid(height, width)
    if t != hp * wp:
        raise ShapeMismatch(f"token count {t} != {hp}*{wp} patch grid")
    ps, dg = cfg.patch_size, cfg.splat_channels
    x = ad.matmul(tokens, p[f"{prefix}/unpatch/w"]) + p[f"{prefix}/unpatch/b"]
    x = ad.reshape(x, (n, hp, wp, ps, ps, dg))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (n, height, width, dg))

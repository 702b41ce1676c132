"""End-to-end assembly: posed multi-view images -> world-frame splat sets.

Composes the tokenizer, the pose-conditioned local attention stack and the
pixel-aligned splat decoder into a single forward function over a shared
flat parameter dict, plus checkpoint save/load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .attention import (StackConfig, AttentionCounters, init_stack_params,
                        neighbor_rows, lvt_forward, global_self_attention,
                        feed_forward)
from .decoder import SplatLayout, decode_pixel_splats, splats_to_world
from .encoding import ConditioningEncoder, PEConfig
from .geometry import build_neighbor_graph, local_ray_map
from .tokenizer import (TokenizerConfig, init_tokenizer_params, patchify,
                        flatten_and_normalize, unpatchify)

__all__ = ["ModelConfig", "init_params", "forward", "save_checkpoint",
           "load_checkpoint"]

# Decode-head bias targets: start with small mid-scene gray splats at low
# opacity so early renders are cheap and gradients stay informative.
_INIT_LN_SCALE = float(np.log(0.02))
_INIT_OPACITY_PRE = -2.2          # sigmoid ~ 0.10
_INIT_GRAY = 0.5
# Damp the decode-head kernel so the raw channels start close to the bias
# regime. Unit-variance raw noise puts exp(ln-scale) splats on a heavy tail
# (footprints up to the whole frame); the first optimizer steps then cost
# tens of millions of pixel/splat pairs on the tape.
_INIT_HEAD_DAMP = 0.1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 8
    window: int = 5
    dilation: int = 1
    neighbor_strategy: str = "spatial"
    attention: str = "local"          # "local" | "global" (dense twin)
    conditioning: str = "relative"    # "relative" | "world" | "none"
    pe_freqs: int = 6
    deg_color: int = 1
    deg_opacity: int = 1
    near: float = 0.5
    far: float = 8.0

    def __post_init__(self):
        if self.attention not in ("local", "global"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.conditioning not in ("relative", "world", "none"):
            raise ValueError(f"unknown conditioning variant {self.conditioning!r}")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def layout(self) -> SplatLayout:
        return SplatLayout(self.deg_color, self.deg_opacity)

    @property
    def stack(self) -> StackConfig:
        return StackConfig(layers=self.layers, dim=self.dim,
                           mlp_dim=self.mlp_ratio * self.dim,
                           heads=self.heads, window=self.window)

    @property
    def tokenizer(self) -> TokenizerConfig:
        return TokenizerConfig(patch_size=self.patch_size, dim=self.dim,
                               splat_channels=self.layout.channels)

    def encoder(self):
        if self.conditioning == "none" or self.attention == "global":
            return None
        return ConditioningEncoder(self.dim, self.layers,
                                   PEConfig(n_freq=self.pe_freqs),
                                   variant=self.conditioning)


def init_params(cfg: ModelConfig, rng, dtype=np.float64):
    p = {}
    p.update(init_tokenizer_params(cfg.tokenizer, rng, dtype))
    p.update(init_stack_params(cfg.stack, rng, dtype))
    enc = cfg.encoder()
    if enc is not None:
        p.update(enc.init_params(rng, dtype))

    # Bias the raw splat channels toward a sane starting regime. The
    # unpatch bias is laid out as (p*p, d_G) repeated per pixel.
    p["tok/unpatch/w"].value *= _INIT_HEAD_DAMP
    layout = cfg.layout
    bias = p["tok/unpatch/b"].value.reshape(-1, layout.channels)
    y00 = 0.28209479177387814
    kc = layout.n_color // 3
    bias[:, 0:3] = _INIT_LN_SCALE
    for c in range(3):
        bias[:, layout.color_slice.start + c * kc] = _INIT_GRAY / y00
    bias[:, layout.opacity_slice.start] = _INIT_OPACITY_PRE / y00
    return p


def _conditioning_provider(cfg: ModelConfig, cameras, graph, view_ids, p):
    """Returns layer -> (N, w_eff, d) Tensor, or None when unconditioned."""
    enc = cfg.encoder()
    if enc is None:
        return None
    poses = {c.id: c.pose for c in cameras}
    vecs, pairs = enc.pair_vectors(poses, graph)
    base = enc.base_features(vecs, p)
    pair_index = {pair: i for i, pair in enumerate(pairs)}
    order = np.array([pair_index[(j, jp)] for j in view_ids
                      for jp in graph.of(j)], dtype=np.int64)
    n = len(view_ids)
    w_eff = order.size // n

    def for_layer(layer):
        feats = enc.layer_features(base, p, layer)
        return ad.reshape(ad.gather(feats, order), (n, w_eff, cfg.dim))
    return for_layer


def forward(p, images, cameras, cfg: ModelConfig, counters: AttentionCounters = None,
            attn_probe=None):
    """Posed images -> world-frame pixel-aligned splats.

    images: (N, H, W, 3) in [0, 1], one per camera, cameras ordered to
    match. Returns a world-frame GaussianSplatSet on the tape.
    """
    n, h, w = images.shape[0], images.shape[1], images.shape[2]
    if n != len(cameras):
        raise ad.ShapeMismatch(f"{n} images for {len(cameras)} cameras")
    raymaps = np.stack([local_ray_map(c.intrinsics) for c in cameras])

    grid = patchify(images, raymaps, cfg.tokenizer, p)
    tokens = flatten_and_normalize(grid, p)

    view_ids = [c.id for c in cameras]
    if cfg.attention == "global":
        x = tokens
        for l in range(cfg.layers):
            x = global_self_attention(x, cfg.stack, p, l, counters)
            x = feed_forward(x, cfg.stack, p, l)
    else:
        graph = build_neighbor_graph(cameras, cfg.window, cfg.dilation,
                                     cfg.neighbor_strategy)
        rows = neighbor_rows(graph, view_ids)
        cond = _conditioning_provider(cfg, cameras, graph, view_ids, p)
        x = lvt_forward(tokens, rows, cond, cfg.stack, p, counters, attn_probe)

    raw = unpatchify(x, cfg.tokenizer, h, w, p)
    local = decode_pixel_splats(raw, raymaps, cfg.layout, cfg.near, cfg.far)
    return splats_to_world(local, cameras)


def save_checkpoint(path, p, cfg: ModelConfig, extra=None):
    meta = {"config": asdict(cfg), "extra": extra or {}}
    arrays = {f"param::{k}": (v.value if isinstance(v, ad.Tensor) else v)
              for k, v in p.items()}
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    data = np.load(path, allow_pickle=False)
    meta = json.loads(bytes(data["__meta__"]).decode())
    cfg = ModelConfig(**meta["config"])
    p = {k[len("param::"):]: ad.parameter(data[k])
         for k in data.files if k.startswith("param::")}
    return p, cfg, meta.get("extra", {})

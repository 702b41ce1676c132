"""
From images to tokens to pose-conditioned local attention
=========================================================

Runs the front half of the model by hand: patchify posed images, build
the neighbor graph, encode relative poses, and push tokens through the
windowed attention stack while counting query/key pairs.
"""

import numpy as np

import localsplat.attention as atn
import localsplat.autodiff as ad
from localsplat.geometry import build_neighbor_graph, local_ray_map
from localsplat.model import ModelConfig, _conditioning_provider, init_params
from localsplat.scenes import generate_synthetic_scene
from localsplat.tokenizer import flatten_and_normalize, patchify

scene, _ = generate_synthetic_scene(7, n_views=6, n_splats=24, resolution=32)
images = np.stack(scene.images)
cfg = ModelConfig(layers=2, dim=32, heads=2, patch_size=8, window=3,
                  near=scene.near, far=scene.far)
p = init_params(cfg, np.random.default_rng(1))

# tokenize: concatenate pixels with their camera-local ray directions,
# then fold non-overlapping patches into d-dimensional tokens
raymaps = np.stack([local_ray_map(c.intrinsics) for c in scene.cameras])
grid = patchify(images, raymaps, cfg.tokenizer, p)
tokens = flatten_and_normalize(grid, p)
print("token array:", tokens.shape, "(views, tokens per view, dim)")

# each view's queries only see tokens from its neighbor set
view_ids = [c.id for c in scene.cameras]
graph = build_neighbor_graph(scene.cameras, cfg.window)
rows = atn.neighbor_rows(graph, view_ids)
print("neighbor rows:\n", rows)

# conditioning features come from the relative pose of every (j, j') pair
cond = _conditioning_provider(cfg, scene.cameras, graph, view_ids, p)

counters = atn.AttentionCounters()
with ad.no_grad():
    out = atn.lvt_forward(tokens, rows, cond, cfg.stack, p, counters)
print("\nstack output:", out.shape)

n, t = tokens.shape[0], tokens.shape[1]
print("pairs counted:", counters.pairs,
      "| closed form L*N*w*T^2 =", cfg.layers * n * cfg.window * t * t)

# a dense baseline touches every token of every view instead
with ad.no_grad():
    x = tokens
    dense = atn.AttentionCounters()
    for l in range(cfg.layers):
        x = atn.global_self_attention(x, cfg.stack, p, l, dense)
        x = atn.feed_forward(x, cfg.stack, p, l)
print("dense baseline pairs:", dense.pairs,
      "| closed form L*(N*T)^2 =", cfg.layers * (n * t) ** 2)

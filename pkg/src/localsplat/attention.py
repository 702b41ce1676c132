"""Windowed neighbor-view attention stack.

Each layer is pre-LN multi-head attention followed by a pre-LN
feed-forward block, both residual. Query tokens of view j attend only to
tokens of its neighbor views; the per-pair conditioning feature is added
to the normalized neighbor tokens before the key/value projections, so
every key and value carries the relative camera transform of its view.

Query/key pair count per layer is sum_j |N(j)| * T^2 (= N*w*T^2 for a
full window), against (N*T)^2 for dense all-view attention; the dense
path is kept as the quadratic baseline for scaling benchmarks. Linear
projections inside these blocks carry no bias terms; the final kernel of
each residual branch is initialized down-scaled by sqrt(1/(2L)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import params as pp
from .encoding import MissingConditioning

__all__ = ["StackConfig", "AttentionCounters", "init_stack_params",
           "neighbor_rows", "cond_from_dict", "local_attention",
           "feed_forward", "lvt_forward", "global_self_attention"]


@dataclass(frozen=True)
class StackConfig:
    layers: int
    dim: int
    mlp_dim: int
    heads: int
    window: int

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.layers < 0 or self.window < 1:
            raise ValueError("need layers >= 0 and window >= 1")

    @property
    def head_dim(self):
        return self.dim // self.heads


@dataclass
class AttentionCounters:
    """Instrumentation; pair counts are exact closed-form tallies."""
    pairs: int = 0
    calls: int = 0
    layer_seconds: list = field(default_factory=list)

    def reset(self):
        self.pairs = 0
        self.calls = 0
        self.layer_seconds.clear()


def init_stack_params(cfg: StackConfig, rng, dtype=np.float64, prefix="blk"):
    p = {}
    resid_scale = np.sqrt(1.0 / (2.0 * max(cfg.layers, 1)))
    for l in range(cfg.layers):
        base = f"{prefix}{l}"
        pp.ln_affine(p, f"{base}/ln1", cfg.dim, dtype=dtype)
        p[f"{base}/wq"] = pp.lecun_normal(rng, (cfg.dim, cfg.dim), dtype=dtype)
        p[f"{base}/wk"] = pp.lecun_normal(rng, (cfg.dim, cfg.dim), dtype=dtype)
        p[f"{base}/wv"] = pp.lecun_normal(rng, (cfg.dim, cfg.dim), dtype=dtype)
        p[f"{base}/wo"] = pp.lecun_normal(rng, (cfg.dim, cfg.dim), resid_scale, dtype)
        pp.ln_affine(p, f"{base}/ln2", cfg.dim, dtype=dtype)
        p[f"{base}/mlp1"] = pp.lecun_normal(rng, (cfg.dim, cfg.mlp_dim), dtype=dtype)
        p[f"{base}/mlp2"] = pp.lecun_normal(rng, (cfg.mlp_dim, cfg.dim), resid_scale, dtype)
    return p


def neighbor_rows(graph, view_ids):
    """Neighbor id lists -> row indices into the token array.

    view_ids gives the row order of the token array. All views must have
    equally many neighbors (guaranteed by stride selection over a shared
    candidate count).
    """
    index = {v: i for i, v in enumerate(view_ids)}
    lists = [graph.of(j) for j in view_ids]
    counts = {len(ns) for ns in lists}
    if len(counts) != 1:
        raise ValueError(f"ragged neighbor sets {sorted(counts)}")
    return np.array([[index[jp] for jp in ns] for ns in lists], dtype=np.int64)


def cond_from_dict(cond, graph, view_ids, dim, dtype=np.float64):
    """Stack {(j, j'): feature} into (N, w_eff, d), graph iteration order."""
    rows = []
    for j in view_ids:
        feats = []
        for jp in graph.of(j):
            if (j, jp) not in cond:
                raise MissingConditioning(f"no conditioning feature for pair ({j}, {jp})")
            v = cond[(j, jp)]
            feats.append(v.value if isinstance(v, ad.Tensor) else np.asarray(v))
        rows.append(np.stack(feats))
    return ad.constant(np.stack(rows).astype(dtype))


def _norm(x, p, name):
    return ad.layer_norm(x) * p[f"{name}/scale"] + p[f"{name}/offset"]


def _split_heads(x, heads):
    n, t, d = x.shape
    return ad.transpose(ad.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    n, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, t, h * dh))


def local_attention(tokens, rows, cond, cfg: StackConfig, p, layer,
                    counters=None, attn_probe=None):
    """One conditioned local attention block with residual.

    tokens: (N, T, d) Tensor; rows: (N, w_eff) neighbor row indices;
    cond: (N, w_eff, d) Tensor/array or None for zero conditioning.
    """
    n, t, d = tokens.shape
    w_eff = rows.shape[1]
    base = f"blk{layer}" if isinstance(layer, int) else layer

    normed = _norm(tokens, p, f"{base}/ln1")
    q = ad.matmul(normed, p[f"{base}/wq"])

    nbr = ad.gather(normed, rows)  # (N, w_eff, T, d)
    if cond is not None:
        if not isinstance(cond, ad.Tensor):
            cond = ad.constant(np.asarray(cond, dtype=tokens.dtype))
        nbr = nbr + ad.reshape(cond, (n, w_eff, 1, d))
    kv_in = ad.reshape(nbr, (n, w_eff * t, d))
    k = ad.matmul(kv_in, p[f"{base}/wk"])
    v = ad.matmul(kv_in, p[f"{base}/wv"])

    qh = _split_heads(q, cfg.heads)            # (N, h, T, dh)
    kh = _split_heads(k, cfg.heads)            # (N, h, wT, dh)
    vh = _split_heads(v, cfg.heads)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(cfg.head_dim))
    attn = ad.softmax(scores, axis=-1)         # normalizes over all w_eff*T keys
    if attn_probe is not None:
        attn_probe.append(attn.value)
    out = _merge_heads(ad.matmul(attn, vh))
    out = ad.matmul(out, p[f"{base}/wo"])

    if counters is not None:
        counters.pairs += n * w_eff * t * t
        counters.calls += 1
    return tokens + out


def feed_forward(tokens, cfg: StackConfig, p, layer):
    """Pre-LN residual MLP: x + W2 GELU(W1 norm(x))."""
    base = f"blk{layer}" if isinstance(layer, int) else layer
    h = ad.gelu(ad.matmul(_norm(tokens, p, f"{base}/ln2"), p[f"{base}/mlp1"]))
    return tokens + ad.matmul(h, p[f"{base}/mlp2"])


def lvt_forward(tokens, rows, cond_for_layer, cfg: StackConfig, p,
                counters=None, attn_probe=None):
    """Run the full stack: L x (local attention, feed-forward).

    cond_for_layer: callable layer -> (N, w_eff, d) conditioning (or None
    for zero conditioning everywhere).
    """
    x = tokens
    for l in range(cfg.layers):
        cond = cond_for_layer(l) if cond_for_layer is not None else None
        x = local_attention(x, rows, cond, cfg, p, l, counters, attn_probe)
        x = feed_forward(x, cfg, p, l)
    return x


def global_self_attention(tokens, cfg: StackConfig, p, layer, counters=None):
    """Dense all-view attention baseline: every token attends to every
    token of every view, quadratic in the view count. Shares the layer's
    weights; no conditioning."""
    n, t, d = tokens.shape
    base = f"blk{layer}" if isinstance(layer, int) else layer
    flat = ad.reshape(tokens, (1, n * t, d))
    normed = _norm(flat, p, f"{base}/ln1")
    q = ad.matmul(normed, p[f"{base}/wq"])
    k = ad.matmul(normed, p[f"{base}/wk"])
    v = ad.matmul(normed, p[f"{base}/wv"])
    qh, kh, vh = (_split_heads(a, cfg.heads) for a in (q, k, v))
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(cfg.head_dim))
    out = _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), vh))
    out = ad.matmul(out, p[f"{base}/wo"])
    if counters is not None:
        counters.pairs += (n * t) ** 2
        counters.calls += 1
    return ad.reshape(flat + out, (n, t, d))

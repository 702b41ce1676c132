"""Relative-pose conditioning features.

A neighbor view j' is described to query view j by the rigid transform
P_j o P_j'^-1 (camera-j' frame into camera-j frame). Its canonical
quaternion and translation form a 7-vector, expanded by a sinusoidal
positional encoding, projected to the model width, refined by residual
MLP blocks into a base feature, and mapped through one bare linear
projection per transformer layer. The feature depends only on the
relative transform, never on absolute poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import params as pp
from .geometry import RigidPose, quat_canonical, quat_from_rotation, relative_pose

__all__ = ["PEConfig", "sinusoidal_encode", "pose_to_vector",
           "ConditioningEncoder", "MissingConditioning"]


class MissingConditioning(KeyError):
    """A required (query view, neighbor view) feature was not provided."""


@dataclass(frozen=True)
class PEConfig:
    n_freq: int = 6
    include_input: bool = True

    def __post_init__(self):
        if self.n_freq < 1:
            raise ValueError("n_freq must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.n_freq + int(self.include_input))


def sinusoidal_encode(x, cfg: PEConfig):
    """Octave sin/cos features: per component, (sin 2^i x, cos 2^i x) for
    i in [0, n_freq); the raw input is appended when include_input."""
    x = np.asarray(x, dtype=np.float64)
    freqs = 2.0 ** np.arange(cfg.n_freq)
    angles = x[..., None] * freqs  # (..., k, f)
    per_comp = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., k, f, 2)
    flat = per_comp.reshape(*x.shape[:-1], x.shape[-1] * 2 * cfg.n_freq)
    if cfg.include_input:
        flat = np.concatenate([flat, x], axis=-1)
    return flat


def pose_to_vector(rel: RigidPose):
    """Canonical quaternion (4) followed by translation (3)."""
    q = quat_canonical(quat_from_rotation(rel.rotation))
    return np.concatenate([q, rel.translation])


class ConditioningEncoder:
    """Maps relative poses to per-layer d-dimensional conditioning features.

    variant 'relative' (default) encodes P_j o P_j'^-1; variant 'world'
    encodes the neighbor's absolute pose (an ablation baseline that breaks
    transform invariance on purpose).
    """

    def __init__(self, dim, layers, pe=PEConfig(), n_blocks=2, variant="relative"):
        if variant not in ("relative", "world"):
            raise ValueError(f"unsupported conditioning variant {variant!r}")
        self.dim = dim
        self.layers = layers
        self.pe = pe
        self.n_blocks = n_blocks
        self.variant = variant
        self.in_dim = pe.out_dim(7)

    def init_params(self, rng, dtype=np.float64, prefix="cond"):
        p = {}
        pp.dense(p, rng, f"{prefix}/in", self.in_dim, self.dim, dtype=dtype)
        for b in range(self.n_blocks):
            pp.ln_affine(p, f"{prefix}/block{b}/ln", self.dim, dtype=dtype)
            pp.dense(p, rng, f"{prefix}/block{b}/fc1", self.dim, self.dim, dtype=dtype)
            pp.dense(p, rng, f"{prefix}/block{b}/fc2", self.dim, self.dim, dtype=dtype)
        for l in range(self.layers):
            pp.dense(p, rng, f"{prefix}/layer{l}", self.dim, self.dim, dtype=dtype)
        return p

    def pair_vectors(self, poses, graph):
        """7-vectors for every (j, j' in N(j)) pair, in graph iteration order.

        poses: dict view id -> RigidPose. Returns (P, 7) plus the pair list.
        """
        rows, pairs = [], []
        for j in graph.ids():
            for jp in graph.of(j):
                if jp not in poses:
                    raise MissingConditioning(f"no pose for neighbor view {jp}")
                if self.variant == "world":
                    rel = poses[jp]
                else:
                    rel = relative_pose(poses[j], poses[jp])
                rows.append(pose_to_vector(rel))
                pairs.append((j, jp))
        return np.stack(rows), pairs

    def base_features(self, vecs, p, prefix="cond"):
        """(P, 7) pose vectors -> (P, d) base features on the tape."""
        dtype = p[f"{prefix}/in/w"].dtype
        feats = sinusoidal_encode(vecs, self.pe).astype(dtype)
        x = ad.matmul(ad.constant(feats), p[f"{prefix}/in/w"]) + p[f"{prefix}/in/b"]
        for b in range(self.n_blocks):
            h = ad.layer_norm(x) * p[f"{prefix}/block{b}/ln/scale"] \
                + p[f"{prefix}/block{b}/ln/offset"]
            h = ad.gelu(ad.matmul(h, p[f"{prefix}/block{b}/fc1/w"])
                        + p[f"{prefix}/block{b}/fc1/b"])
            h = ad.matmul(h, p[f"{prefix}/block{b}/fc2/w"]) + p[f"{prefix}/block{b}/fc2/b"]
            x = x + h
        return x

    def layer_features(self, base, p, layer, prefix="cond"):
        """Bare per-layer linear projection of the base features."""
        if not 0 <= layer < self.layers:
            raise ValueError(f"layer {layer} outside [0, {self.layers})")
        return ad.matmul(base, p[f"{prefix}/layer{layer}/w"]) + p[f"{prefix}/layer{layer}/b"]

    def encode(self, rel: RigidPose, p, layer, prefix="cond"):
        """Single relative pose -> conditioning feature for one layer."""
        base = self.base_features(pose_to_vector(rel)[None], p, prefix)
        return self.layer_features(base, p, layer, prefix)[0]

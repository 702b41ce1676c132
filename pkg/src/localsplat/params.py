"""Parameter containers and initialization helpers.

Parameters live in a flat dict of name -> Tensor(requires_grad=True).
Dense kernels use LeCun-normal init (std = sqrt(1/fan_in)); the final
kernel of every residual branch is further scaled by a caller-supplied
factor so deep stacks start near the identity.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = ["lecun_normal", "dense", "ln_affine", "zeros", "tree_map",
           "global_grad_norm", "clip_grads_"]


def lecun_normal(rng, shape, scale=1.0, dtype=np.float64):
    fan_in = shape[0] if len(shape) >= 1 else 1
    std = scale * np.sqrt(1.0 / fan_in)
    return ad.parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def dense(params, rng, name, fan_in, fan_out, scale=1.0, bias=True, dtype=np.float64):
    params[name + "/w"] = lecun_normal(rng, (fan_in, fan_out), scale, dtype)
    if bias:
        params[name + "/b"] = ad.parameter(np.zeros(fan_out, dtype=dtype))


def ln_affine(params, name, dim, dtype=np.float64):
    params[name + "/scale"] = ad.parameter(np.ones(dim, dtype=dtype))
    params[name + "/offset"] = ad.parameter(np.zeros(dim, dtype=dtype))


def zeros(params, name, shape, dtype=np.float64):
    params[name] = ad.parameter(np.zeros(shape, dtype=dtype))


def tree_map(fn, params):
    return {k: fn(v) for k, v in sorted(params.items())}


def global_grad_norm(params):
    total = 0.0
    for k in sorted(params):
        g = params[k].grad
        if g is not None:
            total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_grads_(params, max_norm):
    """Scale all gradients in place so the global norm is <= max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for k in sorted(params):
            if params[k].grad is not None:
                params[k].grad *= factor
    return norm

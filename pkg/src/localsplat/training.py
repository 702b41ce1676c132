"""Loss assembly, learning-rate schedule, Adam updates, and the train step."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import params as pp
from . import sh as shm
from .renderer import RenderTarget, render

__all__ = ["NonFiniteLoss", "LossConfig", "ScheduleConfig", "psnr", "lr_at",
           "reconstruction_loss", "AdamState", "init_adam", "adam_step_",
           "train_step", "training_run"]


class NonFiniteLoss(ArithmeticError):
    """A loss term became NaN/inf; the step is aborted."""


@dataclass(frozen=True)
class LossConfig:
    perceptual_weight: float = 0.05      # weight on the perceptual proxy
    regularizer_weight: float = 0.001    # weight on the opacity regularizer
    perceptual: str = "off"              # "off" | "gradient-difference"
    n_reg_samples: int = 1

    def __post_init__(self):
        if self.perceptual_weight < 0 or self.regularizer_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.perceptual not in ("off", "gradient-difference"):
            raise ValueError(f"unknown perceptual mode {self.perceptual!r}")


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 2e-4
    warmup_steps: int = 2000
    total_steps: int = 10000

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")


def psnr(mse) -> float:
    """-10 log10(MSE) for [0,1] images, capped at 99 (identical images)."""
    if mse <= 0:
        return 99.0
    return float(min(-10.0 * np.log10(mse), 99.0))


def lr_at(step, cfg: ScheduleConfig) -> float:
    """Linear warmup 0 -> peak, then cosine decay to 0 at total_steps."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def _grad_difference(a, b):
    """Mean absolute difference of forward-difference image gradients."""
    dax = a[:, 1:] - a[:, :-1]
    dbx = b[:, 1:] - b[:, :-1]
    day = a[1:] - a[:-1]
    dby = b[1:] - b[:-1]
    return ad.tmean(ad.abs_nudged(dax - dbx)) + ad.tmean(ad.abs_nudged(day - dby))


def reconstruction_loss(rendered, targets, opacity_coeffs, cfg: LossConfig, rng):
    """L = (1/N) sum_k [MSE_k + w_p * Perc_k] + w_r * R_opacity.

    rendered: list of (H, W, 3) Tensors; targets: matching arrays in [0,1].
    Returns (loss Tensor, parts dict of floats).
    """
    if len(rendered) != len(targets) or not rendered:
        raise ad.ShapeMismatch(
            f"{len(rendered)} rendered images vs {len(targets)} targets")
    acc = None
    mses, percs = [], []
    for r, tgt in zip(rendered, targets):
        tgt = np.asarray(tgt)
        if tuple(r.shape) != tgt.shape:
            raise ad.ShapeMismatch(f"rendered {tuple(r.shape)} vs target {tgt.shape}")
        diff = r - ad.constant(tgt.astype(r.dtype))
        mse = ad.tmean(diff * diff)
        term = mse
        mses.append(float(mse.value))
        if cfg.perceptual == "gradient-difference":
            perc = _grad_difference(r, ad.constant(tgt.astype(r.dtype)))
            percs.append(float(perc.value))
            term = term + cfg.perceptual_weight * perc
        acc = term if acc is None else acc + term
    loss = (1.0 / len(rendered)) * acc

    parts = {"mse": float(np.mean(mses)),
             "perceptual": float(np.mean(percs)) if percs else 0.0,
             "regularizer": 0.0}
    if cfg.regularizer_weight > 0:
        k = opacity_coeffs.shape[-1]
        sh_cfg = shm.SHConfig(deg_opacity=int(np.sqrt(k)) - 1,
                              n_reg_samples=cfg.n_reg_samples)
        reg = shm.opacity_regularizer(opacity_coeffs, sh_cfg, rng)
        parts["regularizer"] = float(reg.value if isinstance(reg, ad.Tensor) else reg)
        loss = loss + cfg.regularizer_weight * reg
    parts["total"] = float(loss.value)
    return loss, parts


# ── optimizer ──────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


def init_adam(p, beta1=0.9, beta2=0.95, eps=1e-8) -> AdamState:
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    for k, tensor in p.items():
        state.m[k] = np.zeros_like(tensor.value)
        state.v[k] = np.zeros_like(tensor.value)
    return state


def adam_step_(p, state: AdamState, lr: float):
    """In-place moment update + parameter step; zero lr leaves params bitwise."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in sorted(p):
        g = p[k].grad
        if g is None:
            continue
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        step = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
        p[k].value -= step.astype(p[k].value.dtype)


# ── the end-to-end step ────────────────────────────────────────────────────

def pipeline_loss(p, batch, model_cfg, loss_cfg: LossConfig, rng, counters=None):
    """Forward + render + loss on the tape; shared by train_step and tests."""
    splats = mdl.forward(p, batch["images"], batch["cameras"], model_cfg,
                         counters=counters)
    bg = np.asarray(batch.get("background", np.zeros(3)))
    rendered = [render(splats, RenderTarget(cam, bg)).color
                for cam in batch["target_cameras"]]
    loss, parts = reconstruction_loss(rendered, batch["targets"],
                                      splats.opacity_sh, loss_cfg, rng)
    return loss, parts, rendered


def train_step(p, state: AdamState, batch, step, model_cfg,
               loss_cfg: LossConfig, sched: ScheduleConfig, rng,
               counters=None, clip_norm=1.0):
    """One optimization step. Returns a metrics dict; raises NonFiniteLoss."""
    t0 = time.perf_counter()
    loss, parts, _ = pipeline_loss(p, batch, model_cfg, loss_cfg, rng, counters)
    for term in ("mse", "perceptual", "regularizer", "total"):
        if not np.isfinite(parts[term]):
            raise NonFiniteLoss(f"loss term {term!r} is non-finite at step {step}")
    ad.backward(loss)
    grad_norm = pp.clip_grads_(p, clip_norm)
    lr = lr_at(step, sched)
    adam_step_(p, state, lr)
    metrics = {"step": int(step), "loss": parts["total"], "mse": parts["mse"],
               "perceptual": parts["perceptual"],
               "regularizer": parts["regularizer"], "psnr": psnr(parts["mse"]),
               "lr": float(lr), "grad_norm": float(grad_norm),
               "seconds": time.perf_counter() - t0}
    if counters is not None:
        metrics["attn_pairs"] = int(counters.pairs)
    return metrics


def training_run(p, state, batch_fn, n_steps, model_cfg, loss_cfg, sched,
                 rng, counters=None, clip_norm=1.0):
    """Generator over train steps; batch_fn(step, rng) supplies batches."""
    for step in range(n_steps):
        batch = batch_fn(step, rng)
        yield train_step(p, state, batch, step, model_cfg, loss_cfg, sched,
                         rng, counters, clip_norm=clip_norm)

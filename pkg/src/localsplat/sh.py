"""Real spherical harmonics with view-dependent color and opacity.

Basis functions use the all-positive Cartesian real form (no
Condon-Shortley phases), bands 0..3, ordered m = -l..l within each band:

    band 0:  0.282095
    band 1:  0.488603 * (y, z, x)
    band 2:  1.092548*xy, 1.092548*yz, 0.315392*(3z^2-1),
             1.092548*xz, 0.546274*(x^2-y^2)
    band 3:  0.590044*y(3x^2-y^2), 2.890611*xyz, 0.457046*y(5z^2-1),
             0.373176*(5z^3-3z), 0.457046*x(5z^2-1),
             1.445306*z(x^2-y^2), 0.590044*x(x^2-3y^2)

Directions are evaluated in the splat's source-camera frame: the caller
rotates a world-space viewing direction by that camera's rotation before
the basis dot product. Opacity passes through a sigmoid after the dot
product so compositing weights stay in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "SHConfig", "NonUnitDirection", "Y00",
    "n_coeffs", "sh_basis", "sh_basis_tensor",
    "eval_color", "eval_opacity", "eval_view_dependent",
    "opacity_regularizer", "uniform_directions", "band_max",
]

Y00 = 0.28209479177387814  # 1 / (2 sqrt(pi))

_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 0.4570457994644658, 1.445305721320277,
       0.5900435899266435)

# Per-band maximum |Y| over the unit sphere (closed-form extrema), used
# for conservative opacity bounds. All below the 1.1 global cap.
_BAND_MAX = (Y00, _C1, 0.6307831305050401, 0.7463526651802308)


class NonUnitDirection(ValueError):
    """Direction vector is not unit length within tolerance."""


@dataclass(frozen=True)
class SHConfig:
    deg_color: int = 1
    deg_opacity: int = 1
    n_reg_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.deg_color <= 3 and 0 <= self.deg_opacity <= 3):
            raise ValueError("SH degrees must be in [0, 3]")
        if self.n_reg_samples < 1:
            raise ValueError("n_reg_samples must be >= 1")


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def band_max(degree: int) -> float:
    return _BAND_MAX[degree]


def _basis_columns(x, y, z, degree, ops):
    """Basis columns for unit directions; `ops` supplies mul/sub arithmetic."""
    mul, sub = ops
    cols = [x * 0.0 + Y00]
    if degree >= 1:
        cols += [_C1 * y, _C1 * z, _C1 * x]
    if degree >= 2:
        zz = mul(z, z)
        cols += [
            _C2[0] * mul(x, y),
            _C2[1] * mul(y, z),
            _C2[2] * sub(3.0 * zz, 1.0),
            _C2[3] * mul(x, z),
            _C2[4] * sub(mul(x, x), mul(y, y)),
        ]
    if degree >= 3:
        xx, yy, zz = mul(x, x), mul(y, y), mul(z, z)
        cols += [
            _C3[0] * mul(y, sub(3.0 * xx, yy)),
            _C3[1] * mul(mul(x, y), z),
            _C3[2] * mul(y, sub(5.0 * zz, 1.0)),
            _C3[3] * mul(z, sub(5.0 * zz, 3.0)),
            _C3[4] * mul(x, sub(5.0 * zz, 1.0)),
            _C3[5] * mul(z, sub(xx, yy)),
            _C3[6] * mul(x, sub(xx, 3.0 * yy)),
        ]
    return cols


def sh_basis(direction, degree: int):
    """Real SH basis values for unit direction(s), shape (..., (deg+1)^2)."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.abs(norm - 1.0).max() > 1e-6:
        raise NonUnitDirection(f"max |norm-1| = {np.abs(norm - 1.0).max():.3e}")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    cols = _basis_columns(x, y, z, degree, (np.multiply, np.subtract))
    return np.stack(cols, axis=-1)


def sh_basis_tensor(x, y, z, degree: int):
    """Tape variant: x, y, z are Tensors of unit directions; returns (..., k)."""
    cols = _basis_columns(x, y, z, degree, (ad.mul, ad.sub))
    return ad.stack(cols, axis=-1)


def eval_color(coeffs, basis):
    """Dot SH coefficients (..., 3, k) with basis (..., k) -> (..., 3)."""
    return np.einsum("...ck,...k->...c", coeffs, basis)


def eval_opacity(coeffs, basis):
    """Sigmoid of the SH dot product, (..., k) x (..., k) -> (...)."""
    pre = np.einsum("...k,...k->...", coeffs, basis)
    return 1.0 / (1.0 + np.exp(-pre))


def eval_view_dependent(coeffs, dir_world, source_cam_rotation, kind="color"):
    """Evaluate view-dependent color or opacity for one splat.

    The world-space direction is rotated into the splat's source-camera
    frame before the basis evaluation, so stored coefficients keep the
    frame they were predicted in.
    """
    d = np.asarray(source_cam_rotation) @ np.asarray(dir_world, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if kind == "color":
        k = coeffs.shape[-1]
        basis = sh_basis(d, int(np.sqrt(k)) - 1)
        return eval_color(coeffs, basis)
    if kind == "opacity":
        k = coeffs.shape[-1]
        basis = sh_basis(d, int(np.sqrt(k)) - 1)
        return eval_opacity(coeffs, basis)
    raise ValueError(f"unknown kind {kind!r}")


def uniform_directions(n, rng):
    """n uniform unit vectors on the sphere via normalized Gaussian draws."""
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def opacity_regularizer(opacity_coeffs, cfg: SHConfig, rng):
    """Mean |coeffs . basis(n)| over fresh random directions, one per splat.

    `opacity_coeffs` may be a Tensor (differentiable path) or ndarray,
    shaped (n_splats, k). k == 1 is the scalar fallback: mean |sigma|
    with no direction sampling. With n_reg_samples > 1 the mean runs
    over splats and samples jointly.
    """
    is_tensor = isinstance(opacity_coeffs, ad.Tensor)
    vals = opacity_coeffs.value if is_tensor else np.asarray(opacity_coeffs)
    n, k = vals.shape
    degree = int(np.sqrt(k)) - 1
    if n_coeffs(degree) != k:
        raise ValueError(f"coefficient count {k} is not a square band size")

    if k == 1:
        # Scalar opacity: no view dependence to sample.
        if is_tensor:
            return ad.tmean(ad.abs_nudged(opacity_coeffs))
        return float(np.abs(vals).mean())

    s = cfg.n_reg_samples
    basis = sh_basis(uniform_directions(n * s, rng), degree)  # (n*s, k)
    if is_tensor:
        tiled = opacity_coeffs if s == 1 else ad.gather(
            opacity_coeffs, np.repeat(np.arange(n), s))
        dots = ad.tsum(ad.mul(tiled, ad.constant(basis)), axis=-1)
        return ad.tmean(ad.abs_nudged(dots))
    tiled = vals if s == 1 else np.repeat(vals, s, axis=0)
    return float(np.abs((tiled * basis).sum(-1)).mean())

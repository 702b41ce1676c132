"""Differentiable CPU rasterizer for world-frame Gaussian splats.

Rendering runs in two phases. A detached numpy planning pass makes every
discrete decision: depth culling, conservative screen bounding boxes from
the alpha >= 1/255 level set, splat-level culling when even the maximum
possible opacity cannot reach 1/255, (pixel, splat) pair enumeration, and
the front-to-back ordering (camera-frame depth, ties by splat index).
The differentiable pass then recomputes all values with tape ops over the
fixed pair list: EWA projection, per-splat view-dependent color/opacity,
Gaussian falloff, alpha compositing via segmented transmittance, and the
background blend. Gradients therefore flow to splat position, rotation,
scale and both SH coefficient blocks, treating the discrete plan as
constant (the documented source of the looser gradient tolerance).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sh
from .decoder import GaussianSplatSet, FrameMismatch, quat_to_rotmat_tensor
from .geometry import Camera, camera_center

__all__ = ["BLUR", "ALPHA_MAX", "ALPHA_MIN", "RenderTarget", "RenderStats",
           "Framebuffer", "project_gaussian", "render"]

BLUR = 0.3          # px^2 low-pass added to both cov2d diagonal entries
ALPHA_MAX = 0.999   # per-contribution opacity clamp
ALPHA_MIN = 1.0 / 255.0  # contributions below this are skipped


@dataclass(frozen=True)
class RenderTarget:
    camera: Camera
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        object.__setattr__(self, "background", bg)


@dataclass
class RenderStats:
    n_input: int = 0
    n_culled_depth: int = 0
    n_culled_faint: int = 0
    n_skipped_degenerate: int = 0
    n_pairs: int = 0


@dataclass
class Framebuffer:
    color: object   # (H, W, 3) Tensor, values in [0, 1]
    alpha: object   # (H, W) Tensor, 1 - total transmittance
    stats: RenderStats


def _rotmat_np(q):
    """Batched unit-quaternion (w, x, y, z) to rotation matrices, (M, 3, 3)."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(-1, 3, 3)


def _project_batch(pos, quat, scale, camera: Camera):
    """EWA projection of world splats already known to sit in front of the
    camera. Returns (mean2d (M,2), cov2d (M,2,2), depth (M,))."""
    R, t = camera.pose.rotation, camera.pose.translation
    K = camera.intrinsics
    p = pos @ R.T + t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=-1)
    Rq = _rotmat_np(quat)
    cov3d = (Rq * (scale ** 2)[:, None, :]) @ Rq.transpose(0, 2, 1)
    zeros = np.zeros_like(z)
    J = np.stack([K.fx / z, zeros, -K.fx * x / z ** 2,
                  zeros, K.fy / z, -K.fy * y / z ** 2],
                 axis=-1).reshape(-1, 2, 3)
    A = J @ R
    cov2d = A @ cov3d @ A.transpose(0, 2, 1) + BLUR * np.eye(2)
    return mean2d, cov2d, z


def project_gaussian(position, rotation, scale, camera: Camera, near=0.01):
    """EWA projection of one world-frame splat.

    Returns (mean2d, cov2d, depth) or None when the center is at or
    behind the near plane. cov2d includes the low-pass blur.
    """
    pos = np.asarray(position, dtype=np.float64)
    z = camera.pose.rotation[2] @ pos + camera.pose.translation[2]
    if z <= near:
        return None
    mean, cov, depth = _project_batch(
        pos[None], np.asarray(rotation, dtype=np.float64)[None],
        np.asarray(scale, dtype=np.float64)[None], camera)
    return mean[0], cov[0], float(depth[0])


def _opacity_upper_bound(op_coeffs):
    """Conservative max of sigmoid(coeffs . basis) over all directions.

    The constant band passes through signed (its basis value never changes);
    higher bands are bounded by |coeff| times the band's peak magnitude.
    """
    k = op_coeffs.shape[-1]
    degree = int(np.sqrt(k)) - 1
    z = op_coeffs[..., 0] * sh.band_max(0)
    for l in range(1, degree + 1):
        band = op_coeffs[..., l * l:(l + 1) * (l + 1)]
        z = z + sh.band_max(l) * np.abs(band).sum(axis=-1)
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def _values(x):
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x)


def render(splats: GaussianSplatSet, target: RenderTarget, near=0.01) -> Framebuffer:
    """Rasterize world-frame splats into the target camera's framebuffer."""
    if splats.frame != "world":
        raise FrameMismatch(f"renderer expects world-frame splats, got {splats.frame!r}")
    cam = target.camera
    K = cam.intrinsics
    H, W = K.height, K.width
    n_px = H * W
    stats = RenderStats(n_input=splats.count)

    pos_v = _values(splats.position)
    dtype = pos_v.dtype
    R, t = cam.pose.rotation.astype(dtype), cam.pose.translation.astype(dtype)

    # ── planning (detached) ────────────────────────────────────────────────
    p_cam = pos_v @ R.T + t
    z_all = p_cam[:, 2]
    vis = z_all > near
    stats.n_culled_depth = int((~vis).sum())

    o_bound = _opacity_upper_bound(_values(splats.opacity_sh))
    faint = o_bound < ALPHA_MIN
    stats.n_culled_faint = int((vis & faint).sum())
    vis &= ~faint

    idx = np.flatnonzero(vis)
    if idx.size == 0:
        return _background_only(target, H, W, stats, dtype)

    mean_np, cov_np, _ = _project_batch(
        pos_v[idx].astype(np.float64),
        _values(splats.rotation)[idx].astype(np.float64),
        _values(splats.scale)[idx].astype(np.float64), cam)
    det_np = cov_np[:, 0, 0] * cov_np[:, 1, 1] - cov_np[:, 0, 1] ** 2
    good = np.isfinite(det_np) & (det_np > 0) & np.isfinite(mean_np).all(axis=1)
    stats.n_skipped_degenerate = int((~good).sum())
    idx, mean_np, cov_np = idx[good], mean_np[good], cov_np[good]
    if idx.size == 0:
        return _background_only(target, H, W, stats, dtype)

    # Conservative bbox: alpha >= 1/255 requires the Mahalanobis radius
    # 2 ln(255 * o_max); axis half-width is sqrt of that times marginal var.
    chi2 = 2.0 * np.log(255.0 * np.minimum(o_bound[idx], 1.0))
    rx = np.sqrt(chi2 * cov_np[:, 0, 0])
    ry = np.sqrt(chi2 * cov_np[:, 1, 1])
    u0 = np.maximum(np.ceil(mean_np[:, 0] - rx - 0.5), 0).astype(np.int64)
    u1 = np.minimum(np.floor(mean_np[:, 0] + rx - 0.5), W - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(mean_np[:, 1] - ry - 0.5), 0).astype(np.int64)
    v1 = np.minimum(np.floor(mean_np[:, 1] + ry - 0.5), H - 1).astype(np.int64)
    on_screen = (u0 <= u1) & (v0 <= v1)
    idx, u0, u1, v0, v1 = idx[on_screen], u0[on_screen], u1[on_screen], \
        v0[on_screen], v1[on_screen]
    if idx.size == 0:
        return _background_only(target, H, W, stats, dtype)

    widths = u1 - u0 + 1
    areas = widths * (v1 - v0 + 1)
    n_pairs = int(areas.sum())
    starts = np.concatenate([[0], np.cumsum(areas)[:-1]])
    pair_vis = np.repeat(np.arange(idx.size), areas)   # index into visible set
    local = np.arange(n_pairs) - starts[pair_vis]
    du = local % widths[pair_vis]
    dv = local // widths[pair_vis]
    pu = u0[pair_vis] + du
    pv = v0[pair_vis] + dv
    pixel_id = pv * W + pu

    order = np.lexsort((idx[pair_vis], z_all[idx][pair_vis], pixel_id))
    pair_vis = pair_vis[order]
    pixel_id = pixel_id[order]
    centers = np.stack([pu[order] + 0.5, pv[order] + 0.5], axis=-1).astype(dtype)
    stats.n_pairs = n_pairs

    # First pair position of each pixel run, repeated across the run.
    _, first, counts = np.unique(pixel_id, return_index=True, return_counts=True)
    seg_first = np.repeat(first, counts)

    # ── differentiable pass over the fixed plan ────────────────────────────
    def wrap(x):
        return x if isinstance(x, ad.Tensor) else ad.constant(x)

    pos = ad.gather(wrap(splats.position), idx)
    quat = ad.gather(wrap(splats.rotation), idx)
    scl = ad.gather(wrap(splats.scale), idx)
    col_sh = ad.gather(wrap(splats.color_sh), idx)
    op_sh = ad.gather(wrap(splats.opacity_sh), idx)
    nv = idx.size

    pc = ad.matmul(pos, ad.constant(R.T)) + ad.constant(t)
    x, y, z = (pc[(slice(None), i)] for i in range(3))
    u = K.fx * (x / z) + K.cx
    v = K.fy * (y / z) + K.cy

    Rq = quat_to_rotmat_tensor(quat)
    s2 = ad.reshape(scl * scl, (nv, 1, 3))
    cov3 = ad.matmul(Rq * s2, ad.swapaxes(Rq, -1, -2))
    zinv = 1.0 / z
    zero = ad.constant(np.zeros(nv, dtype=dtype))
    jrow = [K.fx * zinv, zero, -K.fx * (x * zinv * zinv),
            zero, K.fy * zinv, -K.fy * (y * zinv * zinv)]
    J = ad.reshape(ad.stack(jrow, axis=-1), (nv, 2, 3))
    A = ad.matmul(J, ad.constant(R))
    cov2 = ad.matmul(ad.matmul(A, cov3), ad.swapaxes(A, -1, -2)) \
        + ad.constant(BLUR * np.eye(2, dtype=dtype))
    ca = cov2[(slice(None), 0, 0)]
    cb = cov2[(slice(None), 0, 1)]
    cc = cov2[(slice(None), 1, 1)]
    det = ca * cc - cb * cb

    # view-dependent color and opacity, direction toward the camera center
    cctr = camera_center(cam.pose).astype(dtype)
    to_cam = ad.constant(cctr) - pos
    dnorm = ad.sqrt(ad.tsum(to_cam * to_cam, axis=-1, keepdims=True))
    dirs = to_cam / dnorm
    if splats.source_rotation is not None:
        rsrc = splats.source_rotation[splats.source_view[idx]].astype(dtype)
        dsrc = ad.reshape(ad.matmul(ad.constant(rsrc), ad.reshape(dirs, (nv, 3, 1))),
                          (nv, 3))
    else:
        dsrc = dirs   # splats authored in world frame: SH lives there too
    dx, dy, dz = (dsrc[(slice(None), i)] for i in range(3))
    deg_c = int(np.sqrt(col_sh.shape[-1])) - 1
    deg_o = int(np.sqrt(op_sh.shape[-1])) - 1
    basis_c = sh.sh_basis_tensor(dx, dy, dz, deg_c)
    color = ad.tsum(col_sh * ad.reshape(basis_c, (nv, 1, col_sh.shape[-1])), axis=-1)
    basis_o = basis_c if deg_o == deg_c else sh.sh_basis_tensor(dx, dy, dz, deg_o)
    opacity = ad.sigmoid(ad.tsum(op_sh * basis_o, axis=-1))

    # per-pair Gaussian falloff using the conic (inverse 2x2 covariance)
    pu_ = ad.gather(u, pair_vis)
    pv_ = ad.gather(v, pair_vis)
    dxp = ad.constant(centers[:, 0]) - pu_
    dyp = ad.constant(centers[:, 1]) - pv_
    A_ = ad.gather(cc / det, pair_vis)
    B_ = ad.gather(cb / det, pair_vis)
    C_ = ad.gather(ca / det, pair_vis)
    maha = A_ * (dxp * dxp) - 2.0 * (B_ * (dxp * dyp)) + C_ * (dyp * dyp)
    g = ad.exp(-0.5 * maha)
    alpha = ad.minimum(ad.gather(opacity, pair_vis) * g, ALPHA_MAX)
    keep = (alpha.value >= ALPHA_MIN).astype(dtype)   # detached skip rule
    alpha = alpha * ad.constant(keep)

    logt = ad.log1p(-alpha)
    incl = ad.cumsum(logt, axis=0)
    excl = incl - logt
    t_pair = ad.exp(excl - ad.gather(excl, seg_first))
    contrib = alpha * t_pair

    pair_color = ad.gather(color, pair_vis)
    col_px = ad.segment_sum(pair_color * ad.reshape(contrib, (n_pairs, 1)),
                            pixel_id, n_px)
    t_total = ad.exp(ad.segment_sum(logt, pixel_id, n_px))
    bg = ad.constant(target.background.astype(dtype))
    out = col_px + ad.reshape(t_total, (n_px, 1)) * ad.reshape(bg, (1, 3))
    color_img = ad.reshape(ad.clip_passthrough(out, 0.0, 1.0), (H, W, 3))
    alpha_img = ad.reshape(1.0 - t_total, (H, W))
    return Framebuffer(color=color_img, alpha=alpha_img, stats=stats)


def _background_only(target, H, W, stats, dtype):
    bg = np.broadcast_to(target.background.astype(dtype), (H, W, 3)).copy()
    return Framebuffer(color=ad.constant(bg),
                       alpha=ad.constant(np.zeros((H, W), dtype=dtype)),
                       stats=stats)

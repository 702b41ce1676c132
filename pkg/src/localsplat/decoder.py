"""Raw network outputs -> constrained Gaussian splats, local frame and world.

Channel layout per pixel (d_G = 8 + color + opacity channels):
scale (3), quaternion (4), depth (1), color SH, opacity SH.

Activations: depth maps log-uniformly into [near, far] through a sigmoid,
so zero raw output sits at sqrt(near*far); scales are exp-clamped into
[s_min, s_max]; the quaternion adds (1,0,0,0) before normalizing so zero
raw output is the identity rotation; SH coefficients pass through raw
(the opacity sigmoid is applied at evaluation time).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFinite
from .geometry import quat_from_rotation

__all__ = ["SplatLayout", "GaussianSplatSet", "FrameMismatch",
           "S_MIN", "S_MAX", "decode_pixel_splats", "splats_to_world",
           "quat_multiply_tensor", "quat_to_rotmat_tensor"]

S_MIN = 1e-4
S_MAX = 0.5


class FrameMismatch(ValueError):
    """Splats are in the wrong frame for this operation."""


@dataclass(frozen=True)
class SplatLayout:
    deg_color: int = 1
    deg_opacity: int = 1

    @property
    def n_color(self):
        return 3 * (self.deg_color + 1) ** 2

    @property
    def n_opacity(self):
        return (self.deg_opacity + 1) ** 2

    @property
    def channels(self):
        return 8 + self.n_color + self.n_opacity

    @property
    def color_slice(self):
        return slice(8, 8 + self.n_color)

    @property
    def opacity_slice(self):
        return slice(8 + self.n_color, 8 + self.n_color + self.n_opacity)


@dataclass
class GaussianSplatSet:
    """Flat splat arrays; fields are Tensors on the training path."""
    position: object        # (M, 3)
    rotation: object        # (M, 4) unit quaternions, canonical sign
    scale: object           # (M, 3) in [S_MIN, S_MAX]
    color_sh: object        # (M, 3, kc)
    opacity_sh: object      # (M, ko)
    source_view: np.ndarray  # (M,) index into source cameras
    source_rotation: object  # (n_views, 3, 3) or None while local
    frame: str               # 'local' or 'world'

    @property
    def count(self):
        return self.position.shape[0]

    def detached(self):
        def v(x):
            return x.value if isinstance(x, ad.Tensor) else x
        return GaussianSplatSet(v(self.position), v(self.rotation), v(self.scale),
                                v(self.color_sh), v(self.opacity_sh),
                                self.source_view, v(self.source_rotation), self.frame)


def _col(x, sl):
    return x[(slice(None), sl)]


def decode_pixel_splats(raw, raymaps, layout: SplatLayout, near, far):
    """(N,H,W,d_G) raw maps + (N,H,W,3) unit ray maps -> local-frame splats."""
    vals = raw.value if isinstance(raw, ad.Tensor) else np.asarray(raw)
    if not np.all(np.isfinite(vals)):
        raise NonFinite("raw splat parameters contain non-finite values")
    if vals.shape[-1] != layout.channels:
        raise ad.ShapeMismatch(
            f"raw channel count {vals.shape[-1]} != layout {layout.channels}")
    if not (near > 0 and far > near):
        raise ValueError("need 0 < near < far")
    if not isinstance(raw, ad.Tensor):
        raw = ad.constant(raw)

    n, h, w, dg = raw.shape
    m = n * h * w
    flat = ad.reshape(raw, (m, dg))
    rays = np.asarray(raymaps, dtype=vals.dtype).reshape(m, 3)

    t = near * ad.exp(ad.sigmoid(_col(flat, 7)) * float(np.log(far / near)))
    position = ad.reshape(t, (m, 1)) * ad.constant(rays)

    scale = ad.minimum(ad.maximum(ad.exp(_col(flat, slice(0, 3))), S_MIN), S_MAX)

    q = _col(flat, slice(3, 7)) + ad.constant(
        np.array([1.0, 0, 0, 0], dtype=vals.dtype))
    norm = ad.sqrt(ad.tsum(q * q, axis=-1, keepdims=True))
    q = q / norm
    sign = np.where(q.value[:, :1] < 0, -1.0, 1.0)  # detached canonical sign
    q = q * ad.constant(sign)

    color = ad.reshape(_col(flat, layout.color_slice),
                       (m, 3, (layout.deg_color + 1) ** 2))
    opacity = _col(flat, layout.opacity_slice)

    return GaussianSplatSet(
        position=position, rotation=q, scale=scale,
        color_sh=color, opacity_sh=opacity,
        source_view=np.repeat(np.arange(n), h * w),
        source_rotation=None, frame="local")


def quat_multiply_tensor(a, b):
    """Hamilton product on (..., 4) Tensors/arrays (constant or traced)."""
    if not isinstance(a, ad.Tensor):
        a = ad.constant(a)
    if not isinstance(b, ad.Tensor):
        b = ad.constant(b)
    aw, ax, ay, az = (a[(Ellipsis, i)] for i in range(4))
    bw, bx, by, bz = (b[(Ellipsis, i)] for i in range(4))
    return ad.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat_tensor(q):
    """(M, 4) unit quaternions -> (M, 3, 3) rotation matrices on the tape."""
    w, x, y, z = (q[(slice(None), i)] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    entries = [
        1.0 - 2.0 * (yy + zz), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (xx + zz), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (xx + yy),
    ]
    m = q.shape[0]
    return ad.reshape(ad.stack(entries, axis=-1), (m, 3, 3))


def splats_to_world(splats: GaussianSplatSet, cameras) -> GaussianSplatSet:
    """Local-frame splats -> world frame, recording source rotations for SH."""
    if splats.frame != "local":
        raise FrameMismatch(f"expected local-frame splats, got {splats.frame!r}")
    n_views = len(cameras)
    if splats.source_view.max() >= n_views:
        raise ValueError("cameras do not cover all source views")

    R = np.stack([c.pose.rotation for c in cameras])          # (n, 3, 3)
    t = np.stack([c.pose.translation for c in cameras])       # (n, 3)
    idx = splats.source_view
    m = splats.count

    dtype = splats.position.dtype
    rt_per = np.ascontiguousarray(R.transpose(0, 2, 1)[idx]).astype(dtype)
    t_per = t[idx].astype(dtype)
    local = splats.position - ad.constant(t_per)
    pos_w = ad.reshape(ad.matmul(ad.constant(rt_per), ad.reshape(local, (m, 3, 1))),
                       (m, 3))

    cam_quat = np.stack([quat_from_rotation(Ri.T) for Ri in R])  # world<-cam
    rot_w = quat_multiply_tensor(cam_quat[idx].astype(dtype), splats.rotation)
    sign = np.where(rot_w.value[:, :1] < 0, -1.0, 1.0)
    rot_w = rot_w * ad.constant(sign)

    return replace(splats, position=pos_w, rotation=rot_w,
                   source_rotation=R, frame="world")

"""Synthetic scenes, manifest IO, and camera-center normalization.

A scene is a set of posed views (PNG images + intrinsics + world-to-camera
poses), near/far bounds, a background color, and an optional ground-truth
splat PLY. Manifests are JSON. On load, camera centers are renormalized to
exactly fit [-1, 1]^3 by a uniform scale+translate, and the composed map
back to original units is recorded in the manifest record.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import plyio
from .decoder import GaussianSplatSet
from .geometry import (Camera, CameraIntrinsics, RigidPose, camera_center,
                       quat_normalize, pose_from_matrix, pose_to_matrix)
from .renderer import RenderTarget, render
from .sh import Y00

__all__ = ["Scene", "look_at_pose", "arc_cameras", "make_ground_truth",
           "generate_synthetic_scene", "save_scene", "load_scene",
           "normalize_scene", "make_batch", "split_views", "downsample"]


@dataclass
class Scene:
    cameras: list
    images: list                  # (H, W, 3) float arrays in [0, 1]
    near: float
    far: float
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # current = scale * (original - offset); identity for fresh scenes
    normalization: dict = field(default_factory=lambda: {
        "scale": 1.0, "offset": [0.0, 0.0, 0.0]})
    gt_ply: str = None

    @property
    def n_views(self):
        return len(self.cameras)


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> RigidPose:
    """World-to-camera pose with +z pointing from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / nz
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-8:      # looking along up: pick another axis
        x = np.cross([0.0, 0.0, 1.0], z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidPose(R, -R @ eye)


def arc_cameras(rng, n_views, resolution=64, fov_deg=55.0, radius=2.5,
                arc_degrees=110.0, y_jitter=0.25, target_jitter=0.08):
    """Cameras on a jittered arc in the x-z plane, all looking at the
    (jittered) origin. Ids are 0..n_views-1 in arc order."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2.0)
    half = np.radians(arc_degrees) / 2.0
    angles = np.linspace(-half, half, n_views)
    angles = angles + rng.uniform(-0.02, 0.02, n_views)
    cams = []
    for i, theta in enumerate(angles):
        eye = np.array([radius * np.sin(theta),
                        rng.uniform(-y_jitter, y_jitter),
                        -radius * np.cos(theta)])
        target = rng.uniform(-target_jitter, target_jitter, 3)
        K = CameraIntrinsics(fx=f, fy=f, cx=resolution / 2.0,
                             cy=resolution / 2.0,
                             width=resolution, height=resolution)
        cams.append(Camera(intrinsics=K, pose=look_at_pose(eye, target), id=i))
    return cams


def _f32(a):
    """Quantize to the float32 grid but keep float64 math downstream, so
    PLY export/import round-trips bitwise."""
    return np.asarray(a).astype("<f4").astype(np.float64)


def make_ground_truth(rng, n_splats, deg_color=1, deg_opacity=1) -> GaussianSplatSet:
    kc, ko = (deg_color + 1) ** 2, (deg_opacity + 1) ** 2
    pos = _f32(rng.uniform(-0.6, 0.6, (n_splats, 3)))
    quat = np.stack([quat_normalize(q) for q in rng.standard_normal((n_splats, 4))])
    quat = _f32(quat)
    ln_s = _f32(rng.uniform(np.log(0.04), np.log(0.13), (n_splats, 3)))
    scale = np.exp(ln_s)
    csh = np.zeros((n_splats, 3, kc))
    csh[:, :, 0] = rng.uniform(0.15, 0.85, (n_splats, 3)) / Y00
    if kc > 1:
        csh[:, :, 1:] = 0.15 * rng.standard_normal((n_splats, 3, kc - 1))
    osh = np.zeros((n_splats, ko))
    osh[:, 0] = rng.uniform(0.5, 3.5, n_splats) / Y00
    if ko > 1:
        osh[:, 1:] = 0.2 * rng.standard_normal((n_splats, ko - 1))
    return GaussianSplatSet(position=pos, rotation=quat, scale=scale,
                            color_sh=_f32(csh), opacity_sh=_f32(osh),
                            source_view=np.zeros(n_splats, dtype=np.int64),
                            source_rotation=None, frame="world")


def _quantize_set(gt: GaussianSplatSet) -> GaussianSplatSet:
    """Snap fields to their PLY storage grid (float32; scale via ln) so
    export -> import is bitwise on the arrays the renderer consumed."""
    return GaussianSplatSet(position=_f32(gt.position),
                            rotation=_f32(gt.rotation),
                            scale=np.exp(_f32(np.log(gt.scale))),
                            color_sh=_f32(gt.color_sh),
                            opacity_sh=_f32(gt.opacity_sh),
                            source_view=gt.source_view,
                            source_rotation=gt.source_rotation, frame=gt.frame)


def _normalization_from_centers(centers):
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    mid = (lo + hi) / 2.0
    half = float((hi - lo).max() / 2.0)
    s = 1.0 / half if half > 0 else 1.0
    return s, mid


def _apply_normalization(scene: Scene, gt: GaussianSplatSet, s, mid):
    cams = []
    for c in scene.cameras:
        R, t = c.pose.rotation, c.pose.translation
        cams.append(Camera(intrinsics=c.intrinsics,
                           pose=RigidPose(R, s * (R @ mid + t)), id=c.id))
    old = scene.normalization
    record = {"scale": float(s * old["scale"]),
              "offset": (np.asarray(old["offset"])
                         + mid / old["scale"]).tolist()}
    out = replace(scene, cameras=cams, near=s * scene.near, far=s * scene.far,
                  normalization=record)
    if gt is not None:
        gt = GaussianSplatSet(position=s * (gt.position - mid),
                              rotation=gt.rotation, scale=s * gt.scale,
                              color_sh=gt.color_sh, opacity_sh=gt.opacity_sh,
                              source_view=gt.source_view,
                              source_rotation=gt.source_rotation, frame="world")
    return out, gt


def normalize_scene(scene: Scene, gt: GaussianSplatSet = None):
    """Exact-fit uniform scale+translate of camera centers into [-1,1]^3."""
    centers = np.stack([camera_center(c.pose) for c in scene.cameras])
    s, mid = _normalization_from_centers(centers)
    return _apply_normalization(scene, gt, s, mid)


def generate_synthetic_scene(seed, n_views=8, n_splats=48, resolution=64,
                             deg_color=1, deg_opacity=1, fov_deg=55.0,
                             background=(0.0, 0.0, 0.0), near=0.8, far=8.0,
                             normalize=True):
    """Deterministic synthetic world: splats in the unit box plus an arc of
    cameras looking at it, each view rendered by the reference rasterizer."""
    if n_splats < 1 or n_views < 2:
        raise ValueError("need n_splats >= 1 and n_views >= 2")
    rng = np.random.default_rng(seed)
    gt = make_ground_truth(rng, n_splats, deg_color, deg_opacity)
    cameras = arc_cameras(rng, n_views, resolution, fov_deg)
    scene = Scene(cameras=cameras, images=[], near=near, far=far,
                  background=np.asarray(background, dtype=np.float64))
    if normalize:
        scene, gt = normalize_scene(scene, gt)
        gt = _quantize_set(gt)
    with ad.no_grad():
        for cam in scene.cameras:
            fb = render(gt, RenderTarget(cam, scene.background))
            scene.images.append(fb.color.value)
    return scene, gt


# ── manifest IO ────────────────────────────────────────────────────────────

def save_scene(scene: Scene, out_dir, gt: GaussianSplatSet = None) -> str:
    """Write PNGs, optional gt.ply, and manifest.json; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    views = []
    for cam, img in zip(scene.cameras, scene.images):
        name = f"view_{cam.id:03d}.png"
        arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(os.path.join(out_dir, name))
        views.append({"id": int(cam.id), "image": name,
                      "K": [float(v) for v in cam.intrinsics.matrix().reshape(-1)],
                      "camera_from_world": [float(v) for v in
                                            pose_to_matrix(cam.pose).reshape(-1)]})
    gt_name = None
    if gt is not None:
        gt_name = "gt.ply"
        plyio.export_ply(gt, os.path.join(out_dir, gt_name))
    manifest = {"near": float(scene.near), "far": float(scene.far),
                "background": [float(v) for v in scene.background],
                "normalization": scene.normalization,
                "ground_truth_ply": gt_name, "views": views}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_scene(path):
    """Load a manifest (file or its directory); returns (scene, gt or None).

    Camera centers are normalized to exactly fit [-1,1]^3; the manifest's
    original-units map is composed into scene.normalization.
    """
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        manifest = json.load(fh)

    cameras, images = [], []
    for view in manifest["views"]:
        img_path = os.path.join(base, view["image"])
        if not os.path.exists(img_path):
            raise FileNotFoundError(f"manifest references missing image {img_path}")
        arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        K = np.asarray(view["K"], dtype=np.float64).reshape(3, 3)
        h, w = arr.shape[0], arr.shape[1]
        intr = CameraIntrinsics(fx=K[0, 0], fy=K[1, 1], cx=K[0, 2], cy=K[1, 2],
                                width=w, height=h)
        pose = pose_from_matrix(
            np.asarray(view["camera_from_world"], dtype=np.float64).reshape(4, 4))
        cameras.append(Camera(intrinsics=intr, pose=pose, id=int(view["id"])))
        images.append(arr)

    scene = Scene(cameras=cameras, images=images,
                  near=float(manifest["near"]), far=float(manifest["far"]),
                  background=np.asarray(manifest.get("background", [0, 0, 0]),
                                        dtype=np.float64),
                  normalization=manifest.get(
                      "normalization", {"scale": 1.0, "offset": [0.0, 0.0, 0.0]}),
                  gt_ply=manifest.get("ground_truth_ply"))
    gt = None
    if scene.gt_ply:
        gt_path = os.path.join(base, scene.gt_ply)
        if not os.path.exists(gt_path):
            raise FileNotFoundError(f"manifest references missing PLY {gt_path}")
        gt = plyio.import_ply(gt_path)
    return normalize_scene(scene, gt)


# ── batching helpers ───────────────────────────────────────────────────────

def split_views(n_views, rng, n_targets=2, input_stride=1, input_ids=None):
    """Pick target views, then take every input_stride-th remaining view."""
    if input_ids is not None:
        pool = [i for i in range(n_views) if i not in set(input_ids)]
        t = rng.choice(len(pool), size=min(n_targets, len(pool)), replace=False)
        return list(input_ids), sorted(pool[i] for i in t)
    targets = sorted(rng.choice(n_views, size=n_targets, replace=False).tolist())
    rest = [i for i in range(n_views) if i not in targets]
    return rest[::input_stride], targets


def make_batch(scene: Scene, input_ids, target_ids):
    by_id = {c.id: i for i, c in enumerate(scene.cameras)}
    sel = [by_id[i] for i in input_ids]
    tgt = [by_id[i] for i in target_ids]
    return {"images": np.stack([scene.images[i] for i in sel]),
            "cameras": [scene.cameras[i] for i in sel],
            "targets": [scene.images[i] for i in tgt],
            "target_cameras": [scene.cameras[i] for i in tgt],
            "background": scene.background}


def downsample(image, factor):
    """Mean-pool by an integer factor; intrinsics scale as f/k, c/k."""
    h, w, c = image.shape
    if h % factor or w % factor:
        raise ValueError(f"resolution {h}x{w} not divisible by {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, c).mean((1, 3))


def scale_camera(cam: Camera, factor) -> Camera:
    K = cam.intrinsics
    intr = CameraIntrinsics(fx=K.fx / factor, fy=K.fy / factor,
                            cx=K.cx / factor, cy=K.cy / factor,
                            width=K.width // factor, height=K.height // factor)
    return Camera(intrinsics=intr, pose=cam.pose, id=cam.id)

"""Splat decode oracles: activation closed forms, world-transform matrix
oracles, equivariance, and gradients."""

import numpy as np
import pytest

from localsplat import autodiff as ad
from localsplat import decoder as dec
from localsplat import geometry as geo

rng = np.random.default_rng(83)

LAYOUT = dec.SplatLayout(deg_color=1, deg_opacity=1)  # d_G = 8 + 12 + 4 = 24


def unit_rays(n, h, w):
    v = rng.standard_normal((n, h, w, 3))
    v[..., 2] = np.abs(v[..., 2]) + 1.0
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_camera(R=None, t=None, i=0):
    K = geo.CameraIntrinsics(fx=8, fy=8, cx=4.0, cy=4.0, width=8, height=8)
    R = np.eye(3) if R is None else R
    t = np.zeros(3) if t is None else t
    return geo.Camera(K, geo.RigidPose(R, t), i)


def random_rotation():
    q = rng.standard_normal(4)
    return geo.rotation_from_quat(q / np.linalg.norm(q))


class TestLayout:
    def test_channel_count(self):
        assert LAYOUT.channels == 24
        assert dec.SplatLayout(0, 0).channels == 8 + 3 + 1
        assert dec.SplatLayout(3, 2).channels == 8 + 48 + 9

    def test_slices_partition_the_vector(self):
        sl_c, sl_o = LAYOUT.color_slice, LAYOUT.opacity_slice
        assert sl_c == slice(8, 20)
        assert sl_o == slice(20, 24)


class TestDecodeClosedForms:
    def test_zero_raw_values(self):
        near, far = 0.5, 4.5
        rays = unit_rays(1, 2, 2)
        raw = np.zeros((1, 2, 2, LAYOUT.channels))
        s = dec.decode_pixel_splats(raw, rays, LAYOUT, near, far)
        # depth: sigmoid(0) = 0.5 in log space -> geometric mean of the bounds
        depths = np.linalg.norm(s.position.value, axis=-1)
        np.testing.assert_allclose(depths, np.sqrt(near * far), atol=1e-12)
        # scale: exp(0) = 1 clamps to the upper bound
        np.testing.assert_allclose(s.scale.value, dec.S_MAX, atol=0)
        # rotation: (0+1, 0, 0, 0) normalizes to identity
        np.testing.assert_allclose(s.rotation.value,
                                   np.tile([1.0, 0, 0, 0], (4, 1)), atol=0)
        np.testing.assert_array_equal(s.color_sh.value, 0.0)
        np.testing.assert_array_equal(s.opacity_sh.value, 0.0)
        assert s.frame == "local"

    def test_position_is_depth_times_ray_within_bounds(self):
        near, far = 0.2, 5.0
        rays = unit_rays(2, 3, 3)
        raw = rng.standard_normal((2, 3, 3, LAYOUT.channels)) * 3
        s = dec.decode_pixel_splats(raw, rays, LAYOUT, near, far)
        pos = s.position.value.reshape(2, 3, 3, 3)
        depths = np.linalg.norm(pos, axis=-1)
        np.testing.assert_allclose(pos / depths[..., None], rays, atol=1e-9)
        assert (depths > near).all() and (depths < far).all()

    def test_depth_monotone_in_raw_channel(self):
        rays = unit_rays(1, 1, 1)
        xs = np.linspace(-4, 4, 9)
        depths = []
        for x in xs:
            raw = np.zeros((1, 1, 1, LAYOUT.channels))
            raw[..., 7] = x
            s = dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)
            depths.append(np.linalg.norm(s.position.value[0]))
        assert (np.diff(depths) > 0).all()

    def test_scale_clamped_to_bounds(self):
        rays = unit_rays(1, 1, 2)
        raw = np.zeros((1, 1, 2, LAYOUT.channels))
        raw[0, 0, 0, 0:3] = -50.0
        raw[0, 0, 1, 0:3] = +50.0
        s = dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)
        np.testing.assert_allclose(s.scale.value[0], dec.S_MIN)
        np.testing.assert_allclose(s.scale.value[1], dec.S_MAX)

    def test_quaternions_unit_and_canonical(self):
        rays = unit_rays(1, 4, 4)
        raw = rng.standard_normal((1, 4, 4, LAYOUT.channels)) * 2
        s = dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)
        q = s.rotation.value
        np.testing.assert_allclose(np.linalg.norm(q, axis=-1), 1.0, atol=1e-12)
        assert (q[:, 0] >= 0).all()

    def test_non_finite_raw_rejected(self):
        rays = unit_rays(1, 1, 1)
        raw = np.zeros((1, 1, 1, LAYOUT.channels))
        raw[..., 5] = np.nan
        with pytest.raises(ad.NonFinite):
            dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)

    def test_determinism(self):
        rays = unit_rays(1, 2, 2)
        raw = rng.standard_normal((1, 2, 2, LAYOUT.channels))
        a = dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)
        b = dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)
        np.testing.assert_array_equal(a.position.value, b.position.value)


def local_set(n_views=2, h=2, w=2):
    rays = unit_rays(n_views, h, w)
    raw = rng.standard_normal((n_views, h, w, LAYOUT.channels))
    return dec.decode_pixel_splats(raw, rays, LAYOUT, 0.5, 4.0)


class TestWorldTransform:
    def test_identity_pose_leaves_splats_unchanged(self):
        s = local_set(1)
        w = dec.splats_to_world(s, [make_camera()])
        np.testing.assert_allclose(w.position.value, s.position.value, atol=1e-15)
        np.testing.assert_allclose(w.rotation.value, s.rotation.value, atol=1e-12)
        assert w.frame == "world"

    def test_translation_pose_against_matrix_oracle(self):
        t = np.array([0.4, -0.7, 1.2])
        s = local_set(1)
        w = dec.splats_to_world(s, [make_camera(t=t)])
        M = np.linalg.inv(geo.pose_to_matrix(geo.RigidPose(np.eye(3), t)))
        for i in range(s.count):
            p = M @ np.append(s.position.value[i], 1.0)
            np.testing.assert_allclose(w.position.value[i], p[:3], atol=1e-12)

    def test_general_pose_against_matrix_oracle(self):
        poses = [geo.RigidPose(random_rotation(), rng.uniform(-1, 1, 3))
                 for _ in range(2)]
        cams = [make_camera(p.rotation, p.translation, i) for i, p in enumerate(poses)]
        s = local_set(2)
        w = dec.splats_to_world(s, cams)
        for i in range(s.count):
            M = np.linalg.inv(geo.pose_to_matrix(poses[s.source_view[i]]))
            p = M @ np.append(s.position.value[i], 1.0)
            np.testing.assert_allclose(w.position.value[i], p[:3], atol=1e-12)
        # rotations compose: R_world(q_w) == R_j^T @ R(q_local)
        for i in range(s.count):
            Rl = geo.rotation_from_quat(s.rotation.value[i])
            Rw = geo.rotation_from_quat(w.rotation.value[i])
            want = poses[s.source_view[i]].rotation.T @ Rl
            np.testing.assert_allclose(Rw, want, atol=1e-12)

    def test_world_to_local_to_world_round_trip(self):
        pose = geo.RigidPose(random_rotation(), rng.uniform(-1, 1, 3))
        s = local_set(1)
        world = dec.splats_to_world(s, [make_camera(pose.rotation, pose.translation)])
        # Map world positions back into the camera frame by the pose itself,
        # rebuild a local set, and push it through again.
        back = pose.apply(world.position.value)
        np.testing.assert_allclose(back, s.position.value, atol=1e-12)
        s2 = dec.GaussianSplatSet(ad.constant(back), s.rotation, s.scale,
                                  s.color_sh, s.opacity_sh, s.source_view,
                                  None, "local")
        w2 = dec.splats_to_world(s2, [make_camera(pose.rotation, pose.translation)])
        np.testing.assert_allclose(w2.position.value, world.position.value, atol=1e-12)

    def test_frame_mismatch_guard(self):
        s = local_set(1)
        w = dec.splats_to_world(s, [make_camera()])
        with pytest.raises(dec.FrameMismatch):
            dec.splats_to_world(w, [make_camera()])

    def test_equivariance_under_global_rigid_transform(self):
        poses = [geo.RigidPose(random_rotation(), rng.uniform(-1, 1, 3))
                 for _ in range(2)]
        g = geo.RigidPose(random_rotation(), rng.uniform(-1, 1, 3))
        ginv = geo.pose_inverse(g)
        s = local_set(2)

        cams = [make_camera(p.rotation, p.translation, i) for i, p in enumerate(poses)]
        w0 = dec.splats_to_world(s, cams)
        moved = [make_camera(q.rotation, q.translation, i) for i, q in
                 enumerate(geo.pose_compose(p, ginv) for p in poses)]
        w1 = dec.splats_to_world(s, moved)
        want = w0.position.value @ g.rotation.T + g.translation
        np.testing.assert_allclose(w1.position.value, want, atol=1e-9)

    def test_source_rotation_recorded(self):
        poses = [geo.RigidPose(random_rotation(), rng.uniform(-1, 1, 3))]
        cams = [make_camera(poses[0].rotation, poses[0].translation)]
        w = dec.splats_to_world(local_set(1), cams)
        np.testing.assert_array_equal(w.source_rotation[0], poses[0].rotation)


class TestTapeQuaternionOps:
    def test_quat_multiply_matches_numpy(self):
        for _ in range(10):
            a, b = rng.standard_normal((2, 4))
            a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
            got = dec.quat_multiply_tensor(a[None], b[None]).value[0]
            np.testing.assert_allclose(got, geo.quat_multiply(a, b), atol=1e-14)

    def test_quat_to_rotmat_matches_numpy(self):
        q = rng.standard_normal((6, 4))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        got = dec.quat_to_rotmat_tensor(ad.constant(q)).value
        for i in range(6):
            np.testing.assert_allclose(got[i], geo.rotation_from_quat(q[i]), atol=1e-14)

    def test_rotmat_gradcheck(self):
        from test_autodiff import check_grad
        q = rng.standard_normal((3, 4))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        w = rng.standard_normal((3, 3, 3))
        check_grad(lambda t: ad.mul(dec.quat_to_rotmat_tensor(t), ad.constant(w)), q)


class TestDecodeGradients:
    def test_decode_gradcheck_interior_points(self):
        from test_autodiff import numerical_grad
        rays = unit_rays(1, 2, 2)
        # Keep scale channels inside the clamp interval exp(x) in (1e-4, 0.5).
        raw = rng.uniform(-0.5, 0.5, (1, 2, 2, LAYOUT.channels))
        raw[..., 0:3] = rng.uniform(-3.0, -1.5, (1, 2, 2, 3))
        cams = [make_camera(random_rotation(), rng.uniform(-1, 1, 3))]
        wvec = {k: rng.standard_normal(s) for k, s in
                [("position", (4, 3)), ("rotation", (4, 4)), ("scale", (4, 3)),
                 ("color_sh", (4, 3, 4)), ("opacity_sh", (4, 4))]}

        def scalar_from(s):
            total = 0.0
            for k, w in wvec.items():
                total = total + ad.tsum(ad.mul(getattr(s, k), ad.constant(w)))
            return total

        t_raw = ad.parameter(raw)
        world = dec.splats_to_world(
            dec.decode_pixel_splats(t_raw, rays, LAYOUT, 0.5, 4.0), cams)
        ad.backward(scalar_from(world))
        got = t_raw.grad.copy()

        def f(v):
            with ad.no_grad():
                w = dec.splats_to_world(
                    dec.decode_pixel_splats(ad.constant(v), rays, LAYOUT, 0.5, 4.0),
                    cams)
                return float(scalar_from(w).value)

        num = numerical_grad(f, raw)
        assert np.abs(got - num).max() / max(np.abs(num).max(), 1e-10) < 1e-4

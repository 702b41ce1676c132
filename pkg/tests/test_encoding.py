"""Conditioning encoder oracles: sinusoidal PE closed forms, zero-weight
propagation, relative-pose invariance, and parameter gradients."""

import numpy as np
import pytest

from localsplat import autodiff as ad
from localsplat import encoding as enc
from localsplat import geometry as geo

rng = np.random.default_rng(31)


def random_pose(r=rng):
    q = r.standard_normal(4)
    R = geo.rotation_from_quat(q / np.linalg.norm(q))
    return geo.RigidPose(R, r.uniform(-1, 1, 3))


class TestSinusoidalPE:
    def test_zero_vector(self):
        cfg = enc.PEConfig(n_freq=3, include_input=True)
        out = enc.sinusoidal_encode(np.zeros(7), cfg)
        assert out.shape == (7 * 7,)
        sins = out[:42].reshape(7, 3, 2)[..., 0]
        coss = out[:42].reshape(7, 3, 2)[..., 1]
        np.testing.assert_array_equal(sins, 0.0)
        np.testing.assert_array_equal(coss, 1.0)
        np.testing.assert_array_equal(out[42:], 0.0)

    def test_half_pi_two_octaves(self):
        cfg = enc.PEConfig(n_freq=2, include_input=False)
        out = enc.sinusoidal_encode(np.array([np.pi / 2]), cfg)
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0, -1.0], atol=1e-12)

    def test_output_length_7_components_6_octaves(self):
        cfg = enc.PEConfig(n_freq=6, include_input=True)
        assert cfg.out_dim(7) == 91
        assert enc.sinusoidal_encode(rng.standard_normal(7), cfg).shape == (91,)

    def test_pose_vector_layout(self):
        rel = geo.pose_identity()
        v = enc.pose_to_vector(rel)
        np.testing.assert_array_equal(v, [1, 0, 0, 0, 0, 0, 0])
        t = np.array([0.1, -0.2, 0.3])
        np.testing.assert_array_equal(
            enc.pose_to_vector(geo.RigidPose(np.eye(3), t))[4:], t)


def make_encoder(dim=8, layers=2):
    return enc.ConditioningEncoder(dim, layers)


class TestEncoder:
    def test_zero_weights_give_zero_feature(self):
        e = make_encoder()
        p = e.init_params(np.random.default_rng(0))
        zeroed = {k: ad.parameter(np.zeros_like(v.value)) for k, v in p.items()}
        # Layer norms keep their learned affine; zero scale is part of "all-zero".
        c = e.encode(geo.pose_identity(), zeroed, layer=0)
        np.testing.assert_array_equal(c.value, 0.0)

    def test_layer_projections_differ(self):
        e = make_encoder()
        p = e.init_params(np.random.default_rng(1))
        c0 = e.encode(geo.pose_identity(), p, layer=0).value
        c1 = e.encode(geo.pose_identity(), p, layer=1).value
        assert np.abs(c0 - c1).max() > 1e-6

    def test_self_conditioning_identical_across_views(self):
        # C(j,j) encodes the identity transform regardless of j's pose.
        e = make_encoder()
        p = e.init_params(np.random.default_rng(2))
        feats = []
        for _ in range(4):
            pose = random_pose()
            rel = geo.relative_pose(pose, pose)
            feats.append(e.encode(rel, p, layer=1).value)
        for f in feats[1:]:
            np.testing.assert_allclose(f, feats[0], atol=1e-12)

    def test_invariant_under_global_rigid_transform(self):
        e = make_encoder()
        p = e.init_params(np.random.default_rng(3))
        for _ in range(10):
            pa, pb, g = random_pose(), random_pose(), random_pose()
            ginv = geo.pose_inverse(g)
            c0 = e.encode(geo.relative_pose(pa, pb), p, layer=0).value
            c1 = e.encode(geo.relative_pose(geo.pose_compose(pa, ginv),
                                            geo.pose_compose(pb, ginv)),
                          p, layer=0).value
            np.testing.assert_allclose(c1, c0, atol=1e-9)

    def test_world_variant_is_not_invariant(self):
        e = enc.ConditioningEncoder(8, 2, variant="world")
        p = e.init_params(np.random.default_rng(4))
        poses = {0: random_pose(), 1: random_pose()}
        g = random_pose()
        ginv = geo.pose_inverse(g)
        cams = {j: geo.Camera(_K(), poses[j], j) for j in poses}
        graph = geo.build_neighbor_graph(list(cams.values()), window=2)
        v0, _ = e.pair_vectors(poses, graph)
        moved = {j: geo.pose_compose(poses[j], ginv) for j in poses}
        v1, _ = e.pair_vectors(moved, graph)
        assert np.abs(v0 - v1).max() > 1e-3

    def test_missing_pose_raises(self):
        e = make_encoder()
        poses = {0: random_pose(), 1: random_pose()}
        cams = [geo.Camera(_K(), poses[j], j) for j in (0, 1)]
        graph = geo.build_neighbor_graph(cams, window=2)
        del poses[1]
        with pytest.raises(enc.MissingConditioning):
            e.pair_vectors(poses, graph)

    def test_pair_vectors_order_matches_graph(self):
        e = make_encoder()
        poses = {j: random_pose() for j in range(4)}
        cams = [geo.Camera(_K(), poses[j], j) for j in range(4)]
        graph = geo.build_neighbor_graph(cams, window=3)
        vecs, pairs = e.pair_vectors(poses, graph)
        k = 0
        for j in graph.ids():
            for jp in graph.of(j):
                assert pairs[k] == (j, jp)
                want = enc.pose_to_vector(geo.relative_pose(poses[j], poses[jp]))
                np.testing.assert_allclose(vecs[k], want, atol=0)
                k += 1

    def test_parameter_gradients_match_fd(self):
        from test_autodiff import numerical_grad
        e = enc.ConditioningEncoder(6, 1)
        p = e.init_params(np.random.default_rng(5))
        vecs = rng.standard_normal((3, 7))
        w = rng.standard_normal((3, 6))

        for name in ("cond/in/w", "cond/block0/fc1/w", "cond/block1/ln/scale",
                     "cond/layer0/w", "cond/block0/fc2/b"):
            out = ad.tsum(ad.mul(e.layer_features(e.base_features(vecs, p), p, 0),
                                 ad.constant(w)))
            ad.backward(out)
            got = p[name].grad.copy()

            def scalar(v, name=name):
                with ad.no_grad():
                    trial = dict(p)
                    trial[name] = ad.constant(v)
                    feat = e.layer_features(e.base_features(vecs, trial), trial, 0)
                    return float(ad.tsum(ad.mul(feat, ad.constant(w))).value)

            num = numerical_grad(scalar, p[name].value.copy())
            denom = max(np.abs(num).max(), np.abs(got).max(), 1e-10)
            assert np.abs(got - num).max() / denom < 1e-4, name


def _K():
    return geo.CameraIntrinsics(fx=8, fy=8, cx=4.0, cy=4.0, width=8, height=8)

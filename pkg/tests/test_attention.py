"""Attention-stack oracles: dense reference equivalence, convexity,
receptive field, permutation behavior, pair counters, and gradients."""

import numpy as np
import pytest

from localsplat import attention as att
from localsplat import autodiff as ad
from localsplat import geometry as geo
from localsplat.encoding import MissingConditioning

rng = np.random.default_rng(77)


# ── independent dense reference ─────────────────────────────────────────────

def ref_layer_norm(x, scale, offset, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + offset


def ref_attention(x, p, layer, heads, key_x=None):
    """Dense self-attention over row set x: explicit per-query loops.

    key_x supplies the key/value token rows (defaults to x)."""
    base = f"blk{layer}"
    sc, of = p[f"{base}/ln1/scale"].value, p[f"{base}/ln1/offset"].value
    nq = ref_layer_norm(x, sc, of)
    nk = nq if key_x is None else ref_layer_norm(key_x, sc, of)
    Wq, Wk, Wv, Wo = (p[f"{base}/{n}"].value for n in ("wq", "wk", "wv", "wo"))
    q, k, v = nq @ Wq, nk @ Wk, nk @ Wv
    d = x.shape[-1]
    dh = d // heads
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        merged = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            logits = k[:, sl] @ q[i, sl] / np.sqrt(dh)
            e = np.exp(logits - logits.max())
            a = e / e.sum()
            merged.append(a @ v[:, sl])
        out[i] = np.concatenate(merged) @ Wo
    return x + out


def make_stack(layers=1, dim=16, heads=2, window=5, mlp=32):
    cfg = att.StackConfig(layers=layers, dim=dim, mlp_dim=mlp, heads=heads, window=window)
    p = att.init_stack_params(cfg, np.random.default_rng(13))
    return cfg, p


def chain_rows(n, w=3):
    """Row indices of a |id difference| chain graph (self, left, right)."""
    cams = []
    K = geo.CameraIntrinsics(fx=8, fy=8, cx=4.0, cy=4.0, width=8, height=8)
    for i in range(n):
        cams.append(geo.Camera(K, geo.RigidPose(np.eye(3), np.zeros(3)), i))
    g = geo.build_neighbor_graph(cams, window=w, strategy="sequential")
    return att.neighbor_rows(g, list(range(n))), g


# ── equivalence with dense references ───────────────────────────────────────

class TestEquivalence:
    def test_single_view_matches_dense_reference(self):
        cfg, p = make_stack(dim=16, heads=2, window=1)
        tokens = rng.standard_normal((1, 6, 16))
        rows = np.array([[0]])
        got = att.local_attention(ad.constant(tokens), rows, None, cfg, p, 0).value
        want = ref_attention(tokens[0], p, 0, heads=2)
        assert np.abs(got[0] - want).max() < 1e-10

    def test_full_window_matches_global_reference(self):
        cfg, p = make_stack(dim=16, heads=4, window=8)
        n, t = 4, 5
        tokens = rng.standard_normal((n, t, 16))
        rows = np.stack([np.roll(np.arange(n), -j)[:n] for j in range(n)])
        got = att.local_attention(ad.constant(tokens), rows, None, cfg, p, 0).value
        flat = tokens.reshape(n * t, 16)
        for j in range(n):
            want = ref_attention(tokens[j], p, 0, heads=4, key_x=flat)
            assert np.abs(got[j] - want).max() < 1e-10

    def test_full_window_matches_package_global_path(self):
        cfg, p = make_stack(dim=16, heads=2, window=8)
        n, t = 5, 4
        tokens = rng.standard_normal((n, t, 16))
        rows = np.stack([np.roll(np.arange(n), -j) for j in range(n)])
        local = att.local_attention(ad.constant(tokens), rows, None, cfg, p, 0).value
        dense = att.global_self_attention(ad.constant(tokens), cfg, p, 0).value
        assert np.abs(local - dense).max() < 1e-10

    def test_constant_tokens_give_convex_identity(self):
        # With every key/value input identical, attention output is the
        # projected value vector no matter how the weights distribute.
        cfg, p = make_stack(dim=16, heads=2, window=3)
        vec = rng.standard_normal(16)
        tokens = np.broadcast_to(vec, (3, 4, 16)).copy()
        rows, _ = chain_rows(3)
        got = att.local_attention(ad.constant(tokens), rows, None, cfg, p, 0).value
        normed = ref_layer_norm(vec, p["blk0/ln1/scale"].value, p["blk0/ln1/offset"].value)
        want = vec + (normed @ p["blk0/wv"].value) @ p["blk0/wo"].value
        assert np.abs(got - want).max() < 1e-9

    def test_attention_rows_sum_to_one(self):
        cfg, p = make_stack()
        tokens = rng.standard_normal((5, 4, 16))
        rows, _ = chain_rows(5)
        probe = []
        att.local_attention(ad.constant(tokens), rows, None, cfg, p, 0, attn_probe=probe)
        sums = probe[0].sum(-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


# ── conditioning plumbing ───────────────────────────────────────────────────

class TestConditioning:
    def test_cond_shifts_keys_and_values(self):
        cfg, p = make_stack(window=3)
        tokens = rng.standard_normal((3, 4, 16))
        rows, g = chain_rows(3)
        c = rng.standard_normal((3, rows.shape[1], 16))
        a = att.local_attention(ad.constant(tokens), rows, None, cfg, p, 0).value
        b = att.local_attention(ad.constant(tokens), rows, c, cfg, p, 0).value
        assert np.abs(a - b).max() > 1e-6

    def test_cond_from_dict_order_and_missing(self):
        _, g = chain_rows(3)
        cond = {}
        for j in range(3):
            for jp in g.of(j):
                cond[(j, jp)] = np.full(4, 10 * j + jp, dtype=np.float64)
        stacked = att.cond_from_dict(cond, g, [0, 1, 2], dim=4).value
        for row, j in enumerate([0, 1, 2]):
            for col, jp in enumerate(g.of(j)):
                np.testing.assert_array_equal(stacked[row, col], 10 * j + jp)
        del cond[(1, 2)]
        with pytest.raises(MissingConditioning):
            att.cond_from_dict(cond, g, [0, 1, 2], dim=4)

    def test_ragged_neighbor_sets_rejected(self):
        g, _ = chain_rows(4)

        class Fake:
            def of(self, j):
                return (0, 1) if j == 0 else (j,)

        with pytest.raises(ValueError):
            att.neighbor_rows(Fake(), [0, 1])


# ── stack behavior ──────────────────────────────────────────────────────────

class TestStack:
    def test_zero_layers_is_identity(self):
        cfg = att.StackConfig(layers=0, dim=16, mlp_dim=32, heads=2, window=3)
        tokens = rng.standard_normal((3, 4, 16))
        rows, _ = chain_rows(3)
        out = att.lvt_forward(ad.constant(tokens), rows, None, cfg, {}).value
        np.testing.assert_array_equal(out, tokens)

    def test_ffn_with_zero_final_kernel_is_identity(self):
        cfg, p = make_stack()
        p["blk0/mlp2"] = ad.parameter(np.zeros((32, 16)))
        tokens = rng.standard_normal((2, 4, 16))
        out = att.feed_forward(ad.constant(tokens), cfg, p, 0).value
        np.testing.assert_array_equal(out, tokens)

    def test_ffn_matches_composed_reference(self):
        cfg, p = make_stack()
        tokens = rng.standard_normal((2, 4, 16))
        got = att.feed_forward(ad.constant(tokens), cfg, p, 0).value
        from scipy.special import erf
        x = ref_layer_norm(tokens, p["blk0/ln2/scale"].value, p["blk0/ln2/offset"].value)
        h = x @ p["blk0/mlp1"].value
        h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
        want = tokens + h @ p["blk0/mlp2"].value
        assert np.abs(got - want).max() < 1e-10

    def test_receptive_field_grows_one_hop_per_block(self):
        n, t, d = 9, 3, 16
        rows, _ = chain_rows(n)
        tokens = rng.standard_normal((n, t, d))
        bumped = tokens.copy()
        # Constant shifts sit in layer norm's null space; perturb with noise.
        bumped[0] += 1e-3 * rng.standard_normal((t, d))
        for L in (1, 2, 3):
            cfg = att.StackConfig(layers=L, dim=d, mlp_dim=32, heads=2, window=3)
            p = att.init_stack_params(cfg, np.random.default_rng(13))
            a = att.lvt_forward(ad.constant(tokens), rows, None, cfg, p).value
            b = att.lvt_forward(ad.constant(bumped), rows, None, cfg, p).value
            diff = np.abs(a - b).reshape(n, -1).max(-1)
            assert (diff[:L + 1] > 1e-12).all(), f"L={L}: missing influence"
            assert (diff[L + 1:] < 1e-12).all(), f"L={L}: leakage beyond {L} hops"

    def test_residual_init_scaling_applied(self):
        cfg, p = make_stack(layers=4, dim=64, mlp=64)
        wq = np.std([p[f"blk{l}/wq"].value.std() for l in range(4)])
        for l in range(4):
            ratio = p[f"blk{l}/wo"].value.std() / p[f"blk{l}/wq"].value.std()
            np.testing.assert_allclose(ratio, np.sqrt(1 / 8), rtol=0.25)

    def test_permuting_views_permutes_outputs(self):
        n, t, d = 6, 4, 16
        K = geo.CameraIntrinsics(fx=8, fy=8, cx=4.0, cy=4.0, width=8, height=8)
        centers = rng.uniform(-2, 2, (n, 3))
        cams = [geo.Camera(K, geo.RigidPose(np.eye(3), -centers[i]), i) for i in range(n)]
        cfg, p = make_stack(layers=2, dim=d, window=3)
        tokens = rng.standard_normal((n, t, d))

        g = geo.build_neighbor_graph(cams, window=3)
        rows = att.neighbor_rows(g, list(range(n)))
        out = att.lvt_forward(ad.constant(tokens), rows, None, cfg, p).value

        perm = np.random.default_rng(5).permutation(n)
        cams_p = [geo.Camera(K, geo.RigidPose(np.eye(3), -centers[perm[i]]), i)
                  for i in range(n)]
        g_p = geo.build_neighbor_graph(cams_p, window=3)
        rows_p = att.neighbor_rows(g_p, list(range(n)))
        out_p = att.lvt_forward(ad.constant(tokens[perm]), rows_p, None, cfg, p).value
        assert np.abs(out_p - out[perm]).max() < 1e-6


# ── counters ────────────────────────────────────────────────────────────────

class TestCounters:
    def test_pair_counts_match_closed_forms(self):
        t, d = 16, 16
        for n in (8, 16, 32):
            cfg = att.StackConfig(layers=1, dim=d, mlp_dim=16, heads=2, window=5)
            p = att.init_stack_params(cfg, np.random.default_rng(0))
            rows = np.stack([(np.arange(5) + j) % n for j in range(n)])
            tokens = ad.constant(rng.standard_normal((n, t, d)))
            c = att.AttentionCounters()
            att.local_attention(tokens, rows, None, cfg, p, 0, counters=c)
            assert c.pairs == n * 5 * t * t
            c.reset()
            att.global_self_attention(tokens, cfg, p, 0, counters=c)
            assert c.pairs == n * n * t * t
        # Spot values from the closed forms at w=5, T=16:
        assert 8 * 5 * 16 * 16 == 10240
        assert 8 * 8 * 16 * 16 == 16384

    def test_clamped_window_count_equals_global(self):
        n, t, d = 3, 4, 16
        cfg, p = make_stack(window=5)
        rows = np.stack([np.roll(np.arange(n), -j) for j in range(n)])
        c = att.AttentionCounters()
        att.local_attention(ad.constant(rng.standard_normal((n, t, d))), rows,
                            None, cfg, p, 0, counters=c)
        assert c.pairs == n * n * t * t


# ── gradients ───────────────────────────────────────────────────────────────

class TestGradients:
    def test_full_stack_gradcheck_micro(self):
        from test_autodiff import numerical_grad
        n, t, d = 3, 4, 16
        cfg = att.StackConfig(layers=2, dim=d, mlp_dim=24, heads=2, window=3)
        p = att.init_stack_params(cfg, np.random.default_rng(21))
        rows, _ = chain_rows(n)
        tokens = rng.standard_normal((n, t, d))
        cond = rng.standard_normal((n, 3, d)) * 0.3
        w = rng.standard_normal((n, t, d))

        def run(pdict, tk):
            return ad.tsum(ad.mul(
                att.lvt_forward(tk, rows, lambda l: cond, cfg, pdict),
                ad.constant(w)))

        # input gradient
        tin = ad.parameter(tokens)
        ad.backward(run(p, tin))
        got_in = tin.grad.copy()

        def f_in(v):
            with ad.no_grad():
                return float(run(p, ad.constant(v)).value)

        num = numerical_grad(f_in, tokens, eps=1e-6)
        assert np.abs(got_in - num).max() / max(np.abs(num).max(), 1e-10) < 1e-4

        # parameter gradients for a sample of tensors
        for name in ("blk0/wq", "blk1/mlp2", "blk0/ln1/scale", "blk1/wo"):
            got = p[name].grad.copy()

            def f_p(v, name=name):
                with ad.no_grad():
                    trial = dict(p)
                    trial[name] = ad.constant(v)
                    return float(run(trial, ad.constant(tokens)).value)

            num = numerical_grad(f_p, p[name].value.copy(), eps=1e-6)
            assert np.abs(got - num).max() / max(np.abs(num).max(), 1e-10) < 1e-4, name

import numpy as np
import pytest

from minivla import tensor as T
from minivla.config import TrainConfig
from minivla.encoder import ParamStore
from minivla.optim import finite_diff_grad
from minivla.rng import Stream
from minivla.salr import (apply_masks, compress_heads, init_salr_params,
                          outer_product_fuse, project_state, salr_forward,
                          state_layer_forward)

CFG = TrainConfig(encoder_layers=2, expert_layers=2, head_width=8, query_heads=2,
                  kv_heads=2, state_heads=2, expert_kv_heads=2, d_model=16,
                  batch_size=1, seed=3).validate()


def make_store(cfg=CFG, seed=0):
    store = ParamStore()
    init_salr_params(store, cfg, Stream(seed).child("salr"))
    return store


def random_cache(cfg, t=7, b=1, seed=2):
    s = Stream(seed)
    return [
        (T.tensor(s.child("k", i).normal((b, t, cfg.kv_heads, cfg.head_width))),
         T.tensor(s.child("v", i).normal((b, t, cfg.kv_heads, cfg.head_width))))
        for i in range(cfg.encoder_layers)
    ]


class TestProjectState:
    def test_zero_weights_zero_output(self):
        store = make_store()
        for name in ("pos", "ori", "grip"):
            store.params[f"salr.proj.{name}.w"].tensor.array[...] = 0.0
        out = project_state(np.array([[0.3, -0.5, 0.9, 1.0]]), store, CFG)
        assert not out.array.any()

    def test_gripper_slice_isolated(self):
        store = make_store()
        a = project_state(np.array([[0.3, -0.5, 0.9, 1.0]]), store, CFG)
        b = project_state(np.array([[0.3, -0.5, 0.9, -1.0]]), store, CFG)
        assert np.array_equal(a.array[0, :2], b.array[0, :2])
        assert np.abs(a.array[0, 2] - b.array[0, 2]).max() > 0

    def test_single_token_mode(self):
        cfg = CFG.replaced(state_tokens=1)
        store = make_store(cfg)
        out = project_state(np.array([[0.1, 0.2, 0.3, 0.4]]), store, cfg)
        assert out.shape == (1, 1, cfg.d_state)

    def test_grad(self):
        store = make_store()
        state = np.array([[0.2, -0.1, 0.5, 1.0]])
        probe = Stream(5).normal((1, 3, CFG.d_state))

        def build():
            return T.sum_all(T.mul_const(project_state(state, store, CFG), probe))

        build().backward()
        p = store.params["salr.proj.pos.w"]
        got = p.tensor.grad.reshape(-1).copy()
        p.tensor.grad = None
        want = finite_diff_grad(lambda: build().item(), p)
        assert np.all(np.abs(got - want) <= np.maximum(1e-6, 1e-4 * np.abs(want)))


class TestStateLayer:
    def test_zero_query_projection(self):
        store = make_store()
        store.params["salr.layer0.query.w"].tensor.array[...] = 0.0
        store.params["salr.layer0.query.b"].tensor.array[...] = 0.0
        x = project_state(np.array([[0.2, 0.3, -0.4, 1.0]]), store, CFG)
        _, qr = state_layer_forward(x, 0, store, CFG)
        assert not qr.array.any()

    def test_query_sensitive_to_every_state_dim(self):
        store = make_store()
        base = np.array([[0.2, 0.3, -0.4, 0.5]])
        _, qr0 = state_layer_forward(project_state(base, store, CFG), 0, store, CFG)
        for dim in range(4):
            bumped = base.copy()
            bumped[0, dim] += 1e-3
            _, qr1 = state_layer_forward(project_state(bumped, store, CFG), 0, store, CFG)
            assert np.abs(qr1.array - qr0.array).max() > 0, f"dead state dim {dim}"

    def test_single_token_layer(self):
        cfg = CFG.replaced(state_tokens=1)
        store = make_store(cfg)
        x = project_state(np.array([[0.1, 0.2, 0.3, 0.4]]), store, cfg)
        x2, qr = state_layer_forward(x, 0, store, cfg)
        assert x2.shape == (1, 1, cfg.d_state)
        assert qr.shape == (1, cfg.state_heads, cfg.head_width)


class TestFusionAlgebra:
    def test_ones_query_replicates(self):
        k = T.tensor(Stream(6).normal((1, 4, 2, 8)))
        v = T.tensor(Stream(7).normal((1, 4, 2, 8)))
        qr = T.tensor(np.ones((1, 2, 8)))
        ks, vs = outer_product_fuse(qr, k, v)
        for p in range(2):
            assert np.array_equal(ks.array[:, :, 2 * p:2 * p + 2], k.array)
            assert np.array_equal(vs.array[:, :, 2 * p:2 * p + 2], v.array)

    def test_zero_query_annihilates(self):
        k = T.tensor(Stream(8).normal((1, 4, 2, 8)))
        ks, vs = outer_product_fuse(T.tensor(np.zeros((1, 2, 8))), k, k)
        assert not ks.array.any() and not vs.array.any()

    def test_hand_example(self):
        qr = T.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        k = T.tensor([[[[5.0, 6.0], [7.0, 8.0]]]])
        ks, _ = outer_product_fuse(qr, k, k)
        np.testing.assert_array_equal(
            ks.array[0, 0], [[5.0, 12.0], [7.0, 16.0], [15.0, 24.0], [21.0, 32.0]])

    def test_bilinearity(self):
        s = Stream(9)
        k = T.tensor(s.child("k").normal((1, 5, 2, 8)))
        q1 = s.child("q1").normal((1, 2, 8))
        q2 = s.child("q2").normal((1, 2, 8))
        a, b = 0.7, -1.3
        lhs, _ = outer_product_fuse(T.tensor(a * q1 + b * q2), k, k)
        r1, _ = outer_product_fuse(T.tensor(q1), k, k)
        r2, _ = outer_product_fuse(T.tensor(q2), k, k)
        np.testing.assert_allclose(lhs.array, a * r1.array + b * r2.array, atol=1e-12)

    def test_mask_ones_noop_and_zero(self):
        s = Stream(10)
        ks = T.tensor(s.child("ks").normal((1, 5, 4, 8)))
        vs = T.tensor(s.child("vs").normal((1, 5, 4, 8)))
        ones = T.tensor(np.ones((4, 8)))
        kp, vp = apply_masks(ks, vs, ones, ones)
        assert np.array_equal(kp.array, ks.array) and np.array_equal(vp.array, vs.array)
        zero = T.tensor(np.zeros((4, 8)))
        kp, _ = apply_masks(ks, vs, zero, ones)
        assert not kp.array.any()

    def test_mask_single_head_isolation(self):
        ks = T.tensor(Stream(11).normal((1, 5, 4, 8)))
        m = np.ones((4, 8))
        m[1] = 0.0
        kp, _ = apply_masks(ks, ks, T.tensor(m), T.tensor(np.ones((4, 8))))
        assert not kp.array[:, :, 1].any()
        keep = [0, 2, 3]
        assert np.array_equal(kp.array[:, :, keep], ks.array[:, :, keep])

    def test_compress_average_selection_zero(self):
        kp = T.tensor(Stream(12).normal((1, 5, 4, 8)))
        avg = T.tensor(np.full((2, 4), 0.25))
        ka, _ = compress_heads(kp, kp, avg, avg)
        mean = kp.array.mean(axis=2)
        np.testing.assert_allclose(ka.array[:, :, 0], mean, atol=1e-15)
        np.testing.assert_allclose(ka.array[:, :, 1], mean, atol=1e-15)
        sel = np.zeros((2, 4))
        sel[0, 3] = 1.0
        ka, _ = compress_heads(kp, kp, T.tensor(sel), avg)
        np.testing.assert_array_equal(ka.array[:, :, 0], kp.array[:, :, 3])
        ka, _ = compress_heads(kp, kp, T.tensor(np.zeros((2, 4))), avg)
        assert not ka.array.any()


class TestSalrForward:
    def test_shape_contract(self):
        store = make_store()
        cache = random_cache(CFG, t=9, b=2)
        cond = salr_forward(np.zeros((2, 4)), cache, store, CFG)
        assert len(cond) == CFG.encoder_layers
        for ka, va in cond:
            assert ka.shape == (2, 9, CFG.expert_kv_heads, CFG.head_width)
            assert va.shape == ka.shape
            # fused-head axis law: masks cover state_heads * kv_heads rows
            assert store["salr.layer0.mask_k"].shape == (CFG.fused_heads, CFG.head_width)

    def test_initialization_is_head_average(self):
        store = make_store()
        cache = random_cache(CFG)
        state = np.array([[0.2, -0.3, 0.1, 1.0]])
        cond = salr_forward(state, cache, store, CFG)
        x = project_state(state, store, CFG)
        for i, (k_i, _) in enumerate(cache):
            x, qr = state_layer_forward(x, i, store, CFG)
            fused = np.einsum("bph,btqh->btpqh", qr.array, k_i.array)
            mean = fused.reshape(1, k_i.shape[1], -1, CFG.head_width).mean(axis=2)
            for r in range(CFG.expert_kv_heads):
                np.testing.assert_allclose(cond[i][0].array[:, :, r], mean, atol=1e-12)

    def test_depth_mismatch_rejected(self):
        store = make_store()
        with pytest.raises(ValueError, match="depth"):
            salr_forward(np.zeros((1, 4)), random_cache(CFG)[:1], store, CFG)

    def test_state_sensitivity(self):
        store = make_store()
        cache = random_cache(CFG)
        a = salr_forward(np.array([[0.1, 0.2, 0.3, 1.0]]), cache, store, CFG)
        b = salr_forward(np.array([[-0.4, 0.2, 0.3, 1.0]]), cache, store, CFG)
        assert np.abs(a[0][0].array - b[0][0].array).max() > 0

    def test_zero_weights_leave_only_bias_path(self):
        store = make_store()
        for name in ("pos", "ori", "grip"):
            store.params[f"salr.proj.{name}.w"].tensor.array[...] = 0.0
        cache = random_cache(CFG)
        a = salr_forward(np.array([[0.9, -0.9, 0.5, 1.0]]), cache, store, CFG)
        b = salr_forward(np.array([[-0.2, 0.6, -0.5, -1.0]]), cache, store, CFG)
        for (ka, va), (kb, vb) in zip(a, b):
            assert np.array_equal(ka.array, kb.array)
            assert np.array_equal(va.array, vb.array)

    def test_end_to_end_grad(self):
        store = make_store()
        cache = random_cache(CFG, t=4)
        state = np.array([[0.2, -0.1, 0.4, 1.0]])
        probe = Stream(13)

        def build():
            cond = salr_forward(state, cache, store, CFG)
            total = None
            for i, (ka, va) in enumerate(cond):
                term = T.add(T.sum_all(T.mul_const(ka, probe.child("k", i).normal(ka.shape))),
                             T.sum_all(T.mul_const(va, probe.child("v", i).normal(va.shape))))
                total = term if total is None else T.add(total, term)
            return total

        build().backward()
        for name in ("salr.layer0.mask_k", "salr.layer1.compress_v",
                     "salr.layer0.query.w", "salr.proj.grip.w", "salr.layer1.ffn.w1"):
            p = store.params[name]
            got = p.tensor.grad.reshape(-1).copy()
            p.tensor.grad = None
            want = finite_diff_grad(lambda: build().item(), p)
            assert np.all(np.abs(got - want) <= np.maximum(1e-6, 1e-4 * np.abs(want))), name

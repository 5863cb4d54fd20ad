import numpy as np
import pytest
from scipy import ndimage

from sparsewarp.autodiff import Adam, ParameterStore, backward, leaf
from sparsewarp.autodiff import check, losses, ops
from sparsewarp.errors import InvalidInputError

TOL = 1e-4


def _rng():
    return np.random.default_rng(7)


def assert_gradcheck(build, arrays):
    report = check.gradcheck(build, arrays)
    worst = max(rel for rel, _, _ in report.values())
    assert worst < TOL, {k: v[0] for k, v in report.items()}


class TestElementwiseOps:
    def test_add_sub_broadcast(self):
        r = _rng()
        arrays = {"a": r.normal(size=(4, 3)), "b": r.normal(size=(1, 3))}
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.add(p["a"], p["b"]))), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.sub(p["a"], p["b"]))), arrays)

    def test_add_scalar(self):
        arrays = {"a": _rng().normal(size=(5,))}
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.add(p["a"], 2.5))), arrays)

    def test_mul_div(self):
        r = _rng()
        arrays = {"a": r.normal(size=(3, 4)), "b": r.uniform(0.5, 2.0, size=(3, 4))}
        assert_gradcheck(lambda p: ops.reduce_sum(ops.mul(p["a"], p["b"])), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.div(p["a"], p["b"])), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.mul(p["a"], 0.75)), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.div(p["a"], 4.0)), arrays)

    def test_square_sqrt(self):
        arrays = {"a": _rng().uniform(0.5, 3.0, size=(6,))}
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(p["a"])), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.sqrt(p["a"])), arrays)

    def test_relu_away_from_kink(self):
        r = _rng()
        a = r.normal(size=(20,))
        a[np.abs(a) < 0.05] = 0.3
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.relu(p["a"]))), {"a": a})

    def test_clip_passes_interior_blocks_exterior(self):
        a = np.array([-2.0, -0.4, 0.3, 1.8])  # clip to [-1, 1]
        def build(p):
            return ops.reduce_sum(ops.square(ops.clip(p["a"], -1.0, 1.0)))
        ga = check.analytic_gradients(build, {"a": a})["a"]
        np.testing.assert_allclose(ga, [0.0, -0.8, 0.6, 0.0], atol=1e-12)
        assert_gradcheck(build, {"a": a})


class TestLinearOps:
    def test_dense(self):
        r = _rng()
        arrays = {"x": r.normal(size=(5, 4)), "w": r.normal(size=(4, 3)), "b": r.normal(size=(3,))}
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.dense(p["x"], p["w"], p["b"]))), arrays)

    def test_dense_forward_matches_numpy(self):
        r = _rng()
        x, w, b = r.normal(size=(6, 3)), r.normal(size=(3, 2)), r.normal(size=2)
        np.testing.assert_allclose(ops.dense_forward(x, w, b), x @ w + b)

    def test_softmax_rows_sum_to_one(self):
        s = ops.softmax_forward(_rng().normal(size=(10, 7)) * 5)
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
        assert s.min() >= 0

    def test_softmax_gradient(self):
        r = _rng()
        arrays = {"a": r.normal(size=(4, 5)), "w": r.normal(size=(4, 5))}
        def build(p):
            return ops.reduce_sum(ops.mul(ops.softmax(p["a"]), p["w"]))
        assert_gradcheck(build, arrays)

    def test_reductions(self):
        arrays = {"a": _rng().normal(size=(3, 4))}
        assert_gradcheck(lambda p: ops.reduce_sum(p["a"]), arrays)
        assert_gradcheck(lambda p: ops.reduce_mean(p["a"]), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.reduce_sum(p["a"], axis=-1))), arrays)
        assert_gradcheck(lambda p: ops.reduce_sum(ops.square(ops.reduce_mean(p["a"], axis=-1))), arrays)

    def test_concat_reshape_transpose(self):
        r = _rng()
        arrays = {"a": r.normal(size=(3, 2)), "b": r.normal(size=(3, 4))}
        def build(p):
            cat = ops.concat([p["a"], p["b"]])
            flat = ops.reshape(cat, (2, 9))
            return ops.reduce_sum(ops.square(ops.transpose2(flat)))
        assert_gradcheck(build, arrays)

    def test_gather_rows_with_repeats(self):
        r = _rng()
        arrays = {"x": r.normal(size=(5, 3))}
        idx = np.array([0, 2, 2, 4, 0, 0])
        def build(p):
            g = ops.gather_rows(p["x"], idx)
            return ops.reduce_sum(ops.square(g))
        assert_gradcheck(build, arrays)

    def test_gather_rows_out_of_range(self):
        x = leaf(np.zeros((3, 2)), requires_grad=True)
        with pytest.raises(InvalidInputError):
            ops.gather_rows(x, np.array([0, 3]))

    def test_convex_combine(self):
        r = _rng()
        arrays = {"w": r.uniform(0.1, 1.0, size=(4, 3)), "v": r.normal(size=(4, 3, 2))}
        def build(p):
            return ops.reduce_sum(ops.square(ops.convex_combine(p["w"], p["v"])))
        assert_gradcheck(build, arrays)

    def test_convex_combine_matches_einsum(self):
        r = _rng()
        w, v = r.normal(size=(6, 4)), r.normal(size=(6, 4, 3))
        out = ops.convex_combine(leaf(w, dtype=np.float64), leaf(v, dtype=np.float64))
        np.testing.assert_allclose(out.value, np.einsum("qk,qkc->qc", w, v))


class TestSpatialOps:
    def test_trilinear_gather_volume_grad(self):
        r = _rng()
        arrays = {"v": r.normal(size=(2, 4, 5, 4))}
        pts = r.uniform(0.2, 2.8, size=(7, 3))
        def build(p):
            vol = ops.reshape(p["v"], (2, 4, 5, 4))
            return ops.reduce_sum(ops.square(ops.trilinear_gather(vol, pts)))
        assert_gradcheck(build, arrays)

    def test_trilinear_gather_coordinate_grad(self):
        r = _rng()
        vol_data = r.normal(size=(1, 5, 5, 5))
        pts = r.uniform(0.5, 3.5, size=(6, 3))
        pts += 0.2 * (np.round(pts) == pts)  # keep away from lattice planes
        arrays = {"pts": pts}
        vol = leaf(vol_data, dtype=np.float64)
        def build(p):
            return ops.reduce_sum(ops.square(ops.trilinear_gather(vol, p["pts"])))
        assert_gradcheck(build, arrays)

    def test_trilinear_gather_clamped_coordinate_grad_is_zero(self):
        vol = leaf(_rng().normal(size=(1, 4, 4, 4)), dtype=np.float64)
        pts = np.array([[-2.0, 1.5, 1.5], [1.5, 5.0, 1.5]])
        def build(p):
            return ops.reduce_sum(ops.trilinear_gather(vol, p["pts"]))
        ga = check.analytic_gradients(build, {"pts": pts})["pts"]
        assert ga[0, 0] == 0.0 and ga[1, 1] == 0.0

    def test_trilinear_matches_volume_sampler(self):
        r = _rng()
        from sparsewarp.volume import sample_channels
        data = r.normal(size=(3, 5, 6, 7)).astype(np.float32)
        pts = r.uniform(-1.0, 8.0, size=(40, 3))
        node = ops.trilinear_gather(leaf(data), pts)
        np.testing.assert_allclose(node.value, sample_channels(data, pts), atol=1e-5)

    def test_conv3d_forward_matches_scipy(self):
        r = _rng()
        x = r.normal(size=(2, 5, 6, 7))
        w = r.normal(size=(3, 2, 3, 3, 3))
        b = r.normal(size=3)
        got = ops.conv3d_forward(x, w, b)
        want = np.stack([
            sum(ndimage.correlate(x[ci], w[co, ci], mode="constant") for ci in range(2)) + b[co]
            for co in range(3)
        ])
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_conv3d_gradients(self):
        r = _rng()
        arrays = {
            "x": r.normal(size=(2, 3, 4, 5)),
            "w": r.normal(size=(2, 2, 3, 1, 3)),
            "b": r.normal(size=(2,)),
        }
        def build(p):
            x = ops.reshape(p["x"], (2, 3, 4, 5))
            return ops.reduce_sum(ops.square(ops.conv3d(x, p["w"], p["b"])))
        assert_gradcheck(build, arrays)

    def test_conv3d_rejects_even_kernel(self):
        x = leaf(np.zeros((1, 4, 4, 4)))
        w = leaf(np.zeros((1, 1, 2, 3, 3)))
        with pytest.raises(InvalidInputError):
            ops.conv3d(x, w)

    def test_avg_pool2_forward_explicit(self):
        # 1D-in-3D case computed by hand: ceil dims and partial windows
        x = np.arange(5, dtype=np.float64).reshape(1, 5, 1, 1)
        pooled, _ = ops.avg_pool2_forward(x)
        np.testing.assert_allclose(pooled[0, :, 0, 0], [0.5, 2.5, 4.0])

    def test_avg_pool2_gradients_odd_dims(self):
        arrays = {"x": _rng().normal(size=(2, 5, 3, 4))}
        def build(p):
            x = ops.reshape(p["x"], (2, 5, 3, 4))
            return ops.reduce_sum(ops.square(ops.avg_pool2(x)))
        assert_gradcheck(build, arrays)

    def test_diffusion_penalty_value_and_grad(self):
        r = _rng()
        disp = r.normal(size=(3, 4, 4, 4))
        d = [np.diff(disp, axis=ax) for ax in (1, 2, 3)]
        want = sum((x * x).sum() for x in d) / sum(x.size for x in d)
        node = ops.diffusion_penalty(leaf(disp, dtype=np.float64))
        assert float(node.value) == pytest.approx(want, rel=1e-12)
        def build(p):
            return ops.diffusion_penalty(ops.reshape(p["x"], (3, 4, 4, 4)))
        assert_gradcheck(build, {"x": disp})


class TestLosses:
    def test_mse(self):
        r = _rng()
        arrays = {"a": r.normal(size=(1, 3, 4, 4)), "b": r.normal(size=(1, 3, 4, 4))}
        def build(p):
            return losses.mse_loss(ops.reshape(p["a"], (1, 3, 4, 4)), ops.reshape(p["b"], (1, 3, 4, 4)))
        assert_gradcheck(build, arrays)
        got = float(build({k: leaf(v, dtype=np.float64) for k, v in arrays.items()}).value)
        assert got == pytest.approx(float(((arrays["a"] - arrays["b"]) ** 2).mean()), rel=1e-12)

    def test_ncc_matches_window_oracle(self):
        from oracles import ncc_windowed
        r = _rng()
        a = r.normal(size=(1, 5, 6, 5))
        b = 0.5 * a + 0.3 * r.normal(size=(1, 5, 6, 5))
        got = float(losses.ncc_loss(leaf(a, dtype=np.float64), leaf(b, dtype=np.float64), window=3).value)
        assert got == pytest.approx(ncc_windowed(a[0], b[0], 3), rel=1e-8)

    def test_ncc_perfect_match_near_minus_one(self):
        r = _rng()
        a = r.normal(size=(1, 7, 7, 7)) * 3.0
        got = float(losses.ncc_loss(leaf(a, dtype=np.float64), leaf(a, dtype=np.float64), window=3).value)
        assert -1.0 <= got < -0.9

    def test_ncc_gradients(self):
        r = _rng()
        arrays = {"a": r.normal(size=(1, 4, 4, 4)), "b": r.normal(size=(1, 4, 4, 4))}
        def build(p):
            return losses.ncc_loss(ops.reshape(p["a"], (1, 4, 4, 4)), ops.reshape(p["b"], (1, 4, 4, 4)), window=3)
        assert_gradcheck(build, arrays)

    def test_ncc_window_validation(self):
        a = leaf(np.zeros((1, 4, 4, 4)))
        with pytest.raises(InvalidInputError):
            losses.ncc_loss(a, a, window=4)
        with pytest.raises(InvalidInputError):
            losses.ncc_loss(a, a, window=9)

    def test_dice_identical_is_zero(self):
        m = (np.arange(64).reshape(1, 4, 4, 4) % 3 == 0).astype(np.float64)
        got = float(losses.dice_loss(leaf(m, dtype=np.float64), leaf(m, dtype=np.float64)).value)
        assert got == pytest.approx(0.0, abs=1e-6)

    def test_dice_value_and_grad(self):
        r = _rng()
        arrays = {"a": r.uniform(0.05, 0.95, size=(1, 3, 3, 3)), "b": r.uniform(0.05, 0.95, size=(1, 3, 3, 3))}
        def build(p):
            return losses.dice_loss(p["a"], p["b"])
        a, b = arrays["a"], arrays["b"]
        want = 1.0 - (2.0 * (a * b).sum() + 1e-5) / (a.sum() + b.sum() + 1e-5)
        got = float(build({k: leaf(v, dtype=np.float64) for k, v in arrays.items()}).value)
        assert got == pytest.approx(want, rel=1e-10)
        assert_gradcheck(build, arrays)

    def test_landmark_loss_value_and_grad(self):
        r = _rng()
        target = r.uniform(0, 10, size=(6, 3))
        arrays = {"w": target + r.normal(scale=2.0, size=(6, 3))}
        spacing = (3.0, 1.4, 1.4)
        def build(p):
            return losses.landmark_loss(p["w"], target, spacing)
        want = float(np.mean(np.linalg.norm((arrays["w"] - target) * np.asarray(spacing), axis=1)))
        got = float(build({"w": leaf(arrays["w"], dtype=np.float64)}).value)
        assert got == pytest.approx(want, rel=1e-6)
        assert_gradcheck(build, arrays)


class TestEngine:
    def test_diamond_reuse_accumulates(self):
        # f = sum((x*x) + x) uses x twice; df/dx = 2x + 1
        x = np.array([1.5, -2.0, 0.5])
        def build(p):
            return ops.reduce_sum(ops.add(ops.square(p["x"]), p["x"]))
        ga = check.analytic_gradients(build, {"x": x})["x"]
        np.testing.assert_allclose(ga, 2 * x + 1, atol=1e-12)
        assert_gradcheck(build, {"x": x})

    def test_backward_requires_scalar(self):
        x = leaf(np.zeros((3,)), requires_grad=True)
        with pytest.raises(InvalidInputError):
            backward(ops.square(x))

    def test_no_grad_without_requires(self):
        x = leaf(np.ones(3))
        y = ops.reduce_sum(ops.square(x))
        backward(y)
        assert x.grad is None

    def test_float64_check_mode_propagates(self):
        x = leaf(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
        y = ops.softmax(ops.dense(x, leaf(np.eye(2), dtype=np.float64)))
        assert y.value.dtype == np.float64


class TestParameterStore:
    def test_kaiming_bounds_and_determinism(self):
        s1, s2 = ParameterStore(seed=3), ParameterStore(seed=3)
        a1 = s1.create("w", (64, 32))
        a2 = s2.create("w", (64, 32))
        np.testing.assert_array_equal(a1, a2)
        limit = np.sqrt(6.0 / 64)
        assert np.abs(a1).max() <= limit
        assert a1.dtype == np.float32

    def test_zeros_init_and_count(self):
        s = ParameterStore()
        s.create("w", (4, 5))
        s.create("b", (5,), init="zeros")
        assert s.count() == 25
        np.testing.assert_array_equal(s["b"], 0)

    def test_duplicate_name_rejected(self):
        s = ParameterStore()
        s.create("w", (2, 2))
        with pytest.raises(InvalidInputError):
            s.create("w", (2, 2))

    def test_flat_roundtrip(self):
        s = ParameterStore(seed=5)
        s.create("a", (3, 4))
        s.create("b", (7,), init="zeros")
        vec = s.flat()
        assert vec.shape == (19,)
        mod = vec * 2 + 1
        s.load_flat(mod)
        np.testing.assert_allclose(s.flat(), mod)
        with pytest.raises(InvalidInputError):
            s.load_flat(np.zeros(5))

    def test_leaves_require_grad(self):
        s = ParameterStore()
        s.create("w", (2, 3))
        nodes = s.leaves(dtype=np.float64)
        assert nodes["w"].requires_grad and nodes["w"].value.dtype == np.float64


class TestAdam:
    def test_matches_reference_updates(self):
        # independent reference implementation of the update rule
        store = ParameterStore(seed=0)
        store.create("w", (4,))
        w_ref = store["w"].astype(np.float64).copy()
        m = np.zeros(4)
        v = np.zeros(4)
        opt = Adam(store, lr=1e-3)
        r = np.random.default_rng(9)
        for t in range(1, 4):
            g = r.normal(size=4)
            opt.step({"w": g.astype(np.float32)})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            w_ref -= 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
            np.testing.assert_allclose(store["w"], w_ref.astype(np.float32), atol=1e-6)

    def test_reduces_quadratic(self):
        store = ParameterStore(seed=1)
        store.create("w", (8,))
        opt = Adam(store, lr=0.05)
        target = np.linspace(-1, 1, 8).astype(np.float32)
        def loss():
            return float(((store["w"] - target) ** 2).sum())
        first = loss()
        for _ in range(200):
            opt.step({"w": 2 * (store["w"] - target)})
        assert loss() < first * 1e-3

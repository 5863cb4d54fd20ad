import numpy as np
import pytest

from sparsewarp.autodiff import ops
from sparsewarp.autodiff.check import directional_check
from sparsewarp.autodiff.engine import leaf
from sparsewarp.correspondence import ObservationSet
from sparsewarp.errors import EmptyObservationsError, InvalidInputError, SingularSystemError
from sparsewarp.features import encode
from sparsewarp.kernel import (
    KernelModel,
    KernelState,
    SCORE_CLIP,
    VARIANTS,
    confidence_map,
    evaluate_field,
    evaluate_field_graph,
    kernel_weights,
    knn,
    normalize_coords,
    pair_scores_fast,
    reconstruct,
    scores_graph,
    spatial_bias,
    tps_eval,
    tps_field,
    tps_fit,
)
from sparsewarp.kernel.model import es_fast, ef_fast
from sparsewarp.volume import Volume3, jacobian_log_std

from oracles import knn_brute, tps_apply, tps_solve

PLAN1 = (2,)


def small_setup(seed=0, dims=(6, 7, 8), m=8, k=5):
    """One-level model, random feature volume, random observations."""
    model = KernelModel.build(seed=seed, scales=1, plan=PLAN1)
    rng = np.random.default_rng(seed + 100)
    vol = Volume3(rng.normal(size=(1, *dims)).astype(np.float32))
    feat = encode(vol, model.store, scales=1, plan=PLAN1)
    pts = rng.uniform(0.5, np.array(dims) - 1.5, size=(m, 3))
    disp = rng.normal(scale=1.5, size=(m, 3))
    obs = ObservationSet(pts, disp, rng.uniform(0.2, 1.0, m))
    return model, feat, obs, dims, k


def assert_stores_equal(a, b, tol=1e-9):
    np.testing.assert_array_equal(a.idx, b.idx)
    np.testing.assert_allclose(a.dist, b.dist, atol=tol, rtol=0)
    np.testing.assert_allclose(a.scores, b.scores, atol=tol, rtol=0)
    np.testing.assert_allclose(a.weights, b.weights, atol=tol, rtol=0)
    np.testing.assert_allclose(a.values, b.values, atol=tol, rtol=0)


class TestKnn:
    def test_matches_bruteforce(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            pts = rng.uniform(0, 10, size=(40, 3))
            q = rng.uniform(0, 10, size=(25, 3))
            for k in (1, 3, 40):
                idx, dist = knn(q, pts, k)
                widx, wdist = knn_brute(q, pts, min(k, 40))
                np.testing.assert_array_equal(idx, widx)
                np.testing.assert_allclose(dist, wdist, rtol=1e-12)

    def test_exact_ties_break_by_index(self):
        pts = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0], [0, 0, 2]], np.float64)
        idx, dist = knn(np.array([[0.0, 0.0, 0.0]]), pts, 2)
        np.testing.assert_array_equal(idx[0], [0, 1])
        np.testing.assert_allclose(dist[0], [1.0, 1.0])

    def test_all_equidistant_cube_corners(self):
        corners = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], np.float64)
        idx, dist = knn(np.array([[0.5, 0.5, 0.5]]), corners, 3)
        np.testing.assert_array_equal(idx[0], [0, 1, 2])
        np.testing.assert_allclose(dist[0], np.sqrt(0.75))

    def test_integer_grids_many_ties_vs_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            pts = rng.integers(0, 4, size=(30, 3)).astype(np.float64)
            q = rng.integers(0, 4, size=(12, 3)).astype(np.float64)
            idx, dist = knn(q, pts, 6)
            widx, wdist = knn_brute(q, pts, 6)
            np.testing.assert_array_equal(idx, widx)
            np.testing.assert_allclose(dist, wdist, rtol=1e-12)

    def test_k_clamped_to_point_count(self, rng):
        idx, dist = knn(rng.uniform(size=(4, 3)), rng.uniform(size=(2, 3)), 30)
        assert idx.shape == (4, 2)

    def test_empty_points(self):
        with pytest.raises(EmptyObservationsError):
            knn(np.zeros((1, 3)), np.zeros((0, 3)), 1)

    def test_invalid_k(self):
        with pytest.raises(InvalidInputError):
            knn(np.zeros((1, 3)), np.zeros((2, 3)), 0)


class TestScoring:
    def test_normalize_coords_range(self):
        dims = (5, 9, 3)
        pts = np.array([[0, 0, 0], [4, 8, 2], [2, 4, 1]], np.float64)
        out = normalize_coords(pts, dims)
        np.testing.assert_allclose(out[0], [-1, -1, -1])
        np.testing.assert_allclose(out[1], [1, 1, 1])
        np.testing.assert_allclose(out[2], [0, 0, 0])

    def test_normalize_unit_axis_maps_to_zero(self):
        out = normalize_coords(np.array([[0.0, 3.0, 0.0]]), (1, 7, 1))
        np.testing.assert_allclose(out[0], [0, 0, 0])

    def test_spatial_bias_values(self):
        d = np.array([0.0, 1.0, 3.0])
        np.testing.assert_allclose(spatial_bias(d), [1.0, 0.5, 0.1])

    def test_bias_only_scores(self, rng):
        model, feat, obs, dims, k = small_setup()
        _, store = evaluate_field(obs, dims, model, feat, 0, variant="bias_only", k=k)
        np.testing.assert_allclose(store.scores, spatial_bias(store.dist), rtol=1e-12)

    def test_zero_heads_reduce_to_bias(self):
        model, feat, obs, dims, k = small_setup()
        for name in ("hs.l1.w", "hs.l1.b", "hf.l1.w", "hf.l1.b"):
            model.store[name][:] = 0.0
        _, store = evaluate_field(obs, dims, model, feat, 0, variant="full", k=k)
        np.testing.assert_allclose(store.scores, spatial_bias(store.dist), atol=1e-12)

    def test_scores_clipped(self):
        model, feat, obs, dims, k = small_setup()
        model.store["hs.l1.b"][:] = 100.0
        _, store = evaluate_field(obs, dims, model, feat, 0, variant="only_Hs", k=k)
        assert store.scores.max() == SCORE_CLIP

    def test_graph_scores_match_fast(self, rng):
        model, feat, obs, dims, k = small_setup(seed=2)
        queries = rng.uniform(0, 5, size=(11, 3))
        idx, dist = knn(queries, obs.points, k)
        P = model.params64()
        qn, on = normalize_coords(queries, dims), normalize_coords(obs.points, dims)
        from sparsewarp.features import sample_features
        qf = sample_features(feat, 0, queries).astype(np.float64)
        of = sample_features(feat, 0, obs.points).astype(np.float64)
        for variant in VARIANTS:
            fast = pair_scores_fast(P, idx, dist, variant,
                                    es_q=es_fast(P, qn), es_o=es_fast(P, on),
                                    ef_q=ef_fast(P, qf, 0), ef_o=ef_fast(P, of, 0))
            leaves = model.store.leaves(dtype=np.float64)
            node = scores_graph(leaves, qn, on, leaf(qf, dtype=np.float64),
                                leaf(of, dtype=np.float64), idx, dist, 0, variant)
            np.testing.assert_allclose(node.value, fast, atol=1e-9, rtol=0)


class TestWeightsAndReconstruct:
    def test_rows_sum_to_one(self, rng):
        w = kernel_weights(rng.normal(size=(40, 7)) * 5)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(-1), 1.0, rtol=1e-12)

    def test_shift_invariance(self, rng):
        s = rng.normal(size=(10, 5))
        np.testing.assert_allclose(kernel_weights(s), kernel_weights(s + 11.0), rtol=1e-12)

    def test_uniform_scores_uniform_weights(self):
        np.testing.assert_allclose(kernel_weights(np.full((3, 6), 2.0)), 1.0 / 6.0, rtol=1e-12)

    def test_peaked_score_dominates(self):
        s = np.zeros((1, 5))
        s[0, 3] = 25.0
        w = kernel_weights(s)
        assert w[0, 3] > 0.999999

    def test_reconstruct_single_neighbor(self, rng):
        disp = rng.normal(size=(6, 3))
        idx = np.array([[2], [0], [5]])
        out = reconstruct(np.ones((3, 1)), disp, idx)
        np.testing.assert_allclose(out, disp[[2, 0, 5]], rtol=1e-12)

    def test_reconstruct_matches_einsum_oracle(self, rng):
        disp = rng.normal(size=(9, 3))
        idx = rng.integers(0, 9, size=(20, 4))
        w = kernel_weights(rng.normal(size=(20, 4)))
        want = np.stack([(w[i][:, None] * disp[idx[i]]).sum(0) for i in range(20)])
        np.testing.assert_allclose(reconstruct(w, disp, idx), want, rtol=1e-12)


class TestEvaluateField:
    def test_single_observation_constant_field(self):
        model, feat, _, dims, _ = small_setup()
        obs = ObservationSet(np.array([[3.0, 3.0, 4.0]]), np.array([[1.5, -2.0, 0.25]]), np.ones(1))
        for variant in VARIANTS:
            field, store = evaluate_field(obs, dims, model, feat, 0, variant=variant, k=30)
            assert store.idx.shape == (np.prod(dims), 1)
            for c, v in enumerate((1.5, -2.0, 0.25)):
                np.testing.assert_allclose(field.vectors[c], v, rtol=1e-6)

    def test_shared_translation_reproduced_with_zero_logstd(self):
        model, feat, obs, dims, k = small_setup(m=10)
        t = np.array([0.75, -1.25, 2.0])
        obs = ObservationSet(obs.points, np.tile(t, (10, 1)), obs.peakedness)
        field, _ = evaluate_field(obs, dims, model, feat, 0, k=k)
        for c in range(3):
            np.testing.assert_allclose(field.vectors[c], t[c], rtol=1e-5)
        assert jacobian_log_std(field) < 1e-5

    def test_empty_observations_raise(self):
        model, feat, _, dims, k = small_setup()
        with pytest.raises(EmptyObservationsError):
            evaluate_field(ObservationSet.empty(), dims, model, feat, 0, k=k)

    def test_convex_combination_bounds(self):
        model, feat, obs, dims, k = small_setup(seed=4)
        field, _ = evaluate_field(obs, dims, model, feat, 0, k=k)
        for c in range(3):
            lo, hi = obs.displacements[:, c].min(), obs.displacements[:, c].max()
            assert field.vectors[c].min() >= lo - 1e-5
            assert field.vectors[c].max() <= hi + 1e-5

    def test_variants_produce_distinct_weights(self):
        model, feat, obs, dims, k = small_setup(seed=6)
        stores = {v: evaluate_field(obs, dims, model, feat, 0, variant=v, k=k)[1] for v in VARIANTS}
        names = list(VARIANTS)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                diff = np.abs(stores[names[i]].weights - stores[names[j]].weights).max()
                assert diff > 1e-4, f"{names[i]} vs {names[j]} identical"

    def test_unknown_variant_rejected(self):
        model, feat, obs, dims, k = small_setup()
        with pytest.raises(InvalidInputError, match="variant"):
            evaluate_field(obs, dims, model, feat, 0, variant="tps", k=k)

    def test_strided_grid_matches_full_at_nodes(self):
        model, feat, obs, dims, k = small_setup(seed=7, dims=(7, 8, 9))
        full, _ = evaluate_field(obs, dims, model, feat, 0, k=k, stride=1)
        coarse, store = evaluate_field(obs, dims, model, feat, 0, k=k, stride=2)
        assert store.grid_dims == (4, 4, 5)
        np.testing.assert_allclose(coarse.vectors[:, ::2, ::2, ::2],
                                   full.vectors[:, ::2, ::2, ::2], atol=1e-6)
        assert coarse.vectors.shape == (3, 7, 8, 9)

    def test_invalid_stride(self):
        model, feat, obs, dims, k = small_setup()
        with pytest.raises(InvalidInputError, match="stride"):
            evaluate_field(obs, dims, model, feat, 0, k=k, stride=0)


class TestConfidence:
    def test_single_observation_zero_map(self):
        model, feat, _, dims, _ = small_setup()
        obs = ObservationSet(np.array([[2.0, 2.0, 2.0]]), np.ones((1, 3)), np.ones(1))
        _, store = evaluate_field(obs, dims, model, feat, 0, k=5)
        conf = confidence_map(store)
        assert conf.data.shape == (1, *dims)
        assert np.all(conf.data == 0.0)

    def test_matches_std_minmax_oracle(self):
        model, feat, obs, dims, k = small_setup(seed=9)
        _, store = evaluate_field(obs, dims, model, feat, 0, k=k)
        conf = confidence_map(store)
        std = store.scores.std(axis=1)
        want = (std - std.min()) / (std.max() - std.min())
        np.testing.assert_allclose(conf.data[0].ravel(), want, atol=1e-6)
        assert conf.data.min() >= 0.0 and conf.data.max() <= 1.0


class TestGraphField:
    def test_graph_matches_fast_path(self):
        model, feat, obs, dims, k = small_setup(seed=11)
        for variant in VARIANTS:
            field, _ = evaluate_field(obs, dims, model, feat, 0, variant=variant, k=k)
            node = evaluate_field_graph(
                model.store.leaves(dtype=np.float64),
                leaf(feat.level(0).data.astype(np.float64), dtype=np.float64),
                obs.points, leaf(obs.displacements, dtype=np.float64),
                dims, 0, variant=variant, k=k)
            np.testing.assert_allclose(node.value, field.vectors, atol=2e-5, rtol=1e-4)

    def test_strided_graph_matches_fast(self):
        model, feat, obs, dims, k = small_setup(seed=12, dims=(7, 8, 9))
        field, _ = evaluate_field(obs, dims, model, feat, 0, k=k, stride=2)
        node = evaluate_field_graph(
            model.store.leaves(dtype=np.float64),
            leaf(feat.level(0).data.astype(np.float64), dtype=np.float64),
            obs.points, leaf(obs.displacements, dtype=np.float64),
            dims, 0, k=k, stride=2)
        np.testing.assert_allclose(node.value, field.vectors, atol=2e-5, rtol=1e-4)

    def test_gradients_flow_to_params_features_and_values(self, rng):
        dims = (4, 4, 5)
        model = KernelModel.build(seed=13, scales=1, plan=PLAN1)
        pts = rng.uniform(0.6, 2.8, size=(3, 3))
        arrays = {k: v for k, v in model.store.items() if k.split(".")[0] in ("es", "ef", "hs", "hf")}
        arrays["fixvol"] = rng.normal(size=(2, *dims))
        arrays["disp"] = rng.normal(size=(3, 3))

        def build(leaves):
            node = evaluate_field_graph(leaves, leaves["fixvol"], pts, leaves["disp"],
                                        dims, 0, variant="full", k=2)
            return ops.reduce_mean(ops.square(node))

        for seed in range(3):
            assert directional_check(build, arrays, seed=seed) < 1e-4


class TestRefine:
    def test_matches_full_recompute_many_seeds(self):
        for seed in range(20):
            model, feat, obs, dims, k = small_setup(seed=seed)
            rng = np.random.default_rng(seed + 999)
            _, store = evaluate_field(obs, dims, model, feat, 0, k=k)
            state = KernelState(model, feat, obs, store)
            p = rng.uniform(0.5, np.array(dims) - 1.5)
            d = rng.normal(scale=2.0, size=3)
            result = state.refine(p, d, peak=0.9)
            assert result.changed.size > 0
            merged = ObservationSet(np.vstack([obs.points, p[None]]),
                                    np.vstack([obs.displacements, d[None]]),
                                    np.append(obs.peakedness, 0.9))
            _, want = evaluate_field(merged, dims, model, feat, 0, k=k)
            assert_stores_equal(state.store, want)

    def test_distant_point_changes_nothing(self):
        # observations on every voxel with k=1: each query keeps its own point
        model, feat, _, _, _ = small_setup()
        dims = (4, 4, 4)
        from sparsewarp.volume import grid_coords
        pts = grid_coords(dims).astype(np.float64)
        rng = np.random.default_rng(0)
        obs = ObservationSet(pts, rng.normal(size=(len(pts), 3)), np.ones(len(pts)))
        _, store = evaluate_field(obs, dims, model, feat, 0, k=1)
        state = KernelState(model, feat, obs, store)
        before = state.store.values.copy()
        result = state.refine([1.6, 2.2, 1.1], [5.0, 5.0, 5.0])
        assert result.changed.size == 0
        np.testing.assert_array_equal(state.store.values, before)
        assert len(state.obs) == len(pts) + 1

    def test_duplicate_point_replaces_displacement(self):
        model, feat, obs, dims, k = small_setup(seed=3)
        _, store = evaluate_field(obs, dims, model, feat, 0, k=k)
        state = KernelState(model, feat, obs, store)
        j = 4
        new_d = np.array([9.0, -9.0, 4.5])
        result = state.refine(obs.points[j], new_d, peak=0.5)
        assert result.replaced and result.replaced_index == j
        merged = ObservationSet(obs.points, np.vstack([obs.displacements[:j], new_d[None],
                                                       obs.displacements[j + 1:]]), obs.peakedness)
        _, want = evaluate_field(merged, dims, model, feat, 0, k=k)
        assert_stores_equal(state.store, want)

    def test_neighborhoods_grow_until_k(self):
        model, feat, obs, dims, k = small_setup(seed=5, m=2, k=5)
        _, store = evaluate_field(obs, dims, model, feat, 0, k=k)
        assert store.idx.shape[1] == 2
        state = KernelState(model, feat, obs, store)
        rng = np.random.default_rng(7)
        pts = rng.uniform(1, 5, size=(4, 3))
        for i in range(4):
            state.refine(pts[i], rng.normal(size=3))
        assert state.store.idx.shape[1] == 5  # capped at k
        merged = ObservationSet(np.vstack([obs.points, pts]),
                                state.obs.displacements, state.obs.peakedness)
        _, want = evaluate_field(merged, dims, model, feat, 0, k=k)
        assert_stores_equal(state.store, want)

    def test_rejects_bad_points(self):
        model, feat, obs, dims, k = small_setup()
        _, store = evaluate_field(obs, dims, model, feat, 0, k=k)
        state = KernelState(model, feat, obs, store)
        with pytest.raises(InvalidInputError, match="outside"):
            state.refine([-1.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        with pytest.raises(InvalidInputError, match="non-finite"):
            state.refine([1.0, 1.0, np.nan], [0.0, 0.0, 0.0])


class TestTps:
    def test_exact_interpolation(self, rng):
        pts = rng.uniform(0, 10, size=(12, 3))
        vals = rng.normal(size=(12, 3))
        model = tps_fit((pts, vals))
        np.testing.assert_allclose(tps_eval(model, pts), vals, atol=1e-8)

    def test_affine_reproduction(self, rng):
        pts = rng.uniform(0, 8, size=(10, 3))
        A = np.array([[0.1, 0.02, 0.0], [0.0, -0.05, 0.01], [0.03, 0.0, 0.08]])
        t = np.array([1.0, -0.5, 0.25])
        vals = pts @ A.T + t
        model = tps_fit((pts, vals))
        probe = rng.uniform(0, 8, size=(30, 3))
        np.testing.assert_allclose(tps_eval(model, probe), probe @ A.T + t, atol=1e-6)
        np.testing.assert_allclose(model.weights, 0.0, atol=1e-7)

    def test_single_point_constant_extrapolation(self):
        model = tps_fit((np.array([[2.0, 3.0, 4.0]]), np.array([[1.0, -2.0, 0.5]])))
        out = tps_eval(model, np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(out, [[1.0, -2.0, 0.5]] * 2, atol=1e-8)

    def test_duplicate_points_reported(self):
        pts = np.array([[1.0, 1, 1], [2, 2, 2], [1, 1, 1], [3, 3, 3]])
        vals = np.zeros((4, 3))
        with pytest.raises(SingularSystemError) as err:
            tps_fit((pts, vals))
        assert err.value.indices == [0, 2]

    def test_regularized_fit_tolerates_duplicates(self):
        pts = np.array([[1.0, 1, 1], [2, 2, 2], [1, 1, 1], [3, 3, 3], [1, 5, 2]])
        vals = np.ones((5, 3))
        model = tps_fit((pts, vals), lam=0.5)
        assert np.all(np.isfinite(tps_eval(model, pts)))

    def test_matches_uncentered_oracle(self, rng):
        pts = rng.uniform(0, 6, size=(9, 3))
        vals = rng.normal(size=(9, 3))
        w, affine = tps_solve(pts, vals)
        probe = rng.uniform(0, 6, size=(20, 3))
        want = tps_apply(pts, w, affine, probe)
        got = tps_eval(tps_fit((pts, vals)), probe)
        np.testing.assert_allclose(got, want, atol=1e-7)

    def test_field_shape_and_observation_set_input(self, rng):
        obs = ObservationSet(rng.uniform(1, 5, size=(6, 3)), rng.normal(size=(6, 3)), np.ones(6))
        field = tps_field(obs, (6, 6, 6), spacing=(2.0, 1.0, 1.0))
        assert field.vectors.shape == (3, 6, 6, 6)
        assert field.grid.spacing == (2.0, 1.0, 1.0)

    def test_empty_raises(self):
        with pytest.raises(EmptyObservationsError):
            tps_fit((np.zeros((0, 3)), np.zeros((0, 3))))

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ball_query_brute, fps_greedy, knn_brute, sqdist
from pointcal import geometry as G
from pointcal import kernels
from pointcal._accel import HAVE_NUMBA
from pointcal.errors import CloudFormatError, CountError, DegenerateCloudError, DimensionError

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


def cloud_strategy(min_n=1, max_n=64):
    # coordinates on a coarse grid so exact distance ties actually occur
    coord = st.integers(-6, 6).map(lambda v: v / 4)
    return st.integers(min_n, max_n).flatmap(
        lambda n: st.lists(st.tuples(coord, coord, coord), min_size=n, max_size=n).map(np.array))


class TestNormalize:
    def test_two_points(self):
        out = G.normalize_unit_sphere([[0, 0, 0], [2, 0, 0]])
        np.testing.assert_array_equal(out, [[-1, 0, 0], [1, 0, 0]])

    def test_degenerate(self):
        with pytest.raises(DegenerateCloudError):
            G.normalize_unit_sphere(np.ones((5, 3)))

    def test_bad_shape(self):
        with pytest.raises(DimensionError):
            G.normalize_unit_sphere(np.ones((5, 2)))

    def test_farthest_point_has_unit_norm(self):
        p = np.random.default_rng(0).normal(size=(50, 3))
        out = G.normalize_unit_sphere(p)
        norms = np.linalg.norm(out, axis=1)
        assert abs(norms.max() - 1.0) < 1e-15
        assert np.linalg.norm(out.mean(axis=0)) < 1e-9

    @given(st.floats(0.01, 100), st.tuples(*[st.floats(-50, 50)] * 3), st.integers(0, 10_000))
    def test_canonicalizes_translation_and_scale(self, a, b, seed):
        p = np.random.default_rng(seed).normal(size=(20, 3))
        base = G.normalize_unit_sphere(p)
        np.testing.assert_allclose(G.normalize_unit_sphere(a * p + np.array(b)), base, atol=1e-9)
        np.testing.assert_allclose(G.normalize_unit_sphere(base), base, atol=1e-12)


class TestFPS:
    def test_one_dimensional_example(self):
        p = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]], dtype=float)
        assert G.farthest_point_sampling(p, 3, 0).tolist() == [0, 3, 2]

    def test_m_equals_n_is_permutation(self):
        p = np.random.default_rng(1).normal(size=(17, 3))
        assert sorted(G.farthest_point_sampling(p, 17).tolist()) == list(range(17))

    def test_m_one_returns_seed(self):
        p = np.random.default_rng(2).normal(size=(9, 3))
        assert G.farthest_point_sampling(p, 1, seed_index=4).tolist() == [4]

    def test_too_many(self):
        with pytest.raises(CountError):
            G.farthest_point_sampling(np.eye(3), 4)

    def test_bad_seed(self):
        with pytest.raises(CountError):
            G.farthest_point_sampling(np.eye(3), 2, seed_index=3)

    @pytest.mark.parametrize("backend", BACKENDS)
    @given(p=cloud_strategy(1, 40), data=st.data())
    def test_matches_greedy_oracle(self, backend, p, data):
        m = data.draw(st.integers(1, len(p)))
        seed = data.draw(st.integers(0, len(p) - 1))
        got = kernels.BACKENDS[backend]["fps"](np.ascontiguousarray(p, dtype=float), m, seed)
        assert got.tolist() == fps_greedy(p.tolist(), m, seed)

    def test_prefix_attains_max_min_distance(self):
        p = np.random.default_rng(3).normal(size=(64, 3))
        sel = G.farthest_point_sampling(p, 20)
        for t in range(1, 20):
            dmin = lambda i: min(sqdist(p[i], p[c]) for c in sel[:t])
            assert dmin(sel[t]) == max(dmin(i) for i in range(64))


class TestBallQuery:
    def test_example(self):
        p = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
        idx = G.ball_query(p, [0], 1.5, 4)
        assert idx.neighbor_ids.tolist() == [[0, 1, 0, 0]]
        assert idx.pad_mask.tolist() == [[False, False, True, True]]

    def test_tiny_radius_falls_back_to_centroid(self):
        p = np.random.default_rng(4).normal(size=(10, 3))
        idx = G.ball_query(p, [3, 7], 1e-9, 3)
        assert idx.neighbor_ids.tolist() == [[3, 3, 3], [7, 7, 7]]
        assert idx.pad_mask[:, 1:].all() and not idx.pad_mask[:, 0].any()

    def test_empty_centroids(self):
        with pytest.raises(CountError):
            G.ball_query(np.eye(3), [], 1.0, 2)

    @pytest.mark.parametrize("backend", BACKENDS)
    @given(p=cloud_strategy(1, 64), data=st.data())
    def test_matches_brute_force(self, backend, p, data):
        cid = np.array(data.draw(st.lists(st.integers(0, len(p) - 1), min_size=1, max_size=8)))
        radius = data.draw(st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0, 3.0]))
        k = data.draw(st.integers(1, 12))
        ids, pad = kernels.BACKENDS[backend]["ball_query"](np.ascontiguousarray(p, dtype=float), cid, radius, k)
        want_ids, want_pad = ball_query_brute(p.tolist(), cid.tolist(), radius, k)
        np.testing.assert_array_equal(ids, want_ids)
        np.testing.assert_array_equal(pad, want_pad)

    def test_duplicating_a_point_keeps_neighbors(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(-1, 1, (40, 3))
        before = G.ball_query(p, np.arange(40), 0.6, 40)
        q = np.vstack([p, p[rng.integers(40)]])
        after = G.ball_query(q, np.arange(40), 0.6, 41)
        for row_b, row_a in zip(before.neighbor_ids, after.neighbor_ids):
            assert set(row_b.tolist()) <= set(row_a.tolist())


class TestKNN:
    def test_k1_is_self(self):
        p = np.random.default_rng(6).normal(size=(12, 3))
        assert G.knn(p, np.arange(12), 1).neighbor_ids[:, 0].tolist() == list(range(12))

    def test_collinear(self):
        p = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0], [3.5, 0, 0]], dtype=float)
        assert G.knn(p, [0, 2], 2).neighbor_ids.tolist() == [[0, 1], [2, 3]]

    def test_tie_prefers_lower_index(self):
        p = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], dtype=float)
        assert G.knn(p, [0], 3).neighbor_ids.tolist() == [[0, 1, 2]]

    def test_k_too_large(self):
        with pytest.raises(CountError):
            G.knn(np.eye(3), [0], 4)

    @pytest.mark.parametrize("backend", BACKENDS)
    @given(p=cloud_strategy(1, 48), data=st.data())
    def test_matches_brute_force(self, backend, p, data):
        cid = np.array(data.draw(st.lists(st.integers(0, len(p) - 1), min_size=1, max_size=6)))
        k = data.draw(st.integers(1, len(p)))
        got = kernels.BACKENDS[backend]["knn"](np.ascontiguousarray(p, dtype=float), cid, k)
        np.testing.assert_array_equal(got, knn_brute(p.tolist(), cid.tolist(), k))


class TestGroupFeatures:
    def test_self_neighbor_is_origin(self):
        p = np.random.default_rng(7).normal(size=(6, 3))
        idx = G.ball_query(p, [2], 1e-9, 2)
        np.testing.assert_array_equal(G.group_features(p, None, idx)[0], 0.0)

    def test_width_without_features(self):
        p = np.random.default_rng(8).normal(size=(6, 3))
        assert G.group_features(p, None, G.knn(p, [0, 1], 3)).shape == (2, 3, 3)

    def test_matches_naive_gather(self):
        rng = np.random.default_rng(9)
        p, f = rng.normal(size=(15, 3)), rng.normal(size=(15, 4))
        idx = G.ball_query(p, [0, 5, 9], 1.2, 5)
        got = G.group_features(p, f, idx)
        for a, c in enumerate(idx.centroid_ids):
            for s, j in enumerate(idx.neighbor_ids[a]):
                np.testing.assert_array_equal(got[a, s], np.concatenate([p[j] - p[c], f[j]]))

    def test_out_of_range(self):
        p = np.zeros((3, 3))
        bad = G.NeighborhoodIndex(np.array([0]), np.array([[5]]), np.array([[False]]))
        with pytest.raises(IndexError):
            G.group_features(p, None, bad)


class TestCloudFiles:
    def test_round_trip_is_exact(self, tmp_path):
        p = np.random.default_rng(10).normal(size=(20, 3))
        G.write_cloud(tmp_path / "c.xyz", p)
        np.testing.assert_array_equal(G.read_cloud(tmp_path / "c.xyz"), p)

    @pytest.mark.parametrize("line", ["1 2", "1 2 3 4", "1 2 x"])
    def test_rejects_malformed_lines(self, tmp_path, line):
        (tmp_path / "c.xyz").write_text(f"0 0 0\n{line}\n")
        with pytest.raises(CloudFormatError, match=":2:"):
            G.read_cloud(tmp_path / "c.xyz")


class TestBackendParity:
    @pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
    def test_scatter_and_concordance(self):
        rng = np.random.default_rng(11)
        idx = rng.integers(0, 6, 40)
        vals = rng.normal(size=(40, 3))
        outs = [kernels.BACKENDS[b]["scatter_add_rows"](np.zeros((6, 3)), idx, vals) for b in ("numpy", "numba")]
        np.testing.assert_allclose(outs[0], outs[1], rtol=1e-13)
        r, t = rng.integers(0, 4, 30).astype(float), rng.integers(1, 8, 30).astype(float)
        e = rng.random(30) < 0.6
        assert kernels.BACKENDS["numpy"]["concordance"](r, t, e) == kernels.BACKENDS["numba"]["concordance"](r, t, e)

    @pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
    def test_fps_large_cloud_identical(self):
        p = np.random.default_rng(12).normal(size=(2000, 3))
        np.testing.assert_array_equal(kernels.BACKENDS["numpy"]["fps"](p, 200, 0),
                                      kernels.BACKENDS["numba"]["fps"](p, 200, 0))

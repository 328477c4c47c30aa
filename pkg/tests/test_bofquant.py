import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepbof import bofquant
from deepbof.bofquant import Codebook
from deepbof.errors import (
    BadMagicError,
    DeepBofError,
    DimensionMismatchError,
    TruncatedFileError,
)

from oracles import central_difference, lloyd_oracle, relative_errors


def _toy_clusters(rng=None):
    """12 planar points in 3 well-separated groups of 4."""
    rng = rng or np.random.default_rng(99)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pts = np.concatenate([c + rng.normal(0, 0.5, size=(4, 2)) for c in centers])
    return pts


class TestKmeans:
    def test_k1_center_is_global_mean(self, rng):
        x = rng.normal(size=(20, 3))
        centers, assign, _ = bofquant.kmeans(x, 1, seed=0)
        assert np.allclose(centers[0], x.mean(axis=0))
        assert (assign == 0).all()

    def test_k_equals_n_distinct_points(self, rng):
        x = rng.normal(size=(8, 2))
        centers, assign, history = bofquant.kmeans(x, 8, seed=5)
        assert sorted(map(tuple, centers)) == sorted(map(tuple, x))
        assert history[-1] == 0.0

    def test_toy_clusters_match_bruteforce_oracle(self):
        pts = _toy_clusters()
        _, assign, _ = bofquant.kmeans(pts, 3, seed=17)
        _, oracle_assign, _ = lloyd_oracle(pts.tolist(), 3, seed=17)
        assert list(assign) == oracle_assign

    def test_assignments_match_oracle_many_seeds(self, rng):
        # random planar datasets, the acceptance protocol at small scale
        for seed in range(10):
            n = int(rng.integers(6, 31))
            k = int(rng.integers(2, 5))
            pts = rng.uniform(-5, 5, size=(n, 2))
            _, assign, _ = bofquant.kmeans(pts, k, seed=seed)
            _, oracle_assign, _ = lloyd_oracle(pts.tolist(), k, seed=seed)
            assert list(assign) == oracle_assign, f"seed {seed}"

    def test_objective_never_increases(self, rng):
        x = rng.normal(size=(40, 4))
        _, _, history = bofquant.kmeans(x, 5, seed=3)
        assert (np.diff(history) <= 1e-12).all()

    def test_k_larger_than_sample_count_rejected(self, rng):
        with pytest.raises(DeepBofError):
            bofquant.kmeans(rng.normal(size=(3, 2)), 4, seed=0)

    def test_duplicate_points_keep_all_centers_defined(self):
        x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5)
        centers, _, _ = bofquant.kmeans(x, 3, seed=1)
        assert np.isfinite(centers).all()


class TestInitCodebook:
    def test_widths_are_mean_pairwise_center_distance(self):
        pts = _toy_clusters()
        cb = bofquant.init_codebook(pts, 3, seed=17)
        d01 = np.linalg.norm(cb.centers[0] - cb.centers[1])
        d02 = np.linalg.norm(cb.centers[0] - cb.centers[2])
        d12 = np.linalg.norm(cb.centers[1] - cb.centers[2])
        assert cb.widths == pytest.approx(np.full(3, (d01 + d02 + d12) / 3))

    def test_single_center_width_fallback(self, rng):
        cb = bofquant.init_codebook(rng.normal(size=(10, 2)), 1, seed=0)
        assert cb.widths[0] == 1.0

    def test_positive_widths_enforced(self):
        with pytest.raises(DeepBofError):
            Codebook(np.zeros((2, 2)), np.array([1.0, 0.0]))


class TestRbfMembership:
    def _codebook(self):
        centers = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
        return Codebook(centers, np.array([1.0, 2.0, 0.5]))

    def test_raw_similarity_is_one_at_center(self):
        cb = self._codebook()
        raw = bofquant.raw_similarities(np.array([[4.0, 0.0]]), cb)
        assert raw[0, 1] == 1.0

    def test_raw_similarity_at_one_width(self):
        cb = Codebook(np.array([[0.0, 0.0]]), np.array([2.5]))
        raw = bofquant.raw_similarities(np.array([[0.0, 2.5]]), cb)
        assert raw[0, 0] == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert raw[0, 0] == pytest.approx(0.367879, abs=5e-7)

    def test_symmetric_centers_split_evenly(self):
        cb = Codebook(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([1.5, 1.5]))
        member = bofquant.rbf_membership(np.array([0.0, 3.0]), cb)
        assert member == pytest.approx([0.5, 0.5])

    def test_memberships_sum_to_one(self, rng):
        cb = self._codebook()
        x = rng.normal(size=(50, 2)) * 3
        p = bofquant.memberships(x, cb)
        assert p.sum(axis=1) == pytest.approx(np.ones(50))
        assert (p >= 0).all()

    def test_underflow_falls_back_to_uniform(self):
        cb = Codebook(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1e-3, 1e-3]))
        member = bofquant.rbf_membership(np.array([1e6, 1e6]), cb)
        assert member == pytest.approx([0.5, 0.5])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(DimensionMismatchError):
            bofquant.rbf_membership(np.array([1.0, 2.0, 3.0]), self._codebook())


class TestQuantize:
    def test_near_one_hot_for_isolated_vector(self):
        centers = np.vstack([np.zeros(3), np.eye(3) * 100.0])
        cb = Codebook(centers, np.full(4, 1.0))
        hist = bofquant.quantize(np.array([[0.1, 0.0, 0.0]]), cb)
        assert hist[0] > 0.999
        assert hist.sum() == pytest.approx(1.0, abs=1e-6)

    def test_permutation_invariance_bit_exact(self, rng):
        cb = Codebook(rng.normal(size=(6, 4)), np.full(6, 1.3))
        x = rng.normal(size=(30, 4))
        h1 = bofquant.quantize(x, cb)
        h2 = bofquant.quantize(x[rng.permutation(30)], cb)
        assert np.array_equal(h1, h2)

    def test_variable_vector_counts_accepted(self, rng):
        cb = Codebook(rng.normal(size=(5, 8)), np.full(5, 2.0))
        for n in (1, 49, 196):
            hist = bofquant.quantize(rng.normal(size=(n, 8)), cb)
            assert hist.shape == (5,)
            assert hist.sum() == pytest.approx(1.0, abs=1e-6)
            assert (hist >= 0).all()

    def test_moving_toward_center_raises_its_bin(self):
        cb = Codebook(np.array([[0.0, 0.0], [6.0, 0.0]]), np.array([2.0, 2.0]))
        far = bofquant.quantize(np.array([[3.0, 0.0]]), cb)
        near = bofquant.quantize(np.array([[1.0, 0.0]]), cb)
        assert near[0] > far[0]

    def test_width_and_distance_scale_invariance(self, rng):
        centers = rng.normal(size=(4, 3))
        x = rng.normal(size=(10, 3))
        a = 3.7
        raw = bofquant.raw_similarities(x, Codebook(centers, np.full(4, 1.1)))
        scaled = bofquant.raw_similarities(
            x * a, Codebook(centers * a, np.full(4, 1.1 * a))
        )
        assert scaled == pytest.approx(raw, rel=1e-12)

    @given(seed=st.integers(0, 10_000))
    def test_histogram_invariants_random(self, seed):
        r = np.random.default_rng(seed)
        k, c, n = int(r.integers(1, 9)), int(r.integers(1, 6)), int(r.integers(1, 25))
        cb = Codebook(r.normal(size=(k, c)), np.abs(r.normal(size=k)) + 0.1)
        hist = bofquant.quantize(r.normal(size=(n, c)) * 2, cb)
        assert abs(hist.sum() - 1.0) <= 1e-6
        assert (hist >= 0).all()


def _flatten_params(cb, x):
    return np.concatenate([cb.centers.ravel(), cb.widths, x.ravel()])


def _loss_fn(upstream, k, c, n):
    def fn(flat):
        centers = flat[: k * c].reshape(k, c)
        widths = flat[k * c : k * c + k]
        x = flat[k * c + k :].reshape(n, c)
        hist = bofquant.quantize(x, Codebook(centers, widths))
        return float(hist @ upstream)

    return fn


class TestQuantizeBackward:
    def test_zero_upstream_gives_zero_gradients(self, rng):
        cb = Codebook(rng.normal(size=(4, 3)), np.full(4, 1.0))
        x = rng.normal(size=(5, 3))
        grads = bofquant.quantize_backward(x, cb, np.zeros(4))
        assert not grads.d_centers.any()
        assert not grads.d_widths.any()
        assert not grads.d_inputs.any()

    def test_matches_finite_differences(self, rng):
        for trial in range(20):
            k, c, n = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
            cb = Codebook(rng.normal(size=(k, c)), np.abs(rng.normal(size=k)) + 0.5)
            x = rng.normal(size=(n, c))
            upstream = rng.normal(size=k)
            grads = bofquant.quantize_backward(x, cb, upstream)
            analytic = np.concatenate(
                [grads.d_centers.ravel(), grads.d_widths, grads.d_inputs.ravel()]
            )
            numeric = central_difference(
                _loss_fn(upstream, k, c, n), _flatten_params(cb, x)
            )
            assert relative_errors(analytic, numeric).max() <= 1e-3, f"trial {trial}"

    def test_vector_on_center_stays_finite(self):
        cb = Codebook(np.array([[1.0, 2.0], [5.0, 5.0]]), np.array([1.0, 1.0]))
        x = np.array([[1.0, 2.0]])  # exactly on center 0
        grads = bofquant.quantize_backward(x, cb, np.array([1.0, -1.0]))
        assert np.isfinite(grads.d_centers).all()
        assert np.isfinite(grads.d_widths).all()
        assert np.isfinite(grads.d_inputs).all()

    def test_upstream_shape_checked(self, rng):
        cb = Codebook(rng.normal(size=(3, 2)), np.full(3, 1.0))
        with pytest.raises(DimensionMismatchError):
            bofquant.quantize_backward(rng.normal(size=(4, 2)), cb, np.zeros(5))


class TestCodebookSerialization:
    def test_roundtrip(self, rng, tmp_path):
        cb = Codebook(
            rng.normal(size=(7, 5)).astype(np.float32).astype(np.float64),
            (np.abs(rng.normal(size=7)) + 0.5).astype(np.float32).astype(np.float64),
        )
        bofquant.save_codebook(cb, tmp_path / "cb.dbc")
        back = bofquant.load_codebook(tmp_path / "cb.dbc")
        assert np.array_equal(back.centers, cb.centers)
        assert np.array_equal(back.widths, cb.widths)

    def test_file_layout(self, tmp_path):
        cb = Codebook(np.zeros((2, 3)), np.ones(2))
        bofquant.save_codebook(cb, tmp_path / "cb.dbc")
        blob = (tmp_path / "cb.dbc").read_bytes()
        assert blob[:4] == b"DBC1"
        assert len(blob) == 12 + 4 * (2 * 3 + 2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "cb.dbc").write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            bofquant.load_codebook(tmp_path / "cb.dbc")

    def test_truncated(self, tmp_path):
        cb = Codebook(np.zeros((2, 3)), np.ones(2))
        bofquant.save_codebook(cb, tmp_path / "cb.dbc")
        blob = (tmp_path / "cb.dbc").read_bytes()
        (tmp_path / "cut.dbc").write_bytes(blob[:-5])
        with pytest.raises(TruncatedFileError):
            bofquant.load_codebook(tmp_path / "cut.dbc")


class TestQuantizeMany:
    def test_matches_serial_and_keeps_order(self, rng):
        cb = Codebook(rng.normal(size=(5, 3)), np.full(5, 1.0))
        sets = [rng.normal(size=(int(rng.integers(1, 20)), 3)) for _ in range(12)]
        serial = bofquant.quantize_many(sets, cb, workers=1)
        threaded = bofquant.quantize_many(sets, cb, workers=4)
        assert np.array_equal(serial, threaded)

    def test_thread_env_cap(self, rng, monkeypatch):
        monkeypatch.setenv("DEEPBOF_THREADS", "1")
        cb = Codebook(rng.normal(size=(3, 2)), np.full(3, 1.0))
        sets = [rng.normal(size=(4, 2)) for _ in range(5)]
        out = bofquant.quantize_many(sets, cb, workers=8)
        assert out.shape == (5, 3)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netreduce.errors import DataError, ParameterError, ShapeError, ValidationError
from netreduce.nn import Linear, Network
from netreduce.reducers import (FdSketch, ProjectionMap, as_basis, as_basis_streaming, as_gradients,
                                fd_finalize, fd_update, pod_basis, project)

from oracles import fd_grad, rel_err


def power_iteration_norm(m, iters=500, seed=0):
    """Spectral norm of a symmetric matrix by power iteration on m @ m."""
    v = np.random.default_rng(seed).normal(size=m.shape[0])
    for _ in range(iters):
        w = m @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
    return float(np.sqrt(np.linalg.norm(m @ (m @ v)) / np.linalg.norm(v)))


def principal_angle(a, b):
    """Largest principal angle between the row spaces of two orthonormal bases."""
    s = np.linalg.svd(a @ b.T, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1, 1)))


def sketch_of(a, ell):
    sk = FdSketch(a.shape[1], ell)
    for row in a:
        fd_update(sk, row)
    return sk


def assert_orthonormal_rows(pmap):
    assert np.abs(pmap.basis @ pmap.basis.T - np.eye(pmap.r)).max() <= 1e-10


class TestPod:
    def test_rank_one(self, rng):
        u = rng.normal(size=10)
        snaps = np.outer(u, rng.normal(size=6))
        pmap = pod_basis(snaps, 1)
        assert abs(pmap.basis[0] @ u) / np.linalg.norm(u) == pytest.approx(1.0, abs=1e-10)

    def test_full_rank_reconstruction(self, rng):
        snaps = rng.normal(size=(12, 3)) @ rng.normal(size=(3, 8))
        pmap = pod_basis(snaps, 3)
        lifted = pmap.basis.T @ (pmap.basis @ snaps)
        assert np.abs(lifted - snaps).max() <= 1e-8

    def test_spectrum_matches_oracle(self, rng):
        snaps = rng.normal(size=(20, 12))
        pmap = pod_basis(snaps, 5)
        assert np.abs(pmap.spectrum - np.linalg.svd(snaps, compute_uv=False)[:5]).max() <= 1e-10
        assert pmap.method == "pod"
        assert_orthonormal_rows(pmap)

    def test_residual_is_discarded_energy_and_optimal(self, rng):
        snaps = rng.normal(size=(15, 25))
        r = 4
        pmap = pod_basis(snaps, r)
        resid = np.sum((snaps - pmap.basis.T @ (pmap.basis @ snaps)) ** 2)
        s = np.linalg.svd(snaps, compute_uv=False)
        assert resid == pytest.approx(np.sum(s[r:] ** 2), abs=1e-8)
        for _ in range(20):
            q, _ = np.linalg.qr(rng.normal(size=(15, r)))
            assert np.sum((snaps - q @ (q.T @ snaps)) ** 2) >= resid

    @pytest.mark.parametrize("r", [0, 13])
    def test_rank_range(self, rng, r):
        with pytest.raises(ParameterError):
            pod_basis(rng.normal(size=(20, 12)), r)

    def test_center(self, rng):
        snaps = rng.normal(size=(6, 30)) + 5.0
        pmap = pod_basis(snaps, 2, center=True)
        assert np.allclose(pmap.center, snaps.mean(axis=1))
        z = pmap.project_batch(snaps.T)
        assert np.abs(z.mean(axis=0)).max() <= 1e-12


class TestProject:
    def test_identity(self, rng):
        pmap = ProjectionMap(np.eye(6), "pod", np.ones(6))
        x = rng.normal(size=(2, 3))
        assert np.array_equal(project(pmap, x), x.reshape(-1))

    def test_orthogonal_input(self):
        pmap = ProjectionMap(np.eye(4)[:2], "pod", np.ones(2))
        assert np.abs(project(pmap, [0, 0, 3.0, -1.0])).max() <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 2**32 - 1))
    def test_non_expansive(self, r, extra, seed):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(r + extra, r)))
        x = rng.normal(size=r + extra)
        assert np.linalg.norm(project(ProjectionMap(q.T, "pod", np.ones(r)), x)) <= np.linalg.norm(x) + 1e-10

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            project(ProjectionMap(np.eye(3), "pod", np.ones(3)), np.ones(4))

    def test_round_trip(self, rng, tmp_path):
        pmap = pod_basis(rng.normal(size=(8, 10)), 3, center=True)
        pmap.save(tmp_path / "p.json")
        loaded = ProjectionMap.load(tmp_path / "p.json")
        assert np.array_equal(loaded.basis, pmap.basis.astype(np.float32).astype(np.float64))
        assert loaded.center is not None and loaded.method == "pod"
        assert pmap.storage_bytes() == (tmp_path / "p.json").stat().st_size + (tmp_path / "p.bin").stat().st_size

    def test_load_wrong_kind(self, rng, tmp_path):
        from netreduce.nn import save_model
        save_model(Network([Linear(np.eye(2))], (2,)), tmp_path / "m.json")
        with pytest.raises(ValidationError):
            ProjectionMap.load(tmp_path / "m.json")


class TestAsGradients:
    def test_minimum_gives_zero_gradient(self):
        post = Network([Linear(np.eye(3))], (3,))
        feats = np.array([[60.0, 0.0], [0.0, 60.0], [0.0, 0.0]])
        grads = as_gradients(post, feats, np.array([0, 1]))
        assert np.abs(grads).max() <= 1e-8

    def test_linear_post_matches_fd(self, rng):
        w = rng.normal(size=(4, 6))
        post = Network([Linear(w)], (6,))
        feats = rng.normal(size=(6, 5))
        labels = np.array([0, 3, 1, 2, 3])
        grads = as_gradients(post, feats, labels)
        for j in range(5):
            x = feats[:, j].copy()

            def loss():
                y = w @ x
                return float(np.log(np.exp(y - y.max()).sum()) + y.max() - y[labels[j]])

            assert rel_err(grads[j], fd_grad(loss, x)) <= 1e-5

    def test_duplicate_rows(self, rng):
        post = Network([Linear(rng.normal(size=(3, 4)))], (4,))
        feats = rng.normal(size=(4, 2))
        grads = as_gradients(post, np.c_[feats, feats[:, :1]], np.array([1, 2, 1]))
        assert np.array_equal(grads[0], grads[2])

    def test_bad_label_index(self, rng):
        post = Network([Linear(rng.normal(size=(3, 4)))], (4,))
        with pytest.raises(DataError, match="index 1"):
            as_gradients(post, rng.normal(size=(4, 2)), np.array([0, 3]))


class TestAsBasis:
    def test_rank_one_direction(self, rng):
        a = rng.normal(size=8)
        x = rng.normal(size=(200, 8))
        grads = 2 * (x @ a)[:, None] * a[None]
        pmap = as_basis(grads, 2)
        assert abs(pmap.basis[0] @ a) / np.linalg.norm(a) == pytest.approx(1.0, abs=1e-8)
        assert_orthonormal_rows(pmap)

    def test_spectrum_ratio_monte_carlo(self, rng):
        n = 10
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        b -= (b @ a) / (a @ a) * a
        x = rng.normal(size=(5000, n))
        grads = 2 * (x @ a)[:, None] * a + 0.02 * (x @ b)[:, None] * b
        pmap = as_basis(grads, 2)
        # oracle: energies of the gradients along each direction
        ua, ub = a / np.linalg.norm(a), b / np.linalg.norm(b)
        ratio = np.mean((grads @ ua) ** 2) / np.mean((grads @ ub) ** 2)
        assert pmap.spectrum[0] / pmap.spectrum[1] == pytest.approx(ratio, rel=0.05)

    def test_zero_gradients(self):
        pmap = as_basis(np.zeros((5, 4)), 3)
        assert np.all(pmap.spectrum == 0)
        assert_orthonormal_rows(pmap)

    def test_rank_range(self):
        with pytest.raises(ParameterError):
            as_basis(np.ones((5, 4)), 5)

    def test_normalize(self, rng):
        grads = rng.normal(size=(30, 5)) * rng.uniform(0.1, 100, size=(30, 1))
        pmap = as_basis(grads, 5, normalize=True)
        assert pmap.spectrum.sum() == pytest.approx(1.0, rel=1e-12)


class TestFrequentDirections:
    def test_no_compression(self, rng):
        a = rng.normal(size=(10, 6))
        sk = sketch_of(a, 10)
        assert np.abs(sk.B.T @ sk.B - a.T @ a).max() <= 1e-10

    @pytest.mark.parametrize("ell", [8, 16, 32])
    def test_guarantee(self, rng, ell):
        a = rng.normal(size=(200, 30))
        sk = sketch_of(a, ell)
        err = power_iteration_norm(a.T @ a - sk.B.T @ sk.B)
        assert err <= np.sum(a * a) / ell
        assert sk.B.shape[0] <= ell
        assert sk.rows_seen == 200

    def test_zero_rows(self):
        sk = sketch_of(np.zeros((40, 5)), 4)
        assert not np.any(sk.B)

    def test_row_length(self):
        with pytest.raises(ShapeError):
            fd_update(FdSketch(5, 4), np.ones(6))

    def test_agrees_with_exact(self, rng):
        n, r = 30, 3
        dirs, _ = np.linalg.qr(rng.normal(size=(n, r)))
        x = rng.normal(size=(500, r)) * np.array([10.0, 6.0, 4.0])
        grads = x @ dirs.T + 0.05 * rng.normal(size=(500, n))
        exact = as_basis(grads, r)
        sketched = as_basis_streaming(grads, r)
        assert principal_angle(exact.basis, sketched.basis) <= 0.05
        assert_orthonormal_rows(sketched)

    def test_finalize_rank_check(self):
        with pytest.raises(ParameterError):
            fd_finalize(FdSketch(5, 2), 3)

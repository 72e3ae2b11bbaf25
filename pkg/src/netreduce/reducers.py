"""Rank-r projections of intermediate features: POD, Active Subspaces and a
Frequent Directions sketch for the streaming AS path."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileformat
from .errors import DataError, ParameterError, ShapeError, ValidationError
from .linalg import svd, sym_eig
from .nn import Network


@dataclass
class ProjectionMap:
    """``z = basis @ (x - center)``; basis rows are orthonormal.

    ``center`` is ``None`` unless snapshots were mean-centred. ``spectrum``
    holds the retained singular values (POD) or covariance eigenvalues (AS).
    """

    basis: np.ndarray
    method: str
    spectrum: np.ndarray
    center: np.ndarray | None = None

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.spectrum = np.asarray(self.spectrum, dtype=np.float64)
        if self.basis.ndim != 2 or self.basis.shape[0] > self.basis.shape[1]:
            raise ShapeError(f"projection basis must be r x n_l with r <= n_l, got {self.basis.shape}")
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=np.float64)
            if self.center.shape != (self.n_features,):
                raise ShapeError(f"centering vector has shape {self.center.shape}, expected ({self.n_features},)")

    @property
    def r(self) -> int:
        return self.basis.shape[0]

    @property
    def n_features(self) -> int:
        return self.basis.shape[1]

    def n_params(self) -> int:
        return self.basis.size + self.spectrum.size + (0 if self.center is None else self.center.size)

    def project_batch(self, X: np.ndarray) -> np.ndarray:
        """Rows of ``X`` (N, n_l) to reduced coordinates (N, r)."""
        if self.center is not None:
            X = X - self.center
        return X @ self.basis.T

    def _artifact(self):
        fields = {"r": self.r, "n_l": self.n_features, "method": self.method,
                  "centered": self.center is not None}
        arrays = [("basis", self.basis), ("spectrum", self.spectrum)]
        if self.center is not None:
            arrays.append(("center", self.center))
        return fields, arrays

    def save(self, path) -> None:
        fields, arrays = self._artifact()
        fileformat.write_artifact(path, "projection", fields, arrays)

    def storage_bytes(self) -> int:
        fields, arrays = self._artifact()
        return fileformat.stored_size("projection", fields, arrays)

    @classmethod
    def load(cls, path) -> "ProjectionMap":
        manifest, arrays = fileformat.read_artifact(path, kind="projection")
        try:
            pmap = cls(arrays["basis"], manifest["method"], arrays["spectrum"], arrays.get("center"))
        except (KeyError, ShapeError) as exc:
            raise ValidationError(f"{path}: bad projection artifact: {exc}") from None
        if (pmap.r, pmap.n_features) != (manifest.get("r"), manifest.get("n_l")):
            raise ValidationError(f"{path}: basis shape {pmap.basis.shape} disagrees with manifest r/n_l")
        return pmap


def project(pmap: ProjectionMap, x) -> np.ndarray:
    """Reduced coordinates of one feature tensor (flattened row-major)."""
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    if flat.size != pmap.n_features:
        raise ShapeError(f"feature vector has {flat.size} entries, projection expects {pmap.n_features}")
    return pmap.project_batch(flat[None])[0]


def _check_rank(r: int, upper: int, what: str) -> None:
    if not 1 <= r <= upper:
        raise ParameterError(f"rank r must satisfy 1 <= r <= {upper} ({what}), got {r}")


def pod_basis(snapshots, r: int, center: bool = False) -> ProjectionMap:
    """Leading ``r`` left singular vectors of the ``(n_l, N)`` snapshot matrix."""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    n_l, n = snapshots.shape
    _check_rank(r, min(n_l, n), "min(n_l, N)")
    mean = snapshots.mean(axis=1) if center else None
    res = svd(snapshots - mean[:, None] if center else snapshots)
    return ProjectionMap(res.U[:, :r].T.copy(), "pod", res.S[:r].copy(), mean)


def softmax_ce_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of cross-entropy(softmax(logits), label) per row."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def as_gradients(post: Network, features, labels, batch_size: int = 256) -> np.ndarray:
    """Rows ``grad_x g(x_j)`` with ``g = CE(softmax(post(x)), label)``.

    ``features`` is the ``(n_l, N)`` snapshot matrix; columns are reshaped
    to the post-model input shape before evaluation.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n_l, n = features.shape
    if n_l != int(np.prod(post.input_shape)):
        raise ShapeError(f"features have {n_l} rows, post-model expects input {post.input_shape}")
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} feature columns")
    n_class = int(np.prod(post.output_shape))
    bad = np.flatnonzero((labels < 0) | (labels >= n_class))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {n_class})")
    labels = labels.astype(np.int64)
    grads = np.empty((n, n_l))
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        x = features[:, start:stop].T.reshape(stop - start, *post.input_shape)
        acts = post.forward(x)
        g_out = softmax_ce_grad(acts[-1].reshape(stop - start, n_class), labels[start:stop])
        grads[start:stop] = post.backward(acts, g_out.reshape(acts[-1].shape)).input.reshape(stop - start, n_l)
    return grads


def as_basis(gradients, r: int, normalize: bool = False) -> ProjectionMap:
    """Top-``r`` eigenvectors of ``C = G.T G / N``.

    With ``normalize`` every gradient row is scaled to unit length first
    (zero rows stay zero). For a degenerate spectrum the eigenvector order
    is whatever the deterministic eigensolver returns; a zero gradient
    matrix gives an arbitrary orthonormal basis with zero spectrum.
    """
    g = np.asarray(gradients, dtype=np.float64)
    n, n_l = g.shape
    if n < 1:
        raise ParameterError("active subspace needs at least one gradient sample")
    _check_rank(r, n_l, "n_l")
    if normalize:
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        g = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
    cov = g.T @ g / n
    eig = sym_eig(cov)
    spectrum = np.clip(eig.values[:r], 0.0, None)
    return ProjectionMap(eig.vectors[:, :r].T.copy(), "as", spectrum)


@dataclass
class FdSketch:
    """Frequent Directions sketch of a row stream.

    ``ell`` rows are kept; rows are buffered up to ``2 * ell`` and a shrink
    subtracts the ``ell``-th squared singular value of the buffer, which gives
    ``||A.T A - B.T B||_2 <= ||A||_F**2 / ell``.
    """

    n: int
    ell: int
    buffer: np.ndarray = field(init=False)
    filled: int = 0
    rows_seen: int = 0

    def __post_init__(self):
        if self.ell < 1 or self.n < 1:
            raise ParameterError(f"sketch needs ell >= 1 and n >= 1, got ell={self.ell}, n={self.n}")
        self.buffer = np.zeros((2 * self.ell, self.n))

    def _shrink(self) -> None:
        res = svd(self.buffer[:self.filled])
        s2 = res.S ** 2
        delta = s2[self.ell - 1] if len(s2) >= self.ell else 0.0
        kept = np.sqrt(np.maximum(s2 - delta, 0.0))
        rows = kept[:, None] * res.Vt
        nonzero = int(np.count_nonzero(kept))
        self.buffer[:] = 0.0
        self.buffer[:nonzero] = rows[:nonzero]
        self.filled = nonzero

    @property
    def B(self) -> np.ndarray:
        """The current ``(ell, n)`` sketch; compacts the buffer if it holds more rows."""
        if self.filled > self.ell:
            self._shrink()
        return self.buffer[:self.ell].copy()


def fd_update(sketch: FdSketch, row) -> FdSketch:
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (sketch.n,):
        raise ShapeError(f"sketch row has shape {row.shape}, expected ({sketch.n},)")
    if sketch.filled == 2 * sketch.ell:
        sketch._shrink()
    sketch.buffer[sketch.filled] = row
    sketch.filled += 1
    sketch.rows_seen += 1
    return sketch


def fd_finalize(sketch: FdSketch, r: int) -> ProjectionMap:
    """Top-``r`` right singular directions of the sketch.

    The spectrum is ``sigma**2 / rows_seen`` so it estimates the same
    covariance eigenvalues as :func:`as_basis`.
    """
    if r > sketch.ell:
        raise ParameterError(f"sketch size {sketch.ell} is smaller than rank {r}")
    _check_rank(r, sketch.n, "n")
    res = svd(sketch.B)
    basis = res.Vt[:r]
    spectrum = res.S[:r] ** 2 / max(sketch.rows_seen, 1)
    return ProjectionMap(basis.copy(), "as", spectrum)


def as_basis_streaming(gradients, r: int, ell: int | None = None, normalize: bool = False) -> ProjectionMap:
    """AS basis from a Frequent Directions sketch of the gradient rows (default ``ell = 2r``)."""
    g = np.asarray(gradients, dtype=np.float64)
    sketch = FdSketch(g.shape[1], ell or 2 * r)
    for row in g:
        if normalize:
            norm = np.linalg.norm(row)
            row = row / norm if norm > 0 else row
        fd_update(sketch, row)
    return fd_finalize(sketch, r)

"""Input-output maps from reduced coordinates to logits: a polynomial chaos
expansion and a small feed-forward head with Softplus activations."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import fileformat
from .errors import ParameterError, ShapeError, TrainingDivergedError, ValidationError
from .linalg import lstsq
from .nn.layers import sigmoid, softplus, uniform_init

SCALE_FLOOR = 1e-12
FAMILIES = ("hermite", "legendre")


def multi_indices(r: int, p: int) -> list[tuple[int, ...]]:
    """All ``alpha`` in N^r with ``|alpha| <= p``, graded, then lexicographically descending.

    >>> multi_indices(2, 1)
    [(0, 0), (1, 0), (0, 1)]
    """
    if r < 1 or p < 0:
        raise ParameterError(f"multi-indices need r >= 1 and p >= 0, got r={r}, p={p}")

    def with_total(n_vars: int, total: int):
        if n_vars == 1:
            yield (total,)
            return
        for first in range(total, -1, -1):
            for rest in with_total(n_vars - 1, total - first):
                yield (first, *rest)

    return [alpha for d in range(p + 1) for alpha in with_total(r, d)]


def univariate_table(x: np.ndarray, p: int, family: str) -> np.ndarray:
    """``out[..., k] = phi_k(x)`` for k = 0..p.

    Hermite is the probabilists' family He_k; Legendre is the standard P_k.
    """
    out = np.empty((*x.shape, p + 1))
    out[..., 0] = 1.0
    if p >= 1:
        out[..., 1] = x
    for k in range(1, p):
        if family == "hermite":
            out[..., k + 1] = x * out[..., k] - k * out[..., k - 1]
        else:
            out[..., k + 1] = ((2 * k + 1) * x * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out


def univariate_derivative_table(table: np.ndarray, family: str) -> np.ndarray:
    """Derivatives of the polynomials in ``table`` (built by :func:`univariate_table`)."""
    d = np.zeros_like(table)
    p = table.shape[-1] - 1
    for k in range(1, p + 1):
        if family == "hermite":
            d[..., k] = k * table[..., k - 1]
        else:
            # P'_{k} = P'_{k-2} + (2k - 1) P_{k-1}
            d[..., k] = (2 * k - 1) * table[..., k - 1] + (d[..., k - 2] if k >= 2 else 0.0)
    return d


@dataclass
class PceModel:
    """Total-degree polynomial chaos expansion ``y = sum_alpha c_alpha phi_alpha(xi)``.

    ``xi = (z - mean) / scale`` is the standardised input. Coefficients are
    ``(n_terms, n_out)`` with rows in :func:`multi_indices` order.
    """

    coefficients: np.ndarray
    degree: int
    family: str
    mean: np.ndarray
    scale: np.ndarray
    indices: list[tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown polynomial family {self.family!r}; choose from {FAMILIES}")
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ParameterError("PCE standardisation scales must be positive")
        self.indices = multi_indices(len(self.mean), self.degree)
        self._alpha = np.array(self.indices, dtype=np.int64)
        if self.coefficients.shape[0] != len(self.indices) or self.scale.shape != self.mean.shape:
            raise ShapeError(
                f"{len(self.indices)} PCE terms for r={self.r}, p={self.degree}, "
                f"got coefficients {self.coefficients.shape}"
            )

    @property
    def r(self) -> int:
        return len(self.mean)

    @property
    def n_terms(self) -> int:
        return len(self.indices)

    @property
    def n_out(self) -> int:
        return self.coefficients.shape[1]

    def n_params(self) -> int:
        return self.coefficients.size + self.mean.size + self.scale.size

    def trainable(self) -> list[np.ndarray]:
        return [self.coefficients]

    def set_trainable(self, values: list[np.ndarray]) -> None:
        (self.coefficients,) = values

    def _check_z(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.r:
            raise ShapeError(f"PCE expects inputs with {self.r} columns, got shape {Z.shape}")
        return Z

    def design_matrix(self, Z) -> np.ndarray:
        """``Phi[j, k] = phi_{alpha_k}(z_j)`` for a batch ``Z`` (N, r)."""
        Z = self._check_z(Z)
        table = univariate_table((Z - self.mean) / self.scale, self.degree, self.family)
        # (N, r, p+1) -> (N, n_terms, r) -> product over variables
        picked = table[:, np.arange(self.r), self._alpha]
        return picked.prod(axis=2)

    def forward(self, Z) -> tuple[np.ndarray, tuple]:
        Z = self._check_z(Z)
        phi = self.design_matrix(Z)
        return phi @ self.coefficients, (Z, phi)

    def __call__(self, Z) -> np.ndarray:
        return self.forward(Z)[0]

    def backward(self, cache, grad_y) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients w.r.t. the coefficients and w.r.t. the inputs ``Z``."""
        Z, phi = cache
        g_coef = phi.T @ grad_y
        xi = (Z - self.mean) / self.scale
        table = univariate_table(xi, self.degree, self.family)
        dtable = univariate_derivative_table(table, self.family)
        cols = np.arange(self.r)
        picked = table[:, cols, self._alpha]  # (N, T, r)
        dpicked = dtable[:, cols, self._alpha]
        g_phi = grad_y @ self.coefficients.T  # (N, T)
        g_z = np.empty_like(Z)
        for i in range(self.r):
            others = np.delete(picked, i, axis=2).prod(axis=2)
            g_z[:, i] = (g_phi * others * dpicked[:, :, i]).sum(axis=1) / self.scale[i]
        return [g_coef], g_z

    def _artifact(self):
        fields = {"r": self.r, "n_out": self.n_out, "degree": self.degree, "family": self.family,
                  "ordering": "graded-lex-descending"}
        return fields, [("coefficients", self.coefficients), ("mean", self.mean), ("scale", self.scale)]


def pce_basis_eval(z, model: PceModel) -> np.ndarray:
    """Basis values ``phi_alpha(z)`` for a single reduced vector."""
    return model.design_matrix(np.asarray(z, dtype=np.float64)[None])[0]


def pce_predict(model: PceModel, z) -> np.ndarray:
    return model(np.asarray(z, dtype=np.float64)[None])[0]


def standardization(Z: np.ndarray, family: str) -> tuple[np.ndarray, np.ndarray]:
    """Hermite: empirical mean and standard deviation. Legendre: min-max map to [-1, 1]."""
    if family == "hermite":
        mean, scale = Z.mean(axis=0), Z.std(axis=0)
    elif family == "legendre":
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        mean, scale = 0.5 * (hi + lo), 0.5 * (hi - lo)
    else:
        raise ParameterError(f"unknown polynomial family {family!r}; choose from {FAMILIES}")
    return mean, np.maximum(scale, SCALE_FLOOR)


def pce_fit(Z, Y, p: int = 2, family: str = "hermite") -> PceModel:
    """Least-squares PCE coefficients on training pairs ``(Z, Y)``.

    Fewer samples than terms is allowed; a warning is issued and the
    ridge-regularised branch of :func:`~netreduce.linalg.lstsq` takes over.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Z.ndim != 2 or len(Z) != len(Y) or len(Z) < 1:
        raise ShapeError(f"PCE training data shapes {Z.shape} and {Y.shape} do not match")
    mean, scale = standardization(Z, family)
    n_terms = comb(Z.shape[1] + p, p)
    model = PceModel(np.zeros((n_terms, Y.shape[1])), p, family, mean, scale)
    if len(Z) < n_terms:
        warnings.warn(f"{len(Z)} samples for {n_terms} PCE terms: using the ridge-regularised solution",
                      RuntimeWarning, stacklevel=2)
    model.coefficients = lstsq(model.design_matrix(Z), Y)
    return model


@dataclass
class FnnHead:
    """``y = W_k softplus(... softplus(W_1 z))`` without bias terms.

    The standard head has one hidden layer (``weights = [W1, W2]``); deeper
    heads of equal width are only built by the architecture sweep.
    """

    weights: list[np.ndarray]
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ParameterError(f"softplus beta must be positive, got {self.beta}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if len(self.weights) < 2:
            raise ShapeError("an FNN head needs at least one hidden layer")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.ndim != 2 or b.ndim != 2 or b.shape[1] != a.shape[0]:
                raise ShapeError(f"FNN head weight shapes {a.shape} and {b.shape} do not chain")

    @classmethod
    def init(cls, r: int, hidden: int, n_out: int, rng: np.random.Generator,
             depth: int = 1, beta: float = 1.0) -> "FnnHead":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""
        if hidden < 1 or depth < 1:
            raise ParameterError(f"FNN head needs hidden width and depth >= 1, got {hidden}, {depth}")
        dims = [r] + [hidden] * depth + [n_out]
        return cls([uniform_init(rng, (b, a), a) for a, b in zip(dims, dims[1:])], beta)

    @property
    def W1(self) -> np.ndarray:
        return self.weights[0]

    @property
    def W2(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def r(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def n_params(self) -> int:
        return sum(w.size for w in self.weights)

    def trainable(self) -> list[np.ndarray]:
        return self.weights

    def set_trainable(self, values: list[np.ndarray]) -> None:
        self.weights = list(values)

    def forward(self, Z) -> tuple[np.ndarray, list]:
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.r:
            raise ShapeError(f"FNN head expects inputs with {self.r} columns, got shape {Z.shape}")
        pre, post = [], [Z]
        h = Z
        for w in self.weights[:-1]:
            a = h @ w.T
            pre.append(a)
            h = softplus(a, self.beta)
            post.append(h)
        return h @ self.weights[-1].T, [pre, post]

    def __call__(self, Z) -> np.ndarray:
        return self.forward(Z)[0]

    def backward(self, cache, grad_y) -> tuple[list[np.ndarray], np.ndarray]:
        pre, post = cache
        grads = [None] * len(self.weights)
        grads[-1] = grad_y.T @ post[-1]
        g = grad_y @ self.weights[-1]
        for i in range(len(self.weights) - 2, -1, -1):
            g = g * sigmoid(self.beta * pre[i])
            grads[i] = g.T @ post[i]
            g = g @ self.weights[i]
        return grads, g

    def _artifact(self):
        fields = {"r": self.r, "hidden": self.hidden, "depth": self.depth, "n_out": self.n_out,
                  "beta": self.beta}
        return fields, [(f"W{i + 1}", w) for i, w in enumerate(self.weights)]


def fnn_forward(head: FnnHead, z) -> np.ndarray:
    return head(np.asarray(z, dtype=np.float64)[None])[0]


def head_param_count(head: PceModel | FnnHead) -> int:
    """FNN: sum of weight-matrix sizes (no biases). PCE: ``n_terms * n_out + 2r``."""
    return head.n_params()


def fnn_param_count(r: int, hidden: int, n_out: int, depth: int = 1) -> int:
    return r * hidden + (depth - 1) * hidden * hidden + hidden * n_out


# serialisation ------------------------------------------------------------

def save_head(head: PceModel | FnnHead, path) -> None:
    fields, arrays = head._artifact()
    fileformat.write_artifact(path, _kind(head), fields, arrays)


def head_storage_bytes(head: PceModel | FnnHead) -> int:
    fields, arrays = head._artifact()
    return fileformat.stored_size(_kind(head), fields, arrays)


def _kind(head) -> str:
    return "pce" if isinstance(head, PceModel) else "fnn"


def load_head(path) -> PceModel | FnnHead:
    manifest, arrays = fileformat.read_artifact(path)
    kind = manifest.get("kind")
    try:
        if kind == "pce":
            head = PceModel(arrays["coefficients"], manifest["degree"], manifest["family"],
                            arrays["mean"], arrays["scale"])
        elif kind == "fnn":
            weights = [arrays[f"W{i + 1}"] for i in range(manifest["depth"] + 1)]
            head = FnnHead(weights, manifest["beta"])
        else:
            raise ValidationError(f"{path}: expected a pce or fnn head, found {kind!r}")
    except (KeyError, ShapeError, ParameterError) as exc:
        raise ValidationError(f"{path}: bad {kind} head: {exc}") from None
    if head.r != manifest.get("r") or head.n_out != manifest.get("n_out"):
        raise ValidationError(f"{path}: head dimensions disagree with the manifest")
    return head


def fit_fnn(head: FnnHead, Z, Y, epochs: int = 500, lr: float = 0.1, momentum: float = 0.9,
            batch_size: int = 32, seed: int = 0) -> list[float]:
    """Regress ``head`` onto targets ``Y`` (mean squared error) in place.

    ``lr`` is relative: the SGD step is ``lr / mean ||z_j||^2``, so the
    scale of the reduced coordinates (large for POD) does not decide
    stability. Returns the mean training loss after each epoch.
    """
    from .nn.train import SGD

    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    scale = float(np.mean(np.sum(Z * Z, axis=1))) if len(Z) else 1.0
    rng = np.random.default_rng(seed)
    opt = SGD(head.trainable(), lr / max(scale, 1e-12), momentum)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(Z))
        for start in range(0, len(Z), batch_size):
            idx = order[start:start + batch_size]
            out, cache = head.forward(Z[idx])
            grads, _ = head.backward(cache, (out - Y[idx]) / len(idx))
            opt.step(grads)
        history.append(float(0.5 * np.mean(np.sum((head(Z) - Y) ** 2, axis=1))))
        if not np.isfinite(history[-1]):
            raise TrainingDivergedError(len(history), None, history[-1])
    return history

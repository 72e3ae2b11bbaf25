"""Layer kinds supported by :class:`~netreduce.nn.network.Network`.

Every layer works on a batch: arrays carry a leading sample axis, and the
per-sample shape follows it (``(C, H, W)`` for images, ``(n,)`` for vectors).
Parameter gradients returned by ``backward`` are summed over the batch.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ParameterError, ShapeError


def softplus(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """``log(1 + exp(beta x)) / beta`` in the overflow-safe form."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-beta * np.abs(x))) / beta


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind: str = ""
    param_names: tuple[str, ...] = ()

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name in self.param_names:
            new = np.asarray(values[name], dtype=np.float64)
            if new.shape != getattr(self, name).shape:
                raise ShapeError(
                    f"{self.kind}.{name}: expected shape {getattr(self, name).shape}, got {new.shape}"
                )
            setattr(self, name, new)

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def hyper(self) -> dict:
        """Hyperparameters written to the model manifest."""
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, y: np.ndarray, grad_y: np.ndarray):
        """Return ``(grad_x, {param_name: grad})`` for input ``x`` and output ``y``."""
        raise NotImplementedError

    def __eq__(self, other) -> bool:
        if type(self) is not type(other) or self.hyper() != other.hyper():
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values()))

    def __repr__(self) -> str:
        fields = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({fields})"


class Linear(Layer):
    kind = "linear"
    param_names = ("W", "b")

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got {self.W.shape}")
        self.b = np.zeros(self.W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
        if self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"linear bias shape {self.b.shape} does not match weight {self.W.shape}")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Linear":
        return cls(uniform_init(rng, (n_out, n_in), n_in), uniform_init(rng, n_out, n_in))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def hyper(self) -> dict:
        return {"n_in": self.n_in, "n_out": self.n_out}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"linear expects input shape ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x):
        return x @ self.W.T + self.b

    def backward(self, x, y, grad_y):
        return grad_y @ self.W, {"W": grad_y.T @ x, "b": grad_y.sum(axis=0)}


class Conv2d(Layer):
    """2-D cross-correlation with zero padding and integer stride."""

    kind = "conv2d"
    param_names = ("kernels", "bias")

    def __init__(self, kernels, bias=None, stride: int = 1, padding: int = 0):
        self.kernels = np.asarray(kernels, dtype=np.float64)
        if self.kernels.ndim != 4:
            raise ShapeError(f"conv2d kernels must be 4-D, got {self.kernels.shape}")
        c_out = self.kernels.shape[0]
        self.bias = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (c_out,):
            raise ShapeError(f"conv2d bias shape {self.bias.shape} does not match {c_out} output channels")
        if int(stride) < 1 or int(padding) < 0:
            raise ParameterError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, c_in, c_out, kernel_size, rng, stride=1, padding=0) -> "Conv2d":
        fan_in = c_in * kernel_size * kernel_size
        kernels = uniform_init(rng, (c_out, c_in, kernel_size, kernel_size), fan_in)
        return cls(kernels, uniform_init(rng, c_out, fan_in), stride, padding)

    def hyper(self) -> dict:
        c_out, c_in, kh, kw = self.kernels.shape
        return {"c_in": c_in, "c_out": c_out, "kh": kh, "kw": kw,
                "stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shape):
        c_out, c_in, kh, kw = self.kernels.shape
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(f"conv2d expects ({c_in}, H, W) input, got {tuple(in_shape)}")
        h = in_shape[1] + 2 * self.padding - kh
        w = in_shape[2] + 2 * self.padding - kw
        if h < 0 or w < 0:
            raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {tuple(in_shape)}")
        return (c_out, h // self.stride + 1, w // self.stride + 1)

    def _windows(self, x):
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        kh, kw = self.kernels.shape[2:]
        # (N, C, Ho, Wo, kh, kw)
        return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x):
        win = self._windows(x)
        out = np.tensordot(win, self.kernels, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, C_out)
        return out.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]

    def backward(self, x, y, grad_y):
        win = self._windows(x)
        g_kernels = np.tensordot(grad_y, win, axes=([0, 2, 3], [0, 2, 3]))
        g_bias = grad_y.sum(axis=(0, 2, 3))

        n, c, h, w = x.shape
        p, s = self.padding, self.stride
        kh, kw = self.kernels.shape[2:]
        ho, wo = grad_y.shape[2:]
        g_pad = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                # (N, Ho, Wo, C_in)
                contrib = np.tensordot(grad_y, self.kernels[:, :, i, j], axes=([1], [0]))
                g_pad[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        g_x = g_pad[:, :, p:p + h, p:p + w]
        return g_x, {"kernels": g_kernels, "bias": g_bias}


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, y, grad_y):
        return grad_y * (x > 0), {}


class Softplus(Layer):
    kind = "softplus"

    def __init__(self, beta: float = 1.0):
        if not beta > 0:
            raise ParameterError(f"softplus beta must be positive, got {beta}")
        self.beta = float(beta)

    def hyper(self) -> dict:
        return {"beta": self.beta}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return softplus(x, self.beta)

    def backward(self, x, y, grad_y):
        return grad_y * sigmoid(self.beta * x), {}


class MaxPool2d(Layer):
    """Max pooling without padding; gradient goes to the first maximum in
    row-major window order."""

    kind = "maxpool2d"

    def __init__(self, window: int = 2, stride: int | None = None):
        self.window = int(window)
        self.stride = int(stride) if stride is not None else self.window
        if self.window < 1 or self.stride < 1:
            raise ParameterError(f"maxpool2d needs window, stride >= 1, got {window}, {stride}")

    def hyper(self) -> dict:
        return {"window": self.window, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < self.window or in_shape[2] < self.window:
            raise ShapeError(f"maxpool2d({self.window}) cannot pool input shape {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def _flat_windows(self, x):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(*win.shape[:4], k * k)

    def forward(self, x):
        return self._flat_windows(x).max(axis=-1)

    def backward(self, x, y, grad_y):
        k, s = self.window, self.stride
        arg = self._flat_windows(x).argmax(axis=-1)  # first maximum wins ties
        n, c, ho, wo = arg.shape
        rows = np.arange(ho)[None, None, :, None] * s + arg // k
        cols = np.arange(wo)[None, None, None, :] * s + arg % k
        g_x = np.zeros_like(x)
        nn_idx = np.arange(n)[:, None, None, None]
        cc_idx = np.arange(c)[None, :, None, None]
        np.add.at(g_x, (nn_idx, cc_idx, rows, cols), grad_y)
        return g_x, {}


class Flatten(Layer):
    """Row-major flattening: channel, then row, then column."""

    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, y, grad_y):
        return grad_y.reshape(x.shape), {}


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Linear, Conv2d, ReLU, Softplus, MaxPool2d, Flatten)
}


def layer_from_record(kind: str, hyper: dict, params: dict[str, np.ndarray]) -> Layer:
    """Rebuild a layer from its manifest record and parameter arrays."""
    if kind == "linear":
        layer = Linear(params["W"], params["b"])
    elif kind == "conv2d":
        layer = Conv2d(params["kernels"], params["bias"], hyper["stride"], hyper["padding"])
    elif kind == "softplus":
        layer = Softplus(hyper["beta"])
    elif kind == "maxpool2d":
        layer = MaxPool2d(hyper["window"], hyper["stride"])
    elif kind in LAYER_KINDS:
        layer = LAYER_KINDS[kind]()
    else:
        raise ShapeError(f"unknown layer kind {kind!r}")
    if layer.hyper() != hyper:
        raise ShapeError(f"{kind} hyperparameters {hyper} do not match parameter shapes {layer.hyper()}")
    return layer

"""Cut a sequential network into pre-model and post-model, and snapshot the
intermediate features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .nn import Network


@dataclass(frozen=True)
class SplitNetwork:
    pre: Network
    post: Network
    cut_index: int


def split_network(net: Network, cut: int) -> SplitNetwork:
    """Layers ``1..cut`` form the pre-model, ``cut+1..L`` the post-model.

    ``cut`` counts every layer, activations and pooling included.
    Both halves share the layer objects of ``net``.
    """
    n = len(net.layers)
    if not isinstance(cut, (int, np.integer)) or not 1 <= cut < n:
        raise ParameterError(f"cut-off layer must satisfy 1 <= l < {n}, got {cut}")
    cut = int(cut)
    pre = Network(net.layers[:cut], net.input_shape)
    post = Network(net.layers[cut:], pre.output_shape)
    return SplitNetwork(pre=pre, post=post, cut_index=cut)


def stack_inputs(inputs, input_shape) -> np.ndarray:
    """Stack a list of samples (or an already batched array) into one batch."""
    if isinstance(inputs, np.ndarray) and inputs.shape[1:] == tuple(input_shape):
        return inputs.astype(np.float64, copy=False)
    batch = []
    for j, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != tuple(input_shape):
            raise ShapeError(f"sample {j}: shape {x.shape} does not match model input {tuple(input_shape)}")
        batch.append(x)
    return np.stack(batch) if batch else np.zeros((0, *input_shape))


def collect_features(pre: Network, inputs, batch_size: int = 256) -> np.ndarray:
    """Snapshot matrix ``(n_l, N)``: column ``j`` is the flattened pre-model
    output for sample ``j`` (row-major, channel-major for feature maps)."""
    x = stack_inputs(inputs, pre.input_shape)
    n_l = int(np.prod(pre.output_shape))
    out = np.empty((n_l, len(x)))
    for start in range(0, len(x), batch_size):
        chunk = pre(x[start:start + batch_size])
        out[:, start:start + len(chunk)] = chunk.reshape(len(chunk), n_l).T
    return out

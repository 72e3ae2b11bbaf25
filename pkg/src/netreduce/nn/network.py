"""Sequential networks: forward pass, reverse-mode gradients, (de)serialisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import fileformat
from ..errors import ContractError, ShapeError, ValidationError
from .layers import Conv2d, Flatten, Layer, Linear, MaxPool2d, ReLU, layer_from_record


@dataclass
class GradientBundle:
    """Parameter gradients per layer (same keys and shapes as ``layer.params()``)
    plus the gradient with respect to the network input."""

    params: list[dict[str, np.ndarray]]
    input: np.ndarray


class Network:
    """Composition ``f_L o ... o f_1`` of layers with a declared input shape."""

    def __init__(self, layers: list[Layer], input_shape):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self.shapes = shapes

    def __len__(self) -> int:
        return len(self.layers)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Network) and self.input_shape == other.input_shape
                and len(self.layers) == len(other.layers)
                and all(a == b for a, b in zip(self.layers, other.layers)))

    def __repr__(self) -> str:
        return f"Network(input_shape={self.input_shape}, layers={self.layers})"

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape:
            return x, False
        raise ShapeError(f"layer 0: input shape {x.shape} does not match declared {self.input_shape}")

    def forward(self, x) -> list[np.ndarray]:
        """Return ``[x, f_1(x), f_2(f_1(x)), ...]``; the last entry is the output.

        ``x`` is one sample of the declared input shape or a batch with a
        leading sample axis; the returned activations keep that form.
        """
        batch, single = self._as_batch(x)
        acts = [batch]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return [a[0] for a in acts] if single else acts

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[-1]

    def backward(self, activations: list[np.ndarray], grad_out) -> GradientBundle:
        """Reverse-mode gradients given the record from :meth:`forward`."""
        if len(activations) != len(self.layers) + 1:
            raise ContractError(
                f"activation record has {len(activations)} entries, expected {len(self.layers) + 1}"
            )
        grad = np.asarray(grad_out, dtype=np.float64)
        single = activations[0].shape == self.input_shape
        if single:
            activations = [a[None] for a in activations]
            grad = grad[None]
        for i, (a, shape) in enumerate(zip(activations, self.shapes)):
            if a.shape[1:] != shape:
                raise ContractError(f"activation {i} has shape {a.shape[1:]}, expected {shape}")
        if grad.shape != activations[-1].shape:
            raise ContractError(f"output gradient shape {grad.shape} does not match output {activations[-1].shape}")
        grads: list[dict[str, np.ndarray]] = [{} for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            grad, grads[i] = self.layers[i].backward(activations[i], activations[i + 1], grad)
        return GradientBundle(params=grads, input=grad[0] if single else grad)

    # serialisation ------------------------------------------------------

    def _artifact(self) -> tuple[dict, list[tuple[str, np.ndarray]]]:
        layers, arrays = [], []
        for i, layer in enumerate(self.layers):
            layers.append({"kind": layer.kind, **layer.hyper()})
            arrays.extend((f"{i}.{name}", value) for name, value in layer.params().items())
        fields = {"input_shape": list(self.input_shape), "n_layers": len(layers), "layers": layers}
        return fields, arrays


def forward(net: Network, x) -> list[np.ndarray]:
    return net.forward(x)


def backward(net: Network, activations: list[np.ndarray], grad_out) -> GradientBundle:
    return net.backward(activations, grad_out)


def save_model(net: Network, path) -> None:
    fields, arrays = net._artifact()
    fileformat.write_artifact(path, "network", fields, arrays)


def network_from_artifact(manifest: dict, arrays: dict[str, np.ndarray]) -> Network:
    try:
        records = manifest["layers"]
        n_layers = manifest["n_layers"]
        input_shape = manifest["input_shape"]
    except KeyError as exc:
        raise ValidationError(f"network manifest lacks field {exc}") from None
    if len(records) != n_layers:
        raise ValidationError(f"manifest declares {n_layers} layers but lists {len(records)}")
    used = set()
    layers = []
    for i, rec in enumerate(records):
        rec = dict(rec)
        kind = rec.pop("kind", None)
        params = {}
        for key, value in arrays.items():
            idx, _, pname = key.partition(".")
            if idx == str(i):
                params[pname] = value
                used.add(key)
        try:
            layers.append(layer_from_record(kind, rec, params))
        except (KeyError, ShapeError) as exc:
            raise ValidationError(f"layer {i} ({kind}): {exc}") from None
    if used != set(arrays):
        extra = sorted(set(arrays) - used)
        raise ValidationError(f"weight blobs {extra} do not belong to any of the {len(records)} manifest layers")
    try:
        return Network(layers, input_shape)
    except ShapeError as exc:
        raise ValidationError(str(exc)) from None


def load_model(path) -> Network:
    manifest, arrays = fileformat.read_artifact(path, kind="network")
    return network_from_artifact(manifest, arrays)


def storage_bytes(net: Network) -> int:
    """``4 * n_params + len(manifest) + 5`` (blob header), i.e. the saved size."""
    fields, arrays = net._artifact()
    return fileformat.stored_size("network", fields, arrays)


def round_to_float32(net: Network) -> Network:
    """Copy of ``net`` with weights rounded as they would be on disk."""
    fields, arrays = net._artifact()
    manifest, blob = fileformat.encode("network", fields, arrays)
    parsed = fileformat.parse_manifest(manifest)
    return network_from_artifact(parsed, fileformat.decode_blobs(parsed, blob))


def small_cnn(input_shape, n_class: int, rng: np.random.Generator,
              channels=(8, 16), hidden: int = 64) -> Network:
    """Two conv blocks (conv3x3, relu, maxpool2) then flatten, linear, relu, linear."""
    c, h, w = input_shape
    layers: list[Layer] = []
    for c_out in channels:
        layers += [Conv2d.init(c, c_out, 3, rng, padding=1), ReLU(), MaxPool2d(2)]
        c, h, w = c_out, h // 2, w // 2
    layers += [Flatten(), Linear.init(c * h * w, hidden, rng), ReLU(), Linear.init(hidden, n_class, rng)]
    return Network(layers, input_shape)


def mlp(input_shape, widths, rng: np.random.Generator) -> Network:
    """Flatten (if needed) then linear layers with ReLU between them."""
    n_in = int(np.prod(input_shape))
    layers: list[Layer] = [Flatten()] if len(input_shape) != 1 else []
    for i, n_out in enumerate(widths):
        layers.append(Linear.init(n_in, n_out, rng))
        if i < len(widths) - 1:
            layers.append(ReLU())
        n_in = n_out
    return Network(layers, input_shape)

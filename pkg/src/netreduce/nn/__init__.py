from .layers import Conv2d, Flatten, Layer, Linear, MaxPool2d, ReLU, Softplus, softplus
from .network import (
    GradientBundle,
    Network,
    backward,
    forward,
    load_model,
    mlp,
    round_to_float32,
    save_model,
    small_cnn,
    storage_bytes,
)

__all__ = [
    "Conv2d", "Flatten", "Layer", "Linear", "MaxPool2d", "ReLU", "Softplus", "softplus",
    "GradientBundle", "Network", "backward", "forward", "load_model", "mlp",
    "round_to_float32", "save_model", "small_cnn", "storage_bytes",
]

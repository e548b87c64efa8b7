"""Dense tanh networks with a multi-output head and exact reverse-mode gradients.

Weights are stored ``(out_dim, in_dim)`` so a layer computes ``W @ a + b``.
Every hidden layer applies ``tanh``; the output layer is affine. All
arithmetic is float64.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from utils import DimensionError, make_rng

DTYPE = np.float64


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.biases = np.asarray(self.biases, dtype=DTYPE)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"layer weights {self.weights.shape} and biases {self.biases.shape} do not match"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpNetwork:
    layers: List[LayerParams]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for j in range(len(self.layers) - 1):
            if self.layers[j].out_dim != self.layers[j + 1].in_dim:
                raise DimensionError(
                    f"layer {j} out_dim {self.layers[j].out_dim} != layer {j + 1} "
                    f"in_dim {self.layers[j + 1].in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        outputs, _ = forward_batch(self, points)
        return outputs

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.biases])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpNetwork":
        if len(params) != 2 * len(self.layers):
            raise DimensionError("parameter list does not match layer count")
        layers = []
        for j, layer in enumerate(self.layers):
            weights, biases = params[2 * j], params[2 * j + 1]
            if weights.shape != layer.weights.shape or biases.shape != layer.biases.shape:
                raise DimensionError(f"parameter shapes changed for layer {j}")
            layers.append(LayerParams(weights.copy(), biases.copy()))
        return MlpNetwork(layers)


@dataclass
class GradientBuffer:
    weight_grads: List[np.ndarray]
    bias_grads: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, net: MlpNetwork) -> "GradientBuffer":
        return cls(
            [np.zeros_like(layer.weights) for layer in net.layers],
            [np.zeros_like(layer.biases) for layer in net.layers],
        )

    def zero(self) -> None:
        for grad in self.weight_grads + self.bias_grads:
            grad.fill(0.0)

    def accumulate(self, other: "GradientBuffer") -> None:
        for mine, theirs in zip(self.weight_grads, other.weight_grads):
            mine += theirs
        for mine, theirs in zip(self.bias_grads, other.bias_grads):
            mine += theirs

    def scale(self, factor: float) -> None:
        for grad in self.weight_grads + self.bias_grads:
            grad *= factor

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w_grad, b_grad in zip(self.weight_grads, self.bias_grads):
            out.extend([w_grad, b_grad])
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_xavier_normal(shape_spec: Sequence[int], rng_seed: int) -> MlpNetwork:
    """Xavier-normal weights (std ``sqrt(2 / (fan_in + fan_out))``), zero biases."""
    dims = [int(d) for d in shape_spec]
    if len(dims) < 2:
        raise DimensionError("shape_spec needs an input and an output dimension")
    if any(d < 1 for d in dims):
        raise DimensionError(f"layer dimensions must be >= 1, got {dims}")
    rng = make_rng(int(rng_seed) % 2**64)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights = rng.normal(0.0, std, size=(fan_out, fan_in))
        layers.append(LayerParams(weights, np.zeros(fan_out, dtype=DTYPE)))
    return MlpNetwork(layers)


def parameter_count(net: MlpNetwork) -> int:
    return sum(layer.weights.size + layer.biases.size for layer in net.layers)


def _as_batch(net: MlpNetwork, points) -> np.ndarray:
    points = np.asarray(points, dtype=DTYPE)
    if points.ndim == 1:
        points = points.reshape(-1, net.input_dim) if net.input_dim > 1 else points.reshape(-1, 1)
    if points.ndim != 2 or points.shape[1] != net.input_dim:
        raise DimensionError(f"expected points with {net.input_dim} components, got shape {points.shape}")
    return points


def forward_batch(net: MlpNetwork, points) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Evaluate ``n`` points at once; returns ``(outputs (n, M), cache)``.

    The cache holds the input of every layer and is what ``backward_batch``
    needs.
    """
    activation = _as_batch(net, points)
    cache = []
    last = len(net.layers) - 1
    for j, layer in enumerate(net.layers):
        cache.append(activation)
        z = activation @ layer.weights.T + layer.biases
        activation = np.tanh(z) if j < last else z
    return activation, cache


def backward_batch(net: MlpNetwork, cache: List[np.ndarray], cotangents: np.ndarray) -> GradientBuffer:
    """Gradient of ``sum(cotangents * outputs)`` with respect to all parameters."""
    grad_out = np.asarray(cotangents, dtype=DTYPE)
    n_points = cache[0].shape[0]
    if grad_out.shape != (n_points, net.output_dim):
        raise DimensionError(
            f"cotangent shape {grad_out.shape} does not match outputs ({n_points}, {net.output_dim})"
        )
    weight_grads = [None] * len(net.layers)
    bias_grads = [None] * len(net.layers)
    for j in range(len(net.layers) - 1, -1, -1):
        layer_input = cache[j]
        weight_grads[j] = grad_out.T @ layer_input
        bias_grads[j] = grad_out.sum(axis=0)
        if j > 0:
            # layer_input is tanh of the previous pre-activation
            grad_out = (grad_out @ net.layers[j].weights) * (1.0 - layer_input ** 2)
    return GradientBuffer(weight_grads, bias_grads)


def forward(net: MlpNetwork, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=DTYPE))
    if x.shape != (net.input_dim,):
        raise DimensionError(f"expected a point with {net.input_dim} components, got {x.shape}")
    outputs, _ = forward_batch(net, x.reshape(1, -1))
    return outputs[0]


def backward(net: MlpNetwork, x, output_cotangent) -> GradientBuffer:
    x = np.atleast_1d(np.asarray(x, dtype=DTYPE))
    if x.shape != (net.input_dim,):
        raise DimensionError(f"expected a point with {net.input_dim} components, got {x.shape}")
    cotangent = np.asarray(output_cotangent, dtype=DTYPE)
    if cotangent.shape != (net.output_dim,):
        raise DimensionError(f"cotangent length {cotangent.shape} != M={net.output_dim}")
    _, cache = forward_batch(net, x.reshape(1, -1))
    return backward_batch(net, cache, cotangent.reshape(1, -1))


def dump_parameters(net: MlpNetwork) -> bytes:
    """Header ``dims=a,b,...`` then little-endian float64, weights row-major before biases."""
    header = ("dims=" + ",".join(str(d) for d in net.dims) + "\n").encode("ascii")
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in net.parameters()
    )
    return header + body


def load_parameters(blob: bytes) -> Tuple[MlpNetwork, bytes]:
    """Inverse of ``dump_parameters``; returns the network and the unread tail."""
    newline = blob.find(b"\n")
    header = blob[:newline].decode("ascii", errors="replace") if newline >= 0 else ""
    if not header.startswith("dims="):
        raise DimensionError("parameter blob has no dims header")
    try:
        dims = [int(d) for d in header[len("dims="):].split(",")]
    except ValueError:
        raise DimensionError(f"unreadable dims header {header!r}")
    offset = newline + 1
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n_w, n_b = fan_in * fan_out, fan_out
        # truncated blobs stop here instead of inside numpy
        if len(blob) < offset + 8 * (n_w + n_b):
            raise DimensionError(f"parameter blob truncated: layer {len(layers)} needs {n_w + n_b} values")
        values = np.frombuffer(blob, dtype="<f8", count=n_w + n_b, offset=offset).astype(DTYPE)
        offset += 8 * (n_w + n_b)
        layers.append(LayerParams(values[:n_w].reshape(fan_out, fan_in), values[n_w:].copy()))
    return MlpNetwork(layers), blob[offset:]

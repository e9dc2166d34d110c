"""Minimal network substrate: layers, forward passes, norms, perturbation and checkpoints.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Dense weights are stored as
``(fan_out, fan_in)`` and conv weights as ``(c_out, c_in, k, k)``; conv layers use stride 1
and zero "same" padding, so their flattened input and output sizes are ``channels * h * w``.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

DENSE = "dense"
CONV2D = "conv2d"
LAYER_KINDS = (DENSE, CONV2D)

ISOTROPIC = "isotropic"
MAGNITUDE_AWARE = "magnitude_aware"
PERTURBATION_MODES = (ISOTROPIC, MAGNITUDE_AWARE)

SPECTRAL_TOL = 1e-6
SPECTRAL_MAX_ITER = 10_000
SPECTRAL_SEED = 0
DEFAULT_MAP_CAP = 4096

CHECKPOINT_FORMAT = "robustgen-checkpoint"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class MapTooLargeError(ValueError):
    """Raised when a linear map is too large to materialize."""


class ConvergenceError(RuntimeError):
    """Raised when power iteration hits its iteration cap."""

    def __init__(self, message: str, estimate: float, iterations: int):
        super().__init__(message)
        self.estimate = estimate
        self.iterations = iterations


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be parsed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(CheckpointError):
    """Raised when a checkpoint was written by an incompatible format version."""


def _as_tensor(values: Any, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite entries")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class LayerSpec:
    """Shape description of one weight layer."""

    kind: str
    fan_in: int
    fan_out: int
    kernel_size: Optional[int] = None
    has_bias: bool = True
    input_hw: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unsupported layer kind: {self.kind}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise DimensionError("fan_in and fan_out must be positive")
        if self.kind == DENSE:
            object.__setattr__(self, "kernel_size", None)
            object.__setattr__(self, "input_hw", None)
            return
        if self.kernel_size is None or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise DimensionError("conv2d layers need a positive odd kernel_size")
        if self.input_hw is None or len(self.input_hw) != 2 or min(self.input_hw) < 1:
            raise DimensionError("conv2d layers need a positive (height, width) input_hw")
        object.__setattr__(self, "input_hw", (int(self.input_hw[0]), int(self.input_hw[1])))

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == DENSE:
            return (self.fan_out, self.fan_in)
        return (self.fan_out, self.fan_in, self.kernel_size, self.kernel_size)

    @property
    def spatial_size(self) -> int:
        if self.kind == DENSE:
            return 1
        return self.input_hw[0] * self.input_hw[1]

    @property
    def in_features(self) -> int:
        return self.fan_in * self.spatial_size

    @property
    def out_features(self) -> int:
        return self.fan_out * self.spatial_size

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "fan_in": self.fan_in,
            "fan_out": self.fan_out,
            "kernel_size": self.kernel_size,
            "has_bias": self.has_bias,
            "input_hw": list(self.input_hw) if self.input_hw else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LayerSpec":
        input_hw = data.get("input_hw")
        return cls(
            kind=data["kind"],
            fan_in=int(data["fan_in"]),
            fan_out=int(data["fan_out"]),
            kernel_size=data.get("kernel_size"),
            has_bias=bool(data.get("has_bias", True)),
            input_hw=tuple(input_hw) if input_hw else None,
        )


@dataclass(frozen=True, eq=False)
class Layer:
    """A weight layer: its spec, weight tensor and optional bias."""

    spec: LayerSpec
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        weight = _as_tensor(self.weight, "weight")
        if weight.shape != self.spec.weight_shape:
            raise DimensionError(
                f"weight shape {weight.shape} does not match {self.spec.weight_shape}"
            )
        object.__setattr__(self, "weight", weight)
        if self.spec.has_bias:
            bias = np.zeros(self.spec.fan_out) if self.bias is None else self.bias
            bias = _as_tensor(bias, "bias")
            if bias.shape != (self.spec.fan_out,):
                raise DimensionError(f"bias shape {bias.shape} does not match fan_out")
            object.__setattr__(self, "bias", bias)
        elif self.bias is not None:
            raise DimensionError("bias given for a layer declared without bias")

    @property
    def num_params(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def apply_linear(self, x: np.ndarray) -> np.ndarray:
        """Apply the weight map (no bias) to a (batch, in_features) array."""
        if self.spec.kind == DENSE:
            return x @ self.weight.T
        h, w = self.spec.input_hw
        images = x.reshape(x.shape[0], self.spec.fan_in, h, w)
        out = np.zeros((x.shape[0], self.spec.fan_out, h, w))
        for b in range(x.shape[0]):
            for co in range(self.spec.fan_out):
                for ci in range(self.spec.fan_in):
                    out[b, co] += signal.correlate2d(
                        images[b, ci], self.weight[co, ci], mode="same", boundary="fill"
                    )
        return out.reshape(x.shape[0], -1)

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Apply the transpose of the weight map to a (batch, out_features) array."""
        if self.spec.kind == DENSE:
            return y @ self.weight
        h, w = self.spec.input_hw
        maps = y.reshape(y.shape[0], self.spec.fan_out, h, w)
        out = np.zeros((y.shape[0], self.spec.fan_in, h, w))
        for b in range(y.shape[0]):
            for ci in range(self.spec.fan_in):
                for co in range(self.spec.fan_out):
                    # odd kernels: "same" convolution is the exact adjoint of "same" correlation
                    out[b, ci] += signal.convolve2d(
                        maps[b, co], self.weight[co, ci], mode="same", boundary="fill"
                    )
        return out.reshape(y.shape[0], -1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = self.apply_linear(x)
        if self.bias is None:
            return out
        return out + np.repeat(self.bias, self.spec.spatial_size)


@dataclass(frozen=True, eq=False)
class Network:
    """ReLU network: weight layers with their initial values retained."""

    layers: tuple[Layer, ...]
    init_layers: tuple[Layer, ...] = field(default=())

    def __post_init__(self):
        layers = tuple(self.layers)
        init_layers = tuple(self.init_layers) if self.init_layers else layers
        if not layers:
            raise DimensionError("a network needs at least one layer")
        if len(init_layers) != len(layers):
            raise DimensionError("init_layers must match layers one to one")
        for layer, init in zip(layers, init_layers):
            if layer.spec != init.spec:
                raise DimensionError("initial weights must share the layer specs")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.spec.out_features != nxt.spec.in_features:
                raise DimensionError(
                    f"layer output size {prev.spec.out_features} does not feed "
                    f"next input size {nxt.spec.in_features}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "init_layers", init_layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].spec.in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].spec.out_features

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return tuple(layer.spec for layer in self.layers)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """A network together with its run metadata (config id, seed, ...)."""

    network: Network
    metadata: dict[str, Any] = field(default_factory=dict)


def forward(net: Network, inputs: Any) -> np.ndarray:
    """Return one logit vector per input row (a 1-D input gives a 1-D output)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.size == 0:
        # an empty batch, whatever its shape
        x = x.reshape(0, net.in_features)
    single = x.ndim == 1
    if single:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != net.in_features:
        raise DimensionError(
            f"input of shape {np.shape(inputs)} does not match {net.in_features} input features"
        )
    last = net.depth - 1
    for index, layer in enumerate(net.layers):
        x = layer.apply(x)
        if index < last:
            x = np.maximum(x, 0.0)
    return x[0] if single else x


def square_weights(net: Network) -> Network:
    """Return the network with every weight and bias replaced by its square."""
    layers = tuple(
        Layer(
            layer.spec,
            np.square(layer.weight),
            None if layer.bias is None else np.square(layer.bias),
        )
        for layer in net.layers
    )
    return Network(layers, net.init_layers)


def forward_squared_ones(net: Network) -> np.ndarray:
    """Evaluate the squared-weight network on an all-ones input."""
    return forward(square_weights(net), np.ones(net.in_features))


def frobenius_norm_sq(t: Any) -> float:
    return float(np.sum(np.square(np.asarray(t, dtype=np.float64))))


def _linear_layer(spec: LayerSpec, weight: Any) -> Layer:
    return Layer(replace(spec, has_bias=False), weight)


def spectral_norm(
    spec: LayerSpec,
    weight: Any,
    *,
    tol: float = SPECTRAL_TOL,
    max_iter: int = SPECTRAL_MAX_ITER,
    seed: int = SPECTRAL_SEED,
) -> float:
    """
    Largest singular value of a layer's linear map, by power iteration on W^T W.

    The bias is not part of the map. Iteration stops once successive estimates agree to
    ``tol**2`` relative; hitting ``max_iter`` raises ConvergenceError with the estimate.
    """
    layer = _linear_layer(spec, weight)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(spec.in_features)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for iteration in range(1, max_iter + 1):
        u = layer.apply_linear(v[np.newaxis, :])[0]
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0:
            return 0.0
        if abs(sigma - estimate) <= tol * tol * sigma:
            return sigma
        estimate = sigma
        w = layer.apply_adjoint(u[np.newaxis, :])[0]
        v = w / np.linalg.norm(w)
    raise ConvergenceError(
        f"power iteration did not converge after {max_iter} iterations",
        estimate=estimate,
        iterations=max_iter,
    )


def materialize_linear_map(
    spec: LayerSpec, weight: Any, cap: int = DEFAULT_MAP_CAP
) -> np.ndarray:
    """Return M with M @ vec(x) == layer(x), built by probing with basis vectors."""
    entries = spec.in_features * spec.out_features
    if entries > cap:
        raise MapTooLargeError(
            f"map of {spec.out_features}x{spec.in_features} exceeds the cap of {cap} entries"
        )
    layer = _linear_layer(spec, weight)
    return layer.apply_linear(np.eye(spec.in_features)).T


def count_params(net: Network) -> int:
    return sum(layer.num_params for layer in net.layers)


def _flatten(layers: Sequence[Layer]) -> np.ndarray:
    parts = []
    for layer in layers:
        parts.append(layer.weight.ravel())
        if layer.bias is not None:
            parts.append(layer.bias)
    return np.concatenate(parts)


def flat_params(net: Network) -> np.ndarray:
    """The parameter vector w = vec(W_1, b_1, ..., W_d, b_d)."""
    return _flatten(net.layers)


def flat_init_params(net: Network) -> np.ndarray:
    return _flatten(net.init_layers)


def with_flat_params(net: Network, vector: np.ndarray) -> Network:
    """Return a copy of ``net`` whose current parameters are taken from ``vector``."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (count_params(net),):
        raise DimensionError("parameter vector length does not match the network")
    layers = []
    offset = 0
    for layer in net.layers:
        size = layer.weight.size
        weight = vector[offset : offset + size].reshape(layer.spec.weight_shape)
        offset += size
        bias = None
        if layer.bias is not None:
            bias = vector[offset : offset + layer.spec.fan_out]
            offset += layer.spec.fan_out
        layers.append(Layer(layer.spec, weight, bias))
    return Network(tuple(layers), net.init_layers)


def perturbation_scale(
    net: Network, sigma: float, mode: str = ISOTROPIC, epsilon: float = 0.0
) -> np.ndarray:
    """Per-parameter standard deviation of the Gaussian perturbation."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    w = flat_params(net)
    if mode == ISOTROPIC:
        return np.full(w.shape, float(sigma))
    if mode == MAGNITUDE_AWARE:
        return np.sqrt(sigma**2 * np.square(w) + epsilon**2)
    raise ValueError(f"Unsupported perturbation mode {mode!r}; choose from {PERTURBATION_MODES}")


def perturb_with_noise(
    net: Network, sigma: float, noise: np.ndarray, mode: str = ISOTROPIC, epsilon: float = 0.0
) -> Network:
    """Perturb with a given standard-normal draw (common random numbers across sigmas)."""
    scale = perturbation_scale(net, sigma, mode, epsilon)
    return with_flat_params(net, flat_params(net) + scale * noise)


def perturb(
    net: Network,
    sigma: float,
    mode: str = ISOTROPIC,
    epsilon: float = 0.0,
    rng_seed: int = 0,
) -> Network:
    """Return a Gaussian-perturbed copy of ``net``; the original is left untouched."""
    noise = np.random.default_rng(rng_seed).standard_normal(count_params(net))
    return perturb_with_noise(net, sigma, noise, mode, epsilon)


def _tensor_to_json(array: Optional[np.ndarray]) -> Optional[dict[str, Any]]:
    if array is None:
        return None
    return {"shape": list(array.shape), "data": [float(x) for x in array.ravel()]}


def _tensor_from_json(data: Optional[dict[str, Any]]) -> Optional[np.ndarray]:
    if data is None:
        return None
    shape = tuple(int(n) for n in data["shape"])
    values = data["data"]
    if int(np.prod(shape)) != len(values):
        raise CheckpointError(f"tensor data length {len(values)} does not match shape {shape}")
    return np.array(values, dtype=np.float64).reshape(shape)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """Write a checkpoint as versioned JSON (floats round-trip exactly through repr)."""
    net = checkpoint.network
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": checkpoint.metadata,
        "layers": [
            {
                "spec": layer.spec.to_dict(),
                "weight": _tensor_to_json(layer.weight),
                "bias": _tensor_to_json(layer.bias),
                "init_weight": _tensor_to_json(init.weight),
                "init_bias": _tensor_to_json(init.bias),
            }
            for layer, init in zip(net.layers, net.init_layers)
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, allow_nan=False), encoding="ascii")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise CheckpointError("checkpoint is not ASCII JSON", offset=e.start) from e
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint: {e.msg}", offset=e.pos) from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a robustgen checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        layers = []
        init_layers = []
        for entry in payload["layers"]:
            spec = LayerSpec.from_dict(entry["spec"])
            layers.append(
                Layer(spec, _tensor_from_json(entry["weight"]), _tensor_from_json(entry["bias"]))
            )
            init_layers.append(
                Layer(
                    spec,
                    _tensor_from_json(entry["init_weight"]),
                    _tensor_from_json(entry["init_bias"]),
                )
            )
        network = Network(tuple(layers), tuple(init_layers))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint structure: {e}") from e
    return Checkpoint(network=network, metadata=dict(payload.get("metadata") or {}))

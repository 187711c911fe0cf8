"""Small fully-connected networks with exact analytic gradients.

Parameters live in a single flat float64 array so that optimizer steps,
target-network blends, and gradient projections are plain vector arithmetic.
Weights are stored row-major per layer as W (out, in) followed by the bias
(out,), so W[i, j] couples output i to input j.

forward/backward accept a single input vector or a (batch, dim) matrix; in
batch mode the parameter gradient is summed over the batch and the input
gradient is returned per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_ACTIVATIONS = ("tanh", "relu")
_OUTPUT_ACTIVATIONS = ("linear", "tanh")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes plus hidden/output activation choice."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(n <= 0 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in _OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def shapes(self) -> list[tuple[int, int]]:
        """Per-layer weight shapes (out, in)."""
        return [
            (self.layer_sizes[i + 1], self.layer_sizes[i])
            for i in range(self.n_layers)
        ]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes())

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d["activation"], d["output_activation"])


@dataclass
class ParamVector:
    """Flat parameter storage with the per-layer shape table."""

    values: np.ndarray
    shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shapes = tuple((int(o), int(i)) for o, i in self.shapes)
        expected = sum(o * i + o for o, i in self.shapes)
        if self.values.shape != (expected,):
            raise ValueError(
                f"flat parameter length {self.values.shape} does not match "
                f"shape table total {expected}"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) per layer into the flat array; writes pass through."""
        out = []
        k = 0
        for o, i in self.shapes:
            W = self.values[k : k + o * i].reshape(o, i)
            k += o * i
            b = self.values[k : k + o]
            k += o
            out.append((W, b))
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.shapes)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.shapes)


def flatten(shapes, layers) -> np.ndarray:
    """Pack a list of (W, b) arrays into one flat vector (exact, no rounding)."""
    parts = []
    for (o, i), (W, b) in zip(shapes, layers):
        parts.append(np.asarray(W, dtype=np.float64).reshape(o * i))
        parts.append(np.asarray(b, dtype=np.float64).reshape(o))
    return np.concatenate(parts)


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Uniform(-1, 1)/sqrt(fan_in) weights, zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    shapes = tuple(spec.shapes())
    values = np.zeros(spec.n_params)
    pv = ParamVector(values, shapes)
    for W, b in pv.layers():
        bound = 1.0 / np.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = 0.0
    return pv


def _check_input(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input shape {x.shape} incompatible with spec input dim {spec.input_dim}")
    return x, single


def _apply(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z  # linear


def _deriv_from_output(name: str, a: np.ndarray) -> np.ndarray | None:
    """Activation derivative expressed through the activation output."""
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return None  # linear: derivative 1


def forward_cached(spec: MlpSpec, params: ParamVector, x):
    """Forward pass keeping per-layer inputs/outputs for a later backward."""
    h, single = _check_input(spec, x)
    layer_io = []
    layers = params.layers()
    last = len(layers) - 1
    for idx, (W, b) in enumerate(layers):
        z = h @ W.T + b
        act = spec.output_activation if idx == last else spec.activation
        a = _apply(act, z)
        layer_io.append((h, a))
        h = a
    return (h[0] if single else h), (layer_io, single)


def forward(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    """Deterministic affine-plus-activation composition."""
    y, _ = forward_cached(spec, params, x)
    return y


def backward_from_cache(
    spec: MlpSpec,
    params: ParamVector,
    cache,
    output_grad,
    need_param_grad: bool = True,
):
    """Gradients of sum(output_grad * forward(x)) w.r.t. params and input."""
    layer_io, single = cache
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != layer_io[-1][1].shape:
        raise ValueError(
            f"output_grad shape {g.shape} does not match output {layer_io[-1][1].shape}"
        )
    layers = params.layers()
    last = len(layers) - 1
    grad = params.zeros_like() if need_param_grad else None
    grad_layers = grad.layers() if need_param_grad else None
    for idx in range(last, -1, -1):
        h_in, a_out = layer_io[idx]
        act = spec.output_activation if idx == last else spec.activation
        d = _deriv_from_output(act, a_out)
        gz = g if d is None else g * d
        if need_param_grad:
            gW, gb = grad_layers[idx]
            gW += gz.T @ h_in
            gb += gz.sum(axis=0)
        g = gz @ layers[idx][0]
    input_grad = g[0] if single else g
    return grad, input_grad


def backward(spec: MlpSpec, params: ParamVector, x, output_grad):
    """Exact reverse-mode gradients; see backward_from_cache for the math."""
    _, cache = forward_cached(spec, params, x)
    return backward_from_cache(spec, params, cache, output_grad)


class Adam:
    """Adam on a flat parameter array.  State is part of training, not of
    checkpoints: evaluation never touches it."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> None:
        """Descend `values` in place along `grad`."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def save_mlp(path, spec: MlpSpec, params: ParamVector) -> None:
    """Self-describing single-network container (npz with a JSON header)."""
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "spec": spec.to_dict()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), values=params.values)


def load_mlp(path) -> tuple[MlpSpec, ParamVector]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {meta.get('format_version')}")
        spec = MlpSpec.from_dict(meta["spec"])
        values = np.array(data["values"], dtype=np.float64)
    return spec, ParamVector(values, tuple(spec.shapes()))

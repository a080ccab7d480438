"""Dense MLP with hand-written backprop, stable softmax helpers and Adam.

Everything here works in float64. Weight matrices are stored ``(out, in)`` so
that row ``r`` of a layer produces output ``r``; the policy code relies on that
to address individual logit rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    """Raised by :class:`Adam` when a gradient entry is NaN or infinite."""

    def __init__(self, name: str, index: tuple, value: float):
        self.name = name
        self.index = index
        self.value = value
        super().__init__(f"non-finite gradient {value!r} in {name!r} at {index}")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for idx, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r} in layer {idx}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {idx}: weight {w.shape} and bias {b.shape} do not match")
            if idx and w.shape[1] != self.weights[idx - 1].shape[0]:
                raise ShapeError(
                    f"layer {idx} expects {w.shape[1]} inputs but layer {idx - 1} "
                    f"emits {self.weights[idx - 1].shape[0]}"
                )

    @classmethod
    def init(cls, sizes, rng, output_scale=1.0, hidden="relu", output="identity"):
        """He-normal weights, zero biases. ``output_scale`` shrinks the last layer."""
        weights, biases, acts = [], [], []
        n_layers = len(sizes) - 1
        for idx in range(n_layers):
            fan_in, fan_out = sizes[idx], sizes[idx + 1]
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            last = idx == n_layers - 1
            if last:
                w *= output_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
            acts.append(output if last else hidden)
        return cls(weights, biases, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        """The parameter arrays themselves (not copies), keyed ``prefix.W0`` etc."""
        out = {}
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{idx}"] = w
            out[f"{prefix}.b{idx}"] = b
        return out

    def copy(self) -> MlpParams:
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def zeros_like(self) -> MlpParams:
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )


@dataclass
class MlpCache:
    params_id: int
    shapes: tuple
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    squeeze: bool


def _shapes(params: MlpParams) -> tuple:
    return tuple(w.shape for w in params.weights)


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    """Run the network on a single input ``(in,)`` or a batch ``(B, in)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input {params.in_dim}")
    inputs, preacts = [], []
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    cache = MlpCache(id(params), _shapes(params), inputs, preacts, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(params: MlpParams, cache: MlpCache, grad_output) -> tuple[MlpParams, np.ndarray]:
    """Reverse pass. Parameter gradients are summed over the batch."""
    if cache.params_id != id(params) or cache.shapes != _shapes(params):
        raise ShapeError("cache was produced by a different network")
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ShapeError(f"grad_output shape {g.shape} does not match output {cache.preacts[-1].shape}")
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for idx in range(n_layers - 1, -1, -1):
        if params.activations[idx] == "relu":
            g = g * (cache.preacts[idx] > 0.0)
        grad_w[idx] = g.T @ cache.inputs[idx]
        grad_b[idx] = g.sum(axis=0)
        g = g @ params.weights[idx]
    grads = MlpParams(grad_w, grad_b, list(params.activations))
    return grads, (g[0] if cache.squeeze else g)


def logsumexp(x, axis=-1, keepdims=False):
    x = np.asarray(x, dtype=np.float64)
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def normal_log_density(x, mu, log_sigma):
    z = (x - mu) * np.exp(-log_sigma)
    return -0.5 * z * z - log_sigma - LOG_SQRT_2PI


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place.

    Moments are created lazily per key, so one optimizer can cover the policy,
    its particles and the value network at once. Each entry keeps its own step
    count for bias correction: after ``reset`` an entry restarts like a fresh
    parameter instead of taking a ``sqrt(1 - beta2) / (1 - beta1)``-inflated step.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if params[name].shape != np.shape(g):
                raise ShapeError(f"{name}: gradient {np.shape(g)} vs parameter {params[name].shape}")
            bad = ~np.isfinite(g)
            if bad.any():
                index = tuple(int(i) for i in np.argwhere(bad)[0])
                raise NonFiniteGradientError(name, index, float(np.asarray(g)[index]))
        self.step_count += 1
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = np.zeros_like(p)
            m, v, t = self.m[name], self.v[name], self.t[name]
            t += 1.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            corr1 = 1.0 - self.beta1**t
            corr2 = 1.0 - self.beta2**t
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def reset(self, name: str, index) -> None:
        """Zero both moments (and the entry's step count) at ``index`` of ``name``; no-op if untouched."""
        if name in self.m:
            self.m[name][index] = 0.0
            self.v[name][index] = 0.0
            self.t[name][index] = 0.0

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
            out[f"adam.t.{name}"] = self.t[name]
        return out

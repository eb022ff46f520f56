"""
Minimal differentiable building blocks: dense layers, MLPs, Adam and a
finite-difference gradient checker.

Shapes follow the usual convention of a weight matrix ``W`` of shape
``(out, in)`` so that a dense layer computes ``y = x @ W.T + b``. Inputs may be
a single vector ``(in,)`` or a batch ``(batch, in)``.

Gradients are returned as objects with the same structure as the parameters
(an ``Mlp`` of gradients for an ``Mlp``), and every parameter container can be
flattened into an ordered ``dict[str, np.ndarray]`` via ``tensors()``. The
optimizer and the checkpoint format both work on those flat dicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError, UsageError

Tensors = dict[str, np.ndarray]

ACTIVATIONS = ("relu", "tanh", "identity")


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    return a


def _activate_grad(kind: str, a: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (a > 0.0)
    if kind == "tanh":
        return g * (1.0 - y * y)
    return g


@dataclass(frozen=True)
class DenseParams:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError(
                f"dense shapes inconsistent: W{self.weights.shape} b{self.bias.shape}"
            )


@dataclass
class MlpTape:
    """Values recorded by ``Mlp.forward`` for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


@dataclass(frozen=True)
class Mlp:
    layers: tuple[DenseParams, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.activations) or not self.layers:
            raise ConfigurationError("need one activation tag per layer")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {tag!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weights.shape[0] != nxt.weights.shape[1]:
                raise ConfigurationError("consecutive layer dimensions do not match")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input dimension {x.shape} does not match MLP input {self.in_dim}"
            )
        tape = MlpTape(squeeze=squeeze)
        for layer, kind in zip(self.layers, self.activations):
            tape.inputs.append(h)
            a = h @ layer.weights.T + layer.bias
            h = _activate(kind, a)
            tape.pre.append(a)
            tape.post.append(h)
        return (h[0] if squeeze else h), tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: MlpTape | None, upstream: np.ndarray) -> tuple[Mlp, np.ndarray]:
        """Reverse-mode pass. Returns (parameter gradients as an Mlp, input gradient)."""
        if tape is None or len(tape.inputs) != len(self.layers):
            raise UsageError("backward called without a matching forward pass")
        g = np.asarray(upstream, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != tape.post[-1].shape:
            raise ConfigurationError(f"upstream gradient shape {g.shape} != output {tape.post[-1].shape}")
        grads: list[DenseParams] = []
        for layer, kind, x, a, y in zip(
            reversed(self.layers), reversed(self.activations),
            reversed(tape.inputs), reversed(tape.pre), reversed(tape.post),
        ):
            g = _activate_grad(kind, a, y, g)
            grads.append(DenseParams(g.T @ x, g.sum(axis=0)))
            g = g @ layer.weights
        grad_mlp = Mlp(tuple(reversed(grads)), self.activations)
        return grad_mlp, (g[0] if tape.squeeze else g)

    def tensors(self, prefix: str) -> Tensors:
        out: Tensors = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weights
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str,
                     activations: Sequence[str]) -> Mlp:
        layers = []
        for i in range(len(activations)):
            try:
                w = tensors[f"{prefix}.{i}.weight"]
                b = tensors[f"{prefix}.{i}.bias"]
            except KeyError as exc:
                raise ConfigurationError(f"missing tensor {exc.args[0]}") from None
            layers.append(DenseParams(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)))
        return cls(tuple(layers), tuple(activations))

    def zeros_like(self) -> Mlp:
        return Mlp(
            tuple(DenseParams(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in self.layers),
            self.activations,
        )


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], hidden: str = "relu",
             output: str = "identity", final_std: float | None = None) -> Mlp:
    """Build an MLP with uniform fan-in initialisation.

    ``sizes`` lists every layer width including input and output. When
    ``final_std`` is given the last layer weights are drawn from N(0, final_std²)
    and its bias is zero.
    """
    if len(sizes) < 2:
        raise ConfigurationError("an MLP needs at least an input and an output size")
    layers = []
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        if i == n - 1 and final_std is not None:
            w = rng.normal(0.0, final_std, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(DenseParams(w, b))
    acts = tuple([hidden] * (n - 1) + [output])
    return Mlp(tuple(layers), acts)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and d(loss_row)/d(logits)."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad


# --------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class AdamState:
    step: int
    m: Tensors
    v: Tensors
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(0, zeros, {k: z.copy() for k, z in zeros.items()}, lr, beta1, beta2, eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[Tensors, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ConfigurationError("parameter, gradient and optimizer keys differ")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ConfigurationError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(t, new_m, new_v, state.lr, b1, b2, state.eps)


# --------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f: Callable[[Tensors], tuple[float, Tensors]], params: Mapping[str, np.ndarray],
                      h: float = 1e-5, tiny: float = 1e-6, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(loss, grads)``. With ``max_entries`` only a
    random subset of coordinates per tensor is probed.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = f(params)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
        for j in flat_idx:
            idx = np.unravel_index(j, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            up = f(params)[0]
            p[idx] = orig - h
            down = f(params)[0]
            p[idx] = orig
            cd = (up - down) / (2.0 * h)
            a = analytic[name][idx]
            worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + tiny))
    return worst


def tensors_checksum(tensors: Mapping[str, np.ndarray]) -> str:
    """Stable content hash of a tensor dict (names, shapes and raw bytes)."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()

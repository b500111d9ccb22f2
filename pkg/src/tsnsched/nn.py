"""Small dense networks in float64 numpy with hand-written reverse mode.

Batches are row-major: inputs have shape ``(batch, features)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh")


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ParamSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have one entry per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input {w.shape[0]} does not follow layer {i - 1}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        tuple(self.activations))

    def zeros_like(self) -> "ParamSet":
        return ParamSet([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases],
                        tuple(self.activations))

    def touch(self) -> None:
        self.version += 1

    def to_dict(self) -> dict:
        return {"activations": list(self.activations),
                "layers": [{"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                           for w, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_dict(cls, data: dict) -> "ParamSet":
        ws, bs = [], []
        for layer in data["layers"]:
            ws.append(np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"]))
            bs.append(np.array(layer["bias"], dtype=np.float64))
        return cls(ws, bs, tuple(data["activations"]))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             final_scale: float = 1.0) -> ParamSet:
    """Glorot-uniform weights, zero biases; the last layer is scaled by ``final_scale``."""
    ws = [glorot(rng, a, b) for a, b in zip(sizes, sizes[1:])]
    ws[-1] *= final_scale
    bs = [np.zeros(b) for b in sizes[1:]]
    return ParamSet(ws, bs, tuple(activations))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, y, dy):
    if name == "relu":
        return dy * (z > 0)
    if name == "tanh":
        return dy * (1.0 - y * y)
    return dy


@dataclass
class Cache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    outputs: list[np.ndarray]
    version: int
    params_id: int


def forward(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.in_dim:
        raise ValueError(f"input has {h.shape[1]} features, network expects {params.in_dim}")
    inputs, pre, outs = [], [], []
    for w, b, a in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        z = h @ w + b
        h = _act(a, z)
        pre.append(z)
        outs.append(h)
    cache = Cache(inputs, pre, outs, params.version, id(params))
    return (h[0] if single else h), cache


def predict(params: ParamSet, x: np.ndarray) -> np.ndarray:
    return forward(params, x)[0]


def backward(params: ParamSet, cache: Cache, dy: np.ndarray) -> tuple[ParamSet, np.ndarray]:
    """Gradients of a scalar loss w.r.t. parameters and input, given dloss/doutput."""
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("cache does not belong to the current parameters")
    dy = np.asarray(dy, dtype=np.float64)
    g = dy[None, :] if dy.ndim == 1 else dy
    grads = params.zeros_like()
    for i in reversed(range(len(params.weights))):
        g = _act_grad(params.activations[i], cache.pre[i], cache.outputs[i], g)
        grads.weights[i] = cache.inputs[i].T @ g
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, (g[0] if dy.ndim == 1 else g)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


class Adam:
    """Adam with bias correction over an ordered list of arrays, updated in place."""

    def __init__(self, arrays: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.m):
            raise ValueError("parameter list does not match optimizer state")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(arrays, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}


def adam_step(params: ParamSet, grads: ParamSet, state: Adam) -> ParamSet:
    state.step(params.arrays(), grads.arrays())
    params.touch()
    return params


def soft_update(target: ParamSet, source: ParamSet, tau: float) -> ParamSet:
    """``target <- tau * source + (1 - tau) * target``, in place."""
    if target.shapes != source.shapes:
        raise ValueError("target and source shapes differ")
    for t, s in zip(target.arrays(), source.arrays()):
        t *= (1.0 - tau)
        t += tau * s
    target.touch()
    return target


def save_params(path, **paramsets) -> None:
    with open(path, "w") as fh:
        json.dump({k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in paramsets.items()}, fh)


def load_params(path) -> dict:
    with open(path) as fh:
        return json.load(fh)

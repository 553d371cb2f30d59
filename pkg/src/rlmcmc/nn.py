"""Small dense networks in numpy: tanh hidden layers, linear output.

Used for both the per-agent policies (masked softmax head) and the critics
(scalar head). Gradients are exact reverse-mode; :func:`finite_difference_grad`
is the independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError


@dataclass
class Mlp:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = True) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

        ``zero_last`` zeroes the output layer, which makes a policy head exactly
        uniform and a critic head exactly zero at initialization.
        """
        sizes = tuple(int(s) for s in sizes)
        weights, biases = [], []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            a = 1.0 / math.sqrt(fan_in)
            if zero_last and k == len(sizes) - 2:
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases)

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta: np.ndarray) -> None:
        k = 0
        for p in self.params():
            p[...] = theta[k : k + p.size].reshape(p.shape)
            k += p.size

    def forward(self, x: np.ndarray):
        """Batched forward. Returns ``(outputs, tape)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ContractError(f"input width {x.shape[1]} != {self.sizes[0]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if k == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, tape: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(dout * outputs)``, ordered like :meth:`params`."""
        grads: list[np.ndarray] = []
        delta = np.atleast_2d(dout)
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last:
                delta = delta * (1.0 - tape[k + 1] ** 2)
            gw = tape[k].T @ delta
            gb = delta.sum(axis=0)
            grads = [gw, gb] + grads
            delta = delta @ self.weights[k].T
        return grads

    def save(self, path: str | Path) -> None:
        """npz layout: ``sizes`` header, then ``W{k}`` / ``b{k}`` row-major arrays."""
        arrays = {"sizes": np.array(self.sizes)}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        with np.load(path) as z:
            sizes = tuple(int(s) for s in z["sizes"])
            n = len(sizes) - 1
            return cls(sizes, [z[f"W{k}"].copy() for k in range(n)], [z[f"b{k}"].copy() for k in range(n)])


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    logits = np.atleast_2d(logits)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not np.all(mask.any(axis=1)):
            raise ContractError("every action is masked")
        logits = np.where(mask, logits, -np.inf)
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(net: Mlp, x: np.ndarray, mask: np.ndarray | None = None, head: str = "softmax") -> np.ndarray:
    """Single-input convenience: probabilities (policy) or raw outputs (critic)."""
    out, _ = net.forward(x)
    if head == "identity":
        return out[0]
    return np.exp(masked_log_softmax(out, mask))[0]


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def grad(net: Mlp, x: np.ndarray, loss: LossFn) -> tuple[float, list[np.ndarray]]:
    """Exact gradient of ``loss(outputs)``.

    ``loss`` returns the scalar value and its derivative with respect to the
    network outputs.
    """
    out, tape = net.forward(x)
    value, dout = loss(out)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    return float(value), net.backward(tape, dout)


def sgd_step(net: Mlp, grads: Sequence[np.ndarray], lr: float) -> Mlp:
    for p, g in zip(net.params(), grads):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p -= lr * g
    return net


def policy_nll_loss(actions: np.ndarray, masks: np.ndarray, weights: np.ndarray) -> LossFn:
    """mean_j  -weights_j * log softmax(z_j)[actions_j]  over a batch."""
    actions = np.asarray(actions)
    weights = np.asarray(weights, dtype=float)

    def loss(z: np.ndarray):
        logp = masked_log_softmax(z, masks)
        S = z.shape[0]
        picked = logp[np.arange(S), actions]
        value = float(-(weights * picked).mean())
        p = np.exp(logp)
        onehot = np.zeros_like(z)
        onehot[np.arange(S), actions] = 1.0
        dz = (weights[:, None] * (p - onehot)) / S
        return value, dz

    return loss


def mse_loss(targets: np.ndarray) -> LossFn:
    targets = np.asarray(targets, dtype=float).reshape(-1, 1)

    def loss(v: np.ndarray):
        r = v - targets
        return float((r**2).mean()), 2.0 * r / r.shape[0]

    return loss


def finite_difference_grad(net: Mlp, x: np.ndarray, loss: LossFn, step: float = 1e-5) -> np.ndarray:
    """Central differences over every parameter, returned flat."""
    theta = net.flat()
    out = np.empty_like(theta)
    probe = net.copy()
    for k in range(theta.size):
        t = theta.copy()
        t[k] += step
        probe.set_flat(t)
        fp = loss(probe.forward(x)[0])[0]
        t[k] -= 2 * step
        probe.set_flat(t)
        fm = loss(probe.forward(x)[0])[0]
        out[k] = (fp - fm) / (2 * step)
    return out


def flatten(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))

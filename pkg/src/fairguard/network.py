"""Feed-forward ReLU classifiers with a single logit output."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_CLIP = 1e-12


class ModelError(ValueError):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {p}")
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class ForwardTrace:
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def logit(self):
        z = self.pre[-1]
        return float(z[0]) if z.ndim == 1 else z[:, 0]

    @property
    def probability(self):
        return sigmoid(self.logit)


class NetworkSpec:
    """Weights ``W_i`` of shape (t_i, t_{i-1}), biases ``b_i``; ReLU on hidden layers.

    The last layer has width 1 and produces the logit ``z_n``; the
    probability is ``sigmoid(z_n)`` and the decision is ``z_n >= logit(threshold)``.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 threshold: float = 0.5):
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in weights]
        self.biases = [np.array(b, dtype=float, ndmin=1) for b in biases]
        self.threshold = float(threshold)
        self._validate()

    def _validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ModelError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ModelError(f"layer {i + 1}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ModelError(f"layer {i + 1}: expects width {w.shape[1]}, "
                                 f"previous layer has {self.weights[i - 1].shape[0]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ModelError(f"layer {i + 1}: non-finite weight or bias")
        if self.weights[-1].shape[0] != 1:
            raise ModelError("final layer must have width 1")
        if not 0.0 < self.threshold < 1.0:
            raise ModelError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def logit_threshold(self) -> float:
        return logit(self.threshold)

    def copy(self) -> NetworkSpec:
        return NetworkSpec([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.threshold)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x) -> ForwardTrace:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ModelError(f"input has dimension {x.shape[-1]}, network expects {self.input_dim}")
        pre, post = [], []
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            if i < last:
                h = np.maximum(z, 0.0)
                post.append(h)
        return ForwardTrace(pre, post)

    def logits(self, X) -> np.ndarray:
        """Vectorised logits for a batch of points, shape (N,)."""
        h = np.asarray(X, dtype=float)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w.T + b, 0.0)
        return (h @ self.weights[-1].T + self.biases[-1])[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.logits(np.atleast_2d(X)))

    def decide(self, x) -> int:
        return int(self.forward(x).logit >= self.logit_threshold)

    def decide_batch(self, X) -> np.ndarray:
        return (self.logits(np.atleast_2d(X)) >= self.logit_threshold).astype(int)

    @classmethod
    def random(cls, sizes: Sequence[int], rng: np.random.Generator | int | None = None,
               threshold: float = 0.5) -> NetworkSpec:
        """He-initialised network with layer widths ``sizes`` (input first, 1 last)."""
        rng = np.random.default_rng(rng)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, threshold)

    def to_json(self) -> dict:
        return {
            "layers": [{"w": [[_num(v) for v in row] for row in w], "b": [_num(v) for v in b]}
                       for w, b in zip(self.weights, self.biases)],
            "threshold": _num(self.threshold),
        }

    @classmethod
    def from_json(cls, obj: dict) -> NetworkSpec:
        try:
            layers = obj["layers"]
            ws = [np.array(layer["w"], dtype=float, ndmin=2) for layer in layers]
            bs = [np.array(layer["b"], dtype=float, ndmin=1) for layer in layers]
            threshold = float(obj.get("threshold", 0.5))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed model file: {exc}") from None
        return cls(ws, bs, threshold)


def _num(v: float) -> float:
    # 17 significant digits round-trip every double exactly
    return float(format(float(v), ".17g"))


def forward(net: NetworkSpec, x) -> ForwardTrace:
    return net.forward(x)


def decide(net: NetworkSpec, x) -> int:
    return net.decide(x)


def bce(p, y) -> np.ndarray:
    p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def backward(net: NetworkSpec, X, y, weights=None) -> tuple[float, list[np.ndarray]]:
    """Weighted-mean BCE loss over a batch and its gradient.

    Returns ``(loss, grads)`` with ``grads`` ordered like :meth:`NetworkSpec.parameters`.
    ``weights`` defaults to uniform 1/N. The ReLU subgradient at 0 is 0, and
    the probability is clipped to [1e-12, 1 - 1e-12] inside the log.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = len(y)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    trace = net.forward(X)
    z = trace.pre[-1][:, 0]
    p = sigmoid(z)
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = float(np.sum(weights * bce(p, y)))
    # d/dz of -[y log pc + (1-y) log(1-pc)], zero where the clip is active
    active = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
    dz = np.where(active, (pc - y), 0.0) * weights
    delta = dz[:, None]
    grads: list[np.ndarray] = []
    for i in range(net.n_layers - 1, -1, -1):
        h_prev = trace.post[i - 1] if i > 0 else X
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ h_prev)
        if i > 0:
            delta = (delta @ net.weights[i]) * (trace.pre[i - 1] > 0)
    grads.reverse()
    return loss, grads


def save_model(net: NetworkSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_json(), separators=(",", ":")) + "\n")


def load_model(path: str | Path) -> NetworkSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: {exc}") from None
    return NetworkSpec.from_json(obj)

"""Small stand-in feature extractors with manual backprop.

They only exist so that gradients with respect to the features have somewhere
to flow; the softmax layer is the part under study.
"""

from __future__ import annotations

import numpy as np

EXTRACTOR_KINDS = ("identity", "linear", "mlp")


class Identity:
    trainable = False

    def forward(self, O: np.ndarray):
        return O, None

    def __call__(self, O: np.ndarray) -> np.ndarray:
        return O

    def backward(self, cache, dX: np.ndarray) -> None:
        pass

    def step(self, lr: float, momentum: float) -> None:
        pass


class _Trainable:
    trainable = True

    def _init_buffers(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __call__(self, O: np.ndarray) -> np.ndarray:
        return self.forward(O)[0]

    def step(self, lr: float, momentum: float) -> None:
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= momentum
            v += self.grads[k]
            p -= lr * v


class Linear(_Trainable):
    """``x = A o``; starts at the identity when input and output sizes agree."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        if d_in == d_out:
            A = np.eye(d_out)
        else:
            A = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        self.params = {"A": A}
        self._init_buffers()

    def forward(self, O):
        return O @ self.params["A"].T, O

    def backward(self, O, dX):
        self.grads["A"] = dX.T @ O


class MLP(_Trainable):
    """Two-layer perceptron ``x = A2 relu(A1 o + b1)``."""

    def __init__(self, d_in: int, d_out: int, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "A1": rng.normal(0.0, np.sqrt(2.0 / d_in), size=(hidden, d_in)),
            "b1": np.zeros(hidden),
            "A2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d_out, hidden)),
        }
        self._init_buffers()

    def forward(self, O):
        pre = O @ self.params["A1"].T + self.params["b1"]
        H = np.maximum(pre, 0.0)
        return H @ self.params["A2"].T, (O, pre, H)

    def backward(self, cache, dX):
        O, pre, H = cache
        self.grads["A2"] = dX.T @ H
        dpre = (dX @ self.params["A2"]) * (pre > 0)
        self.grads["A1"] = dpre.T @ O
        self.grads["b1"] = dpre.sum(axis=0)


def make_extractor(kind: str, d_in: int, d_out: int, hidden: int = 128, seed: int = 0):
    if kind == "identity":
        if d_in != d_out:
            raise ValueError(f"identity extractor needs d_in == d_out, got {d_in} != {d_out}")
        return Identity()
    if kind == "linear":
        return Linear(d_in, d_out, seed)
    if kind == "mlp":
        return MLP(d_in, d_out, hidden, seed)
    raise ValueError(f"unknown extractor {kind!r}; expected one of {EXTRACTOR_KINDS}")

"""Residual one-hidden-layer perceptron with hand-written backpropagation.

``y = V u + A tanh(W u + b) + c``. The linear skip lets the map express an
exact identity-plus-correction, and zero ``V, A, c`` give a zero output while
keeping hidden activations (and so gradients) alive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_ORDER = ("W", "b", "A", "V", "c")


@dataclass(frozen=True)
class LayerShape:
    d_in: int
    hidden: int
    d_out: int

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "W": (self.hidden, self.d_in),
            "b": (self.hidden,),
            "A": (self.d_out, self.hidden),
            "V": (self.d_out, self.d_in),
            "c": (self.d_out,),
        }

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


def init_params(shape: LayerShape, rng: np.random.Generator, zero_output: bool = True) -> dict[str, np.ndarray]:
    p = {
        "W": rng.normal(0.0, 1.0 / np.sqrt(shape.d_in), shape.shapes()["W"]),
        "b": rng.normal(0.0, 0.1, shape.hidden),
    }
    if zero_output:
        p.update(A=np.zeros(shape.shapes()["A"]), V=np.zeros(shape.shapes()["V"]), c=np.zeros(shape.d_out))
    else:
        p.update(
            A=rng.normal(0.0, 1.0 / np.sqrt(shape.hidden), shape.shapes()["A"]),
            V=rng.normal(0.0, 1.0 / np.sqrt(shape.d_in), shape.shapes()["V"]),
            c=rng.normal(0.0, 0.1, shape.d_out),
        )
    return p


def forward(p: dict[str, np.ndarray], u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outputs ``(N, d_out)`` and the hidden activations kept for ``backward``."""
    h = np.tanh(u @ p["W"].T + p["b"])
    return u @ p["V"].T + h @ p["A"].T + p["c"], h


def backward(p: dict[str, np.ndarray], u: np.ndarray, h: np.ndarray, g: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given ``g = dL/dy``."""
    dpre = (g @ p["A"]) * (1.0 - h * h)
    return {
        "W": dpre.T @ u,
        "b": dpre.sum(axis=0),
        "A": g.T @ h,
        "V": g.T @ u,
        "c": g.sum(axis=0),
    }


def flatten(p: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([p[k].ravel() for k in PARAM_ORDER])


def unflatten(vec: np.ndarray, shape: LayerShape) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for k in PARAM_ORDER:
        s = shape.shapes()[k]
        n = int(np.prod(s))
        out[k] = np.array(vec[off : off + n], dtype=np.float64).reshape(s)
        off += n
    return out

"""Parameters, the AdamW update, and the finite-difference oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor

__all__ = ["Parameter", "MissingGradError", "adam_step", "finite_diff_grad"]


class MissingGradError(RuntimeError):
    pass


class Parameter:
    """A named trainable tensor with its Adam moment buffers."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True)
        self.adam_m = np.zeros(self.tensor.array.size)
        self.adam_v = np.zeros(self.tensor.array.size)

    @property
    def array(self) -> np.ndarray:
        return self.tensor.array

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def adam_step(params: list[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, weight_decay: float = 0.0,
              t: int = 1, eps: float = 1e-8) -> None:
    """Decoupled-weight-decay Adam with bias correction; zeroes grads after.

    ``t`` is the 1-based step count used for bias correction.
    """
    if t < 1:
        raise ValueError(f"adam_step: step count must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        if p.tensor.grad is None:
            raise MissingGradError(f"parameter {p.name!r} has no gradient")
        g = p.tensor.grad.reshape(-1)
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        mhat = p.adam_m / bc1
        vhat = p.adam_v / bc2
        update = mhat / (np.sqrt(vhat) + eps) + weight_decay * p.tensor.array.reshape(-1)
        p.tensor.array.reshape(-1)[...] -= lr * update
        p.tensor.grad = None


def finite_diff_grad(f: Callable[[], float], p: Parameter, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a deterministic scalar function.

    Perturbs each coordinate of ``p`` in place and restores it; returns a
    flat array matching ``p``. This is the independent oracle the analytic
    backward pass is checked against.
    """
    flat = p.tensor.array.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out

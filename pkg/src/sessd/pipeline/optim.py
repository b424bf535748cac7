"""Flat parameter vectors, Adam and the EMA teacher update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LayoutMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class ParamVector:
    """Flat float64 values plus the named per-layer shapes that slice them."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if size != self.values.size:
            raise LayoutMismatch(f"layout holds {size} values, vector has {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector has non-finite entries")

    def views(self) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[off:off + n].reshape(shape)
            off += n
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        layout = tuple((k, np.shape(v)) for k, v in arrays.items())
        vals = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in arrays.values()])
        return cls(vals, layout)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState, lr: float) -> ParamVector:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ShapeMismatch(f"grads {g.shape}, params {params.values.shape}, state {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return ParamVector(params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps), params.layout)


@dataclass
class EmaState:
    teacher: ParamVector
    decay: float = 0.999
    steps: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay {self.decay} outside [0, 1)")


def ema_update(state: EmaState, student: ParamVector) -> EmaState:
    if student.layout != state.teacher.layout:
        raise LayoutMismatch("student and teacher layouts differ")
    d = state.decay
    vals = d * state.teacher.values + (1.0 - d) * student.values
    return EmaState(ParamVector(vals, state.teacher.layout), d, state.steps + 1)

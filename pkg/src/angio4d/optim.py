"""Parameter updates and schedules.

Adam with separate linear learning-rate ramps for the tensorial and
neural parameter groups, a delayed start for the neural group (the grid
captures coarse background first) and a linear opening of the positional
encoding window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Schedule", "Adam"]


@dataclass(frozen=True)
class Schedule:
    """Pure functions of the iteration counter driving the optimization."""

    total_iterations: int = 30000
    tensorial_lr_start: float = 1e-2
    tensorial_lr_end: float = 1e-3
    neural_lr_start: float = 1e-1
    neural_lr_end: float = 1e-2
    neural_delay: int = 1500
    window_iterations: int = 15000
    max_bands: int = 10

    def lr_at(self, iteration: int, group: str) -> float:
        """Affine interpolation of the group's endpoints over the run."""
        if not 0 <= iteration <= self.total_iterations:
            raise ValueError(f"iteration {iteration} outside [0, {self.total_iterations}]")
        if group == "tensorial":
            lo, hi = self.tensorial_lr_start, self.tensorial_lr_end
        elif group == "neural":
            lo, hi = self.neural_lr_start, self.neural_lr_end
        else:
            raise ValueError(f"unknown parameter group {group!r}")
        frac = iteration / self.total_iterations if self.total_iterations else 1.0
        return lo + (hi - lo) * frac

    def window_at(self, iteration: int) -> float:
        """Encoding window progress alpha = max_bands * min(1, it / ramp)."""
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.window_iterations <= 0:
            return float(self.max_bands)
        return self.max_bands * min(1.0, iteration / self.window_iterations)

    def neural_active(self, iteration: int) -> bool:
        return iteration >= self.neural_delay


class Adam:
    """Adam over a named parameter group (dict of arrays).

    Moments are allocated lazily per parameter, shaped like the
    parameters; the step counter only advances when :meth:`step` runs, so
    a delayed group accumulates no stale bias correction.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        """Apply one in-place Adam update to every parameter in ``grads``."""
        if lr <= 0:
            raise ValueError("lr must be positive")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of the moment arrays for checkpointing."""
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        self.t = int(t)
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}

"""Training losses.

Total objective:  L = L_p + lambda_tv * L_tv + lambda_occlusion * L_o
with L_p the photometric MSE in intensity space, L_tv total variation on
the tensorial factors, and L_o a masked L1 penalty on attenuation at the
near-source end of each ray.  Every loss returns (value, gradient).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .fields import VMGrid

__all__ = [
    "LossWeights",
    "photometric",
    "tv_loss",
    "occlusion_loss",
    "combine",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_tv: float = 1e-2
    lambda_occlusion: float = 1e-8
    occlusion_fraction: float = 0.15
    tv_mode: str = "squared"  # "squared" or "absolute"

    def __post_init__(self):
        if self.lambda_tv < 0 or self.lambda_occlusion < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValueError("occlusion_fraction must lie in [0, 1]")
        if self.tv_mode not in ("squared", "absolute"):
            raise ValueError(f"unknown tv_mode {self.tv_mode!r}")


def photometric(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over the ray batch; gradient w.r.t. pred."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.size == 0:
        raise ValueError("photometric loss over an empty batch")
    resid = pred - target
    return float(np.mean(resid**2)), 2.0 * resid / pred.size


def _tv_terms(a, axis, mode):
    d = np.diff(a, axis=axis)
    if mode == "squared":
        val = float((d**2).sum())
        g_d = 2.0 * d
    else:
        val = float(np.abs(d).sum())
        g_d = np.sign(d)
    grad = np.zeros_like(a)
    sl_lo = [slice(None)] * a.ndim
    sl_hi = [slice(None)] * a.ndim
    sl_lo[axis] = slice(None, -1)
    sl_hi[axis] = slice(1, None)
    grad[tuple(sl_lo)] -= g_d
    grad[tuple(sl_hi)] += g_d
    return val, grad, d.size


def tv_loss(grid: VMGrid, mode: str = "squared"):
    """Total variation over all factors: mean of (squared) forward
    differences along each vector and along both matrix axes, averaged
    over every difference term across ranks and axes.  Invariant under
    adding a constant to any factor."""
    total = 0.0
    count = 0
    grads = {}
    for name in ("vx", "vy", "vz"):
        val, grad, n = _tv_terms(grid.params[name], 1, mode)
        total += val
        count += n
        grads[name] = grad
    for name in ("m_yz", "m_xz", "m_xy"):
        val1, grad1, n1 = _tv_terms(grid.params[name], 1, mode)
        val2, grad2, n2 = _tv_terms(grid.params[name], 2, mode)
        total += val1 + val2
        count += n1 + n2
        grads[name] = grad1 + grad2
    for name in grads:
        grads[name] /= count
    return total / count, grads


def occlusion_mask_width(n_samples: int, fraction: float) -> int:
    return min(int(ceil(fraction * n_samples)), n_samples)


def occlusion_loss(sigma: np.ndarray, fraction: float):
    """Masked L1 on near-source attenuation.

    ``sigma`` is (n_rays, n_samples) ordered near-to-far; the penalty is
    the mean over rays of the sum of the leading ceil(fraction * n)
    samples (sigma >= 0, so L1 needs no absolute value).
    """
    sigma = np.asarray(sigma)
    n_rays, n_samples = sigma.shape
    m = occlusion_mask_width(n_samples, fraction)
    if m == 0:
        return 0.0, np.zeros_like(sigma)
    grad = np.zeros_like(sigma)
    grad[:, :m] = 1.0 / n_rays
    return float(sigma[:, :m].sum() / n_rays), grad


def combine(l_p: float, l_tv: float, l_o: float, weights: LossWeights) -> float:
    return l_p + weights.lambda_tv * l_tv + weights.lambda_occlusion * l_o

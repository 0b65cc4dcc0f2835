"""Learnable scene representations.

Two components model the 4D attenuation scene:

* :class:`VMGrid` -- a rank-R vector-matrix factorization of a D^3 static
  attenuation volume (the low-rank component),
* :class:`DynamicField` -- a small MLP conditioned on per-phase latent
  codes and a frequency-annealed positional encoding (the sparse dynamic
  component).

Both produce nonnegative attenuation (mm^-1) through a softplus output and
implement their own analytic backward passes; gradients are plain numpy
arrays keyed by parameter name.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "softplus",
    "softplus_grad",
    "AxisEncoding",
    "VMGrid",
    "DynamicField",
    "scene_eval",
]

_SOFTPLUS_LINEAR_TAIL = 20.0


def softplus(x):
    """Numerically stable log(1 + exp(x)), linear beyond the tail cutoff."""
    x = np.asarray(x)
    return np.where(x > _SOFTPLUS_LINEAR_TAIL, x, np.log1p(np.exp(np.minimum(x, _SOFTPLUS_LINEAR_TAIL))))


def softplus_grad(x):
    """d/dx softplus(x) = logistic(x)."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class AxisEncoding:
    """Windowed sinusoidal positional encoding with coarse-to-fine opening.

    Band j uses frequency 2^j * pi.  The window progress ``alpha`` in
    [0, n_bands] eases each band in with the cosine ramp
    ``w_j = (1 - cos(pi * clamp(alpha - j, 0, 1))) / 2``: at alpha = 0
    every band is shut, at alpha >= n_bands all are fully open.
    """

    def __init__(self, n_bands: int = 10):
        if n_bands < 0:
            raise ValueError("n_bands must be >= 0")
        self.n_bands = int(n_bands)
        self._freqs = (2.0 ** np.arange(self.n_bands)) * np.pi

    @property
    def out_dim(self) -> int:
        return 3 + 6 * self.n_bands

    def band_weights(self, alpha: float) -> np.ndarray:
        j = np.arange(self.n_bands)
        return (1.0 - np.cos(np.pi * np.clip(alpha - j, 0.0, 1.0))) / 2.0

    def encode(self, x: np.ndarray, alpha: float) -> np.ndarray:
        """Lift (n, 3) points to (n, 3 + 6 * n_bands) features.

        Layout: [x, w_0 sin(2^0 pi x), w_0 cos(2^0 pi x), w_1 sin(...), ...],
        three axes per block.
        """
        x = np.asarray(x)
        n = x.shape[0]
        out = np.empty((n, self.out_dim), dtype=x.dtype)
        out[:, :3] = x
        if self.n_bands:
            w = self.band_weights(alpha).astype(x.dtype)
            arg = x[:, None, :] * self._freqs[None, :, None].astype(x.dtype)
            out[:, 3:] = (
                np.concatenate([np.sin(arg)[:, :, None, :], np.cos(arg)[:, :, None, :]], axis=2)
                * w[None, :, None, None]
            ).reshape(n, 6 * self.n_bands)
        return out


def _grid_coords(x, size, margin=1e-6):
    """Map [-1, 1] coordinates to fractional node indices in [0, size-1]."""
    if np.abs(x).max(initial=0.0) > 1.0 + margin:
        raise ValueError("field evaluated outside [-1, 1]^3 beyond clamp margin")
    u = (np.clip(x, -1.0, 1.0) + 1.0) * 0.5 * (size - 1)
    i0 = np.minimum(u.astype(np.int64), size - 2)
    return i0, (u - i0)


class VMGrid:
    """Rank-R vector-matrix factorization of a D^3 attenuation volume.

    Per rank r the factors are vectors v_r^X, v_r^Y, v_r^Z (length D) and
    matrices M_r^YZ, M_r^XZ, M_r^XY (D x D); the represented tensor is

        G = sum_r  v_r^X o M_r^YZ + v_r^Y o M_r^XZ + v_r^Z o M_r^XY

    with o the outer product.  Point evaluation interpolates the factors
    (linear for vectors, bilinear for matrices) so the field is piecewise
    trilinear, then maps through softplus with a constant raw offset so
    the scene starts near-empty.
    """

    PARAM_NAMES = ("vx", "vy", "vz", "m_yz", "m_xz", "m_xy")

    def __init__(
        self,
        resolution: int = 48,
        rank: int = 3,
        rng: np.random.Generator | None = None,
        init_scale: float = 0.1,
        raw_offset: float = -6.0,
        dtype=np.float32,
    ):
        if resolution < 2 or rank < 1:
            raise ValueError("need resolution >= 2 and rank >= 1")
        self.resolution = int(resolution)
        self.rank = int(rank)
        self.raw_offset = float(raw_offset)
        rng = rng or np.random.default_rng(0)
        d, r = self.resolution, self.rank
        self.params = {
            "vx": rng.normal(0.0, init_scale, (r, d)).astype(dtype),
            "vy": rng.normal(0.0, init_scale, (r, d)).astype(dtype),
            "vz": rng.normal(0.0, init_scale, (r, d)).astype(dtype),
            "m_yz": rng.normal(0.0, init_scale, (r, d, d)).astype(dtype),
            "m_xz": rng.normal(0.0, init_scale, (r, d, d)).astype(dtype),
            "m_xy": rng.normal(0.0, init_scale, (r, d, d)).astype(dtype),
        }

    @property
    def n_params(self) -> int:
        return 3 * self.rank * (self.resolution + self.resolution**2)

    def _gather(self, x):
        """Interpolated factor values and the index/weight cache."""
        p = self.params
        i0, w = _grid_coords(x, self.resolution)
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]

        def vec(v, i, t):
            return v[:, i] * (1.0 - t) + v[:, i + 1] * t

        def mat(m, i, j, s, t):
            return (
                m[:, i, j] * (1.0 - s) * (1.0 - t)
                + m[:, i, j + 1] * (1.0 - s) * t
                + m[:, i + 1, j] * s * (1.0 - t)
                + m[:, i + 1, j + 1] * s * t
            )

        vals = {
            "vx": vec(p["vx"], ix, wx),
            "vy": vec(p["vy"], iy, wy),
            "vz": vec(p["vz"], iz, wz),
            "m_yz": mat(p["m_yz"], iy, iz, wy, wz),
            "m_xz": mat(p["m_xz"], ix, iz, wx, wz),
            "m_xy": mat(p["m_xy"], ix, iy, wx, wy),
        }
        return vals, (ix, iy, iz, wx, wy, wz)

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Pre-softplus tensor value at (n, 3) points (no raw offset)."""
        vals, _ = self._gather(np.asarray(x))
        return (
            vals["vx"] * vals["m_yz"] + vals["vy"] * vals["m_xz"] + vals["vz"] * vals["m_xy"]
        ).sum(axis=0)

    def forward(self, x: np.ndarray):
        """Attenuation sigma_l at (n, 3) points plus the backward cache."""
        x = np.asarray(x)
        vals, idx = self._gather(x)
        raw = (
            vals["vx"] * vals["m_yz"] + vals["vy"] * vals["m_xz"] + vals["vz"] * vals["m_xy"]
        ).sum(axis=0)
        z = raw + self.raw_offset
        return softplus(z), {"vals": vals, "idx": idx, "z": z}

    def backward(self, cache, g_sigma: np.ndarray) -> dict[str, np.ndarray]:
        """Accumulate d loss / d factors given upstream d loss / d sigma_l."""
        d, r = self.resolution, self.rank
        vals = cache["vals"]
        ix, iy, iz, wx, wy, wz = cache["idx"]
        g = np.asarray(g_sigma) * softplus_grad(cache["z"])  # (n,)

        rank_off = (np.arange(r) * d)[:, None]

        def vec_grad(coeff, i, t):
            # coeff: (r, n) = g * paired matrix value
            lo = np.bincount((rank_off + i).ravel(), (coeff * (1.0 - t)).ravel(), minlength=r * d)
            hi = np.bincount((rank_off + i + 1).ravel(), (coeff * t).ravel(), minlength=r * d)
            return (lo + hi).reshape(r, d)

        rank_off2 = (np.arange(r) * d * d)[:, None]

        def mat_grad(coeff, i, j, s, t):
            out = np.zeros(r * d * d)
            for di, dj, w in (
                (0, 0, (1.0 - s) * (1.0 - t)),
                (0, 1, (1.0 - s) * t),
                (1, 0, s * (1.0 - t)),
                (1, 1, s * t),
            ):
                flat = rank_off2 + (i + di) * d + (j + dj)
                out += np.bincount(flat.ravel(), (coeff * w).ravel(), minlength=r * d * d)
            return out.reshape(r, d, d)

        dtype = self.params["vx"].dtype
        grads = {
            "vx": vec_grad(g * vals["m_yz"], ix, wx),
            "vy": vec_grad(g * vals["m_xz"], iy, wy),
            "vz": vec_grad(g * vals["m_xy"], iz, wz),
            "m_yz": mat_grad(g * vals["vx"], iy, iz, wy, wz),
            "m_xz": mat_grad(g * vals["vy"], ix, iz, wx, wz),
            "m_xy": mat_grad(g * vals["vz"], ix, iy, wx, wy),
        }
        return {k: v.astype(dtype, copy=False) for k, v in grads.items()}


class DynamicField:
    """Dynamic sparse component: MLP over encoded position + phase latent.

    ``n_layers`` hidden layers of ``width`` ReLU units, scalar output
    through softplus; one learnable latent code per cardiac phase.  The
    ReLU subgradient at exactly zero is taken as zero so gradient checks
    are deterministic.
    """

    def __init__(
        self,
        n_phases: int,
        encoding: AxisEncoding | None = None,
        latent_dim: int = 16,
        width: int = 128,
        n_layers: int = 4,
        rng: np.random.Generator | None = None,
        latent_init_scale: float = 0.01,
        output_bias_init: float = -6.0,
        dtype=np.float32,
    ):
        if n_phases < 1:
            raise ValueError("need at least one phase")
        self.n_phases = int(n_phases)
        self.encoding = encoding or AxisEncoding(10)
        self.latent_dim = int(latent_dim)
        self.width = int(width)
        self.n_layers = int(n_layers)
        self.in_dim = self.encoding.out_dim + self.latent_dim
        rng = rng or np.random.default_rng(0)

        def kaiming(fan_in, shape):
            limit = np.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, shape).astype(dtype)

        self.params = {}
        dims = [self.in_dim] + [self.width] * self.n_layers + [1]
        for k in range(len(dims) - 1):
            self.params[f"w{k}"] = kaiming(dims[k], (dims[k], dims[k + 1]))
            self.params[f"b{k}"] = np.zeros(dims[k + 1], dtype=dtype)
        self.params[f"b{len(dims) - 2}"][:] = output_bias_init
        self.params["latents"] = rng.normal(
            0.0, latent_init_scale, (self.n_phases, self.latent_dim)
        ).astype(dtype)

    @property
    def n_weight_layers(self) -> int:
        return self.n_layers + 1

    def forward(self, x: np.ndarray, phase: int, alpha: float | None = None):
        """Attenuation sigma_s at (n, 3) points for one cardiac phase."""
        if not 0 <= phase < self.n_phases:
            raise IndexError(f"phase {phase} out of range [0, {self.n_phases})")
        x = np.asarray(x)
        if alpha is None:
            alpha = float(self.encoding.n_bands)
        dtype = self.params["w0"].dtype
        feat = np.empty((x.shape[0], self.in_dim), dtype=dtype)
        feat[:, : self.encoding.out_dim] = self.encoding.encode(x.astype(dtype), alpha)
        feat[:, self.encoding.out_dim :] = self.params["latents"][phase]

        acts = [feat]
        h = feat
        for k in range(self.n_layers):
            z = h @ self.params[f"w{k}"] + self.params[f"b{k}"]
            h = np.maximum(z, 0.0)
            acts.append(h)
        k_out = self.n_layers
        z_out = (h @ self.params[f"w{k_out}"] + self.params[f"b{k_out}"])[:, 0]
        return softplus(z_out), {"acts": acts, "z_out": z_out, "phase": phase}

    def backward(self, cache, g_sigma: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients w.r.t. all MLP weights/biases and the used latent row."""
        acts, phase = cache["acts"], cache["phase"]
        grads = {}
        g = (np.asarray(g_sigma) * softplus_grad(cache["z_out"]))[:, None]
        for k in range(self.n_layers, -1, -1):
            grads[f"w{k}"] = acts[k].T @ g
            grads[f"b{k}"] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.params[f"w{k}"].T) * (acts[k] > 0)
        g_input = g @ self.params["w0"].T
        latents = np.zeros_like(self.params["latents"])
        latents[phase] = g_input.sum(axis=0)[self.encoding.out_dim :]
        grads["latents"] = latents
        return grads


def scene_eval(grid: VMGrid, field: DynamicField, x, phase: int, alpha: float | None = None):
    """Composed attenuation sigma = sigma_l + sigma_s at (n, 3) points.

    Returns (sigma_l, sigma_s, sigma, caches); both components are
    nonnegative by construction so sigma >= max(sigma_l, sigma_s).
    """
    sigma_l, grid_cache = grid.forward(x)
    sigma_s, field_cache = field.forward(x, phase, alpha)
    return sigma_l, sigma_s, sigma_l + sigma_s, (grid_cache, field_cache)

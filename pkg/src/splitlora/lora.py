"""Low-rank adapter algebra for a linear layer with a parallel branch.

An adapter is a pair (a, b) with delta_w = b @ a added to a frozen weight.
Three update policies are supported: update both factors, or freeze the
row frame ``a`` (Gaussian or scaled orthonormal) and update only ``b``.
Besides the forward/gradient maps this module carries the exact closed
forms for how channel noise entering the layer-output gradient shows up in
the weight update, and the expected energy of that update noise under the
fixed-frame policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import RngStream, as_matrix, as_vector, orthonormal_rows, sample_gaussian


class UpdateMode(str, Enum):
    """Which low-rank factors move during training."""

    UPDATE_BOTH = "both"
    FIXED_GAUSSIAN_A = "fixed_gaussian"
    FIXED_ORTHONORMAL_A = "fixed_orthonormal"


FIXED_A_MODES = frozenset({UpdateMode.FIXED_GAUSSIAN_A, UpdateMode.FIXED_ORTHONORMAL_A})


def _frozen_array(x: np.ndarray) -> np.ndarray:
    # always copy so freezing never mutates the caller's array flags
    out = np.array(x, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LoraAdapter:
    """Immutable adapter state; updates produce a new value.

    a: (rank, d_in) row frame, b: (d_out, rank). ``scale`` is the row norm
    used by the orthonormal mode and is carried along for bookkeeping.
    """

    a: np.ndarray
    b: np.ndarray
    rank: int
    mode: UpdateMode
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen_array(self.a))
        object.__setattr__(self, "b", _frozen_array(self.b))
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ValueError(
                f"rank {self.rank} inconsistent with shapes {self.a.shape}, {self.b.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    def delta_w(self) -> np.ndarray:
        return self.b @ self.a


@dataclass(frozen=True)
class NoiseDecomposition:
    """Layer-output gradient split into its deterministic and noise parts."""

    g_v: np.ndarray
    n_v: np.ndarray

    def __post_init__(self):
        g = as_vector(self.g_v)
        n = as_vector(self.n_v)
        if g.shape != n.shape:
            raise ValueError(f"component dims differ: {g.shape} vs {n.shape}")
        object.__setattr__(self, "g_v", _frozen_array(g))
        object.__setattr__(self, "n_v", _frozen_array(n))

    @property
    def total(self) -> np.ndarray:
        return self.g_v + self.n_v


def init_adapter(mode: UpdateMode, rank: int, d_in: int, d_out: int,
                 scale: float = 1.0, rng: RngStream | None = None) -> LoraAdapter:
    """Fresh adapter: b = 0 (so delta_w starts at zero), a per mode.

    Gaussian frames use entry variance 1/d_in so the branch output stays
    O(1); the orthonormal mode draws a row frame with a @ a.T = scale**2 I.
    The rank is kept small relative to the layer (rank <= min(dims)/2).
    """
    if rng is None:
        raise ValueError("init_adapter needs an RngStream")
    if rank < 1 or rank > min(d_in, d_out) // 2:
        raise ValueError(f"rank {rank} out of range for dims ({d_in}, {d_out})")
    mode = UpdateMode(mode)
    if mode is UpdateMode.FIXED_ORTHONORMAL_A:
        if scale <= 0:
            raise ValueError("orthonormal mode needs a positive scale")
        a = orthonormal_rows(rng.child("frame"), rank, d_in, scale)
    else:
        a = sample_gaussian(rng.child("frame"), rank, d_in, 1.0 / np.sqrt(d_in))
    b = np.zeros((d_out, rank))
    return LoraAdapter(a=a, b=b, rank=rank, mode=mode, scale=scale)


def lora_forward(w_frozen, adapter: LoraAdapter, u) -> np.ndarray:
    """Layer output (w_frozen + b @ a) @ u."""
    w = as_matrix(w_frozen)
    u = as_vector(u)
    if w.shape[1] != u.shape[0] or adapter.d_in != u.shape[0] or adapter.d_out != w.shape[0]:
        raise ValueError(
            f"shape mismatch: w {w.shape}, adapter ({adapter.d_out}, {adapter.d_in}), u {u.shape}"
        )
    return (w + adapter.b @ adapter.a) @ u


def grad_wrt_a(b, g_total, u) -> np.ndarray:
    """Gradient of the loss w.r.t. the row frame: b.T @ g_total @ u.T."""
    b = as_matrix(b)
    g = as_vector(g_total)
    u = as_vector(u)
    if b.shape[0] != g.shape[0]:
        raise ValueError(f"shape mismatch: b {b.shape}, g {g.shape}")
    return np.outer(b.T @ g, u)


def grad_wrt_b(g_total, u, a) -> np.ndarray:
    """Gradient of the loss w.r.t. the column factor: g_total @ u.T @ a.T."""
    a = as_matrix(a)
    g = as_vector(g_total)
    u = as_vector(u)
    if a.shape[1] != u.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape}, u {u.shape}")
    return np.outer(g, a @ u)


def apply_update(adapter: LoraAdapter, grad_a, grad_b, eta: float) -> LoraAdapter:
    """One gradient step at rate eta, respecting the adapter's mode.

    Fixed-frame modes update only b and keep the exact ``a`` array (bit
    identical across rounds by construction); grad_a is ignored there and
    may be None.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    gb = as_matrix(grad_b)
    if gb.shape != adapter.b.shape:
        raise ValueError(f"grad_b shape {gb.shape} != b shape {adapter.b.shape}")
    new_b = adapter.b - eta * gb
    if adapter.mode is UpdateMode.UPDATE_BOTH:
        ga = as_matrix(grad_a)
        if ga.shape != adapter.a.shape:
            raise ValueError(f"grad_a shape {ga.shape} != a shape {adapter.a.shape}")
        new_a = adapter.a - eta * ga
    else:
        new_a = adapter.a
    return LoraAdapter(a=new_a, b=new_b, rank=adapter.rank,
                       mode=adapter.mode, scale=adapter.scale)


def noise_in_delta_w_both(a, b, g_v, n_v, u, eta: float) -> np.ndarray:
    """Exact update-noise in delta_w when both factors take a step.

    With e = g_v + n_v the step changes b @ a by
      -eta (b b^T e u^T + e u^T a^T a) + eta^2 (e u^T a^T)(b^T e u^T),
    and subtracting the noiseless (e = g_v) expression leaves the linear
    terms in n_v plus three eta^2 cross terms: deterministic-times-noise,
    noise-times-deterministic, and the part quadratic in the noise. The
    result matches the brute-force update difference to float rounding.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    g = as_vector(g_v)
    n = as_vector(n_v)
    u = as_vector(u)
    if not (b.shape[0] == g.shape[0] == n.shape[0] and a.shape[1] == u.shape[0]
            and a.shape[0] == b.shape[1]):
        raise ValueError("inconsistent shapes for update-noise expansion")
    n_u = np.outer(n, u)
    first = b @ (b.T @ n_u) + n_u @ (a.T @ a)
    t1 = np.outer(g, a @ u) @ np.outer(b.T @ n, u)
    t2 = np.outer(n, a @ u) @ np.outer(b.T @ g, u)
    t3 = np.outer(n, a @ u) @ np.outer(b.T @ n, u)
    return -eta * first + eta**2 * (t1 + t2 + t3)


def noise_in_delta_w_fixed_a(a, n_v, u, eta: float) -> np.ndarray:
    """Update-noise in delta_w under a fixed row frame: -eta n_v u^T a^T a.

    Exactly linear in the noise; no higher-order residual exists because
    only one factor moves.
    """
    a = as_matrix(a)
    n = as_vector(n_v)
    u = as_vector(u)
    if a.shape[1] != u.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape}, u {u.shape}")
    return -eta * np.outer(n, u) @ (a.T @ a)


def noise_energy_fixed_a(a, u, noise_cov_trace: float, eta: float) -> float:
    """Expected Frobenius energy of the fixed-frame update noise.

    For zero-mean isotropic noise with covariance trace tr(Cov), the energy
    of -eta n u^T a^T a in expectation is

        eta^2 * tr(Cov) * || a^T a u ||^2,

    using E||n y^T||_F^2 = E||n||^2 * ||y||^2 for the outer product of a
    zero-mean vector with a fixed row. With a scaled orthonormal frame the
    frame product contracts u by scale**2, so the energy carries scale**4.
    """
    if noise_cov_trace < 0:
        raise ValueError("noise_cov_trace must be nonnegative")
    a = as_matrix(a)
    u = as_vector(u)
    if a.shape[1] != u.shape[0]:
        raise ValueError(f"shape mismatch: a {a.shape}, u {u.shape}")
    w = (a.T @ a) @ u
    return eta**2 * noise_cov_trace * float(w @ w)

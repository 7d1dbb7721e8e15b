"""Brute-force reference implementations used by the test suite.

These deliberately share no code with the fast paths they check: matrix
products are explicit index loops, gradients come from central differences,
eigenvalues from a characteristic polynomial, expectations from Monte-Carlo
draws, and the monolithic trainer re-implements a whole training round in
one process with no split, no channel and no message passing. Slowness is
the point; every function here is the second opinion a test compares
against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lora import UpdateMode
from .numerics import RngStream, as_matrix, as_vector


# ---------------------------------------------------------------------------
# naive products (index loops on purpose)
# ---------------------------------------------------------------------------

def mat_mul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def mat_vec(a, x) -> np.ndarray:
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch {a.shape} @ {x.shape}")
    out = np.zeros(a.shape[0])
    for i in range(a.shape[0]):
        acc = 0.0
        for k in range(a.shape[1]):
            acc += a[i, k] * x[k]
        out[i] = acc
    return out


def outer(x, y) -> np.ndarray:
    x = as_vector(x)
    y = as_vector(y)
    out = np.zeros((x.shape[0], y.shape[0]))
    for i in range(x.shape[0]):
        for j in range(y.shape[0]):
            out[i, j] = x[i] * y[j]
    return out


def transpose(a) -> np.ndarray:
    a = as_matrix(a)
    out = np.zeros((a.shape[1], a.shape[0]))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[j, i] = a[i, j]
    return out


def trace(a) -> float:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError("trace needs a square matrix")
    acc = 0.0
    for i in range(a.shape[0]):
        acc += a[i, i]
    return acc


# ---------------------------------------------------------------------------
# low-rank update references
# ---------------------------------------------------------------------------

def _delta_w_after_step(a, b, e, u, eta, update_a):
    """Literal two-matrix (or fixed-frame) step, then the product difference."""
    grad_a = outer(mat_vec(transpose(b), e), u)
    grad_b = mat_mul(outer(e, u), transpose(a))
    a_new = a - eta * grad_a if update_a else a
    b_new = b - eta * grad_b
    return mat_mul(b_new, a_new) - mat_mul(b, a)


def brute_delta_w(a, b, g_v, n_v, u, eta) -> tuple[np.ndarray, np.ndarray]:
    """Update-product differences with and without the noise component.

    Returns (noisy, clean); noisy - clean is the reference value for the
    closed-form update-noise expression when both low-rank factors move.
    """
    noisy = _delta_w_after_step(a, b, g_v + n_v, u, eta, update_a=True)
    clean = _delta_w_after_step(a, b, g_v, u, eta, update_a=True)
    return noisy, clean


def brute_delta_w_fixed_a(a, b, g_v, n_v, u, eta) -> tuple[np.ndarray, np.ndarray]:
    """Same as brute_delta_w but with the row frame held fixed."""
    noisy = _delta_w_after_step(a, b, g_v + n_v, u, eta, update_a=False)
    clean = _delta_w_after_step(a, b, g_v, u, eta, update_a=False)
    return noisy, clean


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff(fn, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    it = np.nditer(point, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        bumped = point.copy()
        bumped[idx] = point[idx] + step
        f_plus = fn(bumped)
        bumped[idx] = point[idx] - step
        f_minus = fn(bumped)
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# eigenvalues via the characteristic polynomial
# ---------------------------------------------------------------------------

def charpoly_eigvals(sym) -> np.ndarray:
    """Eigenvalues of a small symmetric matrix, descending.

    Faddeev-LeVerrier recursion (naive products) for the characteristic
    polynomial coefficients, then numpy's root finder. Only trustworthy for
    the small, reasonably conditioned matrices the tests feed it; that is
    exactly what makes it independent of the Jacobi path it cross-checks.
    """
    s = as_matrix(sym)
    n = s.shape[0]
    if s.shape[0] != s.shape[1]:
        raise ValueError("need a square matrix")
    coeffs = [1.0]
    m = np.zeros((n, n))
    c = 1.0
    for k in range(1, n + 1):
        m = mat_mul(s, m + c * np.eye(n))
        c = -trace(m) / k
        coeffs.append(c)
    roots = np.roots(coeffs)
    vals = np.sort(roots.real)[::-1]
    return np.maximum(vals, 0.0)


def singular_extremes_oracle(m) -> tuple[float, float]:
    """(sigma_max, sigma_min) from the eigenvalues of m.T @ m."""
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        a = transpose(a)
    gram = mat_mul(transpose(a), a)
    vals = charpoly_eigvals(gram)
    return float(np.sqrt(vals[0])), float(np.sqrt(vals[-1]))


# ---------------------------------------------------------------------------
# Monte-Carlo update-noise energy
# ---------------------------------------------------------------------------

def mc_noise_energy(a, u, sigma2: float, eta: float, n_samples: int,
                    rng: RngStream) -> tuple[float, float]:
    """Monte-Carlo mean of the fixed-frame update-noise energy.

    Draws isotropic Gaussian layer-output noise, pushes each draw through
    the exact fixed-frame update-noise map, and averages the resulting
    Frobenius energies. Every per-draw matrix is formed explicitly; the
    factorized closed form under test is deliberately not used. Returns
    (mean, standard error).
    """
    if n_samples < 10**4:
        raise ValueError("need at least 1e4 samples for a usable standard error")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    a = as_matrix(a)
    u = as_vector(u)
    if sigma2 == 0.0:
        return 0.0, 0.0
    # Each draw's matrix n u^T A^T A is the outer product of the draw with
    # this row (the frame product is symmetric).
    row = (a.T @ a) @ u
    gen = rng.generator()
    energies = np.empty(n_samples)
    chunk = 4096
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        draws = gen.normal(0.0, np.sqrt(sigma2), size=(m, row.shape[0]))
        mats = -eta * draws[:, :, None] * row[None, None, :]
        energies[done:done + m] = np.sum(mats * mats, axis=(1, 2))
        done += m
    mean = float(np.mean(energies))
    std_err = float(np.std(energies, ddof=1) / np.sqrt(n_samples))
    return mean, std_err


# ---------------------------------------------------------------------------
# monolithic trainer (the no-split reference)
# ---------------------------------------------------------------------------

@dataclass
class MonolithicState:
    """Whole network in one place: embedding, encoder, adapters, head."""

    w_embed: np.ndarray
    encoder: list[np.ndarray]
    a_mats: list[np.ndarray]
    b_mats: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray


def _act(name, v):
    if name == "tanh":
        return np.tanh(v)
    if name == "relu":
        return np.maximum(v, 0.0)
    if name == "identity":
        return v
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name, v):
    if name == "tanh":
        return 1.0 - np.tanh(v) ** 2
    if name == "relu":
        return (v > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(v)
    raise ValueError(f"unknown activation {name!r}")


def monolithic_round(state: MonolithicState, xs, ys, mode: UpdateMode,
                     clip_c: float, eta_global: float, eta_local: float,
                     activation: str = "tanh") -> float:
    """One centralized training round; mutates ``state``, returns mean loss.

    Mirrors the protocol's arithmetic (clip the mean output gradient, one
    shared vector broadcast through every sample's backward pass) without
    any device/server separation, so a noiseless federated round must match
    it numerically.
    """
    n_layers = len(state.encoder)
    traces = []
    losses = []
    g_sum = None
    gw_sum = np.zeros_like(state.head_w)
    gb_sum = np.zeros_like(state.head_b)
    for x, y in zip(xs, ys):
        z_e = state.w_embed @ x
        u = z_e
        inputs, preacts = [], []
        for i in range(n_layers):
            inputs.append(u)
            v = (state.encoder[i] + state.b_mats[i] @ state.a_mats[i]) @ u
            preacts.append(v)
            u = _act(activation, v) if i < n_layers - 1 else v
        z = u
        logits = state.head_w @ z + state.head_b
        shifted = logits - np.max(logits)
        p = np.exp(shifted) / np.sum(np.exp(shifted))
        losses.append(float(np.log(np.sum(np.exp(shifted))) - shifted[y]))
        err = p.copy()
        err[y] -= 1.0
        g = state.head_w.T @ err
        g_sum = g if g_sum is None else g_sum + g
        gw_sum += np.outer(err, z)
        gb_sum += err
        traces.append((inputs, preacts))
    m = len(losses)
    g_mean = g_sum / m
    nrm = float(np.sqrt(g_mean @ g_mean))
    g_tilde = g_mean * (clip_c / max(clip_c, nrm))
    # adapter gradients: shared clipped vector through each sample's backward pass
    grads_a = [np.zeros_like(a) for a in state.a_mats]
    grads_b = [np.zeros_like(b) for b in state.b_mats]
    for inputs, preacts in traces:
        delta = g_tilde
        for i in range(n_layers - 1, -1, -1):
            grads_a[i] += np.outer(state.b_mats[i].T @ delta, inputs[i])
            grads_b[i] += np.outer(delta, state.a_mats[i] @ inputs[i])
            if i > 0:
                w_eff = state.encoder[i] + state.b_mats[i] @ state.a_mats[i]
                delta = w_eff.T @ delta
                delta = _act_deriv(activation, preacts[i - 1]) * delta
    state.head_w = state.head_w - eta_local * (gw_sum / m)
    state.head_b = state.head_b - eta_local * (gb_sum / m)
    for i in range(n_layers):
        if mode is UpdateMode.UPDATE_BOTH:
            state.a_mats[i] = state.a_mats[i] - eta_global * (grads_a[i] / m)
        state.b_mats[i] = state.b_mats[i] - eta_global * (grads_b[i] / m)
    return float(np.mean(losses))

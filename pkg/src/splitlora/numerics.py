"""Dense float64 linear algebra helpers and splittable random streams.

Everything downstream (adapters, channel, federation) works on plain numpy
float64 arrays; this module adds the few pieces the rest of the package
relies on: a one-sided Jacobi SVD whose extreme singular values are
trustworthy to 1e-12 relative tolerance at desk scale, scaled orthonormal
row frames, and a hash-keyed random stream that makes every draw a pure
function of (seed, path). Keying streams by (round, device, purpose) means
neither TDMA ordering nor grid parallelism can change a noise realization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

JACOBI_TOL = 1e-12
RANK_DEFICIENT_FLOOR = 1e-300
_MAX_SWEEPS = 64
_U64 = (1 << 64) - 1


def as_matrix(m) -> np.ndarray:
    """Coerce to a finite float64 2-D array, rejecting NaN/Inf."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def as_vector(v) -> np.ndarray:
    """Coerce to a finite float64 1-D array."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector contains non-finite entries")
    return a


@dataclass(frozen=True)
class RngStream:
    """Splittable random stream: a pure function of (seed, path).

    ``child`` appends one label tuple, e.g. ``stream.child(round, device,
    "uplink-noise")``. Distinct paths give statistically independent PCG64
    streams; the same (seed, path) always reproduces the same draws
    bit for bit.
    """

    seed: int
    path: tuple[tuple, ...] = ()

    def child(self, *label) -> "RngStream":
        if not label:
            raise ValueError("child() needs at least one label component")
        return RngStream(self.seed, self.path + (tuple(label),))

    def _entropy(self) -> list[int]:
        h = hashlib.blake2b(digest_size=16)
        for lbl in self.path:
            for part in lbl:
                if isinstance(part, bool) or not isinstance(part, (int, str)):
                    raise TypeError(f"unsupported path label component: {part!r}")
                if isinstance(part, int):
                    h.update(b"i" + part.to_bytes(16, "little", signed=True))
                else:
                    data = part.encode("utf-8")
                    h.update(b"s" + len(data).to_bytes(4, "little") + data)
            h.update(b"/")
        return [self.seed & _U64, int.from_bytes(h.digest(), "little")]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy())))

    def derive_seed(self) -> int:
        """Stable 63-bit integer for APIs that want a plain seed."""
        return int(self.generator().integers(0, 1 << 63))


def singular_extremes(m) -> tuple[float, float, float]:
    """Largest/smallest singular values of ``m`` and their ratio.

    One-sided Jacobi: rotate column pairs of a working copy until all
    columns are mutually orthogonal to JACOBI_TOL relative tolerance; the
    column norms are then the singular values. Exact enough at desk scale
    that tests hold it to 1e-9 against an independent eigenvalue oracle.

    Returns (sigma_max, sigma_min, kappa); kappa is +inf when the matrix
    is numerically rank deficient (sigma_min below 1e-300).
    """
    a = as_matrix(m)
    if not np.any(a):
        raise ValueError("singular_extremes requires a nonzero matrix")
    if a.shape[0] < a.shape[1]:
        a = a.T
    a = a.copy()
    n = a.shape[1]
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = a[:, i].copy()
                cj = a[:, j].copy()
                pii = float(ci @ ci)
                pjj = float(cj @ cj)
                pij = float(ci @ cj)
                if abs(pij) <= JACOBI_TOL * np.sqrt(pii * pjj):
                    continue
                rotated = True
                zeta = (pjj - pii) / (2.0 * pij)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta)) if zeta != 0.0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                a[:, i] = c * ci - s * cj
                a[:, j] = s * ci + c * cj
        if not rotated:
            break
    norms = np.sqrt(np.sum(a * a, axis=0))
    sigma_max = float(np.max(norms))
    sigma_min = float(np.min(norms))
    if sigma_min < RANK_DEFICIENT_FLOOR:
        return sigma_max, sigma_min, float("inf")
    return sigma_max, sigma_min, sigma_max / sigma_min


def sample_gaussian(rng: RngStream, rows: int, cols: int, std: float) -> np.ndarray:
    """I.i.d. zero-mean Gaussian matrix, deterministic given the stream."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    if std < 0:
        raise ValueError("std must be nonnegative")
    if std == 0.0:
        return np.zeros((rows, cols))
    return rng.generator().normal(0.0, std, size=(rows, cols))


def orthonormal_rows(rng: RngStream, r: int, d: int, scale: float = 1.0) -> np.ndarray:
    """An r x d matrix A with A @ A.T = scale**2 * I to 1e-12 entrywise.

    Gaussian rows orthonormalized by twice-iterated modified Gram-Schmidt
    (once is not reliably enough at 1e-12), then multiplied by ``scale``.
    """
    if r > d:
        raise ValueError(f"cannot build {r} orthonormal rows in dimension {d}")
    if r < 1:
        raise ValueError("r must be positive")
    if scale <= 0:
        raise ValueError("scale must be positive")
    g = sample_gaussian(rng, r, d, 1.0)
    q = np.empty_like(g)
    for i in range(r):
        v = g[i].copy()
        for _ in range(2):
            for j in range(i):
                v -= (q[j] @ v) * q[j]
        nrm = float(np.sqrt(v @ v))
        if nrm < 1e-12:
            raise ValueError("degenerate Gaussian draw while orthonormalizing")
        q[i] = v / nrm
    return scale * q


def frobenius_energy(m) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    a = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return float(np.sum(a * a))

"""Univariate log-BRDF curves and their PCA dictionary.

With the light at the camera centre an isotropic BRDF only depends on the
incident angle, so a material is a tabulated curve ``log rho(theta)``.
The cosine fall-off is folded into ``rho``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-12
DEFAULT_NODES = 90
LUMA = np.array([0.2126, 0.7152, 0.0722])
MERL_SCALE = np.array([1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0])


def default_grid(nodes: int = DEFAULT_NODES, max_deg: float = 89.0) -> np.ndarray:
    return np.radians(np.linspace(0.0, max_deg, nodes))


def _check_grid(grid: np.ndarray):
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("theta grid needs at least two nodes")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("theta grid must be strictly increasing")
    if grid[0] < 0 or grid[-1] >= np.pi / 2:
        raise ValueError("theta grid must lie in [0, pi/2)")


def interp_weights(grid: np.ndarray, theta: np.ndarray):
    """Left node index and fraction for linear interpolation, clamped at both ends."""
    theta = np.clip(theta, grid[0], grid[-1])
    idx = np.searchsorted(grid, theta, side="right") - 1
    idx = np.clip(idx, 0, grid.size - 2)
    frac = (theta - grid[idx]) / (grid[idx + 1] - grid[idx])
    return idx, frac


@dataclass(frozen=True)
class BrdfCurve:
    theta_grid: np.ndarray
    log_values: np.ndarray

    def __post_init__(self):
        grid = np.array(self.theta_grid, dtype=np.float64)
        vals = np.array(self.log_values, dtype=np.float64)
        _check_grid(grid)
        if vals.shape != grid.shape:
            raise ValueError("log_values must match theta_grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("log_values must be finite")
        grid.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "theta_grid", grid)
        object.__setattr__(self, "log_values", vals)

    def log_rho(self, theta):
        """Piecewise-linear lookup; clamps past the last node."""
        theta = np.asarray(theta, dtype=np.float64)
        idx, frac = interp_weights(self.theta_grid, theta)
        v = self.log_values
        return v[idx] + frac * (v[idx + 1] - v[idx])

    def resample(self, grid) -> "BrdfCurve":
        grid = np.asarray(grid, dtype=np.float64)
        return BrdfCurve(grid, self.log_rho(grid))


@dataclass(frozen=True)
class BrdfDictionary:
    """Mean log-curve plus eigenvalue-weighted basis columns.

    ``bases[:, i]`` equals the i-th unit eigenvector times the square root of
    its covariance eigenvalue, so an isotropic prior on the coefficients is a
    Gaussian prior shaped like the training distribution.
    """

    theta_grid: np.ndarray
    mu: np.ndarray
    bases: np.ndarray
    eigenvalues: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        grid = np.array(self.theta_grid, dtype=np.float64)
        _check_grid(grid)
        mu = np.array(self.mu, dtype=np.float64)
        bases = np.array(self.bases, dtype=np.float64).reshape(grid.size, -1)
        ev = np.array(self.eigenvalues, dtype=np.float64).reshape(-1)
        if mu.shape != grid.shape or bases.shape[1] != ev.size:
            raise ValueError("inconsistent dictionary shapes")
        if np.any(ev < 0) or np.any(np.diff(ev) > 0):
            raise ValueError("eigenvalues must be non-negative and non-increasing")
        for name, arr in (("theta_grid", grid), ("mu", mu), ("bases", bases), ("eigenvalues", ev)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_bases(self) -> int:
        return self.bases.shape[1]

    def table(self, c) -> np.ndarray:
        """Tabulated ``D c + mu`` on the grid."""
        c = np.asarray(c, dtype=np.float64).reshape(-1)
        if c.size != self.n_bases:
            raise ValueError(f"expected {self.n_bases} coefficients, got {c.size}")
        return self.bases @ c + self.mu

    def curve(self, c) -> BrdfCurve:
        return BrdfCurve(self.theta_grid, self.table(c))

    def basis_rows(self, theta) -> np.ndarray:
        """Interpolated basis rows ``D(theta)``, shape ``theta.shape + (N,)``."""
        idx, frac = interp_weights(self.theta_grid, np.asarray(theta, dtype=np.float64))
        d0 = self.bases[idx]
        d1 = self.bases[idx + 1]
        return d0 + frac[..., None] * (d1 - d0)

    def unweighted_bases(self) -> np.ndarray:
        scale = np.sqrt(self.eigenvalues)
        out = np.zeros_like(self.bases)
        nz = scale > 0
        out[:, nz] = self.bases[:, nz] / scale[nz]
        return out


def learn_dictionary(curves, n_bases: int) -> BrdfDictionary:
    """Leading ``n_bases`` principal directions of a set of log-curves."""
    curves = list(curves)
    if n_bases < 1:
        raise ValueError("n_bases must be >= 1")
    if len(curves) < n_bases:
        raise ValueError(
            f"need at least {n_bases} curves for {n_bases} bases, got {len(curves)}"
        )
    grid = curves[0].theta_grid
    for cv in curves[1:]:
        if cv.theta_grid.shape != grid.shape or not np.array_equal(cv.theta_grid, grid):
            raise ValueError("all curves must share the same theta grid")
    X = np.stack([cv.log_values for cv in curves], axis=1)  # T x n
    mu = X.mean(axis=1)
    centered = X - mu[:, None]
    U, s, _ = np.linalg.svd(centered, full_matrices=False)
    n = len(curves)
    ev = s[:n_bases] ** 2 / max(n - 1, 1)
    U = U[:, :n_bases]
    # fix the sign so results do not depend on the LAPACK build
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])])
    flip[flip == 0] = 1.0
    U = U * flip
    # rank-deficient training sets (e.g. a single curve) yield null directions
    degenerate = bool(n < 2 or s[n_bases - 1] <= 1e-12 * max(s[0], 1e-300))
    return BrdfDictionary(grid, mu, U * np.sqrt(ev), ev, degenerate)


def eval_log_brdf(dictionary: BrdfDictionary, c, theta: float) -> float:
    theta = float(theta)
    if not 0.0 <= theta < np.pi / 2:
        raise ValueError("theta must lie in [0, pi/2)")
    return float(dictionary.curve(c).log_rho(theta))


def fit_curve(dictionary: BrdfDictionary, target: BrdfCurve, ridge: float) -> np.ndarray:
    """Ridge fit of ``target - mu`` onto the basis."""
    if not np.array_equal(target.theta_grid, dictionary.theta_grid):
        raise ValueError("target curve must be on the dictionary grid")
    D = dictionary.bases
    rhs = target.log_values - dictionary.mu
    if ridge > 0:
        A = D.T @ D + ridge * np.eye(D.shape[1])
        return np.linalg.solve(A, D.T @ rhs)
    return np.linalg.lstsq(D, rhs, rcond=None)[0]


def e_c(c) -> float:
    c = np.asarray(c, dtype=np.float64)
    return float(c @ c)


def analytic_brdf(albedo: float, specular_strength: float, roughness: float, grid=None) -> BrdfCurve:
    """Lambertian plus a retro-reflective Beckmann-like lobe, cosine included."""
    if not albedo > 0 or specular_strength < 0 or not roughness > 0:
        raise ValueError("need albedo > 0, specular_strength >= 0, roughness > 0")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    cos = np.cos(grid)
    tan2 = np.tan(grid) ** 2
    with np.errstate(under="ignore"):
        lobe = specular_strength * np.exp(-tan2 / roughness**2) / cos**4
    rho = cos * (albedo + lobe)
    return BrdfCurve(grid, np.log(np.maximum(rho, LOG_FLOOR)))


def analytic_family(n: int, seed: int = 0, grid=None) -> list:
    """Random analytic materials, diffuse to fairly glossy."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        albedo = float(np.exp(rng.uniform(np.log(0.05), np.log(0.9))))
        strength = float(np.exp(rng.uniform(np.log(0.01), np.log(3.0))))
        rough = float(rng.uniform(0.1, 0.6))
        out.append(analytic_brdf(albedo, strength, rough, grid))
    return out


def merl_colocated_slice(merl_bytes: bytes) -> BrdfCurve:
    """Co-located slice (theta_d = phi_d = 0) of a MERL binary BRDF table.

    Returns a log-luminance curve, cosine-weighted, sampled at the
    theta_h bin centres ``((i + 0.5) / n)^2 * pi / 2``.
    """
    if len(merl_bytes) < 12:
        raise ValueError("MERL buffer too short for its header")
    dims = struct.unpack("<3i", merl_bytes[:12])
    if any(d <= 0 for d in dims):
        raise ValueError(f"invalid MERL dimensions {dims}")
    n = dims[0] * dims[1] * dims[2]
    expected = 12 + 8 * 3 * n
    if len(merl_bytes) != expected:
        raise ValueError(f"MERL buffer has {len(merl_bytes)} bytes, expected {expected}")
    data = np.frombuffer(merl_bytes, dtype="<f8", offset=12).reshape(3, *dims)
    rgb = data[:, :, 0, 0].T * MERL_SCALE  # (n_theta_h, 3)
    luma = rgb @ LUMA
    n_th = dims[0]
    grid = ((np.arange(n_th) + 0.5) / n_th) ** 2 * (np.pi / 2)
    rho = luma * np.cos(grid)
    return BrdfCurve(grid, np.log(np.maximum(rho, LOG_FLOOR)))


def merl_bytes(table: np.ndarray) -> bytes:
    """Serialise a ``(3, n_th, n_td, n_pd)`` table in MERL layout."""
    table = np.asarray(table, dtype="<f8")
    header = struct.pack("<3i", *table.shape[1:])
    return header + table.tobytes()

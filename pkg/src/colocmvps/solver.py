"""Coordinate descent between reflectance and shape.

The shape step relaxes ``z = zt`` with a quadratic penalty whose weight
grows geometrically; for fixed ``zt`` the relaxed energy splits into
independent per-pixel terms that PatchMatch searches, and for fixed
``(n, z)`` it is a sparse linear least-squares problem in ``zt``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .brdf import BrdfDictionary, interp_weights
from .energy import (
    EnergyParams,
    PhotometricModel,
    QpmEnergy,
    huber,
    huber_grad,
    total_energy,
)
from .scene import Dataset, SurfaceEstimate, neighbor_table

log = logging.getLogger(__name__)

CHUNK = 2048


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    energy: EnergyParams = field(default_factory=EnergyParams)
    z_min: float = 0.5
    z_max: float = 1.5
    sigma0: float | None = None
    kappa: float = 1.3
    patchmatch_iters: int = 12
    initial_sweeps: int | None = None
    random_samples_per_pixel: int = 8
    search_shrink: float = 0.5
    outer_iters: int = 50
    outer_rtol: float = 1e-6
    sigma_restart: float | None = 1e-3
    # quantiles of the log-gain heuristic tried as starts; the lowest energy after one outer step wins
    gamma_quantiles: tuple[float, ...] = (0.5, 0.75, 0.98)
    qpm_constraint_tol: float | None = None
    qpm_energy_rtol: float = 1e-9
    max_qpm_iters: int = 200
    brdf_max_iters: int = 200
    brdf_gtol: float = 1e-8
    rng_seed: int = 0
    threads: int = 1

    def validate(self, n_views: int | None = None):
        self.energy.validate(n_views)
        if not self.kappa > 1:
            raise ValueError("kappa must be > 1")
        if not self.z_min < self.z_max or self.z_min <= 0:
            raise ValueError("need 0 < z_min < z_max")
        for name in ("patchmatch_iters", "random_samples_per_pixel", "outer_iters", "max_qpm_iters", "brdf_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.initial_sweeps is not None and self.initial_sweeps < 1:
            raise ValueError("initial_sweeps must be >= 1")
        if not 0 < self.search_shrink < 1:
            raise ValueError("search_shrink must be in (0, 1)")
        if self.sigma_restart is not None and not 0 < self.sigma_restart <= 1:
            raise ValueError("sigma_restart must be in (0, 1]")
        if not self.gamma_quantiles or not all(0 < q <= 1 for q in self.gamma_quantiles):
            raise ValueError("gamma_quantiles must be non-empty, each in (0, 1]")
        if self.sigma0 is not None and not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")
        return self

    @property
    def constraint_tol(self) -> float:
        if self.qpm_constraint_tol is not None:
            return self.qpm_constraint_tol
        return 1e-4 * (self.z_max - self.z_min)


@dataclass
class AuxDepth:
    z_tilde: np.ndarray
    residual: float = 0.0


# -- BRDF step -------------------------------------------------------------------


class _BrdfObjective:
    """Frozen-view-set objective in ``p = [c, log_gamma]``."""

    def __init__(self, model: PhotometricModel, idx, n, z):
        d = model.dictionary
        chosen, ok = model.chosen_views(idx, n, z)
        dirs, target, _ = model.view_terms(idx, z)
        theta, _ = model.angles(dirs, n)
        cols = np.broadcast_to(np.arange(len(idx)), chosen.shape)
        th = theta[chosen, cols][ok]
        tg = target[chosen, cols][ok]
        self.B = d.basis_rows(th)
        i, f = interp_weights(d.theta_grid, th)
        self.b = d.mu[i] + f * (d.mu[i + 1] - d.mu[i]) - tg
        p = model.params
        self.scale = 1.0 / (len(idx) * p.m_min)
        self.const = self.scale * (~ok).sum() * model.miss
        self.delta = p.delta
        self.lambda_c = p.lambda_c

    def __call__(self, p):
        c = p[:-1]
        r = self.B @ c + self.b + p[-1]
        f = self.scale * huber(r, self.delta).sum() + self.const + self.lambda_c * (c @ c)
        g = huber_grad(r, self.delta) * self.scale
        grad = np.empty_like(p)
        grad[:-1] = self.B.T @ g + 2 * self.lambda_c * c
        grad[-1] = g.sum()
        return float(f), grad


def brdf_objective(model: PhotometricModel, estimate: SurfaceEstimate):
    """The BRDF-step objective (value, gradient) with view sets frozen at ``estimate``."""
    idx = np.nonzero(estimate.mask.ravel())[0]
    n = estimate.normals.reshape(-1, 3)[idx]
    z = estimate.depth.ravel()[idx]
    return _BrdfObjective(model, idx, n, z)


def solve_brdf(
    dataset: Dataset,
    estimate: SurfaceEstimate,
    dictionary: BrdfDictionary,
    c_init,
    log_gamma_init: float,
    params: EnergyParams,
    max_iters: int = 200,
    gtol: float = 1e-8,
    model: PhotometricModel | None = None,
):
    """Minimise the photometric + prior energy over ``(c, log_gamma)``.

    View sets are chosen at the entry state and held fixed. Returns
    ``(c, log_gamma, objective)``; the objective never exceeds its entry
    value.
    """
    model = model or PhotometricModel(dataset, dictionary, params)
    model.set_brdf(c_init, log_gamma_init)
    obj = brdf_objective(model, estimate)
    p0 = np.append(np.asarray(c_init, dtype=np.float64), float(log_gamma_init))
    f0, _ = obj(p0)
    if not np.isfinite(f0):
        raise SolverError("non-finite BRDF objective at entry")
    res = scipy.optimize.minimize(
        obj,
        p0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iters, "gtol": gtol, "ftol": 1e-15, "maxcor": 20},
    )
    p = res.x if res.fun <= f0 else p0
    return p[:-1].copy(), float(p[-1]), float(min(res.fun, f0))


# -- auxiliary depth ------------------------------------------------------------------


def _ztilde_system(normals, mask, rays, lambda_s, n_pixels):
    """Sparse operator ``A`` with ``||A zt||^2 = lambda_s * E_s(n, zt)``."""
    table = neighbor_table(mask)
    flat = np.nonzero(mask.ravel())[0]
    pos = np.full(mask.size, -1, dtype=np.intp)
    pos[flat] = np.arange(flat.size)
    N = normals.reshape(-1, 3)
    cnt = (table[flat] >= 0).sum(axis=1)
    w = np.sqrt(lambda_s / (n_pixels * np.maximum(cnt, 1)))
    rows, cols, vals = [], [], []
    r0 = 0
    for i in range(4):
        j = table[flat, i]
        ok = j >= 0
        k = flat[ok]
        jj = j[ok]
        m = ok.sum()
        rid = r0 + np.arange(m)
        a_kk = np.einsum("ij,ij->i", N[k], rays[k]) * w[ok]
        a_kj = -np.einsum("ij,ij->i", N[k], rays[jj]) * w[ok]
        rows += [rid, rid]
        cols += [pos[k], pos[jj]]
        vals += [a_kk, a_kj]
        r0 += m
    A = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(r0, flat.size),
    )
    return A, flat


def solve_ztilde(
    estimate: SurfaceEstimate,
    z,
    lambda_s: float,
    sigma: float,
    ref_camera,
    rtol: float = 1e-10,
    method: str = "direct",
) -> AuxDepth:
    """Global minimiser of ``lambda_s E_s(n, zt) + sigma ||zt - z||^2``.

    Points are affine in depth (``x = zt v + o``), so every tangent term is
    linear in ``zt`` and the problem is sparse linear least squares. The
    default factorises the normal equations and refines iteratively, with
    residuals in extended precision, until the relative normal-equation
    residual is below ``rtol``; ``method="lsqr"``
    runs LSQR on the stacked system instead.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    mask = estimate.mask
    z = np.asarray(z, dtype=np.float64).reshape(mask.shape)
    flat = np.nonzero(mask.ravel())[0]
    zf = z.ravel()[flat]
    out = z.copy()
    rays = ref_camera.rays(ref_camera.pixel_grid())
    if lambda_s == 0 or flat.size == 0:
        return AuxDepth(out, 0.0)
    A, flat = _ztilde_system(estimate.normals, mask, rays, lambda_s, flat.size)
    rhs = sigma * zf
    Q = (A.T @ A + sigma * scipy.sparse.identity(flat.size)).tocsc()
    # residuals in extended precision: in double, evaluating Q x loses ~cond(Q) eps on its own
    Q_ext = Q.astype(np.longdouble)
    rhs_ext = rhs.astype(np.longdouble)
    rhs_norm = np.linalg.norm(rhs_ext)

    def residual(x):
        return rhs_ext - Q_ext @ x.astype(np.longdouble)

    def rel_residual(x):
        return float(np.linalg.norm(residual(x)) / rhs_norm)

    if method == "lsqr":
        stacked = scipy.sparse.vstack([A, math.sqrt(sigma) * scipy.sparse.identity(flat.size)]).tocsr()
        b = np.concatenate([np.zeros(A.shape[0]), math.sqrt(sigma) * zf])
        x = scipy.sparse.linalg.lsqr(stacked, b, atol=1e-16, btol=1e-16, iter_lim=100_000, x0=zf)[0]
        res = rel_residual(x)
    else:
        lu = scipy.sparse.linalg.splu(Q)
        x = lu.solve(rhs)
        res = rel_residual(x)
        for _ in range(10):
            if res < rtol:
                break
            x = x + lu.solve(residual(x).astype(np.float64))
            res = rel_residual(x)
    out.ravel()[flat] = x
    return AuxDepth(out, float(res))


# -- PatchMatch ------------------------------------------------------------------------


def _orthonormal_frame(n):
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def sample_cone(n, half_angle, u1, u2):
    """Directions uniform (in solid angle) within ``half_angle`` of ``n``."""
    cos_max = np.cos(half_angle)
    cos_a = 1.0 - u1 * (1.0 - cos_max)
    sin_a = np.sqrt(np.maximum(0.0, 1.0 - cos_a * cos_a))
    phi = 2 * np.pi * u2
    t1, t2 = _orthonormal_frame(n)
    out = cos_a[:, None] * n + sin_a[:, None] * (np.cos(phi)[:, None] * t1 + np.sin(phi)[:, None] * t2)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def random_normals(rays, u1, u2):
    """Uniform normals on the hemisphere facing the reference camera."""
    cos_t = 2 * u1 - 1
    sin_t = np.sqrt(np.maximum(0.0, 1 - cos_t * cos_t))
    phi = 2 * np.pi * u2
    n = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    flip = np.einsum("ij,ij->i", n, rays) > 0
    n[flip] *= -1
    return n


class PatchMatch:
    """Per-pixel randomized search over ``(n_k, z_k)`` for a fixed relaxed energy.

    State lives in flat ``(H*W, 3)`` / ``(H*W,)`` arrays; only masked pixels
    are touched. Random numbers for a sweep are drawn for every pixel from a
    stream keyed by ``(seed, sweep, colour)`` and indexed by pixel, so the
    result does not depend on chunking or thread count.
    """

    def __init__(self, model: PhotometricModel, config: SolverConfig):
        self.model = model
        self.config = config
        h, w = model.shape
        self.table = neighbor_table(model.mask.reshape(h, w))
        rows, cols = np.divmod(np.arange(h * w), w)
        colour = (rows + cols) % 2
        self.colours = [np.nonzero(model.mask & (colour == c))[0] for c in (0, 1)]
        self.sweeps_done = 0

    def _rng(self, sweep, colour, salt=0):
        return np.random.default_rng([self.config.rng_seed, sweep, colour, salt])

    def random_state(self, salt: int = 7):
        m = self.model
        rng = np.random.default_rng([self.config.rng_seed, 0, 2, salt])
        u = rng.random((m.rays.shape[0], 3))
        n = random_normals(m.rays, u[:, 0], u[:, 1])
        z = self.config.z_min + u[:, 2] * (self.config.z_max - self.config.z_min)
        return n, z

    def _map(self, fn, idx):
        chunks = [idx[s : s + CHUNK] for s in range(0, len(idx), CHUNK)]
        if self.config.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.config.threads) as pool:
                list(pool.map(fn, chunks))
        else:
            for ch in chunks:
                fn(ch)

    def sweep(self, energy: QpmEnergy, n, z, cost):
        """One red/black sweep; updates ``n, z, cost`` in place."""
        cfg = self.config
        sweep_id = self.sweeps_done
        self.sweeps_done += 1
        R = cfg.random_samples_per_pixel
        npix = self.model.rays.shape[0]
        for colour in (0, 1):
            idx_all = self.colours[colour]
            if idx_all.size == 0:
                continue
            rng = self._rng(sweep_id, colour)
            draws = rng.random((npix, R + 1, 3))

            def work(idx):
                self._propagate(energy, n, z, cost, idx)
                self._random_search(energy, n, z, cost, idx, draws[idx])

            self._map(work, idx_all)

    def _try(self, energy, n, z, cost, idx, cn, cz, ok):
        """Evaluate candidates where ``ok``; keep strict improvements."""
        if not ok.any():
            return
        sel = idx[ok]
        cn = cn[ok]
        cz = cz[ok]
        e = energy(sel, cn, cz)
        better = e < cost[sel]
        if better.any():
            s = sel[better]
            n[s] = cn[better]
            z[s] = cz[better]
            cost[s] = e[better]

    def _valid(self, idx, cn, cz):
        cfg = self.config
        facing = np.einsum("ij,ij->i", cn, self.model.rays[idx]) < 0
        return facing & (cz >= cfg.z_min) & (cz <= cfg.z_max) & np.isfinite(cz)

    def _propagate(self, energy, n, z, cost, idx):
        rays = self.model.rays
        o = self.model.origin
        for i in range(4):
            j = self.table[idx, i]
            has = j >= 0
            js = np.where(has, j, idx)
            nj = n[js]
            zj = z[js]
            self._try(energy, n, z, cost, idx, nj, zj, has & self._valid(idx, nj, zj))
            # depth where k's ray meets j's tangent plane
            xj = zj[:, None] * rays[js] + o
            denom = np.einsum("ij,ij->i", nj, rays[idx])
            num = np.einsum("ij,ij->i", nj, xj - o)
            safe = np.abs(denom) > 1e-12
            zp = np.where(safe, num / np.where(safe, denom, 1.0), np.nan)
            self._try(energy, n, z, cost, idx, nj, zp, has & safe & self._valid(idx, nj, zp))

    def _random_search(self, energy, n, z, cost, idx, draws):
        cfg = self.config
        rays = self.model.rays[idx]
        span = cfg.z_max - cfg.z_min
        R = cfg.random_samples_per_pixel
        for r in range(R):
            shrink = cfg.search_shrink**r
            angle = 0.5 * np.pi * shrink
            radius = 0.5 * span * shrink
            u = draws[:, r]
            cn = sample_cone(n[idx], angle, u[:, 0], u[:, 1])
            cz = np.clip(z[idx] + (2 * u[:, 2] - 1) * radius, cfg.z_min, cfg.z_max)
            self._try(energy, n, z, cost, idx, cn, cz, self._valid(idx, cn, cz))
        u = draws[:, R]
        cn = random_normals(rays, u[:, 0], u[:, 1])
        cz = cfg.z_min + u[:, 2] * span
        self._try(energy, n, z, cost, idx, cn, cz, self._valid(idx, cn, cz))
        if energy.z_tilde is not None:
            cz = np.clip(energy.z_tilde[idx], cfg.z_min, cfg.z_max)
            cn = n[idx]
            self._try(energy, n, z, cost, idx, cn, cz, self._valid(idx, cn, cz))


def patchmatch_sweep(state, z_tilde, dataset, dictionary, c, params, sigma, config: SolverConfig, sweep_index=0):
    """One PatchMatch sweep on the relaxed energy (functional wrapper).

    ``state`` is ``(normals (H, W, 3), depth (H, W))``; returns the updated
    pair. ``z_tilde=None`` searches the photometric term alone.
    """
    model = PhotometricModel(dataset, dictionary, params, c)
    pm = PatchMatch(model, config)
    pm.sweeps_done = sweep_index
    n = np.array(state[0], dtype=np.float64).reshape(-1, 3)
    z = np.array(state[1], dtype=np.float64).ravel()
    q = QpmEnergy(model, z_tilde, sigma)
    idx = np.nonzero(model.mask)[0]
    cost = np.full(z.size, np.inf)
    cost[idx] = q(idx, n[idx], z[idx])
    pm.sweep(q, n, z, cost)
    h, w = model.shape
    return n.reshape(h, w, 3), z.reshape(h, w)


# -- shape step ------------------------------------------------------------------------


@dataclass
class ShapeInfo:
    sigma: float
    gap: float
    loops: int
    escalations: int
    constraint_satisfied: bool
    energy_converged: bool
    kept_entry: bool = False
    qpm_trace: list = field(default_factory=list)


def _qpm_total(cost, idx):
    return float(cost[idx].sum())


def solve_shape(
    model: PhotometricModel,
    config: SolverConfig,
    init=None,
    sigma0: float | None = None,
    pm: PatchMatch | None = None,
    callback=None,
    check_descent: bool = False,
):
    """Quadratic-penalty shape solve for the BRDF currently set on ``model``.

    ``init`` is ``(normals, depth)`` maps or ``None`` for a random start (in
    which case a purely photometric PatchMatch pass runs first). Returns
    ``(SurfaceEstimate, ShapeInfo)``.
    """
    cfg = config
    p = model.params
    h, w = model.shape
    pm = pm or PatchMatch(model, cfg)
    idx = np.nonzero(model.mask)[0]
    mask = model.mask.reshape(h, w)
    if idx.size == 0:
        raise SolverError("empty mask")

    def estimate_of(n, z):
        nn = n.reshape(h, w, 3).copy()
        zz = z.reshape(h, w).copy()
        return SurfaceEstimate(zz, nn, mask)

    entry_energy = None
    if init is None:
        n, z = pm.random_state()
        photometric = QpmEnergy(model)
        cost = np.full(z.size, np.inf)
        cost[idx] = photometric(idx, n[idx], z[idx])
        for _ in range(cfg.initial_sweeps or cfg.patchmatch_iters):
            before = _qpm_total(cost, idx)
            pm.sweep(photometric, n, z, cost)
            if check_descent:
                assert _qpm_total(cost, idx) <= before + 1e-12 * max(1.0, abs(before))
    else:
        n = np.array(init[0], dtype=np.float64).reshape(-1, 3)
        z = np.array(init[1], dtype=np.float64).ravel()
        entry_energy = total_energy(model.dataset, estimate_of(n, z), model.dictionary, model.c, replace(p, log_gamma=model.log_gamma), model)
        entry = (n.copy(), z.copy())

    z_tilde = z.copy()
    if sigma0 is None:
        sigma0 = cfg.sigma0
    if sigma0 is None:
        ep = model.partial(idx, n[idx], z[idx]).sum() / (idx.size * p.m_min)
        sigma0 = 1e-3 * max(ep, 1e-12) / (cfg.z_max - cfg.z_min) ** 2
    sigma = sigma0
    tol = cfg.constraint_tol
    info = ShapeInfo(sigma, np.inf, 0, 0, False, False)
    prev = None
    for loop in range(cfg.max_qpm_iters):
        q = QpmEnergy(model, z_tilde, sigma)
        cost = np.full(z.size, np.inf)
        cost[idx] = q(idx, n[idx], z[idx])
        for _ in range(cfg.patchmatch_iters):
            before = _qpm_total(cost, idx)
            pm.sweep(q, n, z, cost)
            after = _qpm_total(cost, idx)
            info.qpm_trace.append(("sweep", sigma, after))
            if check_descent and after > before + 1e-12 * max(1.0, abs(before)):
                raise SolverError(f"PatchMatch increased E_QPM: {before} -> {after}")
        before = _qpm_total(cost, idx)
        aux = solve_ztilde(estimate_of(n, z), z.reshape(h, w), p.lambda_s, sigma, model.ref_camera)
        z_tilde = aux.z_tilde.ravel()
        q_new = QpmEnergy(model, z_tilde, sigma)
        e_now = float(q_new(idx, n[idx], z[idx]).sum())
        info.qpm_trace.append(("ztilde", sigma, e_now))
        if check_descent and e_now > before + 1e-12 * max(1.0, abs(before)):
            raise SolverError(f"auxiliary solve increased E_QPM: {before} -> {e_now}")
        gap = float(np.abs(z[idx] - z_tilde[idx]).max())
        info.loops = loop + 1
        info.gap = gap
        info.sigma = sigma
        if callback:
            callback(loop, sigma, e_now, gap)
        if gap > tol:
            sigma *= cfg.kappa
            info.escalations += 1
            prev = None
            continue
        info.constraint_satisfied = True
        if prev is not None and abs(prev - e_now) <= cfg.qpm_energy_rtol * abs(e_now):
            info.energy_converged = True
            break
        prev = e_now
    info.constraint_satisfied = info.gap <= tol

    est = estimate_of(n, z)
    if entry_energy is not None:
        final = total_energy(model.dataset, est, model.dictionary, model.c, replace(p, log_gamma=model.log_gamma), model)
        if final > entry_energy:
            est = estimate_of(*entry)
            info.kept_entry = True
    return est, info


# -- full reconstruction ---------------------------------------------------------------


@dataclass
class Reconstruction:
    estimate: SurfaceEstimate
    c: np.ndarray
    log_gamma: float
    trace: list
    converged: bool
    shape_infos: list = field(default_factory=list)


def initial_log_gamma(model: PhotometricModel, config: SolverConfig, q: float = 0.5) -> float:
    """``q``-quantile of ``log I + log d^2 - mu(0)`` over the mask at mid-range depth.

    The median assumes a typical pixel sits near normal incidence; high quantiles
    pick the brightest pixels, which suit steeply falling materials better.
    """
    ref = model.dataset.reference.intensities.ravel()
    idx = np.nonzero(model.mask & (ref > 0))[0]
    if idx.size == 0:
        return 0.0
    z_mid = 0.5 * (config.z_min + config.z_max)
    d2 = (z_mid * np.linalg.norm(model.rays[idx], axis=1)) ** 2
    vals = np.log(ref[idx]) + np.log(d2) - model.dictionary.mu[0]
    return float(np.quantile(vals, q))


def reconstruct(dataset: Dataset, dictionary: BrdfDictionary, config: SolverConfig, callback=None, check_descent=False) -> Reconstruction:
    """Alternate shape and BRDF solves from ``c = 0`` and a random shape.

    ``callback(outer, phase, sigma, energy, gap)`` fires after every half-step.
    """
    if len(dataset.views) < 2:
        raise SolverError("need at least two views")
    config.validate(len(dataset.views))
    if not dataset.mask.any():
        raise SolverError("empty mask")
    p = config.energy
    model = PhotometricModel(dataset, dictionary, p)

    def outer_step(run, outer):
        # warm-started shape solves restart the penalty below where the last one stopped
        sigma0 = None
        if run["infos"] and config.sigma0 is None and config.sigma_restart is not None:
            sigma0 = run["infos"][-1].sigma * config.sigma_restart
        model.set_brdf(run["c"], run["lg"])
        est, info = solve_shape(model, config, init=run["state"], sigma0=sigma0, pm=run["pm"], check_descent=check_descent)
        run["infos"].append(info)
        run["state"] = (est.normals, est.depth)
        run["est"] = est
        e_shape = total_energy(dataset, est, dictionary, run["c"], replace(p, log_gamma=run["lg"]), model)
        c, lg, _ = solve_brdf(dataset, est, dictionary, run["c"], run["lg"], p, config.brdf_max_iters, config.brdf_gtol, model)
        run["c"], run["lg"] = c, lg
        model.set_brdf(c, lg)
        e_brdf = total_energy(dataset, est, dictionary, c, replace(p, log_gamma=lg), model)
        for phase, e, esc in (("shape", e_shape, info.escalations > 0), ("brdf", e_brdf, False)):
            run["trace"].append(
                {"outer": outer, "phase": phase, "sigma": info.sigma, "energy": e, "gap": info.gap,
                 "escalated": esc, "constraint": info.constraint_satisfied}
            )
        log.info("outer %d: E_shape=%.6g E_brdf=%.6g sigma=%.3g gap=%.3g", outer, e_shape, e_brdf, info.sigma, info.gap)
        return e_brdf

    best = None
    for q in dict.fromkeys(config.gamma_quantiles):
        lg0 = initial_log_gamma(model, config, q)
        run = {"c": np.zeros(dictionary.n_bases), "lg": lg0, "state": None,
               "pm": PatchMatch(model, config), "infos": [], "trace": [], "q": q}
        run["energy"] = outer_step(run, 0)
        log.info("gain start q=%.3g: log_gamma0=%.4g E=%.6g", q, lg0, run["energy"])
        if best is None or run["energy"] < best["energy"]:
            best = run
    run = best
    if callback:
        for r in run["trace"]:
            callback(0, r["phase"], r["sigma"], r["energy"], r["gap"])
    prev_outer = run["energy"]
    converged = False
    for outer in range(1, config.outer_iters):
        e_brdf = outer_step(run, outer)
        if callback:
            for r in run["trace"][-2:]:
                callback(outer, r["phase"], r["sigma"], r["energy"], r["gap"])
        if abs(prev_outer - e_brdf) <= config.outer_rtol * abs(e_brdf):
            converged = True
            break
        prev_outer = e_brdf
    infos, trace, est, c, lg = run["infos"], run["trace"], run["est"], run["c"], run["lg"]
    model.set_brdf(c, lg)
    converged = converged and infos[-1].constraint_satisfied
    est.meta.update(log_gamma=lg, gamma_quantile=run["q"])
    return Reconstruction(est, c, lg, trace, converged, infos)

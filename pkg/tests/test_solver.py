from dataclasses import replace

import numpy as np
import pytest
import scipy.optimize

from colocmvps.energy import EnergyParams, PhotometricModel, QpmEnergy, e_qpm, huber
from colocmvps.pipeline import render_scene
from colocmvps.scene import Dataset, SurfaceEstimate
from colocmvps.solver import (
    PatchMatch,
    SolverConfig,
    SolverError,
    _ztilde_system,
    brdf_objective,
    initial_log_gamma,
    patchmatch_sweep,
    reconstruct,
    solve_brdf,
    solve_shape,
    solve_ztilde,
)

from conftest import scene_config

TH80 = np.radians(80) + 1e-12


def gt_estimate(scene):
    r = scene.gt
    return SurfaceEstimate(np.where(r.hit, r.depth, 1.0), r.normals, r.hit)


def median_angle(a, b, mask):
    dot = np.clip(np.einsum("...i,...i->...", a, b)[mask], -1, 1)
    return float(np.degrees(np.median(np.arccos(dot))))


class TargetEnergy:
    """Separable toy energy with a known per-pixel optimum."""

    z_tilde = None

    def __init__(self, n_star, z_star):
        self.n_star = n_star
        self.z_star = z_star

    def __call__(self, idx, n, z):
        return ((n - self.n_star[idx]) ** 2).sum(1) + (z - self.z_star[idx]) ** 2


# -- BRDF step -----------------------------------------------------------------------


def test_solve_brdf_recovers_material_on_true_shape(small_scene):
    d = small_scene.dictionary
    p = EnergyParams(lambda_s=1e5, lambda_c=1e-4, m_min=5)
    c, lg, _ = solve_brdf(small_scene.dataset, gt_estimate(small_scene), d, np.zeros(15), 0.0, p)
    err = np.abs(d.table(c) - small_scene.curve.log_values)[d.theta_grid <= TH80].mean()
    assert err < 0.05
    assert lg == pytest.approx(np.log(small_scene.gamma), abs=0.1)


def test_solve_brdf_huge_prior_gives_gamma_only_fit(small_scene):
    d = small_scene.dictionary
    est = gt_estimate(small_scene)
    p = EnergyParams(lambda_c=1e9, m_min=5)
    c, lg, _ = solve_brdf(small_scene.dataset, est, d, np.zeros(15), 0.0, p)
    assert np.abs(c).max() < 1e-6
    # oracle: one-dimensional robust fit of log gamma with c = 0 and views frozen at entry
    model = PhotometricModel(small_scene.dataset, d, p)
    obj = brdf_objective(model, est)
    b = obj.b
    res = scipy.optimize.minimize_scalar(lambda g: huber(b + g, p.delta).sum(), bounds=(-5, 5), method="bounded",
                                         options={"xatol": 1e-12})
    assert lg == pytest.approx(res.x, abs=1e-5)


def test_solve_brdf_fixed_point(small_scene):
    # two copies of the reference view: every pixel keeps both views, so the
    # frozen sets cannot change between calls
    d = small_scene.dictionary
    est = gt_estimate(small_scene)
    ref = small_scene.gt.image
    ds = Dataset((ref, ref), 0, est.mask)
    p = EnergyParams(lambda_c=1e-3, m_min=2)
    c, lg, f1 = solve_brdf(ds, est, d, np.zeros(15), 0.0, p)
    c2, lg2, f2 = solve_brdf(ds, est, d, c, lg, p)
    assert f2 <= f1
    assert f1 - f2 < 1e-12


def test_solve_brdf_objective_never_increases(small_scene, rng):
    d = small_scene.dictionary
    est = gt_estimate(small_scene)
    p = EnergyParams(lambda_c=1e-2, m_min=5)
    model = PhotometricModel(small_scene.dataset, d, p)
    for _ in range(3):
        c0 = rng.normal(scale=0.5, size=15)
        g0 = rng.normal(scale=0.3)
        model.set_brdf(c0, g0)
        f0, _ = brdf_objective(model, est)(np.append(c0, g0))
        _, _, f = solve_brdf(small_scene.dataset, est, d, c0, g0, p, model=model)
        assert f <= f0


def test_brdf_gradient_matches_central_differences(small_scene, rng):
    d = small_scene.dictionary
    p = EnergyParams(lambda_c=0.005, m_min=5)
    model = PhotometricModel(small_scene.dataset, d, p)
    obj = brdf_objective(model, gt_estimate(small_scene))
    h = 1e-6
    for _ in range(20):
        x = np.append(rng.normal(scale=0.5, size=15), rng.normal(scale=0.3))
        _, g = obj(x)
        fd = np.array([(obj(x + h * e)[0] - obj(x - h * e)[0]) / (2 * h) for e in np.eye(16)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


# -- auxiliary depth -------------------------------------------------------------------------


def _aux_case(rng, shape=(3, 3), lambda_s=50.0):
    scene = render_scene(scene_config(res=max(shape), n_views=2))
    cam = scene.gt.image.camera
    mask = np.ones(shape, bool)
    n = rng.normal(size=shape + (3,))
    n[..., 2] = np.abs(n[..., 2]) + 2
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    z = 1.0 + 0.05 * rng.normal(size=shape)
    if shape[0] != cam.height or shape[1] != cam.width:
        raise ValueError("shape must be square and match the camera")
    return cam, SurfaceEstimate(z, n, mask), z


def _dense_oracle(cam, est, z, lambda_s, sigma):
    # build the quadratic directly from the definition, one row per ordered neighbour pair
    H, W = z.shape
    K = H * W
    rays = cam.rays(cam.pixel_grid())
    N = est.normals.reshape(-1, 3)
    rows = []
    for r in range(H):
        for q in range(W):
            k = r * W + q
            nb = [(r + a) * W + q + b for a, b in ((-1, 0), (1, 0), (0, -1), (0, 1)) if 0 <= r + a < H and 0 <= q + b < W]
            for j in nb:
                row = np.zeros(K)
                row[k] += N[k] @ rays[k]
                row[j] -= N[k] @ rays[j]
                rows.append(row * np.sqrt(lambda_s / (K * len(nb))))
    A = np.array(rows)
    Q = A.T @ A + sigma * np.eye(K)
    return np.linalg.solve(Q, sigma * z.ravel()).reshape(z.shape)


def test_ztilde_matches_dense_oracle(rng):
    for shape, lam, sigma in (((3, 3), 50.0, 0.3), ((6, 6), 1e3, 2.0), ((10, 10), 1e5, 10.0)):
        cam, est, z = _aux_case(rng, shape)
        got = solve_ztilde(est, z, lam, sigma, cam)
        oracle = _dense_oracle(cam, est, z, lam, sigma)
        assert np.abs(got.z_tilde - oracle).max() < 1e-10
        assert got.residual < 1e-10
        lsqr = solve_ztilde(est, z, lam, sigma, cam, method="lsqr")
        assert np.abs(lsqr.z_tilde - oracle).max() < 1e-8


def test_ztilde_limits(rng):
    cam, est, z = _aux_case(rng, (6, 6))
    assert np.array_equal(solve_ztilde(est, z, 0.0, 1.0, cam).z_tilde, z)
    big = solve_ztilde(est, z, 10.0, 1e12, cam)
    assert np.abs(big.z_tilde - z).max() < 1e-8
    with pytest.raises(ValueError):
        solve_ztilde(est, z, 1.0, 0.0, cam)


def test_ztilde_residual_at_scale(small_scene, rng):
    est = gt_estimate(small_scene)
    z = est.depth + 1e-3 * rng.normal(size=est.depth.shape)
    aux = solve_ztilde(est, z, 1e6, 1e-3, small_scene.gt.image.camera)
    assert aux.residual < 1e-10


def test_ztilde_operator_reproduces_smoothness(small_scene, rng):
    from colocmvps.energy import e_s

    est = gt_estimate(small_scene)
    cam = small_scene.gt.image.camera
    z = est.depth + 1e-3 * rng.normal(size=est.depth.shape)
    rays = cam.rays(cam.pixel_grid())
    A, flat = _ztilde_system(est.normals, est.mask, rays, 7.0, int(est.mask.sum()))
    val = np.sum((A @ z.ravel()[flat]) ** 2)
    assert val == pytest.approx(7.0 * e_s(SurfaceEstimate(z, est.normals, est.mask), cam), rel=1e-10)


# -- PatchMatch ------------------------------------------------------------------------------


def _toy_pm(scene, mask=None, **cfg):
    ds = scene.dataset
    if mask is not None:
        ds = Dataset(ds.views, 0, mask)
    model = PhotometricModel(ds, scene.dictionary, EnergyParams(m_min=5))
    config = SolverConfig(energy=model.params, z_min=0.8, z_max=1.2, **cfg)
    return model, PatchMatch(model, config)


def test_sweep_keeps_global_optimum(tiny_scene, rng):
    model, pm = _toy_pm(tiny_scene)
    n, z = pm.random_state()
    energy = TargetEnergy(n.copy(), z.copy())
    idx = np.flatnonzero(model.mask)
    cost = np.full(z.size, np.inf)
    cost[idx] = energy(idx, n[idx], z[idx])
    before = (n.copy(), z.copy())
    pm.sweep(energy, n, z, cost)
    assert np.array_equal(n, before[0]) and np.array_equal(z, before[1])


def test_sweep_never_increases_pixel_costs(tiny_scene):
    model, pm = _toy_pm(tiny_scene)
    n, z = pm.random_state()
    q = QpmEnergy(model, z.copy(), 1.0)
    idx = np.flatnonzero(model.mask)
    cost = np.full(z.size, np.inf)
    cost[idx] = q(idx, n[idx], z[idx])
    for _ in range(3):
        prev = cost.copy()
        pm.sweep(q, n, z, cost)
        assert np.all(cost[idx] <= prev[idx])
        assert np.allclose(cost[idx], q(idx, n[idx], z[idx]), rtol=0, atol=0)


def test_propagation_copies_seeded_neighbour(tiny_scene):
    mask = np.zeros(tiny_scene.gt.hit.shape, bool)
    mask[5, 5] = mask[5, 6] = True
    model, pm = _toy_pm(tiny_scene, mask)
    n, z = pm.random_state()
    a, b = 5 * 12 + 5, 5 * 12 + 6
    n_star = np.tile(n[a], (n.shape[0], 1))
    z_star = np.full(z.shape, z[a])
    energy = TargetEnergy(n_star, z_star)
    idx = np.array([a, b])
    cost = np.full(z.size, np.inf)
    cost[idx] = energy(idx, n[idx], z[idx])
    pm.sweep(energy, n, z, cost)
    assert np.array_equal(n[b], n[a]) and z[b] == z[a]


def test_patchmatch_sweep_wrapper_matches_object(tiny_scene):
    d, c = tiny_scene.dictionary, tiny_scene.c
    p = EnergyParams(lambda_s=1e3, m_min=5)
    cfg = SolverConfig(energy=p, z_min=0.8, z_max=1.2)
    model = PhotometricModel(tiny_scene.dataset, d, p, c)
    pm = PatchMatch(model, cfg)
    n, z = pm.random_state()
    zt = z.reshape(12, 12) + 0.01
    n2, z2 = patchmatch_sweep((n.reshape(12, 12, 3), z.reshape(12, 12)), zt, tiny_scene.dataset, d, c, p, 2.0, cfg)
    q = QpmEnergy(model, zt, 2.0)
    idx = np.flatnonzero(model.mask)
    cost = np.full(z.size, np.inf)
    cost[idx] = q(idx, n[idx], z[idx])
    pm.sweep(q, n, z, cost)
    assert np.array_equal(n2.reshape(-1, 3), n) and np.array_equal(z2.ravel(), z)


def test_sweeps_independent_of_thread_count(tiny_scene):
    out = []
    for threads in (1, 3):
        model, pm = _toy_pm(tiny_scene, threads=threads)
        n, z = pm.random_state()
        q = QpmEnergy(model, z.copy(), 1.0)
        idx = np.flatnonzero(model.mask)
        cost = np.full(z.size, np.inf)
        cost[idx] = q(idx, n[idx], z[idx])
        for _ in range(2):
            pm.sweep(q, n, z, cost)
        out.append((n.tobytes(), z.tobytes()))
    assert out[0] == out[1]


# -- shape step --------------------------------------------------------------------------------


def _shape_config(**kw):
    base = dict(
        energy=EnergyParams(lambda_s=1e5, lambda_c=1e-4, m_min=5),
        z_min=0.85, z_max=1.15, patchmatch_iters=2, initial_sweeps=8, qpm_energy_rtol=1e-3,
    )
    base.update(kw)
    return SolverConfig(**base)


def test_solve_shape_stable_at_ground_truth(small_scene):
    # at lambda_s = 1e5 the discrete smoothness bias alone moves the optimum ~0.75 deg off the truth
    cfg = _shape_config(energy=EnergyParams(lambda_s=1e4, lambda_c=1e-4, m_min=5))
    model = PhotometricModel(small_scene.dataset, small_scene.dictionary, cfg.energy, small_scene.c)
    gt = gt_estimate(small_scene)
    from colocmvps.energy import total_energy

    entry = total_energy(small_scene.dataset, gt, small_scene.dictionary, small_scene.c, cfg.energy, model)
    est, info = solve_shape(model, cfg, init=(gt.normals, gt.depth))
    final = total_energy(small_scene.dataset, est, small_scene.dictionary, small_scene.c, cfg.energy, model)
    assert final <= entry
    assert median_angle(est.normals, gt.normals, gt.mask) < 0.5
    assert info.constraint_satisfied


def test_solve_shape_from_random_start(small_scene):
    cfg = _shape_config(max_qpm_iters=150)
    model = PhotometricModel(small_scene.dataset, small_scene.dictionary, cfg.energy, small_scene.c)
    est, info = solve_shape(model, cfg, check_descent=True)
    assert info.constraint_satisfied
    assert info.gap <= cfg.constraint_tol
    assert median_angle(est.normals, small_scene.gt.normals, small_scene.gt.hit) < 5.0


def test_fixed_sigma_alternation_is_descent(tiny_scene):
    cfg = _shape_config(energy=EnergyParams(lambda_s=1e4, m_min=5))
    model = PhotometricModel(tiny_scene.dataset, tiny_scene.dictionary, cfg.energy, tiny_scene.c)
    pm = PatchMatch(model, cfg)
    n, z = pm.random_state()
    zt = z.copy()
    sigma = 0.5
    mask = model.mask.reshape(12, 12)
    idx = np.flatnonzero(model.mask)

    def energy():
        return e_qpm(model, SurfaceEstimate(z.reshape(12, 12), n.reshape(12, 12, 3), mask), zt, sigma)

    prev = energy()
    for _ in range(4):
        q = QpmEnergy(model, zt, sigma)
        cost = np.full(z.size, np.inf)
        cost[idx] = q(idx, n[idx], z[idx])
        pm.sweep(q, n, z, cost)
        e = energy()
        assert e <= prev + 1e-12 * abs(prev)
        prev = e
        est = SurfaceEstimate(z.reshape(12, 12), n.reshape(12, 12, 3), mask)
        zt = solve_ztilde(est, z.reshape(12, 12), cfg.energy.lambda_s, sigma, model.ref_camera).z_tilde.ravel()
        e = energy()
        assert e <= prev + 1e-12 * abs(prev)
        prev = e


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(kappa=1.0).validate()
    with pytest.raises(ValueError):
        SolverConfig(z_min=1.0, z_max=0.5).validate()
    with pytest.raises(ValueError):
        SolverConfig(patchmatch_iters=0).validate()
    with pytest.raises(ValueError):
        SolverConfig(energy=EnergyParams(m_min=6)).validate(n_views=5)
    assert SolverConfig(z_min=0.5, z_max=1.5).constraint_tol == pytest.approx(1e-4)


# -- full reconstruction -------------------------------------------------------------------------


def test_reconstruct_mean_material():
    cfg_scene = scene_config(24)
    cfg_scene["material"] = {"coefficients": [0.0] * 15}
    scene = render_scene(cfg_scene)
    cfg = _shape_config(energy=EnergyParams(lambda_s=1e4, lambda_c=1e-4, m_min=5), outer_iters=3)
    rec = reconstruct(scene.dataset, scene.dictionary, cfg)
    # a steep mean material favours the bright-pixel gain start
    assert rec.estimate.meta["gamma_quantile"] == 0.98
    assert np.linalg.norm(rec.c) < 0.1
    assert median_angle(rec.estimate.normals, scene.gt.normals, scene.gt.hit) < 5.0
    # trace: total energy never rises except where a penalty escalation is flagged
    energies = [t["energy"] for t in rec.trace]
    for prev, cur, row in zip(energies, energies[1:], rec.trace[1:]):
        assert cur <= prev * (1 + 1e-12) or row["escalated"]


def test_initial_log_gamma_quantiles(small_scene):
    cfg = _shape_config()
    model = PhotometricModel(small_scene.dataset, small_scene.dictionary, cfg.energy)
    ref = small_scene.dataset.reference.intensities.ravel()
    idx = np.nonzero(model.mask & (ref > 0))[0]
    d2 = np.linalg.norm(model.rays[idx], axis=1) ** 2
    vals = np.log(ref[idx]) + np.log(d2) - small_scene.dictionary.mu[0]
    assert initial_log_gamma(model, cfg) == pytest.approx(np.median(vals), abs=1e-12)
    assert initial_log_gamma(model, cfg, 1.0) == pytest.approx(vals.max(), abs=1e-12)


def test_reconstruct_keeps_lowest_energy_start(tiny_scene):
    base = _shape_config(energy=EnergyParams(lambda_s=1e4, lambda_c=1e-4, m_min=5), outer_iters=1)
    runs = {q: reconstruct(tiny_scene.dataset, tiny_scene.dictionary, replace(base, gamma_quantiles=(q,))) for q in (0.5, 0.98)}
    both = reconstruct(tiny_scene.dataset, tiny_scene.dictionary, replace(base, gamma_quantiles=(0.5, 0.98)))
    best = min(runs, key=lambda q: runs[q].trace[-1]["energy"])
    assert both.estimate.meta["gamma_quantile"] == best
    assert both.trace[-1]["energy"] == runs[best].trace[-1]["energy"]
    assert np.array_equal(both.estimate.depth, runs[best].estimate.depth)


def test_reconstruct_errors(tiny_scene):
    one = Dataset(tiny_scene.dataset.views[:1], 0, tiny_scene.dataset.mask)
    with pytest.raises(SolverError):
        reconstruct(one, tiny_scene.dictionary, SolverConfig(energy=EnergyParams(m_min=1)))
    empty = Dataset(tiny_scene.dataset.views, 0, np.zeros((12, 12), bool))
    with pytest.raises(SolverError):
        reconstruct(empty, tiny_scene.dictionary, SolverConfig())
    with pytest.raises(ValueError):
        reconstruct(tiny_scene.dataset, tiny_scene.dictionary, replace(SolverConfig(), energy=EnergyParams(m_min=11)))

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colocmvps.brdf import (
    LUMA,
    MERL_SCALE,
    BrdfCurve,
    BrdfDictionary,
    analytic_brdf,
    analytic_family,
    default_grid,
    e_c,
    eval_log_brdf,
    fit_curve,
    learn_dictionary,
    merl_bytes,
    merl_colocated_slice,
)


def test_default_grid():
    g = default_grid()
    assert g.size == 90
    assert g[0] == 0.0 and np.degrees(g[-1]) == pytest.approx(89.0)


def test_single_curve_dictionary_is_mean_only():
    cv = analytic_brdf(0.4, 0.2, 0.3)
    d = learn_dictionary([cv], 1)
    assert d.degenerate
    assert np.allclose(d.mu, cv.log_values)
    assert np.allclose(d.table(np.zeros(1)), cv.log_values)


def test_two_curves_basis_parallel_to_difference():
    a, b = analytic_brdf(0.4, 0.2, 0.3), analytic_brdf(0.1, 1.0, 0.2)
    d = learn_dictionary([a, b], 1)
    diff = a.log_values - b.log_values
    u = d.unweighted_bases()[:, 0]
    cos = abs(u @ diff) / (np.linalg.norm(u) * np.linalg.norm(diff))
    assert cos == pytest.approx(1.0, abs=1e-12)
    # 2-sample covariance eigenvalue: |a-b|^2 / 2
    assert d.eigenvalues[0] == pytest.approx(diff @ diff / 2)


def test_learn_dictionary_errors():
    curves = analytic_family(3)
    with pytest.raises(ValueError):
        learn_dictionary(curves, 4)
    odd = BrdfCurve(np.linspace(0, 1.2, 90), curves[0].log_values)
    with pytest.raises(ValueError):
        learn_dictionary([curves[0], odd], 1)


def test_dictionary_matches_covariance_eigendecomposition(dictionary):
    X = np.stack([c.log_values for c in analytic_family(40, seed=1)], axis=1)
    C = np.cov(X)
    w, V = np.linalg.eigh(C)
    w, V = w[::-1][:15], V[:, ::-1][:, :15]
    assert np.allclose(dictionary.eigenvalues, w, rtol=1e-8, atol=1e-12 * w[0])
    U = dictionary.unweighted_bases()
    for i in range(5):
        assert abs(U[:, i] @ V[:, i]) == pytest.approx(1.0, abs=1e-8)


def test_eigenvalue_weighting(dictionary):
    U = dictionary.unweighted_bases()
    ratio = np.linalg.norm(dictionary.bases, axis=0) / np.linalg.norm(U, axis=0)
    assert np.allclose(ratio, np.sqrt(dictionary.eigenvalues), rtol=1e-8)


def test_refit_residual_equals_pca_truncation(dictionary):
    curves = analytic_family(40, seed=1)
    X = np.stack([c.log_values for c in curves], axis=1)
    mu = X.mean(axis=1)
    U, _, _ = np.linalg.svd(X - mu[:, None], full_matrices=False)
    P = U[:, :15] @ U[:, :15].T
    for cv in curves[:8]:
        r = cv.log_values - mu
        oracle = np.linalg.norm(r - P @ r)
        got = np.linalg.norm(dictionary.table(fit_curve(dictionary, cv, 0.0)) - cv.log_values)
        assert got == pytest.approx(oracle, abs=1e-8)


def test_eval_log_brdf_examples(dictionary):
    g = dictionary.theta_grid
    assert eval_log_brdf(dictionary, np.zeros(15), g[10]) == pytest.approx(dictionary.mu[10], abs=0)
    c = np.zeros(15)
    c[2] = 0.7
    assert eval_log_brdf(dictionary, c, g[33]) == pytest.approx(dictionary.table(c)[33], abs=1e-14)
    grid = default_grid()
    b = np.full(grid.size, 0.25)
    d = BrdfDictionary(grid, np.sin(grid), b[:, None], [1.0])
    for t in (0.0, 0.3, 1.2):
        assert eval_log_brdf(d, [1.0], t) == pytest.approx(np.interp(t, grid, np.sin(grid)) + 0.25)
    with pytest.raises(ValueError):
        eval_log_brdf(dictionary, c, np.pi / 2)
    with pytest.raises(ValueError):
        eval_log_brdf(dictionary, c, -0.1)


def test_eval_clamps_past_last_node(dictionary):
    c = np.linspace(-1, 1, 15)
    assert eval_log_brdf(dictionary, c, np.radians(89.9)) == pytest.approx(dictionary.table(c)[-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_eval_linear_in_c(seed):
    d = learn_dictionary(analytic_family(20, seed=3), 6)
    r = np.random.default_rng(seed)
    c1, c2 = r.normal(size=6), r.normal(size=6)
    th = r.uniform(0, 1.5, 10)
    f = lambda c: d.curve(c).log_rho(th)
    assert np.allclose(f(c1 + c2) - f(np.zeros(6)), f(c1) - f(np.zeros(6)) + f(c2) - f(np.zeros(6)), atol=1e-10)


def test_fit_curve_examples(dictionary, rng):
    assert np.allclose(fit_curve(dictionary, dictionary.curve(np.zeros(15)), 0.005), 0.0, atol=1e-12)
    target = BrdfCurve(dictionary.theta_grid, dictionary.mu + dictionary.bases[:, 4])
    c = fit_curve(dictionary, target, 1e-12)
    assert np.allclose(c, np.eye(15)[4], atol=1e-6)
    c_true = rng.normal(size=15)
    assert np.allclose(fit_curve(dictionary, dictionary.curve(c_true), 0.0), c_true, atol=1e-8)


def test_fit_matches_dense_ridge_oracle(dictionary):
    target = analytic_brdf(0.2, 0.5, 0.25)
    lam = 0.01
    D = dictionary.bases
    A = np.vstack([D, np.sqrt(lam) * np.eye(15)])
    b = np.concatenate([target.log_values - dictionary.mu, np.zeros(15)])
    oracle = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.allclose(fit_curve(dictionary, target, lam), oracle, atol=1e-9)


def test_analytic_brdf_examples():
    g = default_grid()
    lam = analytic_brdf(0.5, 0.0, 0.3)
    assert np.allclose(lam.log_values, np.log(0.5) + np.log(np.cos(g)))
    assert np.exp(analytic_brdf(0.3, 0.8, 0.3).log_values[0]) == pytest.approx(1.1)
    sharp = analytic_brdf(0.3, 0.8, 1e-4)
    assert np.allclose(sharp.log_values[1:], np.log(0.3 * np.cos(g[1:])))
    with pytest.raises(ValueError):
        analytic_brdf(0.0, 1.0, 0.3)


def test_e_c():
    assert e_c(np.zeros(4)) == 0.0
    assert e_c([3.0, 4.0]) == 25.0
    c = np.array([0.3, -1.2])
    assert e_c(-c) == e_c(c)


def _merl_buffer(dims, value):
    header = struct.pack("<3i", *dims)
    return header + np.full(3 * int(np.prod(dims)), value, "<f8").tobytes()


def test_merl_constant_buffer_by_hand():
    dims = (6, 2, 4)
    v = 750.0
    curve = merl_colocated_slice(_merl_buffer(dims, v))
    theta = ((np.arange(6) + 0.5) / 6) ** 2 * np.pi / 2
    luma_scale = 0.2126 / 1500 + 0.7152 * 1.15 / 1500 + 0.0722 * 1.66 / 1500
    assert np.allclose(curve.theta_grid, theta)
    assert np.allclose(curve.log_values, np.log(v * np.cos(theta) * luma_scale), atol=1e-12)


def test_merl_slice_picks_zero_difference_angles():
    table = np.random.default_rng(0).uniform(1, 2, size=(3, 5, 3, 4))
    curve = merl_colocated_slice(merl_bytes(table))
    rgb = table[:, :, 0, 0].T * MERL_SCALE
    assert np.allclose(np.exp(curve.log_values), (rgb @ LUMA) * np.cos(curve.theta_grid))


def test_merl_errors():
    buf = _merl_buffer((4, 2, 2), 1.0)
    with pytest.raises(ValueError):
        merl_colocated_slice(buf[:-8])
    with pytest.raises(ValueError):
        merl_colocated_slice(struct.pack("<3i", -4, 2, 2) + buf[12:])

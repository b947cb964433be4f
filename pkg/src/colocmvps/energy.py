"""Joint shape/reflectance objective.

``E = E_p + lambda_s * E_s + lambda_c * E_c`` where ``E_p`` is a trimmed
(min-sum over the best ``m_min`` views) Huber loss on log-space residuals,
``E_s`` asks normals to be orthogonal to the tangents between neighbouring
reference pixels, and ``E_c = ||c||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .brdf import BrdfDictionary, e_c, interp_weights
from .scene import (
    Camera,
    Dataset,
    SurfaceEstimate,
    ViewImage,
    bilinear_many,
    neighbor_table,
    project_many,
)

INTENSITY_FLOOR = 1e-12
R_MISS = 20.0


@dataclass(frozen=True)
class EnergyParams:
    lambda_s: float = 1e6
    lambda_c: float = 0.005
    delta: float = 0.1
    m_min: int = 5
    log_gamma: float = 0.0

    def validate(self, n_views: int | None = None):
        if self.lambda_s < 0 or self.lambda_c < 0:
            raise ValueError("lambda_s and lambda_c must be non-negative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.m_min < 1:
            raise ValueError("m_min must be >= 1")
        if n_views is not None and self.m_min > n_views:
            raise ValueError(f"m_min={self.m_min} exceeds the number of views ({n_views})")
        return self


@dataclass(frozen=True)
class ResidualRecord:
    view: int
    value: float
    valid: bool


def huber(r, delta: float):
    """``r^2/2`` inside ``[-delta, delta]``, linear with slope ``delta`` outside."""
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return float(out) if np.ndim(out) == 0 else out


def huber_grad(r, delta: float):
    return np.clip(r, -delta, delta)


def phi(
    view: ViewImage,
    x,
    theta,
    dictionary: BrdfDictionary,
    c,
    log_gamma: float,
    index: int = 0,
) -> ResidualRecord:
    """Log-space residual of one view at world point ``x``.

    ``theta`` is the incident angle, or ``None`` when back-facing.
    """
    x = np.asarray(x, dtype=np.float64)
    uv, front = project_many(view.camera.projection, x[None, :])
    val, ok = bilinear_many(view.intensities, uv)
    if theta is None or not front[0] or not ok[0] or val[0] <= INTENSITY_FLOOR:
        return ResidualRecord(index, float("nan"), False)
    d2 = float(np.sum((view.camera.center - x) ** 2))
    log_rho = float(dictionary.curve(c).log_rho(theta))
    r = log_rho - np.log(val[0]) - np.log(d2) + log_gamma
    return ResidualRecord(index, float(r), True)


def select_views(records, m_min: int, delta: float):
    """Pick the ``m_min`` valid records with the smallest Huber loss.

    Ties go to the lower view index; each missing slot costs
    ``huber(R_MISS)``. Returns ``(chosen view indices, partial energy)``.
    """
    valid = sorted(
        (r for r in records if r.valid), key=lambda r: (huber(r.value, delta), r.view)
    )
    chosen = valid[:m_min]
    losses = sorted(huber(r.value, delta) for r in chosen)
    total = 0.0
    for v in losses:
        total += v
    total += (m_min - len(chosen)) * huber(R_MISS, delta)
    return [r.view for r in chosen], total


class PhotometricModel:
    """Vectorised residual evaluation for a dataset and a BRDF.

    Every method works on a batch of reference pixels ``idx`` (flat
    indices) with candidate normals ``n`` of shape ``(K, 3)`` and depths
    ``z`` of shape ``(K,)``. View order follows ``dataset.views``.
    """

    def __init__(self, dataset: Dataset, dictionary: BrdfDictionary, params: EnergyParams, c=None):
        params.validate(len(dataset.views))
        self.dataset = dataset
        self.dictionary = dictionary
        self.params = params
        ref = dataset.reference.camera
        self.ref_camera = ref
        self.shape = ref.shape
        self.rays = ref.rays(ref.pixel_grid())
        self.origin = ref.center.copy()
        self.mask = dataset.mask.ravel()
        self.n_views = len(dataset.views)
        self.projections = np.stack([v.camera.projection for v in dataset.views])
        self.centers = np.stack([v.camera.center for v in dataset.views])
        self.images = [v.intensities for v in dataset.views]
        self.miss = huber(R_MISS, params.delta)
        self.log_gamma = params.log_gamma
        self.set_brdf(np.zeros(dictionary.n_bases) if c is None else c, params.log_gamma)

    @property
    def n_pixels(self) -> int:
        return int(self.mask.sum())

    def set_brdf(self, c, log_gamma: float | None = None):
        self.c = np.asarray(c, dtype=np.float64).copy()
        self.table = self.dictionary.table(self.c)
        if log_gamma is not None:
            self.log_gamma = float(log_gamma)

    def points(self, idx, z):
        return z[:, None] * self.rays[idx] + self.origin

    def view_terms(self, idx, z):
        """Depth-only quantities: unit directions to each centre, ``log I + log d^2``, validity."""
        x = self.points(idx, z)
        M = self.n_views
        target = np.empty((M, len(idx)))
        valid = np.empty((M, len(idx)), dtype=bool)
        to_cam = self.centers[:, None, :] - x[None, :, :]
        d2 = np.einsum("mkj,mkj->mk", to_cam, to_cam)
        dist = np.sqrt(d2)
        for m in range(M):
            uv, front = project_many(self.projections[m], x)
            val, ok = bilinear_many(self.images[m], uv)
            ok &= front & (val > INTENSITY_FLOOR)
            valid[m] = ok
            target[m] = np.log(np.where(ok, val, 1.0)) + np.log(d2[m])
        dirs = to_cam / dist[..., None]
        return dirs, target, valid

    def angles(self, dirs, n):
        cos = np.einsum("mkj,kj->mk", dirs, n)
        front = cos > 0
        theta = np.arccos(np.clip(cos, 0.0, 1.0))
        return theta, front

    def log_rho(self, theta):
        grid = self.dictionary.theta_grid
        i, f = interp_weights(grid, theta)
        t = self.table
        return t[i] + f * (t[i + 1] - t[i])

    def residuals(self, idx, n, z, terms=None):
        """``(phi, valid, theta)`` each of shape ``(M, K)``."""
        dirs, target, valid = self.view_terms(idx, z) if terms is None else terms
        theta, front = self.angles(dirs, n)
        r = self.log_rho(theta) - target + self.log_gamma
        return r, valid & front, theta

    def losses(self, idx, n, z, terms=None):
        r, valid, _ = self.residuals(idx, n, z, terms)
        return np.where(valid, huber(r, self.params.delta), np.inf)

    def partial(self, idx, n, z, terms=None):
        """Per-pixel min-sum of the ``m_min`` smallest losses (deficits penalised)."""
        L = self.losses(idx, n, z, terms)
        L = np.sort(L, axis=0)[: self.params.m_min]
        L = np.where(np.isinf(L), self.miss, L)
        return L.sum(axis=0)

    def chosen_views(self, idx, n, z):
        """``(M_k as (m_min, K) view indices, selected-slot validity)``."""
        L = self.losses(idx, n, z)
        order = np.argsort(L, axis=0, kind="stable")[: self.params.m_min]
        ok = np.isfinite(np.take_along_axis(L, order, axis=0))
        return order, ok


def _flat_state(estimate: SurfaceEstimate):
    idx = np.nonzero(estimate.mask.ravel())[0]
    n = estimate.normals.reshape(-1, 3)[idx]
    z = estimate.depth.ravel()[idx]
    return idx, n, z


def e_p(dataset: Dataset, estimate: SurfaceEstimate, dictionary, c, params: EnergyParams, model=None):
    """Photometric term and the chosen view sets per masked pixel."""
    if not estimate.mask.any():
        raise ValueError("empty mask")
    model = model or PhotometricModel(dataset, dictionary, params, c)
    model.set_brdf(c, params.log_gamma)
    idx, n, z = _flat_state(estimate)
    part = model.partial(idx, n, z)
    chosen, ok = model.chosen_views(idx, n, z)
    energy = part.sum() / (len(idx) * params.m_min)
    sets = {int(k): [int(m) for m in chosen[ok[:, i], i]] for i, k in enumerate(idx)}
    return float(energy), sets


def smoothness_terms(points, normals, mask):
    """Per-pixel ``(1/|N_k|) sum_j (n_k . (x_k - x_j))^2`` over the mask, flat arrays."""
    shape = mask.shape
    table = neighbor_table(mask)
    X = points.reshape(-1, 3)
    N = normals.reshape(-1, 3)
    acc = np.zeros(X.shape[0])
    cnt = np.zeros(X.shape[0])
    for i in range(4):
        j = table[:, i]
        ok = j >= 0
        js = np.where(ok, j, 0)
        dot = np.einsum("kj,kj->k", N, X - X[js])
        acc += np.where(ok, dot * dot, 0.0)
        cnt += ok
    out = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)
    out[~mask.ravel()] = 0.0
    return out.reshape(shape)


def e_s(estimate: SurfaceEstimate, ref_camera: Camera) -> float:
    if not estimate.mask.any():
        raise ValueError("empty mask")
    terms = smoothness_terms(estimate.points(ref_camera), estimate.normals, estimate.mask)
    return float(terms[estimate.mask].sum() / estimate.mask.sum())


def total_energy(dataset, estimate, dictionary, c, params: EnergyParams, model=None) -> float:
    ep, _ = e_p(dataset, estimate, dictionary, c, params, model)
    es = e_s(estimate, dataset.reference.camera) if params.lambda_s else 0.0
    return ep + params.lambda_s * es + params.lambda_c * e_c(c)


class QpmEnergy:
    """Per-pixel relaxed energy for fixed auxiliary depths and penalty.

    ``E^k(n, z) = partial_k / (K m_min) + n^T S_k n + sigma (zt_k - z)^2``
    where ``S_k`` gathers the smoothness tangents built from ``zt``.
    With ``zt=None`` only the photometric part is active.
    """

    def __init__(self, model: PhotometricModel, z_tilde=None, sigma: float = 0.0):
        self.model = model
        K = model.n_pixels
        self.scale = 1.0 / (K * model.params.m_min)
        self.sigma = float(sigma)
        self.z_tilde = None if z_tilde is None else np.asarray(z_tilde, dtype=np.float64).ravel()
        self.S = None
        if self.z_tilde is not None and model.params.lambda_s > 0:
            self.S = self._tangent_forms(self.z_tilde)

    def _tangent_forms(self, zt):
        m = self.model
        mask = m.mask.reshape(m.shape)
        table = neighbor_table(mask)
        X = np.where(m.mask[:, None], zt[:, None], 0.0) * m.rays + m.origin
        S = np.zeros((X.shape[0], 3, 3))
        cnt = (table >= 0).sum(axis=1)
        for i in range(4):
            j = table[:, i]
            ok = j >= 0
            t = np.where(ok[:, None], X - X[np.where(ok, j, 0)], 0.0)
            S += t[:, :, None] * t[:, None, :]
        w = m.params.lambda_s / (m.n_pixels * np.maximum(cnt, 1))
        return S * w[:, None, None]

    def smooth_part(self, idx, n):
        if self.S is None:
            return np.zeros(len(idx))
        return np.einsum("ki,kij,kj->k", n, self.S[idx], n)

    def coupling_part(self, idx, z):
        if self.z_tilde is None or self.sigma == 0:
            return np.zeros(len(idx))
        d = self.z_tilde[idx] - z
        return self.sigma * d * d

    def __call__(self, idx, n, z, terms=None):
        return (
            self.model.partial(idx, n, z, terms) * self.scale
            + self.smooth_part(idx, n)
            + self.coupling_part(idx, z)
        )


def e_qpm(model: PhotometricModel, estimate: SurfaceEstimate, z_tilde, sigma: float) -> float:
    """Relaxed total ``E_p(n, z) + lambda_s E_s(n, zt) + sigma ||zt - z||^2``."""
    idx, n, z = _flat_state(estimate)
    ep = model.partial(idx, n, z).sum() / (len(idx) * model.params.m_min)
    zt = np.asarray(z_tilde, dtype=np.float64).reshape(estimate.depth.shape)
    aux = SurfaceEstimate(zt, estimate.normals, estimate.mask)
    es = e_s(aux, model.ref_camera) if model.params.lambda_s else 0.0
    dz = zt.ravel()[idx] - z
    return float(ep + model.params.lambda_s * es + sigma * np.dot(dz, dz))


def pixel_subenergy(
    k: int,
    n_k,
    z_k: float,
    z_tilde,
    dataset: Dataset,
    dictionary,
    c,
    params: EnergyParams,
    sigma: float,
    model: PhotometricModel | None = None,
) -> float:
    """Relaxed energy contribution of reference pixel ``k`` (flat index)."""
    model = model or PhotometricModel(dataset, dictionary, params, c)
    model.set_brdf(c, params.log_gamma)
    if not model.mask[k]:
        raise ValueError("pixel is not in the mask")
    q = QpmEnergy(model, z_tilde, sigma)
    return float(q(np.array([k]), np.asarray(n_k, dtype=np.float64)[None, :], np.array([float(z_k)]))[0])

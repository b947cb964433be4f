"""Scene and run-config plumbing shared by the CLI and the test suites.

A scene mapping (usually loaded from YAML) looks like::

    surface: {function: bumps, domain: [-0.2, 0.2, -0.2, 0.2], resolution: [257, 257], params: {}}
    dictionary: {learn: {n_curves: 40, n_bases: 15, seed: 1}}   # or {path: dict.txt}
    material: {analytic: {albedo: 0.3, specular_strength: 0.8, roughness: 0.3}, ridge: 0.005}
    gamma: 1.0
    cameras: {ring: {n_views: 10, distance: 1.0, tilt_deg: 30, focal: 256, width: 64, height: 64}}
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import formats
from .brdf import BrdfCurve, BrdfDictionary, analytic_brdf, analytic_family, fit_curve, learn_dictionary
from .energy import EnergyParams
from .render import HeightfieldSpec, RayCaster, render_view, tessellate
from .scene import Dataset, ViewImage, ring_cameras
from .solver import SolverConfig


class ConfigError(ValueError):
    """Invalid scene or run configuration."""


@dataclass
class SyntheticScene:
    dictionary: BrdfDictionary
    c: np.ndarray
    curve: BrdfCurve
    gamma: float
    renders: list

    @property
    def dataset(self) -> Dataset:
        return Dataset(tuple(r.image for r in self.renders), 0, self.renders[0].hit)

    @property
    def gt(self):
        return self.renders[0]


def gain_free(dictionary: BrdfDictionary, c) -> np.ndarray:
    """Drop the part of ``c`` that only shifts log rho by a constant.

    A constant offset in log rho is indistinguishable from a change of
    gamma, so materials used as ground truth are kept orthogonal to it.
    """
    w = np.linalg.lstsq(dictionary.bases, np.ones(dictionary.theta_grid.size), rcond=None)[0]
    c = np.asarray(c, dtype=np.float64)
    return c - (c @ w) / (w @ w) * w


def dictionary_from_config(d: dict | None, base: Path = Path(".")) -> BrdfDictionary:
    d = d or {"learn": {}}
    if "path" in d:
        return formats.read_dictionary(base / d["path"])
    learn = d.get("learn", {})
    curves = analytic_family(int(learn.get("n_curves", 40)), seed=int(learn.get("seed", 1)))
    return learn_dictionary(curves, int(learn.get("n_bases", 15)))


def material_from_config(d: dict | None, dictionary: BrdfDictionary, base: Path = Path(".")):
    """Return ``(c, curve)`` where ``curve`` is the dictionary curve of ``c``."""
    d = d or {}
    if "coefficients" in d:
        c = np.asarray(d["coefficients"], dtype=np.float64)
        if c.size != dictionary.n_bases:
            raise ConfigError(f"material needs {dictionary.n_bases} coefficients, got {c.size}")
    else:
        if "curve" in d:
            target = formats.read_curve(base / d["curve"]).resample(dictionary.theta_grid)
        else:
            a = d.get("analytic", {})
            target = analytic_brdf(
                float(a.get("albedo", 0.3)),
                float(a.get("specular_strength", 0.8)),
                float(a.get("roughness", 0.3)),
                dictionary.theta_grid,
            )
        c = fit_curve(dictionary, target, float(d.get("ridge", 0.005)))
    if d.get("gain_free", True):
        c = gain_free(dictionary, c)
    return c, dictionary.curve(c)


def cameras_from_config(d) -> list:
    if d is None:
        raise ConfigError("scene has no cameras")
    if isinstance(d, dict) and "ring" in d:
        r = d["ring"]
        n = int(r.get("n_views", 10))
        if n < 1:
            raise ConfigError("camera count must be >= 1")
        return ring_cameras(
            n,
            distance=float(r.get("distance", 1.0)),
            tilt_deg=float(r.get("tilt_deg", 30.0)),
            target=tuple(r.get("target", (0.0, 0.0, 0.0))),
            focal=float(r.get("focal", 256.0)),
            width=int(r.get("width", 64)),
            height=int(r.get("height", 64)),
        )
    if isinstance(d, list):
        if not d:
            raise ConfigError("camera count must be >= 1")
        return [formats.camera_from_dict(c) for c in d]
    raise ConfigError("cameras must be a ring mapping or a list of cameras")


def surface_from_config(d: dict | None) -> HeightfieldSpec:
    d = dict(d or {})
    try:
        return HeightfieldSpec(
            domain=tuple(d.get("domain", (-0.2, 0.2, -0.2, 0.2))),
            resolution=tuple(d.get("resolution", (257, 257))),
            function=d.get("function", "bumps"),
            params=dict(d.get("params", {})),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def render_scene(scene: dict, base: Path = Path("."), threads: int = 1) -> SyntheticScene:
    """Render every view of a scene mapping (see module docstring)."""
    dictionary = dictionary_from_config(scene.get("dictionary"), base)
    c, curve = material_from_config(scene.get("material"), dictionary, base)
    gamma = float(scene.get("gamma", 1.0))
    if not gamma > 0:
        raise ConfigError("gamma must be positive")
    cams = cameras_from_config(scene.get("cameras"))
    surf = tessellate(surface_from_config(scene.get("surface")))
    caster = RayCaster(surf)
    ss = int(scene.get("supersample", 1))
    renders = [render_view(surf, cam, curve, gamma, supersample=ss, threads=threads, caster=caster) for cam in cams]
    return SyntheticScene(dictionary, c, curve, gamma, renders)


def load_dataset(directory, mask_path=None) -> Dataset:
    """Views ``view_XXX.pfm`` + ``view_XXX.cam`` in index order; view 0 is the reference."""
    directory = Path(directory)
    images = sorted(directory.glob("view_*.pfm"))
    if not images:
        raise FileNotFoundError(f"no view_*.pfm files in {directory}")
    views = []
    for img in images:
        cam = formats.read_camera(img.with_suffix(".cam"))
        views.append(ViewImage(formats.read_pfm(img).astype(np.float64), cam))
    mask = None
    if mask_path is not None:
        mask = formats.read_pfm(mask_path) > 0.5
    return Dataset(tuple(views), 0, mask)


_ENERGY_KEYS = {f.name for f in fields(EnergyParams)}
_SOLVER_KEYS = {f.name for f in fields(SolverConfig)} - {"energy"}
_PATH_KEYS = {"dataset", "dictionary", "mask", "output", "gt"}


def solver_config_from_dict(d: dict) -> SolverConfig:
    """Build a validated ``SolverConfig`` from a flat mapping; unknown keys are errors."""
    unknown = set(d) - _ENERGY_KEYS - _SOLVER_KEYS - _PATH_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        energy = EnergyParams(**{k: float(v) if k != "m_min" else int(v) for k, v in d.items() if k in _ENERGY_KEYS})
        solver = {k: v for k, v in d.items() if k in _SOLVER_KEYS}
        if "gamma_quantiles" in solver:
            q = solver["gamma_quantiles"]
            solver["gamma_quantiles"] = tuple(float(v) for v in (q if isinstance(q, (list, tuple)) else [q]))
        cfg = SolverConfig(energy=energy, **solver)
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def with_overrides(cfg: SolverConfig, seed=None, threads=None) -> SolverConfig:
    if seed is not None:
        cfg = replace(cfg, rng_seed=int(seed))
    if threads is not None:
        cfg = replace(cfg, threads=int(threads))
    return cfg

"""Ground-truth error metrics, reports and trace export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .brdf import BrdfCurve, BrdfDictionary

TRACE_COLUMNS = ("iteration", "phase", "energy", "sigma", "normal_err", "brdf_err")


def erode_mask(mask, pixels: int = 2) -> np.ndarray:
    """Binary erosion with the 4-neighbourhood cross, applied ``pixels`` times."""
    if pixels < 0:
        raise ValueError("pixels must be >= 0")
    m = np.asarray(mask, dtype=bool).copy()
    for _ in range(pixels):
        p = np.pad(m, 1, constant_values=False)
        m = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m


def lower_median(values) -> float:
    """Median; for an even count the lower of the two middle elements."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("median of an empty sample")
    return float(v[(v.size - 1) // 2])


def _stats(values) -> dict:
    return {"median": lower_median(values), "mean": float(np.mean(values))}


def _region(mask, erode):
    m = erode_mask(mask, erode)
    if not m.any():
        raise ValueError("eroded mask is empty")
    return m


def normal_error(est, gt, mask, erode: int = 2) -> dict:
    """Angular error in degrees between two normal maps.

    ``atan2(|a x b|, a . b)`` is insensitive to the small length drift of
    stored float32 normals and accurate near zero, unlike ``arccos``.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    valid = np.asarray(mask, bool) & np.all(np.isfinite(est), -1) & np.all(np.isfinite(gt), -1)
    m = _region(valid, erode)
    a, b = est[m], gt[m]
    ang = np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.einsum("...i,...i->...", a, b))
    return _stats(np.degrees(ang))


def depth_error(est, gt, mask, erode: int = 2) -> dict:
    """Absolute depth error, reported x1000."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    valid = np.asarray(mask, bool) & np.isfinite(est) & np.isfinite(gt)
    m = _region(valid, erode)
    return _stats(1000.0 * np.abs(est[m] - gt[m]))


def brdf_error(dictionary: BrdfDictionary, c_est, curve_gt: BrdfCurve, max_deg: float | None = None) -> dict:
    """|log rho_est - log rho_gt| on the dictionary grid, reported x10."""
    grid = dictionary.theta_grid
    if curve_gt.theta_grid.shape != grid.shape or not np.allclose(curve_gt.theta_grid, grid, rtol=0, atol=1e-12):
        raise ValueError("ground-truth curve is not on the dictionary grid")
    diff = np.abs(dictionary.table(c_est) - curve_gt.log_values)
    if max_deg is not None:
        diff = diff[grid <= np.radians(max_deg) + 1e-12]
    return _stats(10.0 * diff)


@dataclass
class MetricsReport:
    normal_err_deg: dict
    depth_err: dict
    brdf_err: dict | None = None
    pixels_before: int = 0
    pixels_after: int = 0
    notes: list = field(default_factory=list)

    def rows(self):
        out = [("Normal", self.normal_err_deg), ("Depth", self.depth_err)]
        if self.brdf_err is not None:
            out.append(("BRDF", self.brdf_err))
        return out

    def to_text(self, header: str | None = None) -> str:
        lines = []
        if header:
            lines.append(header)
        lines.append(f"pixels: {self.pixels_before} before erosion, {self.pixels_after} after")
        lines.append(f"{'metric':<8}{'median':>12}{'mean':>12}")
        for name, st in self.rows():
            lines.append(f"{name:<8}{st['median']:>12.4f}{st['mean']:>12.4f}")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "median", "mean"])
        for name, st in self.rows():
            w.writerow([name, repr(st["median"]), repr(st["mean"])])
        return buf.getvalue()


def evaluate(est_depth, est_normals, est_mask, gt_depth, gt_normals, gt_mask, erode: int = 2,
             dictionary=None, c_est=None, curve_gt=None) -> MetricsReport:
    """Full metrics report; the BRDF row is omitted when no GT curve is given."""
    est_depth = np.asarray(est_depth)
    gt_depth = np.asarray(gt_depth)
    if est_depth.shape != gt_depth.shape:
        raise ValueError(f"shape mismatch {est_depth.shape} vs {gt_depth.shape}")
    mask = np.asarray(est_mask, bool) & np.asarray(gt_mask, bool)
    rep = MetricsReport(
        normal_error(est_normals, gt_normals, mask, erode),
        depth_error(est_depth, gt_depth, mask, erode),
        pixels_before=int(mask.sum()),
        pixels_after=int(erode_mask(mask, erode).sum()),
    )
    if curve_gt is not None and dictionary is not None and c_est is not None:
        rep.brdf_err = brdf_error(dictionary, c_est, curve_gt)
    else:
        rep.notes.append("no ground-truth BRDF; BRDF row omitted")
    return rep


def trace_export(trace, metrics=None) -> str:
    """CSV text for an energy trace; ``metrics`` maps iteration -> (normal_err, brdf_err)."""
    metrics = metrics or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        it = row["outer"]
        ne, be = metrics.get(it, (None, None))
        w.writerow([
            it,
            row["phase"],
            repr(float(row["energy"])),
            repr(float(row["sigma"])),
            "" if ne is None else repr(float(ne)),
            "" if be is None else repr(float(be)),
        ])
    return buf.getvalue()

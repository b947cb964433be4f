"""Readers and writers for the on-disk formats.

* images, depth and normal maps: PFM (little-endian; ``Pf`` grey, ``PF`` colour)
* cameras: keyed text, one ``key: values`` line per field
* BRDF curves: CSV with header ``theta_rad,log_rho``
* dictionaries: whitespace-delimited text
* oriented point clouds: ASCII PLY
* scenes and run configs: YAML
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import yaml

from .brdf import BrdfCurve, BrdfDictionary
from .scene import Camera


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


# -- PFM ---------------------------------------------------------------------------


def write_pfm(path, data):
    """Write a float32 PFM; rows are stored bottom-to-top per the format."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM needs an (H, W) or (H, W, 3) array")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while dims and dims[0].startswith(b"#"):
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if tag == b"PF" else 1
        raw = fh.read()
    expected = w * h * chans * 4
    if len(raw) < expected:
        raise ValueError(f"{path}: truncated PFM data")
    arr = np.frombuffer(raw[:expected], dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w, 3) if chans == 3 else (h, w))
    return arr[::-1].copy()


# -- cameras ------------------------------------------------------------------------


def write_camera(path, cam: Camera):
    lines = [
        f"projection: {_fmt(cam.projection)}",
        f"center: {_fmt(cam.center)}",
        f"width: {cam.width}",
        f"height: {cam.height}",
        f"unit_depth_matrix: {_fmt(cam.unit_depth_matrix)}",
        f"unit_depth_translation: {_fmt(cam.unit_depth_translation)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_camera(text: str) -> Camera:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(":")
        fields[key.strip()] = rest.split()
    try:
        return Camera(
            np.array(fields["projection"], dtype=np.float64).reshape(3, 4),
            np.array(fields["center"], dtype=np.float64),
            np.array(fields["unit_depth_matrix"], dtype=np.float64).reshape(3, 3),
            np.array(fields["unit_depth_translation"], dtype=np.float64),
            int(fields["width"][0]),
            int(fields["height"][0]),
        )
    except KeyError as exc:
        raise ValueError(f"camera file is missing {exc.args[0]!r}") from None


def read_camera(path) -> Camera:
    return parse_camera(Path(path).read_text())


def camera_from_dict(d: dict) -> Camera:
    """Camera from a scene entry: either P/center/... or look_at parameters."""
    if "look_at" in d:
        la = d["look_at"]
        return Camera.look_at(
            la["eye"],
            la.get("target", (0.0, 0.0, 0.0)),
            up=la.get("up", (0.0, 1.0, 0.0)),
            focal=float(la.get("focal", 256.0)),
            width=int(d["width"]),
            height=int(d["height"]),
        )
    P = np.array(d["projection"], dtype=np.float64).reshape(3, 4)
    center = np.array(d["center"], dtype=np.float64)
    if "unit_depth_matrix" in d:
        A = np.array(d["unit_depth_matrix"], dtype=np.float64).reshape(3, 3)
        b = np.array(d.get("unit_depth_translation", center), dtype=np.float64)
    else:
        # P = K [R | t] with det > 0; P+ p = M^-1 p + o on the unit-depth plane
        A = np.linalg.inv(P[:, :3])
        b = center
    return Camera(P, center, A, b, int(d["width"]), int(d["height"]))


# -- BRDF curves and dictionaries -------------------------------------------------


def write_curve(path, curve: BrdfCurve):
    buf = io.StringIO()
    buf.write("theta_rad,log_rho\n")
    for t, v in zip(curve.theta_grid, curve.log_values):
        buf.write(f"{float(t)!r},{float(v)!r}\n")
    Path(path).write_text(buf.getvalue())


def read_curve(path) -> BrdfCurve:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "theta_rad,log_rho":
        raise ValueError(f"{path}: expected header 'theta_rad,log_rho'")
    rows = [ln.split(",") for ln in lines[1:] if ln.strip()]
    arr = np.array(rows, dtype=np.float64)
    return BrdfCurve(arr[:, 0], arr[:, 1])


def write_dictionary(path, d: BrdfDictionary):
    T, N = d.bases.shape
    lines = [
        "# brdf-dictionary: T N / eigenvalues / theta grid / mu / N basis rows",
        f"{T} {N}",
        _fmt(d.eigenvalues),
        _fmt(d.theta_grid),
        _fmt(d.mu),
    ]
    lines += [_fmt(d.bases[:, i]) for i in range(N)]
    if d.degenerate:
        lines.insert(1, "# degenerate")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dictionary(path) -> BrdfDictionary:
    raw = Path(path).read_text().splitlines()
    degenerate = any(ln.strip() == "# degenerate" for ln in raw)
    rows = [ln.split() for ln in raw if ln.strip() and not ln.lstrip().startswith("#")]
    T, N = int(rows[0][0]), int(rows[0][1])
    if len(rows) != 4 + N:
        raise ValueError(f"{path}: expected {4 + N} data rows, found {len(rows)}")
    ev = np.array(rows[1], dtype=np.float64)
    grid = np.array(rows[2], dtype=np.float64)
    mu = np.array(rows[3], dtype=np.float64)
    bases = np.array(rows[4:], dtype=np.float64).T
    if grid.size != T or mu.size != T or bases.shape != (T, N) or ev.size != N:
        raise ValueError(f"{path}: inconsistent dictionary dimensions")
    return BrdfDictionary(grid, mu, bases, ev, degenerate)


def write_coefficients(path, c, log_gamma: float, **extra):
    payload = {"c": [float(v) for v in np.ravel(c)], "log_gamma": float(log_gamma)}
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_coefficients(path):
    payload = json.loads(Path(path).read_text())
    return np.array(payload["c"], dtype=np.float64), float(payload["log_gamma"]), payload


# -- point clouds -----------------------------------------------------------------------


def write_ply(path, points, normals):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property double nx\nproperty double ny\nproperty double nz\n"
        "end_header\n"
    )
    body = "".join(
        " ".join(repr(float(v)) for v in row) + "\n" for row in np.hstack([points, normals])
    )
    Path(path).write_text(header + body)


def read_ply(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    end = lines.index("end_header")
    count = 0
    for ln in lines[:end]:
        if ln.startswith("element vertex"):
            count = int(ln.split()[2])
    data = np.array([ln.split() for ln in lines[end + 1 : end + 1 + count]], dtype=np.float64)
    data = data.reshape(count, 6)
    return data[:, :3], data[:, 3:]


def write_normal_png(path, normals, mask=None):
    """Visualise a normal map as 8-bit RGB via ``(n + 1) / 2``."""
    from PIL import Image

    rgb = np.clip((np.asarray(normals) + 1.0) * 0.5, 0, 1)
    if mask is not None:
        rgb = np.where(np.asarray(mask)[..., None], rgb, 0.0)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)


# -- YAML -------------------------------------------------------------------------------


def load_yaml(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return data

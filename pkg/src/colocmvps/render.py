"""Forward renderer for the co-located camera/point-light model.

Intensity at a visible point is ``gamma * rho(theta) / d**2``; the light
sits at the camera centre so every visible point is lit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .brdf import BrdfCurve, BrdfDictionary
from .scene import Camera, SurfaceEstimate, ViewImage

BRUTE_FORCE_LIMIT = 10_000
RAY_TILE = 4096


@dataclass(frozen=True)
class TriangleSurface:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.intp).reshape(-1, 3)
        n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
        if n.shape != v.shape:
            raise ValueError("one normal per vertex required")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-9):
            raise ValueError("vertex normals must be unit length")
        if t.size:
            area2 = np.linalg.norm(
                np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1
            )
            if np.any(area2 <= 0):
                raise ValueError("degenerate triangle")
        for name, arr in (("vertices", v), ("triangles", t), ("normals", n)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


# -- analytic heightfields ---------------------------------------------------
# Each returns (h, dh/dx, dh/dy) for world coordinates x, y. Heights are
# world z; the surface faces +z.


def _plane(x, y, offset=0.0, slope_x=0.0, slope_y=0.0):
    h = offset + slope_x * x + slope_y * y
    return h, np.full_like(x, slope_x), np.full_like(y, slope_y)


def _paraboloid(x, y, top=0.0, curvature=1.0):
    h = top - curvature * (x * x + y * y)
    return h, -2 * curvature * x, -2 * curvature * y


def _gaussian(x, y, amplitude=0.05, sigma=0.08, cx=0.0, cy=0.0, offset=0.0):
    dx = x - cx
    dy = y - cy
    g = amplitude * np.exp(-(dx * dx + dy * dy) / (2 * sigma**2))
    return offset + g, -g * dx / sigma**2, -g * dy / sigma**2


def _bumps(x, y, amplitude=0.03, sigma=0.06, spread=0.07, offset=0.0):
    """Two bumps and a dimple."""
    h = np.full_like(x, offset)
    hx = np.zeros_like(x)
    hy = np.zeros_like(y)
    for a, cx, cy in (
        (amplitude, -spread, -spread * 0.5),
        (amplitude * 0.8, spread, spread * 0.3),
        (-amplitude * 0.6, 0.0, spread),
    ):
        g, gx, gy = _gaussian(x, y, a, sigma, cx, cy)
        h += g
        hx += gx
        hy += gy
    return h, hx, hy


def _himmelblau(x, y, amplitude=0.04, scale=20.0, offset=0.0):
    """Stand-in open surface built on Himmelblau's function.

    ``h = offset - amplitude * log1p(f(scale x, scale y)) / log1p(890)``;
    the log keeps slopes moderate over the four valleys.
    """
    X = scale * x
    Y = scale * y
    a = X * X + Y - 11
    b = X + Y * Y - 7
    f = a * a + b * b
    fx = 4 * a * X + 2 * b
    fy = 2 * a + 4 * b * Y
    k = amplitude / np.log1p(890.0)
    h = offset - k * np.log1p(f)
    return h, -k * fx * scale / (1 + f), -k * fy * scale / (1 + f)


HEIGHT_FUNCTIONS = {
    "plane": _plane,
    "paraboloid": _paraboloid,
    "gaussian": _gaussian,
    "bumps": _bumps,
    "himmelblau": _himmelblau,
}


@dataclass(frozen=True)
class HeightfieldSpec:
    """World-space heightfield ``z = h(x, y)`` over a rectangle.

    Either ``function`` names an entry of :data:`HEIGHT_FUNCTIONS` (with
    ``params``) or ``heights`` holds a ``(ny, nx)`` grid.
    """

    domain: tuple = (-0.2, 0.2, -0.2, 0.2)
    resolution: tuple = (129, 129)
    function: str | None = "gaussian"
    params: dict = field(default_factory=dict)
    heights: np.ndarray | None = None

    def __post_init__(self):
        nx, ny = self.resolution
        if nx < 2 or ny < 2:
            raise ValueError("heightfield resolution must be at least 2x2")
        if self.heights is None and self.function not in HEIGHT_FUNCTIONS:
            raise ValueError(f"unknown height function {self.function!r}")
        if self.heights is not None:
            h = np.asarray(self.heights, dtype=np.float64)
            if h.shape != (ny, nx) or not np.all(np.isfinite(h)):
                raise ValueError("heights must be a finite (ny, nx) grid")

    def evaluate(self, x, y):
        """Heights and gradient at world ``x, y`` (analytic specs only)."""
        return HEIGHT_FUNCTIONS[self.function](
            np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), **self.params
        )

    def normal(self, x, y) -> np.ndarray:
        _, hx, hy = self.evaluate(x, y)
        n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _grid_triangles(valid: np.ndarray) -> np.ndarray:
    """Two triangles per grid cell whose four corners are all valid."""
    ny, nx = valid.shape
    idx = np.arange(ny * nx).reshape(ny, nx)
    a = idx[:-1, :-1]
    b = idx[:-1, 1:]
    c = idx[1:, :-1]
    d = idx[1:, 1:]
    ok = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1] & valid[1:, 1:]
    t1 = np.stack([a[ok], c[ok], b[ok]], axis=1)
    t2 = np.stack([b[ok], c[ok], d[ok]], axis=1)
    return np.stack([t1, t2], axis=1).reshape(-1, 3)


def tessellate(spec: HeightfieldSpec) -> TriangleSurface:
    x0, x1, y0, y1 = spec.domain
    nx, ny = spec.resolution
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    if spec.heights is None:
        H, _, _ = spec.evaluate(X, Y)
        N = spec.normal(X, Y)
    else:
        H = np.asarray(spec.heights, dtype=np.float64)
        hy, hx = np.gradient(H, ys, xs)
        N = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
        N /= np.linalg.norm(N, axis=-1, keepdims=True)
    verts = np.stack([X, Y, H], axis=-1).reshape(-1, 3)
    tris = _grid_triangles(np.ones((ny, nx), dtype=bool))
    return TriangleSurface(verts, tris, N.reshape(-1, 3))


def depth_map_surface(estimate: SurfaceEstimate, camera: Camera) -> TriangleSurface:
    """Triangulate an estimated depth map over its mask (one vertex per pixel)."""
    if not estimate.mask.any():
        raise ValueError("estimate mask is empty")
    pts = estimate.points(camera).reshape(-1, 3)
    normals = estimate.normals.reshape(-1, 3).copy()
    valid = estimate.mask
    # unmasked vertices are never referenced; give them a harmless unit normal
    normals[~valid.ravel()] = (0.0, 0.0, 1.0)
    tris = _grid_triangles(valid)
    if tris.size:
        area2 = np.linalg.norm(
            np.cross(pts[tris[:, 1]] - pts[tris[:, 0]], pts[tris[:, 2]] - pts[tris[:, 0]]),
            axis=1,
        )
        tris = tris[area2 > 0]
    return TriangleSurface(pts, tris, normals)


# -- ray casting ---------------------------------------------------------------


def _intersect_pairs(origins, dirs, A, E1, E2):
    """Moller-Trumbore on aligned (ray, triangle) arrays; returns t, u, v, hit."""
    p = np.cross(dirs, E2)
    det = np.einsum("ij,ij->i", E1, p)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins - A
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, E1)
    v = np.einsum("ij,ij->i", dirs, q) * inv
    t = np.einsum("ij,ij->i", E2, q) * inv
    eps = 1e-12
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 1e-9)
    return t, u, v, hit


class RayCaster:
    """Nearest-hit queries against a static triangle surface.

    Uses a uniform grid walked with a vectorised 3D-DDA; small meshes are
    tested brute force.
    """

    def __init__(self, surface: TriangleSurface, brute_force_limit: int = BRUTE_FORCE_LIMIT):
        self.surface = surface
        V = surface.vertices
        T = surface.triangles
        self.A = V[T[:, 0]]
        self.E1 = V[T[:, 1]] - self.A
        self.E2 = V[T[:, 2]] - self.A
        self.n_tri = len(T)
        self.brute = self.n_tri <= brute_force_limit
        if not self.brute:
            self._build_grid()

    def _build_grid(self):
        V = self.surface.vertices
        T = self.surface.triangles
        lo = V.min(axis=0)
        hi = V.max(axis=0)
        ext = hi - lo
        pad = 1e-9 * max(ext.max(), 1.0)
        lo = lo - pad
        hi = hi + pad
        ext = hi - lo
        vol = np.prod(np.maximum(ext, ext.max() * 1e-3))
        cell = (vol / (2.0 * self.n_tri)) ** (1 / 3)
        # thin sheets: base the cell size on the area the triangles cover
        area_cell = np.sqrt(np.prod(np.sort(ext)[1:]) / (0.5 * self.n_tri))
        cell = max(cell, 0.5 * area_cell)
        dims = np.clip(np.ceil(ext / cell).astype(np.intp), 1, 256)
        size = ext / dims
        tmin = np.minimum(np.minimum(V[T[:, 0]], V[T[:, 1]]), V[T[:, 2]])
        tmax = np.maximum(np.maximum(V[T[:, 0]], V[T[:, 1]]), V[T[:, 2]])
        c0 = np.clip(np.floor((tmin - lo) / size).astype(np.intp), 0, dims - 1)
        c1 = np.clip(np.floor((tmax - lo) / size).astype(np.intp), 0, dims - 1)
        span = c1 - c0 + 1
        counts = span.prod(axis=1)
        tri_ids = np.repeat(np.arange(self.n_tri), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        sp = span[tri_ids]
        ix = c0[tri_ids, 0] + local % sp[:, 0]
        iy = c0[tri_ids, 1] + (local // sp[:, 0]) % sp[:, 1]
        iz = c0[tri_ids, 2] + local // (sp[:, 0] * sp[:, 1])
        cell_id = (iz * dims[1] + iy) * dims[0] + ix
        order = np.lexsort((tri_ids, cell_id))
        n_cells = int(dims.prod())
        self.cell_tris = tri_ids[order]
        self.cell_start = np.searchsorted(cell_id[order], np.arange(n_cells + 1))
        self.lo = lo
        self.hi = hi
        self.dims = dims
        self.size = size

    def intersect(self, origins, dirs):
        """Nearest hit per ray: ``(t, tri, u, v)`` with ``tri = -1`` on miss."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        if self.brute:
            return self._intersect_brute(origins, dirs)
        return self._intersect_grid(origins, dirs)

    def _intersect_brute(self, origins, dirs):
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.intp)
        best_u = np.zeros(n)
        best_v = np.zeros(n)
        if self.n_tri == 0:
            return best_t, best_tri, best_u, best_v
        chunk = max(1, 2_000_000 // self.n_tri)
        tris = np.arange(self.n_tri)
        for s in range(0, n, chunk):
            r = np.arange(s, min(n, s + chunk))
            ri = np.repeat(r, self.n_tri)
            ti = np.tile(tris, len(r))
            t, u, v, hit = _intersect_pairs(origins[ri], dirs[ri], self.A[ti], self.E1[ti], self.E2[ti])
            self._reduce(ri[hit], ti[hit], t[hit], u[hit], v[hit], best_t, best_tri, best_u, best_v)
        return best_t, best_tri, best_u, best_v

    @staticmethod
    def _reduce(ri, ti, t, u, v, best_t, best_tri, best_u, best_v):
        if ri.size == 0:
            return
        order = np.lexsort((ti, t, ri))
        ri, ti, t, u, v = ri[order], ti[order], t[order], u[order], v[order]
        first = np.ones(ri.size, dtype=bool)
        first[1:] = ri[1:] != ri[:-1]
        ri, ti, t, u, v = ri[first], ti[first], t[first], u[first], v[first]
        better = (t < best_t[ri]) | ((t == best_t[ri]) & (ti < best_tri[ri]))
        ri = ri[better]
        best_t[ri] = t[better]
        best_tri[ri] = ti[better]
        best_u[ri] = u[better]
        best_v[ri] = v[better]

    def _intersect_grid(self, origins, dirs):
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.intp)
        best_u = np.zeros(n)
        best_v = np.zeros(n)
        lo, hi, dims, size = self.lo, self.hi, self.dims, self.size

        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (lo - origins) * inv
            t1 = (hi - origins) * inv
        t0 = np.where(np.isnan(t0), -np.inf, t0)
        t1 = np.where(np.isnan(t1), np.inf, t1)
        t_enter = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
        t_exit = np.maximum(t0, t1).min(axis=1)
        active = np.nonzero(t_enter <= t_exit)[0]
        if active.size == 0:
            return best_t, best_tri, best_u, best_v

        o = origins[active]
        d = dirs[active]
        start = o + t_enter[active, None] * d
        cell = np.clip(np.floor((start - lo) / size).astype(np.intp), 0, dims - 1)
        step = np.where(d > 0, 1, np.where(d < 0, -1, 0))
        boundary = lo + (cell + (step > 0)) * size
        with np.errstate(divide="ignore", invalid="ignore"):
            t_max = np.where(step != 0, (boundary - o) / d, np.inf)
            t_delta = np.where(step != 0, size / np.abs(d), np.inf)
        ray = active
        exit_all = t_exit[active]

        for _ in range(int(dims.sum()) + 3):
            if ray.size == 0:
                break
            cid = (cell[:, 2] * dims[1] + cell[:, 1]) * dims[0] + cell[:, 0]
            s = self.cell_start[cid]
            cnt = self.cell_start[cid + 1] - s
            has = cnt > 0
            if has.any():
                rr = np.repeat(np.nonzero(has)[0], cnt[has])
                off = np.arange(rr.size) - np.repeat(np.cumsum(cnt[has]) - cnt[has], cnt[has])
                ti = self.cell_tris[s[rr] + off]
                ri = ray[rr]
                t, u, v, hit = _intersect_pairs(
                    origins[ri], dirs[ri], self.A[ti], self.E1[ti], self.E2[ti]
                )
                self._reduce(ri[hit], ti[hit], t[hit], u[hit], v[hit], best_t, best_tri, best_u, best_v)
            cell_exit = t_max.min(axis=1)
            axis = np.argmin(t_max, axis=1)
            rows = np.arange(ray.size)
            cell[rows, axis] += step[rows, axis]
            t_max[rows, axis] += t_delta[rows, axis]
            inside = np.all((cell >= 0) & (cell < dims), axis=1)
            keep = inside & (best_t[ray] > cell_exit) & (cell_exit <= exit_all)
            ray, cell, t_max, t_delta, step, exit_all = (
                ray[keep], cell[keep], t_max[keep], t_delta[keep], step[keep], exit_all[keep]
            )
        return best_t, best_tri, best_u, best_v


# -- rendering -----------------------------------------------------------------


@dataclass
class RenderResult:
    image: ViewImage
    depth: np.ndarray
    normals: np.ndarray
    hit: np.ndarray


def _as_curve(brdf) -> BrdfCurve:
    if isinstance(brdf, BrdfCurve):
        return brdf
    dictionary, c = brdf
    if not isinstance(dictionary, BrdfDictionary):
        raise TypeError("brdf must be a BrdfCurve or a (BrdfDictionary, c) pair")
    return dictionary.curve(c)


def _shade_rays(caster, surface, curve, gamma, center, rays):
    t, tri, u, v = caster.intersect(np.broadcast_to(center, rays.shape), rays)
    hit = tri >= 0
    n = len(rays)
    normals = np.zeros((n, 3))
    intensity = np.zeros(n)
    depth = np.where(hit, t, np.nan)
    if hit.any():
        T = surface.triangles[tri[hit]]
        N = surface.normals
        uh = u[hit, None]
        vh = v[hit, None]
        nn = (1 - uh - vh) * N[T[:, 0]] + uh * N[T[:, 1]] + vh * N[T[:, 2]]
        nn /= np.linalg.norm(nn, axis=1, keepdims=True)
        x = t[hit, None] * rays[hit] + center
        to_cam = center - x
        dist = np.linalg.norm(to_cam, axis=1)
        cos = np.einsum("ij,ij->i", nn, to_cam) / dist
        front = cos > 0
        theta = np.arccos(np.clip(cos, 0.0, 1.0))
        val = gamma * np.exp(curve.log_rho(theta)) / (dist * dist)
        idx = np.nonzero(hit)[0]
        intensity[idx] = np.where(front, val, 0.0)
        normals[idx] = nn
        hit[idx[~front]] = False
        depth[idx[~front]] = np.nan
    return intensity, depth, normals, hit


def render_view(
    surface: TriangleSurface,
    camera: Camera,
    brdf,
    gamma: float,
    supersample: int = 1,
    threads: int = 1,
    caster: RayCaster | None = None,
) -> RenderResult:
    """Ray-cast one view; returns the image plus per-pixel ground truth.

    ``brdf`` is a :class:`BrdfCurve` or a ``(dictionary, c)`` pair. Ground
    truth depth is the ray parameter of the centre ray, so it matches the
    ``SurfaceEstimate`` convention.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    curve = _as_curve(brdf)
    caster = caster or RayCaster(surface)
    pix = camera.pixel_grid()
    rays = camera.rays(pix)
    center = camera.center
    n = len(pix)
    tiles = [slice(s, min(n, s + RAY_TILE)) for s in range(0, n, RAY_TILE)]

    def work(sl):
        inten, depth, normals, hit = _shade_rays(caster, surface, curve, gamma, center, rays[sl])
        if supersample > 1:
            acc = np.zeros_like(inten)
            offs = (np.arange(supersample) + 0.5) / supersample - 0.5
            for dv in offs:
                for du in offs:
                    sub = camera.rays(pix[sl] + [du, dv])
                    acc += _shade_rays(caster, surface, curve, gamma, center, sub)[0]
            inten = acc / supersample**2
        return inten, depth, normals, hit

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, tiles))
    else:
        parts = [work(sl) for sl in tiles]
    inten = np.concatenate([p[0] for p in parts])
    depth = np.concatenate([p[1] for p in parts])
    normals = np.concatenate([p[2] for p in parts])
    hit = np.concatenate([p[3] for p in parts])
    h, w = camera.shape
    return RenderResult(
        ViewImage(inten.reshape(h, w), camera),
        depth.reshape(h, w),
        normals.reshape(h, w, 3),
        hit.reshape(h, w),
    )


def rerender_estimate(
    estimate: SurfaceEstimate,
    ref_camera: Camera,
    dictionary: BrdfDictionary,
    c,
    gamma: float,
    target_camera: Camera,
    **kw,
) -> ViewImage:
    surface = depth_map_surface(estimate, ref_camera)
    return render_view(surface, target_camera, (dictionary, c), gamma, **kw).image

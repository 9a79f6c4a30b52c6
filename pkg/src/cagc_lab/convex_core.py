"""Extended-real convex functions on uniform grids.

Values live on a uniform Cartesian lattice; +inf is represented by a NaN
sentinel so that arithmetic kernels must branch on the finiteness mask and
IEEE infinities never enter max/plus algebra.  The module provides convex
envelopes of scattered lifted samples (lower convex hull), the discrete
Legendre-Fenchel transform (separable two-pass, linear time per row), outer
polygonal subgradient approximations, the Monge-Ampere measure of node
regions, and inner-derivative diagnostics at effective-domain boundary
points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllInfinite,
    NotLowerSemicontinuous,
    RegionOutsideDomain,
    SegmentLeavesDomain,
)

__all__ = [
    "Grid",
    "GridFunction",
    "BoundaryFunction",
    "SubgradientSet",
    "EnvelopeEvaluator",
    "envelope_evaluator",
    "convex_envelope",
    "legendre_transform",
    "subgradients",
    "ma_measure",
    "inner_derivative_slope",
    "InnerDerivativeResult",
]


# ---------------------------------------------------------------------------
# grid and grid functions


@dataclass(frozen=True)
class Grid:
    """Uniform lattice: node (i, j) sits at (x0 + i*h, y0 + j*h)."""

    origin: tuple
    h: float
    nx: int
    ny: int

    @classmethod
    def cover(cls, bbox, n):
        """Grid covering bbox ((xmin, ymin), (xmax, ymax)) with max-extent/n spacing."""
        (x0, y0), (x1, y1) = bbox
        ext = max(x1 - x0, y1 - y0)
        h = ext / n
        nx = int(round((x1 - x0) / h)) + 1
        ny = int(round((y1 - y0) / h)) + 1
        return cls((float(x0), float(y0)), h, nx, ny)

    @property
    def xs(self):
        return self.origin[0] + self.h * np.arange(self.nx)

    @property
    def ys(self):
        return self.origin[1] + self.h * np.arange(self.ny)

    def meshgrid(self):
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def points(self):
        X, Y = self.meshgrid()
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def node_point(self, i, j):
        return np.array([self.origin[0] + i * self.h, self.origin[1] + j * self.h])

    def nearest_node(self, p):
        i = int(round((p[0] - self.origin[0]) / self.h))
        j = int(round((p[1] - self.origin[1]) / self.h))
        return min(max(i, 0), self.nx - 1), min(max(j, 0), self.ny - 1)

    def key(self):
        return (self.origin, self.h, self.nx, self.ny)


class GridFunction:
    """Extended-real function sampled on a Grid; NaN encodes +inf.

    The effective-domain mask is *derived* from the values (exactly the
    finite nodes), so it can never go stale.
    """

    def __init__(self, grid, values, convex=False):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.nx, grid.ny):
            raise ValueError(f"values shape {values.shape} != grid {(grid.nx, grid.ny)}")
        if np.any(np.isinf(values)):
            raise ValueError("+inf must be encoded as NaN sentinel, not IEEE inf")
        self.grid = grid
        self.values = values
        self.convex = bool(convex)

    @property
    def mask(self):
        return np.isfinite(self.values)

    @property
    def eff_dom_mask(self):
        return self.mask

    def scale(self):
        m = self.mask
        return float(np.max(np.abs(self.values[m]))) if m.any() else 0.0

    def finite_nodes(self):
        """(points (m,2), values (m,)) at finite nodes."""
        ii, jj = np.where(self.mask)
        X, Y = self.grid.meshgrid()
        pts = np.stack([X[ii, jj], Y[ii, jj]], axis=1)
        return pts, self.values[ii, jj]

    def convexity_violation(self):
        """Worst midpoint-convexity defect over axis and diagonal triples.

        Only triples with all three values finite count; positive defect
        means u(mid) exceeds the average of its neighbours.
        """
        v, m = self.values, self.mask
        worst = 0.0
        for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
            c = np.full_like(v, np.nan)
            sl0 = (slice(abs(di), v.shape[0] - abs(di) or None),
                   slice(abs(dj), v.shape[1] - abs(dj) or None))
            a = v[2 * abs(di):, :] if dj == 0 else None
            # shifted views
            vp = _shift(v, di, dj)
            vm = _shift(v, -di, -dj)
            ok = m & _shift(m, di, dj) & _shift(m, -di, -dj)
            d = 2 * v - vp - vm
            if ok.any():
                worst = max(worst, float(np.max(d[ok])))
        return worst

    def check_convex(self, tol_factor=1e-9):
        return self.convexity_violation() <= tol_factor * max(self.scale(), 1.0)

    def interpolate(self, points):
        """Bilinear interpolation; NaN where the surrounding cell has non-finite corners."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        g = self.grid
        fx = (points[:, 0] - g.origin[0]) / g.h
        fy = (points[:, 1] - g.origin[1]) / g.h
        i0 = np.clip(np.floor(fx).astype(int), 0, g.nx - 2)
        j0 = np.clip(np.floor(fy).astype(int), 0, g.ny - 2)
        tx = fx - i0
        ty = fy - j0
        out = np.full(len(points), np.nan)
        inb = (fx >= -1e-12) & (fx <= g.nx - 1 + 1e-12) & (fy >= -1e-12) & (fy <= g.ny - 1 + 1e-12)
        v = self.values
        v00 = v[i0, j0]
        v10 = v[i0 + 1, j0]
        v01 = v[i0, j0 + 1]
        v11 = v[i0 + 1, j0 + 1]
        out = ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
               + (1 - tx) * ty * v01 + tx * ty * v11)
        out[~inb] = np.nan
        return out

    # -- serialization: JSON carries null for +inf, binary uses npz ---------

    def to_json_dict(self):
        vals = [[None if not np.isfinite(x) else float(x) for x in row] for row in self.values]
        return {
            "origin": list(self.grid.origin),
            "h": self.grid.h,
            "nx": self.grid.nx,
            "ny": self.grid.ny,
            "values": vals,
            "mask": self.mask.astype(int).tolist(),
            "convex": self.convex,
        }

    @classmethod
    def from_json_dict(cls, d):
        grid = Grid((d["origin"][0], d["origin"][1]), d["h"], d["nx"], d["ny"])
        vals = np.array([[np.nan if x is None else x for x in row] for row in d["values"]])
        return cls(grid, vals, convex=d.get("convex", False))

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f)
            f.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))

    def save_binary(self, path):
        np.savez(path, origin=np.array(self.grid.origin), h=self.grid.h,
                 values=self.values, convex=self.convex)

    @classmethod
    def load_binary(cls, path):
        d = np.load(path)
        vals = d["values"]
        grid = Grid((float(d["origin"][0]), float(d["origin"][1])), float(d["h"]),
                    vals.shape[0], vals.shape[1])
        return cls(grid, vals, convex=bool(d["convex"]))


def _shift(a, di, dj):
    """Shifted copy of a; out-of-range entries NaN (or False for bool)."""
    out = np.full_like(a, False if a.dtype == bool else np.nan)
    src_i = slice(max(di, 0), a.shape[0] + min(di, 0))
    dst_i = slice(max(-di, 0), a.shape[0] + min(-di, 0))
    src_j = slice(max(dj, 0), a.shape[1] + min(dj, 0))
    dst_j = slice(max(-dj, 0), a.shape[1] + min(-dj, 0))
    out[dst_i, dst_j] = a[src_i, src_j]
    return out


# ---------------------------------------------------------------------------
# boundary data


class BoundaryFunction:
    """Extended-real lower-semicontinuous data on the boundary of a convex domain.

    samples: ordered (point, value) pairs along the boundary; value may be
    +inf (pass math.inf / np.inf, stored as such in the sample list only).
    With continuous=True the function is the arc-length interpolation of the
    samples (effective domain = whole boundary); otherwise it is +inf off the
    listed sample points.
    """

    def __init__(self, domain, points, values, continuous=False):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(values, dtype=float)
        if len(points) != len(values):
            raise ValueError("points/values length mismatch")
        if domain is not None:
            points = domain.project_to_boundary(points)
            order = np.argsort(domain.boundary_parameter(points))
            points, values = points[order], values[order]
        self.domain = domain
        self.points = points
        self.values = values
        self.continuous = bool(continuous)

    @classmethod
    def constant(cls, domain, value, n=720):
        pts = domain.boundary_points(n)
        return cls(domain, pts, np.full(n, float(value)), continuous=True)

    @classmethod
    def indicator(cls, domain, points, values=None):
        """Finite exactly at the given boundary points (+inf elsewhere)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if values is None:
            values = np.zeros(len(points))
        return cls(domain, points, values, continuous=False)

    def finite_samples(self):
        m = np.isfinite(self.values)
        return self.points[m], self.values[m]

    @property
    def full_boundary_domain(self):
        """True when dom(phi) is the entire boundary."""
        return self.continuous and np.all(np.isfinite(self.values))

    def __call__(self, points):
        """Continuous mode: arc-length interpolation of the samples."""
        if not self.continuous:
            raise ValueError("pointwise evaluation requires continuous boundary data")
        points = np.atleast_2d(np.asarray(points, dtype=float))
        s = self.domain.boundary_parameter(self.domain.project_to_boundary(points))
        sk = self.domain.boundary_parameter(self.points)
        total = self.domain.boundary_length()
        # periodic linear interpolation in arc length
        order = np.argsort(sk)
        sk, vk = sk[order], self.values[order]
        sk = np.concatenate([sk, [sk[0] + total]])
        vk = np.concatenate([vk, [vk[0]]])
        return np.interp(np.mod(s, total), sk, vk, period=total)

    def validate(self, tol=1e-9):
        """Raise NotLowerSemicontinuous on duplicate-point conflicts or
        non-convex finite data along straight boundary segments."""
        scale = 1.0
        fin = np.isfinite(self.values)
        if fin.any():
            scale = max(1.0, float(np.max(np.abs(self.values[fin]))))
        # conflicting duplicated sample points
        for i in range(len(self.points)):
            for j in range(i + 1, len(self.points)):
                if np.linalg.norm(self.points[i] - self.points[j]) < 1e-12:
                    if abs(self.values[i] - self.values[j]) > tol * scale and (
                            np.isfinite(self.values[i]) or np.isfinite(self.values[j])):
                        if not (np.isfinite(self.values[i]) and np.isfinite(self.values[j])):
                            raise NotLowerSemicontinuous(
                                f"conflicting values at duplicated boundary point {self.points[i]}")
                        raise NotLowerSemicontinuous(
                            f"two values at the same boundary point {self.points[i]}")
        # convexity of finite samples along each maximal straight segment
        if self.domain is not None:
            for seg_a, seg_b in self.domain.straight_segments():
                d = seg_b - seg_a
                L2 = float(d @ d)
                if L2 == 0.0:
                    continue
                t = ((self.points - seg_a) @ d) / L2
                on = (np.abs(np.cross(d, self.points - seg_a)) < 1e-9 * np.sqrt(L2)) \
                    & (t > -1e-12) & (t < 1 + 1e-12) & fin
                if on.sum() < 3:
                    continue
                ts = t[on]
                vs = self.values[on]
                order = np.argsort(ts)
                ts, vs = ts[order], vs[order]
                chord = vs[:-2] + (vs[2:] - vs[:-2]) * (ts[1:-1] - ts[:-2]) / (ts[2:] - ts[:-2])
                if np.any(vs[1:-1] > chord + tol * scale):
                    raise NotLowerSemicontinuous(
                        "boundary data not convex on a straight boundary segment")
        return True


# ---------------------------------------------------------------------------
# convex envelope (lower convex hull of lifted samples)


def _hull2d(points):
    """Monotone-chain convex hull, lexicographic order, collinear points dropped."""
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


class EnvelopeEvaluator:
    """Evaluator for the convex envelope of lifted samples (x_k, phi_k).

    Piecewise-affine on the convex hull of the sample points, +inf outside.
    Affine pieces come from the downward facets of the 3D convex hull of the
    lifted points; evaluation is the max over facet planes, which is exact
    for convex piecewise-linear data.
    """

    def __init__(self, points, values):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(values, dtype=float)
        keep = np.isfinite(values)
        points, values = points[keep], values[keep]
        if len(points) == 0:
            raise AllInfinite("no finite boundary sample")
        # deduplicate identical locations, keeping the smallest value
        order = np.lexsort((values, points[:, 1], points[:, 0]))
        points, values = points[order], values[order]
        uniq = np.ones(len(points), bool)
        uniq[1:] = np.any(np.abs(np.diff(points, axis=0)) > 1e-14, axis=1)
        self.points = points[uniq]
        self.values = values[uniq]
        self._build()

    def _build(self):
        pts, vals = self.points, self.values
        self.hull = _hull2d(pts)
        ctr = pts.mean(axis=0)
        span = max(1.0, float(np.max(np.abs(pts - ctr))))
        c = pts - ctr
        # affine rank of the sample locations
        if len(pts) == 1:
            self.rank = 0
        else:
            sv = np.linalg.svd(c, compute_uv=False)
            self.rank = int(np.sum(sv > 1e-12 * span))
        self.planes = np.zeros((0, 3))
        self._line = None
        if self.rank == 2:
            lift = np.column_stack([pts, vals])
            vspan = max(1.0, float(np.max(np.abs(vals))))
            A = np.column_stack([pts, np.ones(len(pts))])
            coef, res, *_ = np.linalg.lstsq(A, vals, rcond=None)
            flat = np.max(np.abs(A @ coef - vals)) <= 1e-12 * vspan
            if flat:
                self.planes = coef.reshape(1, 3)
            else:
                from scipy.spatial import ConvexHull

                hull3 = ConvexHull(lift)
                eq = hull3.equations  # a*x + b*y + c*z + d = 0, (a,b,c) outward
                down = eq[:, 2] < -1e-12
                a, b, cz, d = eq[down, 0], eq[down, 1], eq[down, 2], eq[down, 3]
                self.planes = np.column_stack([-a / cz, -b / cz, -d / cz])
        elif self.rank == 1:
            # 1D lower hull along the sample line
            d = c[np.argmax(np.linalg.norm(c, axis=1))]
            d = d / np.linalg.norm(d)
            t = c @ d
            order = np.argsort(t)
            t, v = t[order], vals[order]
            hull = [0]
            for k in range(1, len(t)):
                while len(hull) >= 2:
                    i, j = hull[-2], hull[-1]
                    if (v[j] - v[i]) * (t[k] - t[i]) >= (v[k] - v[i]) * (t[j] - t[i]):
                        hull.pop()
                    else:
                        break
                hull.append(k)
            self._line = (ctr, d, t[hull], v[hull])

    def __call__(self, query):
        query = np.atleast_2d(np.asarray(query, dtype=float))
        out = np.full(len(query), np.nan)
        if self.rank == 2:
            inside = self.contains(query)
            if inside.any():
                q = query[inside]
                vals = q @ self.planes[:, :2].T + self.planes[:, 2]
                out[inside] = vals.max(axis=1)
        elif self.rank == 1:
            ctr, d, th, vh = self._line
            rel = query - ctr
            t = rel @ d
            perp = rel - np.outer(t, d)
            on = (np.linalg.norm(perp, axis=1) <= 1e-9) & (t >= th[0] - 1e-12) & (t <= th[-1] + 1e-12)
            if on.any():
                out[on] = np.interp(t[on], th, vh)
        else:
            on = np.linalg.norm(query - self.points[0], axis=1) <= 1e-9
            out[on] = self.values[0]
        return out if len(out) > 1 else out

    def contains(self, query, tol=1e-12):
        """Closed-hull membership (only meaningful for rank 2)."""
        query = np.atleast_2d(np.asarray(query, dtype=float))
        if self.rank < 2:
            return np.zeros(len(query), bool)
        hull = self.hull
        scale = max(1.0, float(np.max(np.abs(hull))))
        ok = np.ones(len(query), bool)
        for k in range(len(hull)):
            a, b = hull[k], hull[(k + 1) % len(hull)]
            e = b - a
            ok &= (e[0] * (query[:, 1] - a[1]) - e[1] * (query[:, 0] - a[0])) >= -tol * scale
        return ok

    def hull_polygon(self):
        return self.hull.copy()


def envelope_evaluator(points, values):
    return EnvelopeEvaluator(points, values)


def convex_envelope(phi, grid, validate=True):
    """Convex envelope of boundary data, sampled on the grid.

    The effective domain equals the grid nodes inside the closed convex hull
    of dom(phi); on the hull the value is the lower convex hull of the lifted
    finite samples, +inf (NaN) outside.
    """
    if isinstance(phi, BoundaryFunction):
        if validate:
            phi.validate()
        if phi.continuous and phi.domain is not None and not np.all(np.isfinite(phi.values)):
            pts, vals = phi.finite_samples()
        else:
            pts, vals = (phi.points, phi.values) if not phi.continuous else phi.finite_samples()
    else:
        pts, vals = phi
    ev = EnvelopeEvaluator(pts, vals)
    out = ev(grid.points()).reshape(grid.nx, grid.ny)
    return GridFunction(grid, out, convex=True)


# ---------------------------------------------------------------------------
# discrete Legendre-Fenchel transform


def _conjugate_1d(t, f, finite, ys):
    """max_i (t_i * y - f_i) over finite entries; linear-time hull merge.

    Returns (values at ys, any_finite).  The float expression tree matches
    the brute force fl(fl(t*y) - f), so results agree bit-for-bit with an
    O(nm) double loop whenever hull comparisons are exact.
    """
    idx = np.where(finite)[0]
    if len(idx) == 0:
        return None, False
    tt = t[idx]
    ff = f[idx]
    ht = [tt[0]]
    hf = [ff[0]]
    for k in range(1, len(tt)):
        tk = tt[k]
        fk = ff[k]
        while len(ht) >= 2:
            # drop hull point (t2,f2) unless strictly below chord (t1,f1)-(tk,fk)
            if (hf[-1] - hf[-2]) * (tk - ht[-2]) >= (fk - hf[-2]) * (ht[-1] - ht[-2]):
                ht.pop()
                hf.pop()
            else:
                break
        ht.append(tk)
        hf.append(fk)
    ht = np.array(ht)
    hf = np.array(hf)
    out = np.empty(len(ys))
    j = 0
    last = len(ht) - 1
    for q in range(len(ys)):
        y = ys[q]
        while j < last and (hf[j + 1] - hf[j]) < y * (ht[j + 1] - ht[j]):
            j += 1
        out[q] = ht[j] * y - hf[j]
    return out, True


def legendre_transform(u, dual_grid):
    """Discrete Legendre transform y -> max_x (x.y - u(x)) over grid nodes.

    Separable two-pass scheme: 1D conjugation along the y-axis per grid
    column, then along the x-axis per dual row.  Output is finite everywhere
    (dom u bounded) and flagged convex.
    """
    mask = u.mask
    if not mask.any():
        raise AllInfinite("legendre_transform of identically +inf function")
    xs = u.grid.xs
    ysrc = u.grid.ys
    y1 = dual_grid.xs
    y2 = dual_grid.ys
    nx = u.grid.nx
    inner = np.empty((nx, dual_grid.ny))
    ok = np.zeros(nx, bool)
    for i in range(nx):
        vals, any_fin = _conjugate_1d(ysrc, u.values[i], mask[i], y2)
        ok[i] = any_fin
        if any_fin:
            inner[i] = vals
    out = np.empty((dual_grid.nx, dual_grid.ny))
    for l in range(dual_grid.ny):
        vals, _ = _conjugate_1d(xs, -inner[:, l], ok, y1)
        out[:, l] = vals
    return GridFunction(dual_grid, out, convex=True)


def legendre_transform_brute(u, dual_grid):
    """O(N^2) reference; same float grouping as the fast transform."""
    mask = u.mask
    if not mask.any():
        raise AllInfinite("legendre_transform of identically +inf function")
    ii, jj = np.where(mask)
    x1 = u.grid.xs[ii]
    x2 = u.grid.ys[jj]
    vals = u.values[ii, jj]
    out = np.empty((dual_grid.nx, dual_grid.ny))
    for k, y1 in enumerate(dual_grid.xs):
        for l, y2 in enumerate(dual_grid.ys):
            out[k, l] = np.max(x1 * y1 + (x2 * y2 - vals))
    return GridFunction(dual_grid, out, convex=True)


def conjugate_of_samples(points, values, dual_grid):
    """Exact conjugate of a finite sample set: y -> max_k (p_k.y - v_k)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    keep = np.isfinite(values)
    points, values = points[keep], values[keep]
    if len(points) == 0:
        raise AllInfinite("conjugate of empty sample set")
    P = dual_grid.points()
    out = np.max(P @ points.T - values, axis=1).reshape(dual_grid.nx, dual_grid.ny)
    return GridFunction(dual_grid, out, convex=True)


# ---------------------------------------------------------------------------
# subgradients


STENCIL_DIRS = np.array([(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)])


@dataclass
class SubgradientSet:
    """Convex polygon (possibly degenerate) outer-approximating Du(x0)."""

    vertices: np.ndarray
    empty: bool = False

    def contains(self, y, tol=1e-9):
        if self.empty or len(self.vertices) == 0:
            return False
        v = self.vertices
        if len(v) == 1:
            return bool(np.linalg.norm(v[0] - y) <= tol)
        ok = True
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            e = b - a
            ok &= (e[0] * (y[1] - a[1]) - e[1] * (y[0] - a[0])) >= -tol
        return bool(ok)

    def centroid(self):
        return self.vertices.mean(axis=0) if not self.empty else None

    def diameter(self):
        if self.empty or len(self.vertices) < 2:
            return 0.0
        v = self.vertices
        return float(max(np.linalg.norm(a - b) for a in v for b in v))

    def area(self):
        if self.empty or len(self.vertices) < 3:
            return 0.0
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


def _clip_halfplane(poly, n, c):
    """Keep {y : y.n <= c} of a convex polygon (Sutherland-Hodgman step)."""
    if len(poly) == 0:
        return poly
    out = []
    k = len(poly)
    d = poly @ n - c
    for i in range(k):
        j = (i + 1) % k
        if d[i] <= 0:
            out.append(poly[i])
        if (d[i] <= 0) != (d[j] <= 0):
            t = d[i] / (d[i] - d[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out) if out else np.zeros((0, 2))


def subgradients(u, node, radius_cap=None):
    """Outer polygonal approximation of Du at a grid node.

    Intersects the half-planes {y : y.e_hat <= one-sided quotient along e}
    over the 8 stencil directions.  Empty when u(node) is not finite or the
    quotients are inconsistent.
    """
    i, j = node
    g = u.grid
    if not u.mask[i, j]:
        return SubgradientSet(np.zeros((0, 2)), empty=True)
    u0 = u.values[i, j]
    cons = []
    for di, dj in STENCIL_DIRS:
        ii, jj = i + di, j + dj
        if 0 <= ii < g.nx and 0 <= jj < g.ny and u.mask[ii, jj]:
            L = g.h * float(np.hypot(di, dj))
            q = (u.values[ii, jj] - u0) / L
            cons.append((np.array([di, dj]) / np.hypot(di, dj), q))
    if not cons:
        return SubgradientSet(np.zeros((0, 2)), empty=True)
    R = radius_cap if radius_cap is not None else 2.0 * max(abs(q) for _, q in cons) + 1.0
    poly = np.array([[-R, -R], [R, -R], [R, R], [-R, R]])
    for n, c in cons:
        poly = _clip_halfplane(poly, n, c)
        if len(poly) == 0:
            return SubgradientSet(np.zeros((0, 2)), empty=True)
    # drop duplicate vertices from degenerate clips
    keep = [0]
    for k in range(1, len(poly)):
        if np.linalg.norm(poly[k] - poly[keep[-1]]) > 1e-12 * (1 + R):
            keep.append(k)
    if len(keep) > 1 and np.linalg.norm(poly[keep[-1]] - poly[keep[0]]) <= 1e-12 * (1 + R):
        keep.pop()
    return SubgradientSet(poly[keep])


def ma_measure(u, region):
    """Monge-Ampere mass of a node region: area of the union of per-node
    subgradient cells."""
    from shapely.geometry import Polygon, Point
    from shapely.ops import unary_union

    if isinstance(region, np.ndarray) and region.dtype == bool:
        nodes = list(zip(*np.where(region)))
    else:
        nodes = [tuple(n) for n in region]
    interior = _interior_mask(u.mask)
    for (i, j) in nodes:
        if not interior[i, j]:
            raise RegionOutsideDomain(f"node {(i, j)} not interior to the effective domain")
    cells = []
    for (i, j) in nodes:
        s = subgradients(u, (i, j))
        if s.empty or len(s.vertices) == 0:
            continue
        if len(s.vertices) >= 3:
            cells.append(Polygon(s.vertices))
        else:
            cells.append(Point(s.vertices[0]).buffer(0))
    if not cells:
        return 0.0
    return float(unary_union(cells).area)


def _interior_mask(mask):
    """Finite nodes whose 4-neighbours are all finite."""
    out = mask.copy()
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        out &= _shift(mask, di, dj)
    return out


# ---------------------------------------------------------------------------
# inner derivatives


@dataclass
class InnerDerivativeResult:
    ts: np.ndarray
    slopes: np.ndarray
    classification: str
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))


def classify_slopes(slopes, ratio_blowup=1.3, flat_rtol=0.05):
    """Dichotomy from a (monotone, by convexity) slope sequence.

    infinite: magnitudes keep growing by >= ratio_blowup per refinement;
    finite: the last two slopes differ by < flat_rtol relatively; otherwise
    undetermined.
    """
    s = np.asarray(slopes, dtype=float)
    s = s[np.isfinite(s)]
    if len(s) < 3:
        return "undetermined", np.zeros(0)
    mags = np.abs(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = mags[1:] / np.where(mags[:-1] == 0, np.nan, mags[:-1])
    tail = ratios[-2:]
    denom = max(abs(s[-1]), 1e-30)
    if abs(s[-1] - s[-2]) < flat_rtol * denom:
        return "finite", ratios
    if np.all(np.isfinite(tail)) and np.all(tail >= ratio_blowup) and s[-1] < 0:
        return "infinite", ratios
    return "undetermined", ratios


def inner_derivative_slope(u, x0, x1, levels=8, value_at_x0=None):
    """Difference quotients (u(x0 + t(x1-x0)) - u(x0))/t on t = 2^-k.

    x0 lies on the boundary of the effective domain, x1 inside it; u is
    evaluated by bilinear interpolation, and the sequence stops once the
    probe point is within ~2h of x0 (interpolation no longer trustworthy).
    value_at_x0 defaults to the value at the nearest grid node, which must
    be finite.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    g = u.grid
    if value_at_x0 is None:
        i, j = g.nearest_node(x0)
        if np.linalg.norm(g.node_point(i, j) - x0) > 0.75 * g.h or not u.mask[i, j]:
            raise SegmentLeavesDomain("u(x0) unknown: x0 is not near a finite grid node")
        value_at_x0 = float(u.values[i, j])
    L = float(np.linalg.norm(x1 - x0))
    if L == 0:
        raise SegmentLeavesDomain("x0 == x1")
    v1 = u.interpolate(x1[None])[0]
    if not np.isfinite(v1):
        raise SegmentLeavesDomain("u not finite at x1")
    t_min = 2.0 * g.h / L
    ts, slopes = [], []
    t = 1.0
    for _ in range(levels):
        if t < t_min:
            break
        p = x0 + t * (x1 - x0)
        val = u.interpolate(p[None])[0]
        if np.isfinite(val):
            ts.append(t)
            slopes.append((val - value_at_x0) / t)
        t *= 0.5
    ts = np.array(ts)
    slopes = np.array(slopes)
    if len(slopes) < 3:
        return InnerDerivativeResult(ts, slopes, "undetermined")
    cls, ratios = classify_slopes(slopes)
    return InnerDerivativeResult(ts, slopes, cls, ratios)

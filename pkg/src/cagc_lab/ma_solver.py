"""Generalized Dirichlet Monge-Ampere solver on convex planar domains.

Wide-stencil monotone discretization: at each interior node the operator is
the minimum over orthogonal lattice direction pairs (e, e_perp) of the
product of (clamped) centered second differences.  Stencil legs that would
leave the domain are shortened to the exact boundary crossing and read the
Dirichlet data there, so curved boundaries are resolved to O(h) rather than
staircased.  Damped semismooth Newton with a nonlinear two-color relaxation
fallback; the Cheng-Yau support-function equation det D^2 w = (-w)^-4 is an
outer under-relaxed fixed point over Dirichlet solves.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as spsp
import scipy.sparse.linalg as spla

from .convex_core import (
    BoundaryFunction,
    EnvelopeEvaluator,
    Grid,
    GridFunction,
)
from .errors import (
    DomainTooSmall,
    InsufficientResolution,
    NoConvergence,
    NonConvexBoundaryData,
    NonPositive,
    NotContained,
    PointOutsideDomain,
    StencilOutOfDomain,
)

__all__ = [
    "PlanarDomain",
    "SolveReport",
    "direction_pairs",
    "ma_operator",
    "ma_operator_field",
    "solve_dirichlet",
    "cheng_yau",
    "clear_cheng_yau_cache",
    "support_ball",
    "support_simplex",
    "domain_monotonicity_check",
    "boundary_growth_check",
    "GrowthResult",
]


# ---------------------------------------------------------------------------
# domains


class PlanarDomain:
    """Bounded convex domain: disk, polygon, or smooth (support samples).

    Polygon and smooth kinds share a half-plane representation
    {x : x.n_k <= s_k}; the disk kind is handled analytically.  Optional
    exterior-circle witnesses (point -> enclosing disk touching it) ride
    along as metadata.
    """

    def __init__(self, kind, center=None, radius=None, vertices=None,
                 normals=None, supports=None, exterior_circle=None, label=None):
        self.kind = kind
        self.center = None if center is None else np.asarray(center, dtype=float)
        self.radius = radius
        self.vertices = None if vertices is None else np.asarray(vertices, dtype=float)
        self.normals = None if normals is None else np.asarray(normals, dtype=float)
        self.supports = None if supports is None else np.asarray(supports, dtype=float)
        self.exterior_circle = exterior_circle or {}
        self.label = label
        if kind == "disk":
            if radius is None or radius <= 0:
                raise ValueError("disk needs radius > 0")
        elif kind == "polygon":
            self._init_polygon()
        elif kind == "smooth":
            if self.normals is None or self.supports is None:
                raise ValueError("smooth domain needs support-function samples")
        else:
            raise ValueError(f"unknown domain kind {kind!r}")

    # -- constructors -------------------------------------------------------

    @classmethod
    def disk(cls, center=(0.0, 0.0), radius=1.0):
        return cls("disk", center=center, radius=radius)

    @classmethod
    def polygon(cls, vertices):
        return cls("polygon", vertices=vertices)

    @classmethod
    def from_support(cls, normals, supports, label=None):
        return cls("smooth", normals=normals, supports=supports, label=label)

    @classmethod
    def stadium(cls, half_length, cap_radius, n=720):
        """Rectangle [-a,a] x [-r,r] with semicircular caps: the Minkowski
        sum of a segment and a disk, h(theta) = a|cos theta| + r."""
        th = 2 * np.pi * np.arange(n) / n
        normals = np.stack([np.cos(th), np.sin(th)], axis=1)
        supports = half_length * np.abs(np.cos(th)) + cap_radius
        d = cls("smooth", normals=normals, supports=supports,
                label=f"stadium({half_length},{cap_radius},{n})")
        d._stadium = (half_length, cap_radius, n)
        return d

    def _init_polygon(self):
        v = self.vertices
        if v is None or len(v) < 3:
            raise ValueError("polygon needs >= 3 vertices")
        if _polygon_area(v) < 0:
            raise ValueError("polygon vertices must be CCW")
        edges = np.roll(v, -1, axis=0) - v
        lens = np.linalg.norm(edges, axis=1)
        if np.any(lens < 1e-14):
            raise ValueError("duplicate polygon vertices")
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - \
            edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(cross <= 0):
            raise ValueError("polygon is not strictly convex (CCW order required)")
        n = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lens[:, None]  # outward
        self.normals = n
        self.supports = np.sum(n * v, axis=1)

    # -- basic geometry ------------------------------------------------------

    def key(self):
        if self.kind == "disk":
            return ("disk", tuple(self.center), self.radius)
        if self.kind == "polygon":
            return ("polygon", tuple(map(tuple, np.round(self.vertices, 14))))
        return ("smooth", self.label or "", len(self.normals),
                tuple(np.round(self.supports[:8], 12)))

    def bbox(self):
        if self.kind == "disk":
            c, R = self.center, self.radius
            return ((c[0] - R, c[1] - R), (c[0] + R, c[1] + R))
        sup = self.support(np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float))
        return ((-sup[2], -sup[3]), (sup[0], sup[1]))

    def support(self, dirs):
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        if self.kind == "disk":
            return dirs @ self.center + self.radius * np.linalg.norm(dirs, axis=1)
        if self.kind == "polygon":
            return np.max(dirs @ self.vertices.T, axis=1)
        # smooth: support known on sampled normals; evaluate via boundary polyline
        return np.max(dirs @ self.boundary_points(len(self.normals)).T, axis=1)

    def contains(self, points, tol=1e-12):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            return np.linalg.norm(points - self.center, axis=1) <= self.radius + tol
        return np.all(points @ self.normals.T <= self.supports[None, :] + tol, axis=1)

    def strictly_inside(self, points, margin=1e-12):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            return np.linalg.norm(points - self.center, axis=1) < self.radius - margin
        return np.all(points @ self.normals.T < self.supports[None, :] - margin, axis=1)

    def boundary_distance(self, points):
        """Distance to the boundary for interior points (min half-plane gap)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            return self.radius - np.linalg.norm(points - self.center, axis=1)
        return np.min(self.supports[None, :] - points @ self.normals.T, axis=1)

    def ray_exit(self, p, d):
        """Smallest t > 0 with p + t d on the boundary (p inside)."""
        if self.kind == "disk":
            rel = np.asarray(p, dtype=float) - self.center
            a = d @ d
            b = 2 * rel @ d
            c = rel @ rel - self.radius**2
            disc = max(b * b - 4 * a * c, 0.0)
            return (-b + math.sqrt(disc)) / (2 * a)
        dn = self.normals @ d
        gap = self.supports - self.normals @ p
        pos = dn > 1e-15
        if not pos.any():
            return np.inf
        return float(np.min(gap[pos] / dn[pos]))

    def boundary_points(self, n):
        if self.kind == "disk":
            th = 2 * np.pi * np.arange(n) / n
            return self.center + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)
        if self.kind == "polygon":
            v = self.vertices
            lens = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
            total = lens.sum()
            svals = total * np.arange(n) / n
            return np.array([self._polygon_point(s, v, lens) for s in svals])
        # smooth: intersect consecutive supporting lines
        nrm, sup = self.normals, self.supports
        pts = []
        k = len(nrm)
        for i in range(k):
            j = (i + 1) % k
            A = np.array([nrm[i], nrm[j]])
            b = np.array([sup[i], sup[j]])
            det = np.linalg.det(A)
            if abs(det) > 1e-14:
                pts.append(np.linalg.solve(A, b))
        pts = np.array(pts)
        if n == len(pts):
            return pts
        idx = (np.arange(n) * len(pts)) // n
        return pts[idx]

    @staticmethod
    def _polygon_point(s, v, lens):
        k = 0
        while k < len(lens) and s > lens[k]:
            s -= lens[k]
            k += 1
        k = min(k, len(lens) - 1)
        a = v[k]
        b = v[(k + 1) % len(v)]
        return a + (b - a) * (s / lens[k])

    def boundary_parameter(self, points):
        """Monotone parameter along the boundary (angle or arc length)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            rel = points - self.center
            return np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi) * self.radius
        ref = self.boundary_points(2048)
        seg = np.linalg.norm(np.roll(ref, -1, axis=0) - ref, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
        d2 = ((points[:, None, :] - ref[None, :, :])**2).sum(axis=2)
        return cum[np.argmin(d2, axis=1)]

    def boundary_length(self):
        if self.kind == "disk":
            return 2 * np.pi * self.radius
        ref = self.boundary_points(2048)
        return float(np.linalg.norm(np.roll(ref, -1, axis=0) - ref, axis=1).sum())

    def project_to_boundary(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            rel = points - self.center
            nn = np.linalg.norm(rel, axis=1)
            nn = np.where(nn < 1e-15, 1.0, nn)
            return self.center + self.radius * rel / nn[:, None]
        out = []
        ctr = self.chebyshev_center()
        for p in points:
            if self.contains(p[None])[0] and not self.strictly_inside(p[None], 1e-12)[0]:
                out.append(p)
                continue
            d = p - ctr
            nd = np.linalg.norm(d)
            if nd < 1e-15:
                d = np.array([1.0, 0.0])
                nd = 1.0
            t = self.ray_exit(ctr, d / nd)
            out.append(ctr + t * d / nd)
        return np.array(out)

    def boundary_normal(self, p):
        """Outward unit normal at a boundary point (face normal; averaged at corners)."""
        p = np.asarray(p, dtype=float)
        if self.kind == "disk":
            rel = p - self.center
            return rel / np.linalg.norm(rel)
        gap = self.supports - self.normals @ p
        active = gap <= 1e-9 * max(1.0, float(np.max(np.abs(self.supports))))
        if not active.any():
            active = gap <= gap.min() + 1e-12
        n = self.normals[active].mean(axis=0)
        return n / np.linalg.norm(n)

    def straight_segments(self):
        """Maximal straight boundary segments, as (a, b) endpoint pairs."""
        if self.kind == "disk":
            return []
        if self.kind == "polygon":
            v = self.vertices
            return [(v[k], v[(k + 1) % len(v)]) for k in range(len(v))]
        # smooth kind: detect runs of boundary points on a common supporting line
        segs = []
        if getattr(self, "_stadium", None) is not None:
            a, r, _ = self._stadium
            segs = [(np.array([-a, r]), np.array([a, r])),
                    (np.array([-a, -r]), np.array([a, -r]))]
        return segs

    def chebyshev_center(self):
        """Point maximizing the boundary distance (approximate for non-disks)."""
        if self.kind == "disk":
            return self.center.copy()
        (x0, y0), (x1, y1) = self.bbox()
        xs = np.linspace(x0, x1, 41)
        ys = np.linspace(y0, y1, 41)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        d = self.boundary_distance(pts)
        d[~self.contains(pts)] = -np.inf
        return pts[np.argmax(d)]

    def inradius(self):
        if self.kind == "disk":
            return self.radius
        return float(self.boundary_distance(self.chebyshev_center()[None])[0])

    def erode(self, delta):
        """Inner parallel body at distance delta (exact per kind)."""
        if delta <= 0:
            return self
        if self.kind == "disk":
            if self.radius - delta <= 0:
                return None
            return PlanarDomain.disk(self.center, self.radius - delta)
        if self.kind == "polygon":
            import shapely.geometry as sg

            poly = sg.Polygon(self.vertices).buffer(-delta, join_style=2)
            if poly.is_empty or poly.area <= 0:
                return None
            coords = np.array(poly.exterior.coords[:-1])
            if _polygon_area(coords) < 0:
                coords = coords[::-1]
            coords = _dedupe_collinear(coords)
            if len(coords) < 3:
                return None
            return PlanarDomain.polygon(coords)
        # smooth body with rolling radius >= delta: support shrinks by delta
        sup = self.supports - delta
        if getattr(self, "_stadium", None) is not None:
            a, r, n = self._stadium
            if r - delta <= 0:
                return None
            return PlanarDomain.stadium(a, r - delta, n)
        if np.min(sup) <= 0 and not PlanarDomain("smooth", normals=self.normals,
                                                 supports=sup).contains(
                                                     self.chebyshev_center()[None])[0]:
            return None
        return PlanarDomain.from_support(self.normals, sup,
                                         label=(self.label or "smooth") + f"-erode{delta:.2e}")

    def validate_exterior_circle(self):
        for pt, (c, R) in self.exterior_circle.items():
            p = np.asarray(pt, dtype=float)
            c = np.asarray(c, dtype=float)
            if abs(np.linalg.norm(p - c) - R) > 1e-9 * R:
                raise ValueError(f"witness disk does not touch {pt}")
            th = np.linspace(0, 2 * np.pi, 256, endpoint=False)
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
            if np.any(self.support(dirs) > dirs @ c + R + 1e-9 * R):
                raise ValueError(f"witness disk at {pt} does not contain the domain")
        return True


def _polygon_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _dedupe_collinear(v, tol=1e-12):
    out = []
    k = len(v)
    for i in range(k):
        a, b, c = v[i - 1], v[i], v[(i + 1) % k]
        if np.linalg.norm(b - a) < tol:
            continue
        if abs(np.cross(b - a, c - b)) > tol * (np.linalg.norm(b - a) + np.linalg.norm(c - b)):
            out.append(b)
    return np.array(out) if out else v


# ---------------------------------------------------------------------------
# monotone operator stencil


def direction_pairs(radius=3):
    """Orthogonal coprime lattice pairs {(e, e_perp)} with |e|_inf <= radius.

    radius 3 reproduces the 8 axis/diagonal/knight pairs; larger radii add
    angular resolution (radius 5 -> 20 pairs).
    """
    out = []
    seen = set()
    for a in range(0, radius + 1):
        for b in range(1, radius + 1):
            if math.gcd(a, b) != 1:
                continue
            e = (b, a)
            ang = round(math.atan2(e[1], e[0]) % (math.pi / 2), 12)
            if ang in seen:
                continue
            seen.add(ang)
            out.append(((b, a), (-a, b)))
    return out


class _Stencil:
    """Per-(domain, grid, radius) geometry: interior nodes, neighbour indices,
    cut-leg fractions and boundary crossing points for each signed direction."""

    def __init__(self, domain, grid, radius):
        self.pairs = direction_pairs(radius)
        self.dirs = sorted({v for p in self.pairs for v in p})
        self.grid = grid
        self.domain = domain
        X, Y = grid.meshgrid()
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        # nodes grazing the boundary (closer than snap*h) are treated as
        # boundary nodes: they carry Dirichlet data and leave the unknown set,
        # bounding the cut-leg weights by 1/snap
        snap = 0.005
        strict = domain.strictly_inside(pts, margin=1e-12 * max(1.0, grid.h))
        bdist = domain.boundary_distance(pts)
        inside = (strict & (bdist > snap * grid.h)).reshape(grid.nx, grid.ny)
        self.inside = inside
        self.snapped = (strict & ~inside.ravel()).reshape(grid.nx, grid.ny)
        idx = -np.ones((grid.nx, grid.ny), dtype=int)
        ii, jj = np.where(inside)
        self.m = len(ii)
        idx[ii, jj] = np.arange(self.m)
        self.idx = idx
        self.ii, self.jj = ii, jj
        self.P = np.stack([X[ii, jj], Y[ii, jj]], axis=1)
        h = grid.h
        self.legs = {}
        for v in self.dirs:
            for sgn in (1, -1):
                vv = (sgn * v[0], sgn * v[1])
                qi = ii + vv[0]
                qj = jj + vv[1]
                okg = (qi >= 0) & (qi < grid.nx) & (qj >= 0) & (qj < grid.ny)
                nbr = np.where(okg, idx[np.clip(qi, 0, grid.nx - 1),
                                        np.clip(qj, 0, grid.ny - 1)], -1)
                frac = np.ones(self.m)
                cut = nbr < 0
                bp = np.full((self.m, 2), np.nan)
                if cut.any():
                    step = np.array(vv, dtype=float) * h
                    for k in np.where(cut)[0]:
                        t = domain.ray_exit(self.P[k], step)
                        t = min(max(t, 1e-9), 1.0)
                        frac[k] = t
                        bp[k] = self.P[k] + t * step
                self.legs[vv] = (nbr, frac, cut, bp)
        # second-difference weights per unsigned direction
        self.weights = {}
        for v in self.dirs:
            _, sf, _, _ = self.legs[v]
            _, sb, _, _ = self.legs[(-v[0], -v[1])]
            l2 = (v[0]**2 + v[1]**2) * h * h
            wf = 2.0 / (sf * (sf + sb) * l2)
            wb = 2.0 / (sb * (sf + sb) * l2)
            self.weights[v] = (wf, wb)

    def boundary_values(self, bfun):
        """Evaluate Dirichlet data at every cut-leg crossing point."""
        vals = {}
        for v, (nbr, frac, cut, bp) in self.legs.items():
            bv = np.zeros(self.m)
            if cut.any():
                bv[cut] = bfun(bp[cut])
            vals[v] = bv
        return vals


_STENCILS = {}


def _get_stencil(domain, grid, radius):
    key = (domain.key(), grid.key(), radius)
    if key not in _STENCILS:
        _STENCILS[key] = _Stencil(domain, grid, radius)
    return _STENCILS[key]


def _deltas(st, u, bvals):
    """Second differences per unsigned direction (cut legs read boundary data)."""
    out = {}
    for v in st.dirs:
        nf, sf, cf, _ = st.legs[v]
        nb, sb, cb, _ = st.legs[(-v[0], -v[1])]
        uf = np.where(cf, bvals[v], u[np.maximum(nf, 0)])
        ub = np.where(cb, bvals[(-v[0], -v[1])], u[np.maximum(nb, 0)])
        wf, wb = st.weights[v]
        out[v] = wf * (uf - u) + wb * (ub - u)
    return out


def _min_pairs(st, deltas):
    F = np.full(st.m, np.inf)
    act = np.zeros(st.m, dtype=int)
    for k, (e, ep) in enumerate(st.pairs):
        prod = np.maximum(deltas[e], 0.0) * np.maximum(deltas[ep], 0.0)
        better = prod < F
        F[better] = prod[better]
        act[better] = k
    return F, act


def _min_pairs_aug(st, deltas):
    """min over pairs of [De]+[Dep]+ + [De]- + [Dep]-; for g >= 0 the roots
    coincide with the bare clamped product, but the negative parts keep the
    linearization full-rank outside the convex cone (Froese-Oberman form)."""
    F = np.full(st.m, np.inf)
    act = np.zeros(st.m, dtype=int)
    for k, (e, ep) in enumerate(st.pairs):
        de = deltas[e]
        dp = deltas[ep]
        val = (np.maximum(de, 0.0) * np.maximum(dp, 0.0)
               + np.minimum(de, 0.0) + np.minimum(dp, 0.0))
        better = val < F
        F[better] = val[better]
        act[better] = k
    return F, act


def _frozen_apply_aug(st, deltas, act):
    F = np.empty(st.m)
    for k, (e, ep) in enumerate(st.pairs):
        sel = act == k
        if sel.any():
            de = deltas[e]
            dp = deltas[ep]
            val = (np.maximum(de, 0.0) * np.maximum(dp, 0.0)
                   + np.minimum(de, 0.0) + np.minimum(dp, 0.0))
            F[sel] = val[sel]
    return F


# ---------------------------------------------------------------------------
# public operator


def ma_operator_field(u, radius=3):
    """Monotone det D^2 approximation at all nodes with a full finite stencil.

    Returns (values, valid mask); min over orthogonal direction pairs of the
    product of clamped centered second differences (full legs only).
    """
    pairs = direction_pairs(radius)
    dirs = sorted({v for p in pairs for v in p})
    v = u.values
    h = u.grid.h
    mask = u.mask
    deltas = {}
    valid = mask.copy()
    from .convex_core import _shift

    for d in dirs:
        vp = _shift(v, d[0], d[1])
        vm = _shift(v, -d[0], -d[1])
        ok = mask & _shift(mask, d[0], d[1]) & _shift(mask, -d[0], -d[1])
        l2 = (d[0]**2 + d[1]**2) * h * h
        deltas[d] = (vp + vm - 2 * v) / l2
        valid &= ok
    out = np.full(v.shape, np.inf)
    for e, ep in pairs:
        prod = np.maximum(deltas[e], 0.0) * np.maximum(deltas[ep], 0.0)
        out = np.minimum(out, prod)
    out[~valid] = np.nan
    return out, valid


def ma_operator(u, node, radius=3):
    """Monotone wide-stencil approximation of det D^2 u at a grid node."""
    field, valid = ma_operator_field(u, radius)
    i, j = node
    if not valid[i, j]:
        raise StencilOutOfDomain(f"node {(i, j)} lacks a full finite stencil")
    return float(field[i, j])


# ---------------------------------------------------------------------------
# Dirichlet solver


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = np.nan
    monotone_violations: int = 0
    wall_time: float = 0.0
    outer_iterations: int = 0
    fallback_sweeps: int = 0
    converged: bool = True
    extras: dict = field(default_factory=dict)

    def to_dict(self, include_wall_time=False):
        d = {
            "iterations": self.iterations,
            "residual": self.residual,
            "monotone_violations": self.monotone_violations,
            "outer_iterations": self.outer_iterations,
            "fallback_sweeps": self.fallback_sweeps,
            "converged": self.converged,
        }
        d.update(self.extras)
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d


def _as_boundary_callable(boundary, domain):
    if isinstance(boundary, BoundaryFunction):
        boundary.validate()
        if not boundary.continuous:
            raise NonConvexBoundaryData(
                "solve_dirichlet needs continuous boundary data; "
                "use the two-step solver for extended-real data")
        return boundary
    if np.isscalar(boundary):
        c = float(boundary)
        return lambda pts: np.full(len(np.atleast_2d(pts)), c)
    return boundary


def _interior_rhs(g, st):
    if callable(g):
        vals = np.asarray(g(st.P), dtype=float)
    elif np.isscalar(g):
        vals = np.full(st.m, float(g))
    else:
        arr = np.asarray(g, dtype=float)
        if arr.shape == (st.grid.nx, st.grid.ny):
            vals = arr[st.ii, st.jj]
        else:
            vals = arr
    if np.any(~np.isfinite(vals)) or np.any(vals < 0):
        raise ValueError("rhs must be finite and >= 0 on interior nodes")
    return vals


def _perron_init(st, bvals, g):
    """Convex initial guess matching the boundary data: solve the cut-leg
    Poisson problem sum_axis D2_e u = 2 sqrt(g) (the isotropic consistency
    guess for det D^2 u = g), which respects the Dirichlet data through the
    same shortened legs and is strictly curved everywhere."""
    m = st.m
    arng = np.arange(m)
    rows, cols, vals = [], [], []
    diag = np.zeros(m)
    rhs = 2.0 * np.sqrt(np.maximum(g, 0.0))
    for v in ((1, 0), (0, 1)):
        nf, sf, cf, _ = st.legs[v]
        nb, sb, cb, _ = st.legs[(-v[0], -v[1])]
        wf, wb = st.weights[v]
        diag += -(wf + wb)
        s1 = ~cf
        rows.append(arng[s1]); cols.append(nf[s1]); vals.append(wf[s1])
        rhs[cf] -= wf[cf] * bvals[v][cf]
        s2 = ~cb
        rows.append(arng[s2]); cols.append(nb[s2]); vals.append(wb[s2])
        rhs[cb] -= wb[cb] * bvals[(-v[0], -v[1])][cb]
    rows.append(arng); cols.append(arng); vals.append(diag)
    A = spsp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(m, m))
    try:
        return spla.spsolve(A, rhs)
    except RuntimeError:
        return rhs / diag


def _frozen_apply(st, deltas, act):
    """Operator value using the frozen (policy) pair per node."""
    F = np.empty(st.m)
    for k, (e, ep) in enumerate(st.pairs):
        sel = act == k
        if sel.any():
            F[sel] = (np.maximum(deltas[e], 0.0) * np.maximum(deltas[ep], 0.0))[sel]
    return F


def _newton(st, g, bvals, u0, rtol, max_iter, report, bootstrap=0):
    """Policy iteration over the min-pair structure with damped Newton on the
    frozen-pair system (Howard's algorithm), run on the negative-part
    augmented operator; nonlinear Jacobi relaxation bootstraps bad starts."""
    m = st.m
    u = u0.copy()
    deltas = _deltas(st, u, bvals)
    F, act = _min_pairs_aug(st, deltas)
    denom = 1.0 + np.abs(g)
    res = float(np.max(np.abs(F - g) / denom))
    if bootstrap or res > 50.0:
        u, deltas, F, act, res = _relax_sweeps(st, g, bvals, u, sweeps=max(bootstrap, 4))
        report.fallback_sweeps += max(bootstrap, 4)
    arng = np.arange(m)
    it = 0
    failed = 0
    while res > rtol and it < max_iter:
        Fa = _frozen_apply_aug(st, deltas, act)
        rows, cols, vals = [], [], []
        diag = np.zeros(m)
        for k, (e, ep) in enumerate(st.pairs):
            sel = act == k
            if not sel.any():
                continue
            for d1, d2 in ((e, ep), (ep, e)):
                pos = (deltas[d1] > 0) & sel
                neg = (deltas[d1] <= 0) & sel
                nf, sf, cf, _ = st.legs[d1]
                nb, sb, cb, _ = st.legs[(-d1[0], -d1[1])]
                wf, wb = st.weights[d1]
                # d/d(Delta_d1) = [Delta_d2]_+ on the positive branch, 1 on the
                # negative branch; chain through the leg weights
                coef = np.where(pos, np.maximum(deltas[d2], 0.0), np.where(neg, 1.0, 0.0))
                gate = pos | neg
                diag[gate] += (-(wf + wb) * coef)[gate]
                s1 = gate & (~cf)
                rows.append(arng[s1]); cols.append(nf[s1]); vals.append((wf * coef)[s1])
                s2 = gate & (~cb)
                rows.append(arng[s2]); cols.append(nb[s2]); vals.append((wb * coef)[s2])
        dead = diag == 0
        diag[dead] = -1.0 / st.grid.h**2
        rows.append(arng); cols.append(arng); vals.append(diag)
        J = spsp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
        try:
            step = spla.splu(J).solve(-(Fa - g))
        except RuntimeError:
            step = -(Fa - g) / diag
        # line search on the frozen-policy residual, 2-norm merit
        scaled = (Fa - g) / denom
        merit0 = float(scaled @ scaled)
        alpha = 1.0
        improved = False
        for _ in range(15):
            un = u + alpha * step
            dn = _deltas(st, un, bvals)
            Fan = _frozen_apply_aug(st, dn, act)
            sc = (Fan - g) / denom
            if float(sc @ sc) < merit0:
                improved = True
                break
            alpha *= 0.5
        if improved:
            u, deltas = un, dn
            failed = 0
        else:
            failed += 1
            if failed >= 3:
                u, deltas, F, act, res = _relax_sweeps(st, g, bvals, u, sweeps=5)
                report.fallback_sweeps += 5
                failed = 0
                it += 1
                continue
        F, act = _min_pairs_aug(st, deltas)
        res = float(np.max(np.abs(F - g) / denom))
        it += 1
    report.iterations += it
    return u, F, act, deltas, res


def _relax_sweeps(st, g, bvals, u, sweeps=10, damp=0.5):
    """Damped nonlinear Jacobi: per-node scalar bisection against frozen
    neighbours, vectorized over all nodes (parallel-ordering degradation
    accepted per the concurrency contract)."""
    for _ in range(sweeps):
        frozen = {}
        for v in st.dirs:
            nf, sf, cf, _ = st.legs[v]
            nb, sb, cb, _ = st.legs[(-v[0], -v[1])]
            uf = np.where(cf, bvals[v], u[np.maximum(nf, 0)])
            ub = np.where(cb, bvals[(-v[0], -v[1])], u[np.maximum(nb, 0)])
            wf, wb = st.weights[v]
            frozen[v] = (wf * uf + wb * ub, wf + wb)

        def op(ucand):
            F = np.full(st.m, np.inf)
            for e, ep in st.pairs:
                fe, ce = frozen[e]
                fp, cp = frozen[ep]
                de = fe - ce * ucand
                dp = fp - cp * ucand
                val = (np.maximum(de, 0.0) * np.maximum(dp, 0.0)
                       + np.minimum(de, 0.0) + np.minimum(dp, 0.0))
                F = np.minimum(F, val)
            return F

        B = float(np.max(np.abs(u)) + 1.0)
        lo = u - 2 * B
        hi = u + 2 * B
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            too_convex = op(mid) > g  # F decreases in the node value
            lo = np.where(too_convex, mid, lo)
            hi = np.where(too_convex, hi, mid)
        u = (1 - damp) * u + damp * 0.5 * (lo + hi)
    deltas = _deltas(st, u, bvals)
    F, act = _min_pairs_aug(st, deltas)
    res = float(np.max(np.abs(F - g) / (1.0 + np.abs(g))))
    return u, deltas, F, act, res


def _count_monotone_violations(st, deltas, act, scale):
    bad = np.zeros(st.m, bool)
    tol = 1e-8 * max(scale, 1.0) / st.grid.h**2
    for k, (e, ep) in enumerate(st.pairs):
        sel = act == k
        bad |= sel & ((deltas[e] < -tol) | (deltas[ep] < -tol))
    return int(bad.sum())


def solve_dirichlet(domain, g, boundary, grid, *, radius=5, rtol=1e-9,
                    max_iter=60, init=None, strict=True):
    """Generalized solution of det D^2 u = g in the domain, u = boundary data.

    Returns (GridFunction, SolveReport).  The output carries solved values at
    interior nodes, Dirichlet data at exterior nodes within h/2 of the
    boundary, and +inf elsewhere.
    """
    t0 = time.perf_counter()
    st = _get_stencil(domain, grid, radius)
    if st.m == 0:
        raise DomainTooSmall("no interior grid nodes")
    bfun = _as_boundary_callable(boundary, domain)
    bvals = st.boundary_values(bfun)
    gvals = _interior_rhs(g, st)
    report = SolveReport()
    u0 = _perron_init(st, bvals, gvals) if init is None else np.asarray(init, dtype=float)
    u, F, act, deltas, res = _newton(st, gvals, bvals, u0, rtol, max_iter, report)
    report.residual = float(np.max(np.abs(F - gvals)) * grid.h**2)
    report.extras["relative_residual"] = res
    report.monotone_violations = _count_monotone_violations(st, deltas, act,
                                                            float(np.max(np.abs(u), initial=0.0)))
    report.wall_time = time.perf_counter() - t0
    if res > rtol:
        report.converged = False
        if strict:
            raise NoConvergence(
                f"Newton stalled at relative residual {res:.3e} after {report.iterations} iterations",
                iterations=report.iterations, residual=res)
    vals = np.full((grid.nx, grid.ny), np.nan)
    vals[st.ii, st.jj] = u
    # nodes of the closed domain outside the unknown set: true boundary nodes
    # carry the Dirichlet data at their projection, while nodes snapped off
    # the unknown set get equation-consistent values from a local monotone
    # solve (plain data there would break discrete convexity)
    pts = grid.points()
    near = (~st.inside.ravel()) & (~st.snapped.ravel()) & (domain.contains(pts, tol=1e-12))
    if near.any():
        proj = domain.project_to_boundary(pts[near])
        vals.ravel()[near] = bfun(proj)
    _fill_snapped(st, domain, grid, vals, bfun, g)
    gf = GridFunction(grid, vals)
    gf.convex = gf.check_convex()
    return gf, report


def _fill_snapped(st, domain, grid, vals, bfun, g, sweeps=4):
    """Monotone local solve at nodes snapped off the unknown set: per-node
    scalar bisection of the min-pair operator against frozen neighbours."""
    snapped = list(zip(*np.where(st.snapped)))
    if not snapped:
        return
    h = grid.h
    P = {n: grid.node_point(*n) for n in snapped}
    if callable(g):
        gs = {n: float(np.atleast_1d(g(P[n][None]))[0]) for n in snapped}
    elif np.isscalar(g):
        gs = {n: float(g) for n in snapped}
    else:
        arr = np.asarray(g, dtype=float)
        gs = {n: float(arr[n[0], n[1]]) if arr.shape == vals.shape else float(np.median(arr))
              for n in snapped}
    for n in snapped:
        if not np.isfinite(vals[n[0], n[1]]):
            vals[n[0], n[1]] = float(bfun(domain.project_to_boundary(P[n][None]))[0])
    legs = {}
    for n in snapped:
        per_dir = []
        for v in st.dirs:
            entry = []
            for sgn in (1, -1):
                vv = (sgn * v[0], sgn * v[1])
                qi, qj = n[0] + vv[0], n[1] + vv[1]
                ok = (0 <= qi < grid.nx and 0 <= qj < grid.ny
                      and np.isfinite(vals[qi, qj])
                      and domain.contains(grid.node_point(qi, qj)[None], tol=1e-12)[0])
                if ok:
                    entry.append(((qi, qj), 1.0, None))
                else:
                    step = np.array(vv, dtype=float) * h
                    t = min(max(domain.ray_exit(P[n], step), 1e-9), 1.0)
                    bpt = P[n] + t * step
                    entry.append((None, t, float(bfun(bpt[None])[0])))
            per_dir.append((v, entry))
        legs[n] = per_dir
    for _ in range(sweeps):
        for n in snapped:
            fr = {}
            for v, entry in legs[n]:
                l2 = (v[0]**2 + v[1]**2) * h * h
                (nf, sf, bf_), (nb, sb, bb_) = entry
                uf = vals[nf] if nf is not None else bf_
                ub = vals[nb] if nb is not None else bb_
                wf = 2.0 / (sf * (sf + sb) * l2)
                wb = 2.0 / (sb * (sf + sb) * l2)
                fr[v] = (wf * uf + wb * ub, wf + wb)

            def op(uc):
                best = np.inf
                for e, ep in st.pairs:
                    fe, ce = fr[e]
                    fp, cp = fr[ep]
                    de = fe - ce * uc
                    dp = fp - cp * uc
                    best = min(best, max(de, 0.0) * max(dp, 0.0) + min(de, 0.0) + min(dp, 0.0))
                return best

            u0 = vals[n[0], n[1]]
            lo = u0 - 1.0 - abs(u0)
            hi = u0 + 1.0 + abs(u0)
            target = gs[n]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if op(mid) > target:
                    lo = mid
                else:
                    hi = mid
            vals[n[0], n[1]] = 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Cheng-Yau support function


_CY_CACHE = {}


def clear_cheng_yau_cache():
    _CY_CACHE.clear()
    _STENCILS.clear()


def cheng_yau(domain, grid, *, tol=1e-8, max_outer=200, radius=5, relax=0.5,
              inner_iters=40, continuation=True):
    """Cheng-Yau support function: det D^2 w = (-w)^-4, w|boundary = 0, w < 0.

    Outer under-relaxed fixed point over Dirichlet solves; the right-hand
    side guards -w^k from below by a transient floor ~ 0.25*scale*sqrt(2 d)
    (d = boundary distance), which is inactive at the converged solution and
    vanishes under refinement together with the iteration error.  Grid
    continuation (coarse-to-fine warm starts) accelerates the fixed point.
    Results are cached per (domain, grid, tol, radius).
    """
    key = (domain.key(), grid.key(), tol, radius)
    if key in _CY_CACHE:
        return _CY_CACHE[key]
    t0 = time.perf_counter()
    n_ext = int(round(max(grid.nx, grid.ny) - 1))
    levels = [grid]
    if continuation:
        n = n_ext
        while n // 2 >= 16:
            n //= 2
            levels.append(Grid.cover(domain.bbox(), n))
        levels = levels[::-1]
    w_prev_gf = None
    report = SolveReport()
    for li, lg in enumerate(levels):
        st = _get_stencil(domain, lg, radius)
        if lg is levels[-1] and st.m < 64:
            raise DomainTooSmall(f"{st.m} interior nodes < 8x8")
        if st.m < 16:
            continue
        dist = domain.boundary_distance(st.P)
        if w_prev_gf is None:
            ctr = st.P[np.argmax(dist)]
            rin = float(dist.max())
            r2 = ((st.P - ctr)**2).sum(axis=1)
            w = -(rin ** (-1.0 / 3.0)) * np.sqrt(np.maximum(rin**2 - r2, 0.0))
            w = np.minimum(w, -1e-9)
        else:
            # w extends by 0 outside the domain, so prolongation may fill the
            # masked coarse nodes with 0 before interpolating
            filled = GridFunction(w_prev_gf.grid, np.nan_to_num(w_prev_gf.values, nan=0.0))
            w = filled.interpolate(st.P)
            w = np.minimum(np.where(np.isfinite(w), w, 0.0), -1e-9)
        level_tol = tol if lg is levels[-1] else max(tol, 1e-6)
        inc = np.inf
        outer = 0
        zero_bv = st.boundary_values(lambda p: np.zeros(len(p)))
        dref = np.maximum(dist, 0.25 * lg.h)  # collar clamp, shrinks with h
        for outer in range(1, max_outer + 1):
            scale = float(np.max(-w))
            floor = np.maximum(0.25 * scale * np.sqrt(2.0 * dref), 1e-12)
            gk = np.minimum(np.maximum(-w, floor), scale)**-4.0
            sub = SolveReport()
            inc_ref = inc if np.isfinite(inc) else 1.0
            rtol_inner = min(1e-5, max(1e-11, 1e-3 * inc_ref))
            itcap = 10 if outer <= 2 else inner_iters
            boot = 4 if outer <= 2 else 0
            wn, _, _, _, res = _newton(st, gk, zero_bv, w, rtol_inner, itcap, sub, bootstrap=boot)
            report.iterations += sub.iterations
            report.fallback_sweeps += sub.fallback_sweeps
            inc = float(np.max(np.abs(wn - w)))
            w = (1.0 - relax) * w + relax * wn
            if inc < level_tol:
                break
        if lg is levels[-1]:
            report.outer_iterations = outer
            if inc >= tol * 10:
                raise NoConvergence(
                    f"Cheng-Yau fixed point stalled (increment {inc:.3e})", iterations=outer)
        # polish: solve once more at the frozen right-hand side
        scale = float(np.max(-w))
        floor = np.maximum(0.25 * scale * np.sqrt(2.0 * np.maximum(dist, 0.25 * lg.h)), 1e-12)
        gk = np.maximum(-w, floor)**-4.0
        sub = SolveReport()
        w, F, act, deltas, res = _newton(st, gk, zero_bv, w, 1e-11, 25, sub)
        report.iterations += sub.iterations
        if lg is levels[-1]:
            report.residual = float(np.max(np.abs(F - gk)) * lg.h**2)
            report.extras["relative_residual"] = res
            report.extras["fixed_point_increment"] = inc
            report.monotone_violations = _count_monotone_violations(st, deltas, act, scale)
        vals = np.full((lg.nx, lg.ny), np.nan)
        vals[st.ii, st.jj] = w
        pts = lg.points()
        near = (~st.inside.ravel()) & (~st.snapped.ravel()) & (domain.contains(pts, tol=1e-12))
        vals.ravel()[near] = 0.0
        _scale = float(np.max(-w))
        _fill_snapped(st, domain, lg, vals, lambda p: np.zeros(len(p)),
                      lambda p, s=_scale, g=lg: (0.25 * s * np.sqrt(
                          2.0 * np.maximum(domain.boundary_distance(p), 0.25 * g.h)))**-4.0)
        w_prev_gf = GridFunction(lg, vals)
    report.wall_time = time.perf_counter() - t0
    w_prev_gf.convex = w_prev_gf.check_convex()
    result = (w_prev_gf, report)
    _CY_CACHE[key] = result
    return result


# ---------------------------------------------------------------------------
# closed-form support functions (balls and simplices, general n)


class SupportBall:
    """w_B = -R^{-1/(n+1)} sqrt(R^2 - |x - x1|^2) on the ball B_R(x1)."""

    def __init__(self, radius, center=None, n=2):
        if radius <= 0:
            raise NonPositive("radius must be > 0")
        self.R = float(radius)
        self.n = int(n)
        self.center = np.zeros(n) if center is None else np.asarray(center, dtype=float)

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        r2 = ((points - self.center)**2).sum(axis=1)
        out = self.R**2 - r2
        if np.any(out < -1e-9 * self.R**2):
            raise PointOutsideDomain("point outside the closed ball")
        return -self.R ** (-1.0 / (self.n + 1)) * np.sqrt(np.maximum(out, 0.0))


class SupportSimplex:
    """w_Delta = -(vol(Delta)/Lambda * t_0...t_n)^{1/(n+1)} via barycentric t_i."""

    def __init__(self, vertices, lam, n=None):
        vertices = np.asarray(vertices, dtype=float)
        self.n = vertices.shape[1] if n is None else int(n)
        if vertices.shape != (self.n + 1, self.n):
            raise ValueError("need n+1 vertices in R^n")
        if lam <= 0:
            raise NonPositive("Lambda must be > 0")
        self.vertices = vertices
        self.lam = float(lam)
        M = np.vstack([vertices.T, np.ones(self.n + 1)])
        self._M = M
        det = np.linalg.det(M)
        if abs(det) < 1e-14:
            raise ValueError("degenerate simplex")
        self.volume = abs(det) / math.factorial(self.n)

    def barycentric(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        rhs = np.vstack([points.T, np.ones(len(points))])
        return np.linalg.solve(self._M, rhs).T

    def __call__(self, points):
        t = self.barycentric(points)
        if np.any(t < -1e-9):
            raise PointOutsideDomain("point outside the closed simplex")
        t = np.maximum(t, 0.0)
        prod = np.prod(t, axis=1)
        return -(self.volume / self.lam * prod) ** (1.0 / (self.n + 1))


def support_ball(radius, center=None, n=2):
    return SupportBall(radius, center, n)


def support_simplex(vertices, lam, n=None):
    return SupportSimplex(vertices, lam, n)


# Lambda_2 for the Titeica simplex: det D^2 of -(K t0 t1 t2)^{1/3} equals
# (K^2/27) (-w)^{-4}, so K = 3 sqrt(3) and Lambda = vol/K with vol relative:
# w_Delta = -((vol/Lambda) t0 t1 t2)^{1/3} solves the equation iff
# vol/Lambda = 3 sqrt(3), i.e. Lambda_2 = vol(ref)/K = (1/2)/(3 sqrt 3).
LAMBDA2_ANALYTIC = 1.0 / (6.0 * math.sqrt(3.0))


# ---------------------------------------------------------------------------
# comparisons and growth diagnostics


def domain_contains(inner, outer, n_dirs=720, tol=1e-9):
    th = 2 * np.pi * np.arange(n_dirs) / n_dirs
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    si = inner.support(dirs)
    so = outer.support(dirs)
    return bool(np.all(si <= so + tol * np.max(np.abs(so))))


def domain_monotonicity_check(omega1, omega2, grid, *, tol=1e-8, radius=5, slack=None):
    """True iff w_{omega1} >= w_{omega2} - 2*solver tol on omega1's nodes."""
    if not domain_contains(omega1, omega2):
        raise NotContained("omega1 is not contained in omega2")
    w1, r1 = cheng_yau(omega1, grid, tol=tol, radius=radius)
    w2, r2 = cheng_yau(omega2, grid, tol=tol, radius=radius)
    both = w1.mask & w2.mask
    if slack is None:
        slack = 2.0 * max(grid.h**2, 10 * tol) + 2e-2 * grid.h
    return bool(np.all(w1.values[both] >= w2.values[both] - slack))


@dataclass
class GrowthResult:
    exponent: float
    distances: np.ndarray
    values: np.ndarray
    x0: np.ndarray


def boundary_growth_check(domain, x0, grid, *, w=None, tol=1e-8, radius=5,
                          d_max_frac=0.25):
    """Log-log fit of -w along the inward normal at the boundary point x0."""
    x0 = np.asarray(x0, dtype=float)
    if w is None:
        w, _ = cheng_yau(domain, grid, tol=tol, radius=radius)
    nrm = domain.boundary_normal(x0)
    inward = -nrm
    d_lo = 2.5 * grid.h
    d_hi = max(d_max_frac * domain.inradius(), 4 * d_lo)
    ds = np.geomspace(d_lo, d_hi, 12)
    pts = x0[None, :] + ds[:, None] * inward[None, :]
    vals = w.interpolate(pts)
    ok = np.isfinite(vals) & (vals < 0)
    if ok.sum() < 4:
        raise InsufficientResolution("fewer than 4 usable samples along the normal")
    coef = np.polyfit(np.log(ds[ok]), np.log(-vals[ok]), 1)
    return GrowthResult(float(coef[0]), ds[ok], vals[ok], x0)

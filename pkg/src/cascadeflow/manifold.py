"""Geometry of the product manifold the flow lives on.

The flow state is a point on a product of three factor kinds:

* ``Euclidean(dim)`` -- flat blocks (e.g. log-magnitude coordinates),
* ``Sphere2`` -- unit 2-spheres embedded in R^3 (positions and directions),
* ``LogitInterval(lo, hi)`` -- a bounded interval handled in unconstrained
  logit coordinates, so the flow itself never sees the boundary.

Sphere points are stored as embedded unit 3-vectors to avoid chart
singularities at the poles.  All functions are pure and operate on
``ProductPoint`` / ``ProductTangent`` value types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

SPHERE_ATOL = 1e-9
ANTIPODAL_ANGLE = 1e-6


class GeometryError(ValueError):
    """Structural error: mismatched dimensions or invalid coordinates."""


class AntipodalError(GeometryError):
    """log map requested between (numerically) antipodal sphere points."""


@dataclass(frozen=True)
class Euclidean:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise GeometryError(f"Euclidean dim must be >= 1, got {self.dim}")

    @property
    def ambient_dim(self) -> int:
        return self.dim


@dataclass(frozen=True)
class Sphere2:
    @property
    def ambient_dim(self) -> int:
        return 3


@dataclass(frozen=True)
class LogitInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise GeometryError(f"LogitInterval needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def ambient_dim(self) -> int:
        return 1


Factor = Union[Euclidean, Sphere2, LogitInterval]


@dataclass(frozen=True)
class ManifoldSpec:
    """Ordered list of factors; coordinates are concatenated in factor order."""

    factors: tuple

    def __post_init__(self):
        if len(self.factors) == 0:
            raise GeometryError("ManifoldSpec needs at least one factor")

    @property
    def ambient_dim(self) -> int:
        return sum(f.ambient_dim for f in self.factors)

    def blocks(self):
        """Yield (factor, slice) pairs partitioning the coordinate vector."""
        off = 0
        for f in self.factors:
            yield f, slice(off, off + f.ambient_dim)
            off += f.ambient_dim

    def to_config(self) -> list:
        out = []
        for f in self.factors:
            if isinstance(f, Euclidean):
                out.append({"kind": "euclidean", "dim": f.dim})
            elif isinstance(f, Sphere2):
                out.append({"kind": "sphere2"})
            else:
                out.append({"kind": "logit_interval", "lo": f.lo, "hi": f.hi})
        return out

    @staticmethod
    def from_config(items: list) -> "ManifoldSpec":
        factors = []
        for d in items:
            kind = d["kind"]
            if kind == "euclidean":
                factors.append(Euclidean(int(d["dim"])))
            elif kind == "sphere2":
                factors.append(Sphere2())
            elif kind == "logit_interval":
                factors.append(LogitInterval(float(d["lo"]), float(d["hi"])))
            else:
                raise GeometryError(f"unknown factor kind {kind!r}")
        return ManifoldSpec(tuple(factors))


@dataclass(frozen=True)
class ProductPoint:
    spec: ManifoldSpec
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "coords", c)
        if c.shape != (self.spec.ambient_dim,):
            raise GeometryError(
                f"coords shape {c.shape} != ambient dim ({self.spec.ambient_dim},)")
        for f, sl in self.spec.blocks():
            if isinstance(f, Sphere2):
                n = np.linalg.norm(c[sl])
                if abs(n - 1.0) > SPHERE_ATOL:
                    raise GeometryError(f"sphere block {sl} has norm {n}, expected 1")


@dataclass(frozen=True)
class ProductTangent:
    base: ProductPoint
    components: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.components, dtype=float)
        object.__setattr__(self, "components", v)
        if v.shape != self.base.coords.shape:
            raise GeometryError("tangent components shape mismatch with base point")
        for f, sl in self.base.spec.blocks():
            if isinstance(f, Sphere2):
                dot = float(np.dot(v[sl], self.base.coords[sl]))
                if abs(dot) > 1e-9:
                    raise GeometryError(f"sphere block {sl} tangent not orthogonal (dot={dot})")


def _check_same_spec(a: ManifoldSpec, b: ManifoldSpec):
    if a != b:
        raise GeometryError("points live on different manifold specs")


def exp_map(p: ProductPoint, v: ProductTangent) -> ProductPoint:
    """Exponential map: straight lines on flat blocks, great circles on spheres."""
    _check_same_spec(p.spec, v.base.spec)
    if not np.array_equal(p.coords, v.base.coords):
        raise GeometryError("tangent base point differs from p")
    out = p.coords.copy()
    for f, sl in p.spec.blocks():
        if isinstance(f, Sphere2):
            vb = v.components[sl]
            theta = np.linalg.norm(vb)
            # sinc form is exact at theta = 0
            blk = math.cos(theta) * p.coords[sl] + np.sinc(theta / np.pi) * vb
            out[sl] = blk / np.linalg.norm(blk)
        else:
            out[sl] = p.coords[sl] + v.components[sl]
    return ProductPoint(p.spec, out)


def log_map(p: ProductPoint, q: ProductPoint) -> ProductTangent:
    """Inverse of exp_map; sphere-block norm equals the great-circle angle."""
    _check_same_spec(p.spec, q.spec)
    out = np.empty_like(p.coords)
    for f, sl in p.spec.blocks():
        if isinstance(f, Sphere2):
            pb, qb = p.coords[sl], q.coords[sl]
            c = float(np.clip(np.dot(pb, qb), -1.0, 1.0))
            theta = math.acos(c)
            if theta > math.pi - ANTIPODAL_ANGLE:
                raise AntipodalError(f"sphere block {sl}: points are antipodal within tolerance")
            u = qb - c * pb
            nu = np.linalg.norm(u)
            out[sl] = np.zeros(3) if nu < 1e-15 else u * (theta / nu)
        else:
            out[sl] = q.coords[sl] - p.coords[sl]
    return ProductTangent(p, out)


def geodesic(p0: ProductPoint, p1: ProductPoint, t: float) -> ProductPoint:
    """Point at parameter t on the geodesic from p0 (t=0) to p1 (t=1)."""
    v = log_map(p0, p1)
    return exp_map(p0, ProductTangent(p0, t * v.components))


def geodesic_velocity(p0: ProductPoint, p1: ProductPoint, t: float) -> ProductTangent:
    """Velocity of the geodesic at parameter t; constant norm in t."""
    _check_same_spec(p0.spec, p1.spec)
    base = geodesic(p0, p1, t)
    out = np.empty_like(p0.coords)
    for f, sl in p0.spec.blocks():
        if isinstance(f, Sphere2):
            pb, qb = p0.coords[sl], p1.coords[sl]
            c = float(np.clip(np.dot(pb, qb), -1.0, 1.0))
            theta = math.acos(c)
            u = qb - c * pb
            nu = np.linalg.norm(u)
            if nu < 1e-15:
                out[sl] = np.zeros(3)
            else:
                u0 = u / nu
                out[sl] = theta * (-math.sin(t * theta) * pb + math.cos(t * theta) * u0)
        else:
            out[sl] = p1.coords[sl] - p0.coords[sl]
    return ProductTangent(base, out)


def project_tangent(p: ProductPoint, w: np.ndarray) -> ProductTangent:
    """Project an ambient vector onto the tangent space at p (idempotent, linear)."""
    w = np.asarray(w, dtype=float)
    if w.shape != p.coords.shape:
        raise GeometryError("ambient vector shape mismatch")
    out = w.copy()
    for f, sl in p.spec.blocks():
        if isinstance(f, Sphere2):
            pb = p.coords[sl]
            out[sl] = w[sl] - np.dot(w[sl], pb) * pb
    return ProductTangent(p, out)


def distance_squared(p0: ProductPoint, p1: ProductPoint) -> float:
    """Squared geodesic distance on the product (sum of per-factor squares)."""
    _check_same_spec(p0.spec, p1.spec)
    total = 0.0
    for f, sl in p0.spec.blocks():
        if isinstance(f, Sphere2):
            c = float(np.clip(np.dot(p0.coords[sl], p1.coords[sl]), -1.0, 1.0))
            total += math.acos(c) ** 2
        else:
            d = p1.coords[sl] - p0.coords[sl]
            total += float(np.dot(d, d))
    return total


def distance(p0: ProductPoint, p1: ProductPoint) -> float:
    return math.sqrt(distance_squared(p0, p1))


# -- cube surface <-> sphere identification ---------------------------------

def cube_to_sphere(x_cube: np.ndarray) -> np.ndarray:
    """Map a point on the surface of [-1,1]^3 to the unit sphere (radial projection)."""
    x = np.asarray(x_cube, dtype=float)
    if x.shape != (3,):
        raise GeometryError("cube point must be a 3-vector")
    if abs(np.max(np.abs(x)) - 1.0) > SPHERE_ATOL:
        raise GeometryError(f"point {x} not on the cube surface (max-norm != 1)")
    return x / np.linalg.norm(x)


def sphere_to_cube(u: np.ndarray) -> np.ndarray:
    """Inverse of cube_to_sphere: radially project a unit vector onto the cube surface."""
    u = np.asarray(u, dtype=float)
    if u.shape != (3,):
        raise GeometryError("sphere point must be a 3-vector")
    if abs(np.linalg.norm(u) - 1.0) > SPHERE_ATOL:
        raise GeometryError(f"vector {u} is not unit")
    return u / np.max(np.abs(u))


# -- bounded interval <-> logit coordinate ----------------------------------

@dataclass
class ClampStats:
    """Counts out-of-range values clamped to the interval interior."""
    count: int = 0


_GLOBAL_CLAMP_STATS = ClampStats()


def logit_encode(value: float, lo: float, hi: float,
                 stats: ClampStats | None = None) -> float:
    """ln((v-lo)/(hi-v)); out-of-range values are clamped to an eps-interior."""
    if stats is None:
        stats = _GLOBAL_CLAMP_STATS
    eps = 1e-6 * (hi - lo)
    if not lo < value < hi:
        stats.count += 1
        value = min(max(value, lo + eps), hi - eps)
    return math.log((value - lo) / (hi - value))


def logit_decode(z: float, lo: float, hi: float) -> float:
    """Exact inverse of logit_encode; output strictly inside (lo, hi)."""
    if z >= 0:
        s = math.exp(-z)
        frac = 1.0 / (1.0 + s)
    else:
        s = math.exp(z)
        frac = s / (1.0 + s)
    out = lo + (hi - lo) * frac
    # keep the output strictly interior even when frac rounds to 0 or 1
    if out <= lo:
        out = np.nextafter(lo, hi)
    elif out >= hi:
        out = np.nextafter(hi, lo)
    return out

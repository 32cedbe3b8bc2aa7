"""Exact ellipsoid and box calculus shared by the contract learner and the
landing controller.

An ellipsoid is {x : ||C (x - c)|| <= 1} for a center c and a non-singular
shape matrix C. All operations are pure functions of immutable values and are
safe to call concurrently. The calculus is dimension-generic; the landing
application fixes n = 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Determinant magnitude below which a shape matrix counts as singular.
DET_FLOOR = 1e-9


class DegenerateEllipsoidError(ValueError):
    """Shape matrix is singular, or close enough to break set calculus."""


class InsideEllipsoidError(ValueError):
    """surface_waypoint requires a strictly exterior starting point."""


@dataclass(frozen=True)
class Ellipsoid:
    """Center + shape-matrix representation of {x : ||shape (x - center)|| <= 1}."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        shape = np.asarray(self.shape, dtype=float)
        if center.ndim != 1:
            raise ValueError("ellipsoid center must be a vector")
        if shape.shape != (center.size, center.size):
            raise ValueError(
                f"shape matrix {shape.shape} does not match center dimension {center.size}"
            )
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(shape))):
            raise ValueError("ellipsoid entries must be finite")
        if abs(np.linalg.det(shape)) <= DET_FLOOR:
            raise DegenerateEllipsoidError(
                f"|det| <= {DET_FLOOR:g}; shape matrix is effectively singular"
            )
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.center.size


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box [lo, hi] in 3-D, lo <= hi componentwise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if not np.all(lo <= hi):
            raise ValueError("box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


def gauge(e: Ellipsoid, x) -> float:
    """||C (x - c)||; at most 1 exactly when x is in the ellipsoid."""
    x = np.asarray(x, dtype=float)
    if x.shape != (e.dim,):
        raise ValueError(f"point of dimension {x.size} vs ellipsoid of dimension {e.dim}")
    return float(np.linalg.norm(e.shape @ (x - e.center)))


def contains(e: Ellipsoid, x) -> bool:
    """Membership test; the boundary counts as contained."""
    return gauge(e, x) <= 1.0


def aabb(e: Ellipsoid) -> Box3:
    """Tightest axis-aligned box around the ellipsoid.

    The half-extent along axis i is ||e_i^T C^-1||, the norm of the i-th row
    of the inverse shape matrix (closed form, no sampling).
    """
    if e.dim != 3:
        raise ValueError("aabb is defined for 3-D ellipsoids")
    try:
        inv = np.linalg.inv(e.shape)
    except np.linalg.LinAlgError as exc:  # constructor should prevent this
        raise DegenerateEllipsoidError("shape matrix is not invertible") from exc
    half = np.linalg.norm(inv, axis=1)
    return Box3(e.center - half, e.center + half)


def fits_in_box(e: Ellipsoid, limits) -> bool:
    """True iff the ellipsoid's axis-aligned extent is within limits per axis."""
    limits = np.asarray(limits, dtype=float)
    if limits.shape != (3,):
        raise ValueError("limits must be a 3-vector")
    return bool(np.all(aabb(e).extent <= limits))


def surface_waypoint(e: Ellipsoid, p) -> np.ndarray:
    """Intersection of the ellipsoid surface with the segment from p to the center.

    Along q(t) = p + t (c - p) the gauge is (1 - t) * gauge(p), so the crossing
    nearer p sits at t = 1 - 1/gauge(p). Requires p strictly outside.
    """
    p = np.asarray(p, dtype=float)
    g = gauge(e, p)
    if g <= 1.0:
        raise InsideEllipsoidError("starting point is inside or on the ellipsoid")
    t = 1.0 - 1.0 / g
    return p + t * (e.center - p)


def box_offset_contains(y, box: Box3, point) -> bool:
    """True iff point lies in the box translated to y (point - y in box)."""
    offset = np.asarray(point, dtype=float) - np.asarray(y, dtype=float)
    return bool(np.all(offset >= box.lo) and np.all(offset <= box.hi))


def neg_log_det_sq(mat, det_floor: float = DET_FLOOR) -> float:
    """-log det(C^T C) = -2 log|det C|, a decreasing proxy for ellipsoid volume."""
    value, _ = neg_log_det_sq_flagged(mat, det_floor)
    return value


def neg_log_det_sq_flagged(mat, det_floor: float = DET_FLOOR) -> tuple[float, bool]:
    """Same as neg_log_det_sq, plus a flag for values clamped at the det floor."""
    mat = np.asarray(mat, dtype=float)
    _, logabs = np.linalg.slogdet(mat)
    floor_log = np.log(det_floor)
    if not np.isfinite(logabs) or logabs < floor_log:
        return -2.0 * floor_log, True
    return -2.0 * float(logabs), False


def ellipsoid_to_dict(e: Ellipsoid) -> dict:
    """JSON-ready form: {"center": [...], "shape": [[...], ...]} (row-major)."""
    return {"center": e.center.tolist(), "shape": e.shape.tolist()}


def ellipsoid_from_dict(doc: dict) -> Ellipsoid:
    return Ellipsoid(np.asarray(doc["center"], dtype=float), np.asarray(doc["shape"], dtype=float))

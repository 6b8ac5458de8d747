"""Collision kernels: the numeric inner loop of planning.

Trajectory feasibility checking dominates planner runtime: every candidate
binding densely samples a trajectory and tests robot link capsules and the
attached payload polygons against the world.  Two interchangeable backends
implement the same kernel surface:

* ``numba`` (default): scalar loops compiled with ``@njit``; and
* ``numpy``: vectorized array code, used as a pure-python fallback.

Select with the ``CELLSCRIPT_KERNELS`` environment variable (``numba`` or
``numpy``).  When numba is not importable the numpy path is chosen
automatically.  ``cellscript bench`` compares the two.

Kernels only ever *accept or reject*; every number that flows into variable
maps or traces is produced elsewhere with plain python math, so run output is
identical under either backend.

Conventions: polygons are convex, CCW, float64 ``(n, 2)`` arrays.  Clearance
is the exact separation distance (0.0 when overlapping or touching); a pair
collides when ``clearance <= threshold``, i.e. touching counts.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

BACKEND_ENV = "CELLSCRIPT_KERNELS"

try:  # pragma: no cover - exercised implicitly by backend selection
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def _njit(*args, **kwargs):  # type: ignore[misc]
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco


# ---------------------------------------------------------------------------
# Packing helpers (plain python, shared by both backends)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackedPolys:
    """A batch of convex polygons padded to a common vertex count."""

    pts: np.ndarray  # (P, M, 2) float64
    counts: np.ndarray  # (P,) int64

    @property
    def n(self) -> int:
        return int(self.counts.shape[0])


def pack_polys(polys: Sequence[np.ndarray]) -> PackedPolys:
    if not polys:
        return PackedPolys(np.zeros((0, 3, 2)), np.zeros(0, dtype=np.int64))
    m = max(len(p) for p in polys)
    pts = np.zeros((len(polys), m, 2), dtype=np.float64)
    counts = np.zeros(len(polys), dtype=np.int64)
    for i, p in enumerate(polys):
        pts[i, : len(p)] = p
        counts[i] = len(p)
    return PackedPolys(pts, counts)


# Violation codes returned by first_violation.
LINK_WORLD = 0
LINK_LINK = 1
ATTACHED_WORLD = 2
CLEAN = (-1, -1, -1, -1)


# ---------------------------------------------------------------------------
# Scalar kernels (numba backend)
# ---------------------------------------------------------------------------


@_njit(cache=True)
def _pt_seg(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    denom = dx * dx + dy * dy
    if denom == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / denom
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


@_njit(cache=True)
def _seg_seg(p0x, p0y, p1x, p1y, q0x, q0y, q1x, q1y):
    d1 = (p1x - p0x) * (q0y - p0y) - (p1y - p0y) * (q0x - p0x)
    d2 = (p1x - p0x) * (q1y - p0y) - (p1y - p0y) * (q1x - p0x)
    d3 = (q1x - q0x) * (p0y - q0y) - (q1y - q0y) * (p0x - q0x)
    d4 = (q1x - q0x) * (p1y - q0y) - (q1y - q0y) * (p1x - q0x)
    if ((d1 > 0.0) != (d2 > 0.0)) and ((d3 > 0.0) != (d4 > 0.0)):
        return 0.0
    d = _pt_seg(p0x, p0y, q0x, q0y, q1x, q1y)
    e = _pt_seg(p1x, p1y, q0x, q0y, q1x, q1y)
    if e < d:
        d = e
    e = _pt_seg(q0x, q0y, p0x, p0y, p1x, p1y)
    if e < d:
        d = e
    e = _pt_seg(q1x, q1y, p0x, p0y, p1x, p1y)
    if e < d:
        d = e
    return d


@_njit(cache=True)
def _point_in_ccw_poly(px, py, pts, cnt):
    for i in range(cnt):
        ax = pts[i, 0]
        ay = pts[i, 1]
        j = i + 1
        if j == cnt:
            j = 0
        bx = pts[j, 0]
        by = pts[j, 1]
        if (bx - ax) * (py - ay) - (by - ay) * (px - ax) < 0.0:
            return False
    return True


@_njit(cache=True)
def _sat_overlap(apts, acnt, bpts, bcnt):
    # Separating-axis test over the face normals of both polygons.
    for side in range(2):
        if side == 0:
            pts, cnt = apts, acnt
        else:
            pts, cnt = bpts, bcnt
        for i in range(cnt):
            j = i + 1
            if j == cnt:
                j = 0
            nx = -(pts[j, 1] - pts[i, 1])
            ny = pts[j, 0] - pts[i, 0]
            amin = 1e300
            amax = -1e300
            for k in range(acnt):
                p = nx * apts[k, 0] + ny * apts[k, 1]
                if p < amin:
                    amin = p
                if p > amax:
                    amax = p
            bmin = 1e300
            bmax = -1e300
            for k in range(bcnt):
                p = nx * bpts[k, 0] + ny * bpts[k, 1]
                if p < bmin:
                    bmin = p
                if p > bmax:
                    bmax = p
            if amax < bmin or bmax < amin:
                return False
    return True


@_njit(cache=True)
def _poly_clearance_nb(apts, acnt, bpts, bcnt):
    if _sat_overlap(apts, acnt, bpts, bcnt):
        return 0.0
    best = 1e300
    for i in range(acnt):
        i2 = i + 1
        if i2 == acnt:
            i2 = 0
        for j in range(bcnt):
            j2 = j + 1
            if j2 == bcnt:
                j2 = 0
            d = _seg_seg(
                apts[i, 0], apts[i, 1], apts[i2, 0], apts[i2, 1],
                bpts[j, 0], bpts[j, 1], bpts[j2, 0], bpts[j2, 1],
            )
            if d < best:
                best = d
    return best


@_njit(cache=True)
def _seg_poly_nb(p0x, p0y, p1x, p1y, bpts, bcnt):
    if _point_in_ccw_poly(p0x, p0y, bpts, bcnt):
        return 0.0
    best = 1e300
    for j in range(bcnt):
        j2 = j + 1
        if j2 == bcnt:
            j2 = 0
        d = _seg_seg(p0x, p0y, p1x, p1y, bpts[j, 0], bpts[j, 1], bpts[j2, 0], bpts[j2, 1])
        if d < best:
            best = d
    return best


@_njit(cache=True)
def _first_violation_nb(
    q, lengths, base, widths, wpts, wcnt, apts, acnt, margin
):
    n = q.shape[0]
    nworld = wcnt.shape[0]
    natt = acnt.shape[0]
    jx = np.empty(4, dtype=np.float64)
    jy = np.empty(4, dtype=np.float64)
    for s in range(n):
        a1 = base[2] + q[s, 0]
        a2 = a1 + q[s, 1]
        a3 = a2 + q[s, 2]
        jx[0] = base[0]
        jy[0] = base[1]
        jx[1] = jx[0] + lengths[0] * math.cos(a1)
        jy[1] = jy[0] + lengths[0] * math.sin(a1)
        jx[2] = jx[1] + lengths[1] * math.cos(a2)
        jy[2] = jy[1] + lengths[1] * math.sin(a2)
        jx[3] = jx[2] + lengths[2] * math.cos(a3)
        jy[3] = jy[2] + lengths[2] * math.sin(a3)
        for link in range(3):
            thr = widths[link] * 0.5 + margin
            for p in range(nworld):
                d = _seg_poly_nb(
                    jx[link], jy[link], jx[link + 1], jy[link + 1], wpts[p], wcnt[p]
                )
                if d <= thr:
                    return s, LINK_WORLD, link, p
        # Only non-adjacent link pair on a three-link chain.
        d = _seg_seg(jx[0], jy[0], jx[1], jy[1], jx[2], jy[2], jx[3], jy[3])
        if d <= (widths[0] + widths[2]) * 0.5 + margin:
            return s, LINK_LINK, 0, 2
        if natt > 0:
            c3 = math.cos(a3)
            s3 = math.sin(a3)
            for a in range(natt):
                cnt = acnt[a]
                tp = np.empty((cnt, 2), dtype=np.float64)
                for k in range(cnt):
                    tp[k, 0] = jx[3] + c3 * apts[a, k, 0] - s3 * apts[a, k, 1]
                    tp[k, 1] = jy[3] + s3 * apts[a, k, 0] + c3 * apts[a, k, 1]
                for p in range(nworld):
                    d = _poly_clearance_nb(tp, cnt, wpts[p], wcnt[p])
                    if d <= margin:
                        return s, ATTACHED_WORLD, a, p
    return -1, -1, -1, -1


# ---------------------------------------------------------------------------
# Vectorized kernels (numpy backend)
# ---------------------------------------------------------------------------


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _pt_seg_np(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    denom = dx * dx + dy * dy
    safe = np.where(denom == 0.0, 1.0, denom)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / safe, 0.0, 1.0)
    t = np.where(denom == 0.0, 0.0, t)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _seg_seg_np(p0x, p0y, p1x, p1y, q0x, q0y, q1x, q1y):
    d1 = _cross(p1x - p0x, p1y - p0y, q0x - p0x, q0y - p0y)
    d2 = _cross(p1x - p0x, p1y - p0y, q1x - p0x, q1y - p0y)
    d3 = _cross(q1x - q0x, q1y - q0y, p0x - q0x, p0y - q0y)
    d4 = _cross(q1x - q0x, q1y - q0y, p1x - q0x, p1y - q0y)
    crossing = ((d1 > 0.0) != (d2 > 0.0)) & ((d3 > 0.0) != (d4 > 0.0))
    d = np.minimum.reduce(
        [
            _pt_seg_np(p0x, p0y, q0x, q0y, q1x, q1y),
            _pt_seg_np(p1x, p1y, q0x, q0y, q1x, q1y),
            _pt_seg_np(q0x, q0y, p0x, p0y, p1x, p1y),
            _pt_seg_np(q1x, q1y, p0x, p0y, p1x, p1y),
        ]
    )
    return np.where(crossing, 0.0, d)


def _points_in_ccw_poly_np(px, py, poly):
    inside = np.ones(np.shape(px), dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
    return inside


def _seg_poly_np(p0, p1, poly):
    """Clearance of n segments (p0, p1: (n, 2)) against one polygon."""
    n = len(poly)
    dists = []
    for j in range(n):
        q0 = poly[j]
        q1 = poly[(j + 1) % n]
        dists.append(
            _seg_seg_np(
                p0[:, 0], p0[:, 1], p1[:, 0], p1[:, 1], q0[0], q0[1], q1[0], q1[1]
            )
        )
    d = np.minimum.reduce(dists)
    inside = _points_in_ccw_poly_np(p0[:, 0], p0[:, 1], poly)
    return np.where(inside, 0.0, d)


def _poly_clearance_batch_np(pts_w: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Clearance of n transformed copies of a polygon (pts_w: (n, k, 2))."""
    nb = len(poly)
    k = pts_w.shape[1]
    # SAT axes from the fixed polygon.
    overlap = np.ones(pts_w.shape[0], dtype=bool)
    for j in range(nb):
        e = poly[(j + 1) % nb] - poly[j]
        nx, ny = -e[1], e[0]
        pa = pts_w[:, :, 0] * nx + pts_w[:, :, 1] * ny
        pb = poly[:, 0] * nx + poly[:, 1] * ny
        overlap &= (pa.max(axis=1) >= pb.min()) & (pb.max() >= pa.min(axis=1))
    # SAT axes from the moving polygon (per sample).
    edges = np.roll(pts_w, -1, axis=1) - pts_w  # (n, k, 2)
    normals = np.stack([-edges[:, :, 1], edges[:, :, 0]], axis=2)  # (n, k, 2)
    pa = np.einsum("nkd,njd->nkj", normals, pts_w)  # own projections
    pb = np.einsum("nkd,md->nkm", normals, poly)
    ov = (pa.max(axis=2) >= pb.min(axis=2)) & (pb.max(axis=2) >= pa.min(axis=2))
    overlap &= ov.all(axis=1)
    # Exact distance over all edge pairs for the separated case.
    a0 = pts_w[:, :, None, :]  # (n, k, 1, 2)
    a1 = np.roll(pts_w, -1, axis=1)[:, :, None, :]
    b0 = poly[None, None, :, :]
    b1 = np.roll(poly, -1, axis=0)[None, None, :, :]
    d = _seg_seg_np(
        a0[..., 0], a0[..., 1], a1[..., 0], a1[..., 1],
        b0[..., 0], b0[..., 1], b1[..., 0], b1[..., 1],
    )
    dmin = d.min(axis=(1, 2))
    return np.where(overlap, 0.0, dmin)


def _fk_joints_np(q: np.ndarray, lengths: np.ndarray, base: np.ndarray):
    a1 = base[2] + q[:, 0]
    a2 = a1 + q[:, 1]
    a3 = a2 + q[:, 2]
    n = q.shape[0]
    jx = np.empty((n, 4))
    jy = np.empty((n, 4))
    jx[:, 0] = base[0]
    jy[:, 0] = base[1]
    jx[:, 1] = jx[:, 0] + lengths[0] * np.cos(a1)
    jy[:, 1] = jy[:, 0] + lengths[0] * np.sin(a1)
    jx[:, 2] = jx[:, 1] + lengths[1] * np.cos(a2)
    jy[:, 2] = jy[:, 1] + lengths[1] * np.sin(a2)
    jx[:, 3] = jx[:, 2] + lengths[2] * np.cos(a3)
    jy[:, 3] = jy[:, 2] + lengths[2] * np.sin(a3)
    return jx, jy, a3


def _first_violation_np(q, lengths, base, widths, wpts, wcnt, apts, acnt, margin):
    n = q.shape[0]
    nworld = wcnt.shape[0]
    natt = acnt.shape[0]
    jx, jy, a3 = _fk_joints_np(q, lengths, base)
    rows = []  # (code, a, b) per pair, in canonical scan order
    viols = []
    for link in range(3):
        thr = widths[link] * 0.5 + margin
        p0 = np.stack([jx[:, link], jy[:, link]], axis=1)
        p1 = np.stack([jx[:, link + 1], jy[:, link + 1]], axis=1)
        for p in range(nworld):
            poly = wpts[p, : wcnt[p]]
            viols.append(_seg_poly_np(p0, p1, poly) <= thr)
            rows.append((LINK_WORLD, link, p))
    d = _seg_seg_np(jx[:, 0], jy[:, 0], jx[:, 1], jy[:, 1], jx[:, 2], jy[:, 2], jx[:, 3], jy[:, 3])
    viols.append(d <= (widths[0] + widths[2]) * 0.5 + margin)
    rows.append((LINK_LINK, 0, 2))
    if natt > 0:
        c3 = np.cos(a3)
        s3 = np.sin(a3)
        for a in range(natt):
            pts = apts[a, : acnt[a]]  # (k, 2)
            tx = jx[:, 3, None] + c3[:, None] * pts[:, 0] - s3[:, None] * pts[:, 1]
            ty = jy[:, 3, None] + s3[:, None] * pts[:, 0] + c3[:, None] * pts[:, 1]
            pts_w = np.stack([tx, ty], axis=2)  # (n, k, 2)
            for p in range(nworld):
                poly = wpts[p, : wcnt[p]]
                viols.append(_poly_clearance_batch_np(pts_w, poly) <= margin)
                rows.append((ATTACHED_WORLD, a, p))
    if not viols:
        return CLEAN
    mat = np.stack(viols, axis=0)  # (pairs, n)
    per_sample = mat.any(axis=0)
    if not per_sample.any():
        return CLEAN
    s = int(np.argmax(per_sample))
    pair = int(np.argmax(mat[:, s]))
    code, a, b = rows[pair]
    return s, code, a, b


# ---------------------------------------------------------------------------
# Backend surface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSet:
    name: str
    poly_clearance: Callable
    seg_poly_clearance: Callable
    seg_seg_distance: Callable
    first_violation: Callable


def _numba_set() -> KernelSet:
    def poly_clearance(a: np.ndarray, b: np.ndarray) -> float:
        return float(_poly_clearance_nb(a, len(a), b, len(b)))

    def seg_poly_clearance(p0, p1, poly) -> float:
        return float(_seg_poly_nb(p0[0], p0[1], p1[0], p1[1], poly, len(poly)))

    def seg_seg_distance(p0, p1, q0, q1) -> float:
        return float(_seg_seg(p0[0], p0[1], p1[0], p1[1], q0[0], q0[1], q1[0], q1[1]))

    def first_violation(q, lengths, base, widths, world: PackedPolys, attached: PackedPolys, margin):
        out = _first_violation_nb(
            np.ascontiguousarray(q, dtype=np.float64),
            np.asarray(lengths, dtype=np.float64),
            np.asarray(base, dtype=np.float64),
            np.asarray(widths, dtype=np.float64),
            world.pts, world.counts, attached.pts, attached.counts,
            float(margin),
        )
        return tuple(int(v) for v in out)

    return KernelSet("numba", poly_clearance, seg_poly_clearance, seg_seg_distance, first_violation)


def _numpy_set() -> KernelSet:
    def poly_clearance(a: np.ndarray, b: np.ndarray) -> float:
        pts_w = a[None, :, :]
        return float(_poly_clearance_batch_np(pts_w, b)[0])

    def seg_poly_clearance(p0, p1, poly) -> float:
        return float(
            _seg_poly_np(np.asarray([p0], dtype=float), np.asarray([p1], dtype=float), poly)[0]
        )

    def seg_seg_distance(p0, p1, q0, q1) -> float:
        return float(
            _seg_seg_np(
                np.float64(p0[0]), np.float64(p0[1]), np.float64(p1[0]), np.float64(p1[1]),
                np.float64(q0[0]), np.float64(q0[1]), np.float64(q1[0]), np.float64(q1[1]),
            )
        )

    def first_violation(q, lengths, base, widths, world: PackedPolys, attached: PackedPolys, margin):
        return _first_violation_np(
            np.asarray(q, dtype=np.float64),
            np.asarray(lengths, dtype=np.float64),
            np.asarray(base, dtype=np.float64),
            np.asarray(widths, dtype=np.float64),
            world.pts, world.counts, attached.pts, attached.counts,
            float(margin),
        )

    return KernelSet("numpy", poly_clearance, seg_poly_clearance, seg_seg_distance, first_violation)


def get_impl(name: str) -> KernelSet:
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _numba_set()
    if name == "numpy":
        return _numpy_set()
    raise ValueError(f"unknown kernel backend {name!r}")


def _select_backend() -> KernelSet:
    want = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if want not in ("numba", "numpy"):
        want = "numba"
    if want == "numba" and not HAVE_NUMBA:
        want = "numpy"
    return get_impl(want)


ACTIVE: KernelSet = _select_backend()

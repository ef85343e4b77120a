"""Marker geometry, edge-weighted Eikonal distances, and the distance penalty.

Markers and anti-markers arrive as polygons drawn on individual slices.
Rasterized, they seed a 3D fast-sweeping solve of |grad D| = f with
f = eps + omega * edge, so distance accumulates steeply across detected
boundaries and cheaply inside homogeneous tissue. The marker and anti-marker
fields then combine into one penalty that is near zero close to markers and
saturates toward 1/2 at anti-markers.

Polygon vertices are in voxel coordinates: the center of voxel (ix, iy) on a
slice sits at (x=ix, y=iy).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import MaskVolume, ScalarVolume, VolumeGeometry

logger = logging.getLogger(__name__)

ANNOTATION_KINDS = ("marker", "antimarker")

_FAR = 1e300


def _segments_properly_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0


@dataclass
class PolygonAnnotation:
    """One polygon on one slice: a marker seeds a region, an anti-marker
    repels it."""

    group: int
    kind: str
    slice_z: int
    vertices: np.ndarray

    def __post_init__(self):
        if self.kind not in ANNOTATION_KINDS:
            raise ValueError(f"kind must be one of {ANNOTATION_KINDS}, got {self.kind!r}")
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise ValueError("vertices must be an (n, 2) array of (x, y) points")
        if len(np.unique(verts, axis=0)) < 3:
            raise ValueError("degenerate polygon: fewer than 3 distinct vertices")
        n = len(verts)
        for i in range(n):
            a1, a2 = verts[i], verts[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue
                b1, b2 = verts[j], verts[(j + 1) % n]
                if _segments_properly_cross(a1, a2, b1, b2):
                    raise ValueError("self-intersecting polygon")
        self.vertices = verts


@dataclass
class AnnotationSet:
    """All polygons for a volume, tied to its geometry.

    A group whose markers have no anti-marker is allowed (the anti-marker
    term degrades to a constant) but logged, since the penalty loses its
    repelling half.
    """

    annotations: list[PolygonAnnotation] = field(default_factory=list)
    geometry: VolumeGeometry | None = None

    def __post_init__(self):
        if self.geometry is not None:
            nz = self.geometry.dims[2]
            for ann in self.annotations:
                if not 0 <= ann.slice_z < nz:
                    raise ValueError(
                        f"slice {ann.slice_z} outside volume with {nz} slices"
                    )
        kinds_by_group: dict[int, set[str]] = {}
        for ann in self.annotations:
            kinds_by_group.setdefault(ann.group, set()).add(ann.kind)
        for group, kinds in sorted(kinds_by_group.items()):
            if "marker" in kinds and "antimarker" not in kinds:
                logger.warning("group %d has markers but no anti-markers", group)

    def groups(self) -> list[int]:
        """Group ids that have at least one marker, ascending."""
        return sorted(
            {a.group for a in self.annotations if a.kind == "marker"}
        )

    def annotated_slices(self) -> list[int]:
        return sorted({a.slice_z for a in self.annotations})


def save_annotations(ann: AnnotationSet, path) -> None:
    """Write the polygon list as JSON: [{group, kind, slice, vertices}, ...]."""
    payload = [
        {
            "group": a.group,
            "kind": a.kind,
            "slice": a.slice_z,
            "vertices": [[float(x), float(y)] for x, y in a.vertices],
        }
        for a in ann.annotations
    ]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_annotations(path, geometry: VolumeGeometry | None = None) -> AnnotationSet:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, list):
        raise ValueError("annotations file must contain a JSON list")
    anns = []
    for i, entry in enumerate(payload):
        try:
            anns.append(
                PolygonAnnotation(
                    group=int(entry["group"]),
                    kind=str(entry["kind"]),
                    slice_z=int(entry["slice"]),
                    vertices=np.asarray(entry["vertices"], dtype=np.float64),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"annotation {i} is malformed: {exc}") from exc
    return AnnotationSet(anns, geometry)


def rasterize(ann: AnnotationSet, kind: str, group: int) -> MaskVolume:
    """Voxels whose (x, y) centers fall inside any polygon of kind/group on
    their slice (even-odd rule). Slices with no polygons stay empty; the 3D
    sweep bridges them."""
    if kind not in ANNOTATION_KINDS:
        raise ValueError(f"kind must be one of {ANNOTATION_KINDS}, got {kind!r}")
    if ann.geometry is None:
        raise ValueError("annotation set has no geometry to rasterize into")
    nx, ny, nz = ann.geometry.dims
    data = np.zeros((nz, ny, nx), dtype=np.uint8)
    for poly in ann.annotations:
        if poly.kind != kind or poly.group != group:
            continue
        data[poly.slice_z] |= _fill_polygon(poly.vertices, ny, nx)
    return MaskVolume(ann.geometry, data)


def _fill_polygon(verts: np.ndarray, ny: int, nx: int) -> np.ndarray:
    """Even-odd fill over integer voxel centers.

    Crossing rule is half-open ((y1 > y) != (y2 > y), x < x_cross) so shared
    edges of adjacent polygons never double-fill or leave gaps.
    """
    x_lo = max(0, int(math.floor(verts[:, 0].min())))
    x_hi = min(nx - 1, int(math.ceil(verts[:, 0].max())))
    y_lo = max(0, int(math.floor(verts[:, 1].min())))
    y_hi = min(ny - 1, int(math.ceil(verts[:, 1].max())))
    out = np.zeros((ny, nx), dtype=np.uint8)
    if x_lo > x_hi or y_lo > y_hi:
        return out
    xs = np.arange(x_lo, x_hi + 1, dtype=np.float64)[None, :]
    ys = np.arange(y_lo, y_hi + 1, dtype=np.float64)[:, None]
    inside = np.zeros((y_hi - y_lo + 1, x_hi - x_lo + 1), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_cross)
    out[y_lo : y_hi + 1, x_lo : x_hi + 1] = inside
    return out


@dataclass(frozen=True)
class PenaltyParams:
    """Speed and penalty knobs: f = eps + omega * edge; alpha_d sets how fast
    the anti-marker term decays with distance."""

    eps: float = 0.1
    omega: float = 1e4
    alpha_d: float = 5.0

    def __post_init__(self):
        if self.eps <= 0 or self.omega <= 0 or self.alpha_d <= 0:
            raise ValueError("eps, omega, and alpha_d must all be positive")


@dataclass
class DistanceField:
    """Geodesic distances plus the source mask they grew from."""

    volume: ScalarVolume
    source: MaskVolume


def geodesic_speed(edge, params: PenaltyParams) -> ScalarVolume:
    """Per-voxel Eikonal cost f = eps + omega * edge (edge is |Psi b|)."""
    data = np.asarray(edge.data, dtype=np.float64)
    if data.min() < 0:
        raise ValueError("edge magnitudes must be non-negative")
    return ScalarVolume(edge.geometry, params.eps + params.omega * data)


@njit(cache=True)
def _sweep_kernel(dist, f, src, hx, hy, hz, tol, max_rounds):  # pragma: no cover
    nz, ny, nx = dist.shape
    rounds = 0
    for _ in range(max_rounds):
        rounds += 1
        max_delta = 0.0
        n_first = 0
        for order in range(8):
            if order & 1:
                z0, z1, zstep = nz - 1, -1, -1
            else:
                z0, z1, zstep = 0, nz, 1
            if order & 2:
                y0, y1, ystep = ny - 1, -1, -1
            else:
                y0, y1, ystep = 0, ny, 1
            if order & 4:
                x0, x1, xstep = nx - 1, -1, -1
            else:
                x0, x1, xstep = 0, nx, 1
            z = z0
            while z != z1:
                y = y0
                while y != y1:
                    x = x0
                    while x != x1:
                        if src[z, y, x] == 0:
                            old = dist[z, y, x]
                            ax = _FAR
                            if x > 0 and dist[z, y, x - 1] < ax:
                                ax = dist[z, y, x - 1]
                            if x < nx - 1 and dist[z, y, x + 1] < ax:
                                ax = dist[z, y, x + 1]
                            ay = _FAR
                            if y > 0 and dist[z, y - 1, x] < ay:
                                ay = dist[z, y - 1, x]
                            if y < ny - 1 and dist[z, y + 1, x] < ay:
                                ay = dist[z, y + 1, x]
                            az = _FAR
                            if z > 0 and dist[z - 1, y, x] < az:
                                az = dist[z - 1, y, x]
                            if z < nz - 1 and dist[z + 1, y, x] < az:
                                az = dist[z + 1, y, x]

                            a1, h1 = ax, hx
                            a2, h2 = ay, hy
                            a3, h3 = az, hz
                            if a2 < a1:
                                a1, a2 = a2, a1
                                h1, h2 = h2, h1
                            if a3 < a2:
                                a2, a3 = a3, a2
                                h2, h3 = h3, h2
                            if a2 < a1:
                                a1, a2 = a2, a1
                                h1, h2 = h2, h1

                            fv = f[z, y, x]
                            cand = a1 + fv * h1
                            if cand > a2:
                                w1 = 1.0 / (h1 * h1)
                                w2 = 1.0 / (h2 * h2)
                                sw = w1 + w2
                                sa = a1 * w1 + a2 * w2
                                sq = a1 * a1 * w1 + a2 * a2 * w2
                                disc = sa * sa - sw * (sq - fv * fv)
                                if disc > 0.0:
                                    cand = (sa + math.sqrt(disc)) / sw
                                if cand > a3:
                                    w3 = 1.0 / (h3 * h3)
                                    sw += w3
                                    sa += a3 * w3
                                    sq += a3 * a3 * w3
                                    disc = sa * sa - sw * (sq - fv * fv)
                                    if disc > 0.0:
                                        cand = (sa + math.sqrt(disc)) / sw
                            if cand < old:
                                dist[z, y, x] = cand
                                if old < _FAR * 0.5:
                                    delta = old - cand
                                    if delta > max_delta:
                                        max_delta = delta
                                else:
                                    n_first += 1
                        x += xstep
                    y += ystep
                z += zstep
        max_val = 0.0
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    v = dist[z, y, x]
                    if v < _FAR * 0.5 and v > max_val:
                        max_val = v
        if n_first == 0 and max_delta <= tol * max_val:
            break
    return rounds


def fast_sweep(
    source: MaskVolume,
    f: ScalarVolume,
    geometry: VolumeGeometry | None = None,
    max_rounds: int = 20,
    tol: float = 1e-6,
) -> DistanceField:
    """Godunov-upwind Gauss-Seidel sweeps over all 8 octant orderings.

    Solves |grad D| = f with D = 0 on the source, using physical per-axis
    spacing (z is usually coarser). Sweep rounds repeat until the largest
    update falls below tol * max(D) or max_rounds is reached. Updates only
    ever lower D, so each round is voxel-wise non-increasing.
    """
    if geometry is None:
        geometry = f.geometry
    if source.geometry != geometry or f.geometry != geometry:
        raise ValueError("source, speed, and geometry must agree")
    if not source.data.any():
        raise ValueError("source mask is empty")
    fdata = np.ascontiguousarray(f.data, dtype=np.float64)
    if fdata.min() <= 0:
        raise ValueError("speed must be strictly positive")
    dist = np.where(source.data != 0, 0.0, _FAR)
    hx, hy, hz = geometry.spacing
    _sweep_kernel(
        dist,
        fdata,
        np.ascontiguousarray(source.data, dtype=np.uint8),
        hx,
        hy,
        hz,
        tol,
        max_rounds,
    )
    unreached = dist > _FAR * 0.5
    if unreached.any():
        dist[unreached] = dist[~unreached].max()
    return DistanceField(ScalarVolume(geometry, dist), source)


def distance_penalty(
    d_marker: DistanceField, d_anti: DistanceField, alpha_d: float
) -> ScalarVolume:
    """Combine marker and anti-marker distances into one penalty in [0, 1].

    Both fields are first normalized by their own domain maximum, then
    D_P = (D_M + (exp(-alpha_d * D_AM) - exp(-alpha_d)) / (1 - exp(-alpha_d))) / 2.
    Small near markers that are far from anti-markers; (D_M + 1) / 2 at
    anti-markers.
    """
    if alpha_d <= 0:
        raise ValueError("alpha_d must be positive")
    if d_marker.volume.geometry != d_anti.volume.geometry:
        raise ValueError("distance fields live on different geometries")

    def normalized(fieldvol: ScalarVolume) -> np.ndarray:
        peak = fieldvol.data.max()
        return fieldvol.data / peak if peak > 0 else np.zeros_like(fieldvol.data)

    dm = normalized(d_marker.volume)
    dam = normalized(d_anti.volume)
    floor = math.exp(-alpha_d)
    # the transform is exactly 0 at dam = 1 and exactly 1 at dam = 0; pin the
    # far end so float exp round-off cannot leak a residual there
    anti = np.where(
        dam >= 1.0, 0.0, (np.exp(-alpha_d * dam) - floor) / (1.0 - floor)
    )
    return ScalarVolume(d_marker.volume.geometry, 0.5 * (dm + anti))

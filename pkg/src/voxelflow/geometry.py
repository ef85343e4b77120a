"""Volume containers, physical geometry, raw-file I/O, and resampling.

A volume is a dense 3D grid with a physical field of view. On disk it is a
pair of files: ``<name>.vol.json`` (geometry sidecar) and ``<name>.vol.raw``
(packed little-endian voxel data). The raw file stores voxels in x-fastest
order; in memory arrays are C-contiguous with shape ``(nz, ny, nx)`` so that
``ravel()`` reproduces the file order. Physical coordinates place the center
of the field of view at the origin, with voxel centers at
``(i + 0.5) * spacing - fov / 2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

__all__ = [
    "VolumeGeometry",
    "ScalarVolume",
    "MaskVolume",
    "LabelVolume",
    "load_volume",
    "load_mask",
    "load_labels",
    "save_volume",
    "resample",
]

_SCALAR_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True)
class VolumeGeometry:
    """Grid dimensions and physical extent of a volume.

    Parameters
    ----------
    dims : tuple of int
        Voxel counts ``(nx, ny, nz)``.
    fov_mm : tuple of float
        Physical field of view ``(fx, fy, fz)`` in millimetres.
    """

    dims: tuple[int, int, int]
    fov_mm: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        fov = tuple(float(f) for f in self.fov_mm)
        if len(dims) != 3 or len(fov) != 3:
            raise ValueError("dims and fov_mm must have length 3")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        if any(not np.isfinite(f) or f <= 0 for f in fov):
            raise ValueError(f"fov_mm must be positive and finite, got {fov}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "fov_mm", fov)

    @property
    def spacing(self) -> tuple[float, float, float]:
        """Voxel spacing ``(hx, hy, hz)`` = fov / dims, in millimetres."""
        return tuple(f / d for f, d in zip(self.fov_mm, self.dims))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def axis_centers(self, axis: int) -> np.ndarray:
        """Physical coordinates of voxel centers along one axis (0=x,1=y,2=z)."""
        n = self.dims[axis]
        h = self.fov_mm[axis] / n
        return (np.arange(n) + 0.5) * h - self.fov_mm[axis] / 2.0

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "fov_mm": list(self.fov_mm)}


def _check_data(geometry: VolumeGeometry, data: np.ndarray, kinds: tuple) -> np.ndarray:
    nx, ny, nz = geometry.dims
    data = np.ascontiguousarray(data)
    if data.shape != (nz, ny, nx):
        raise ValueError(
            f"data shape {data.shape} does not match geometry (nz, ny, nx) = {(nz, ny, nx)}"
        )
    if data.dtype.kind not in kinds:
        raise ValueError(f"unsupported dtype {data.dtype}")
    return data


@dataclass
class ScalarVolume:
    """Dense scalar field on a 3D grid. ``data`` has shape (nz, ny, nx)."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = _check_data(self.geometry, self.data, ("f",))

    def ravel_xfastest(self) -> np.ndarray:
        return self.data.ravel()

    def with_data(self, data: np.ndarray) -> "ScalarVolume":
        return ScalarVolume(self.geometry, data)


@dataclass
class MaskVolume:
    """Binary mask on a 3D grid. ``data`` is boolean, shape (nz, ny, nx)."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype != np.bool_:
            if not np.isin(self.data, (0, 1)).all():
                raise ValueError("mask data must be binary")
            self.data = self.data.astype(bool)
        self.data = _check_data(self.geometry, self.data, ("b",))

    @property
    def n_true(self) -> int:
        return int(self.data.sum())


@dataclass
class LabelVolume:
    """Integer label field on a 3D grid; 0 means unlabeled. dtype uint8."""

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.min(initial=0) < 0 or data.max(initial=0) > 255:
                raise ValueError("labels must fit in uint8")
            data = data.astype(np.uint8)
        self.data = _check_data(self.geometry, data, ("u",))

    def groups(self) -> list[int]:
        """Sorted nonzero label values present in the volume."""
        return sorted(int(g) for g in np.unique(self.data) if g != 0)


def _base_path(path) -> Path:
    p = Path(path)
    name = p.name
    for suffix in (".vol.json", ".vol.raw", ".vol"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name)


def save_volume(volume, path) -> Path:
    """Write a volume as ``<base>.vol.json`` + ``<base>.vol.raw``.

    Scalar volumes keep their dtype (f32 or f64); masks and labels are
    written as u8. Returns the sidecar path. The raw file is packed
    little-endian, x-fastest.
    """
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(volume, ScalarVolume):
        dtype = "f64" if volume.data.dtype == np.float64 else "f32"
        raw = volume.data.astype(_SCALAR_DTYPES[dtype], copy=False)
    elif isinstance(volume, MaskVolume):
        dtype = "u8"
        raw = volume.data.astype(np.uint8)
    elif isinstance(volume, LabelVolume):
        dtype = "u8"
        raw = volume.data
    else:
        raise TypeError(f"cannot save object of type {type(volume).__name__}")
    sidecar = {
        "dims": list(volume.geometry.dims),
        "fov_mm": list(volume.geometry.fov_mm),
        "dtype": dtype,
        "byte_order": "little",
    }
    json_path = base.with_name(base.name + ".vol.json")
    raw_path = base.with_name(base.name + ".vol.raw")
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    np.ascontiguousarray(raw).tofile(raw_path)
    return json_path


def _load_raw(path):
    base = _base_path(path)
    json_path = base.with_name(base.name + ".vol.json")
    raw_path = base.with_name(base.name + ".vol.raw")
    if not json_path.exists():
        raise FileNotFoundError(f"missing sidecar {json_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw data {raw_path}")
    sidecar = json.loads(json_path.read_text())
    for key in ("dims", "fov_mm", "dtype", "byte_order"):
        if key not in sidecar:
            raise ValueError(f"{json_path}: sidecar missing field {key!r}")
    if sidecar["byte_order"] != "little":
        raise ValueError(f"{json_path}: unsupported byte_order {sidecar['byte_order']!r}")
    geometry = VolumeGeometry(tuple(sidecar["dims"]), tuple(sidecar["fov_mm"]))
    dtype_tag = sidecar["dtype"]
    if dtype_tag in _SCALAR_DTYPES:
        dtype = _SCALAR_DTYPES[dtype_tag]
    elif dtype_tag == "u8":
        dtype = np.dtype("u1")
    else:
        raise ValueError(f"{json_path}: unsupported dtype {dtype_tag!r}")
    nx, ny, nz = geometry.dims
    expected = nx * ny * nz * dtype.itemsize
    actual = raw_path.stat().st_size
    if actual != expected:
        raise ValueError(
            f"{raw_path}: size mismatch, expected {expected} bytes for dims "
            f"{geometry.dims} ({dtype_tag}), found {actual}"
        )
    flat = np.fromfile(raw_path, dtype=dtype)
    data = flat.reshape((nz, ny, nx))
    return geometry, data, dtype_tag, raw_path


def load_volume(path) -> ScalarVolume:
    """Load a scalar volume; rejects non-finite voxels with their byte offset."""
    geometry, data, dtype_tag, raw_path = _load_raw(path)
    if dtype_tag == "u8":
        raise ValueError(f"{raw_path}: dtype u8 holds a mask or labels, not a scalar volume")
    bad = ~np.isfinite(data.ravel())
    if bad.any():
        idx = int(np.argmax(bad))
        offset = idx * data.dtype.itemsize
        raise ValueError(
            f"{raw_path}: non-finite value at voxel {idx} (byte offset {offset})"
        )
    return ScalarVolume(geometry, data)


def load_mask(path) -> MaskVolume:
    """Load a u8 volume as a binary mask (values must be 0 or 1)."""
    geometry, data, dtype_tag, raw_path = _load_raw(path)
    if dtype_tag != "u8":
        raise ValueError(f"{raw_path}: expected u8 mask data, found {dtype_tag}")
    if data.max(initial=0) > 1:
        raise ValueError(f"{raw_path}: mask values must be 0 or 1")
    return MaskVolume(geometry, data.astype(bool))


def load_labels(path) -> LabelVolume:
    """Load a u8 volume as labels (0 = unlabeled)."""
    geometry, data, dtype_tag, raw_path = _load_raw(path)
    if dtype_tag != "u8":
        raise ValueError(f"{raw_path}: expected u8 label data, found {dtype_tag}")
    return LabelVolume(geometry, data)


def resample(volume: ScalarVolume, target: VolumeGeometry) -> ScalarVolume:
    """Trilinearly resample a scalar volume onto a target geometry.

    Source and target fields of view are center-aligned; target voxel
    centers outside the source grid clamp to the nearest edge sample.
    Output is float64. Interpolation is convex, so values stay within the
    source range, and affine fields are reproduced exactly away from the
    clamped border.
    """
    src = volume.geometry
    coords = []
    for axis, n_src in ((2, src.dims[0]), (1, src.dims[1]), (0, src.dims[2])):
        # physical coordinate -> continuous source index along this axis
        phys = target.axis_centers(2 - axis)
        h = src.fov_mm[2 - axis] / n_src
        coords.append(phys / h + n_src / 2.0 - 0.5)
    zs, ys, xs = np.meshgrid(coords[2], coords[1], coords[0], indexing="ij")
    out = map_coordinates(
        volume.data.astype(np.float64, copy=False),
        np.stack([zs, ys, xs]),
        order=1,
        mode="nearest",
    )
    return ScalarVolume(target, out)

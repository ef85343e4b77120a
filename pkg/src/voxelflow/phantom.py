"""Synthetic thigh-like test volumes with known ground truth.

Each phantom slice is an ellipse of muscle compartments (angular sectors with
sinusoidally perturbed boundaries) wrapped in a subcutaneous fat ring, with
thin bright fascia lines between compartments. A fraction of fascia voxels
can be erased (replaced by muscle intensity) in contiguous chunks to simulate
missing boundaries. The intensity volume is clean * (1 + bias) + noise with a
smooth multiplicative bias field; the generator also exports the
additive-equivalent bias (clean * bias) and a half-resolution fat-fraction
companion volume. Everything is deterministic in the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxelflow.geometry import (
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    resample,
    save_volume,
)

__all__ = ["PhantomParams", "PhantomBundle", "generate_phantom"]

# slice shape constants (fractions of the half-extents)
_OUTER_SCALE = 0.84
_RING_SCALE = 0.86  # inner ellipse = _RING_SCALE * outer
_WOBBLE_AMPLITUDE = 0.12  # radians, sector-boundary perturbation
_WOBBLE_LOBES = 3


@dataclass(frozen=True)
class PhantomParams:
    """Knobs for the synthetic volume generator."""

    dims: tuple[int, int, int] = (128, 128, 28)
    fov_mm: tuple[float, float, float] = (400.0, 400.0, 140.0)
    n_groups: int = 3
    boundary_gap_fraction: float = 0.0
    bias_amplitude: float = 0.0
    bias_smoothness_mm: float = 80.0
    noise_sigma: float = 0.0  # st.dev. as a fraction of the intensity range
    intensity_levels: tuple[float, float, float] = (5.0, 100.0, 180.0)  # bg, muscle, fat
    seed: int = 0

    def __post_init__(self):
        if self.dims[0] < 32 or self.dims[1] < 32:
            raise ValueError(f"phantom needs at least 32 voxels in x and y, got {self.dims}")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if not 0.0 <= self.boundary_gap_fraction <= 1.0:
            raise ValueError("boundary_gap_fraction must be in [0, 1]")
        bg, muscle, fat = self.intensity_levels
        if not bg < muscle < fat:
            raise ValueError("intensity_levels must be increasing (background, muscle, fat)")


@dataclass
class PhantomBundle:
    """Generated volumes plus the parameters that made them."""

    t1_like: ScalarVolume
    fat_fraction_like: ScalarVolume
    truth_labels: LabelVolume
    true_bias: ScalarVolume
    params: PhantomParams

    def write(self, out_dir) -> Path:
        """Write all volumes and a truth.json manifest; returns the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_volume(self.t1_like, out / "t1")
        save_volume(self.fat_fraction_like, out / "fat_fraction")
        save_volume(self.truth_labels, out / "truth_labels")
        save_volume(self.true_bias, out / "true_bias")
        manifest = {
            "groups": self.truth_labels.groups(),
            "params": {
                "dims": list(self.params.dims),
                "fov_mm": list(self.params.fov_mm),
                "n_groups": self.params.n_groups,
                "boundary_gap_fraction": self.params.boundary_gap_fraction,
                "bias_amplitude": self.params.bias_amplitude,
                "bias_smoothness_mm": self.params.bias_smoothness_mm,
                "noise_sigma": self.params.noise_sigma,
                "intensity_levels": list(self.params.intensity_levels),
                "seed": self.params.seed,
            },
            "volumes": {
                "t1": "t1.vol.json",
                "fat_fraction": "fat_fraction.vol.json",
                "truth_labels": "truth_labels.vol.json",
                "true_bias": "true_bias.vol.json",
            },
        }
        path = out / "truth.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _slice_structure(params: PhantomParams, rng: np.random.Generator):
    """Build one slice's group map and region masks (shared by all slices).

    Returns (groups, muscle, ring, fascia) 2D arrays; groups is 0 outside
    muscle and 1..G on compartments including their fascia voxels.
    """
    nx, ny, _ = params.dims
    g_count = params.n_groups
    ys, xs = np.mgrid[0:ny, 0:nx]
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    ax_out = _OUTER_SCALE * nx / 2.0
    ay_out = _OUTER_SCALE * ny / 2.0
    u = (xs - cx) / ax_out
    v = (ys - cy) / ay_out
    r2 = u * u + v * v
    outer = r2 <= 1.0
    muscle = r2 <= _RING_SCALE**2
    ring = outer & ~muscle

    phase0 = rng.uniform(0, 2 * np.pi)
    wobble_phase = rng.uniform(0, 2 * np.pi)
    theta = np.arctan2(v, u)
    theta_eff = theta + _WOBBLE_AMPLITUDE * np.sin(_WOBBLE_LOBES * theta + wobble_phase)
    sector = np.floor(((theta_eff - phase0) % (2 * np.pi)) / (2 * np.pi / g_count))
    sector = np.clip(sector.astype(np.int64), 0, g_count - 1) + 1
    groups = np.where(muscle, sector, 0)

    # fascia: both sides of any in-plane group boundary inside the muscle region
    fascia = np.zeros_like(muscle)
    if g_count > 1:
        for dy, dx in ((0, 1), (1, 0)):
            a = groups[: ny - dy, : nx - dx]
            b = groups[dy:, dx:]
            diff = (a != b) & (a > 0) & (b > 0)
            fascia[: ny - dy, : nx - dx] |= diff
            fascia[dy:, dx:] |= diff
    return groups, muscle, ring, fascia


def _gap_mask(fascia_idx: np.ndarray, dims, fraction: float, rng: np.random.Generator):
    """Pick round(fraction * n) fascia voxels in contiguous chunks.

    fascia_idx is an (n, 3) array of (z, y, x) voxel coordinates. Chunks are
    grown around seeded gap centers by nearest-distance selection (z distance
    weighted up so chunks stay mostly in-plane); the count is exact.
    """
    n = len(fascia_idx)
    k = int(round(fraction * n))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k >= n:
        return np.arange(n)
    n_centers = max(1, int(round(k / 100.0)))
    centers = fascia_idx[rng.choice(n, size=n_centers, replace=False)]
    pos = fascia_idx.astype(np.float64) * np.array([4.0, 1.0, 1.0])
    cpos = centers.astype(np.float64) * np.array([4.0, 1.0, 1.0])
    d2 = ((pos[:, None, :] - cpos[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k]


def generate_phantom(params: PhantomParams | None = None, **kwargs) -> PhantomBundle:
    """Generate a deterministic thigh-like phantom bundle.

    Accepts either a PhantomParams or keyword arguments for its fields.
    """
    if params is None:
        params = PhantomParams(**kwargs)
    elif kwargs:
        raise TypeError("pass either params or keyword arguments, not both")

    nx, ny, nz = params.dims
    geom = VolumeGeometry(params.dims, params.fov_mm)
    bg_level, muscle_level, fat_level = params.intensity_levels

    # independent streams so shape, bias, and noise draws never interact
    rng_shape = np.random.default_rng([params.seed, 0])
    rng_gap = np.random.default_rng([params.seed, 1])
    rng_bias = np.random.default_rng([params.seed, 2])
    rng_noise = np.random.default_rng([params.seed, 3])

    groups2d, muscle2d, ring2d, fascia2d = _slice_structure(params, rng_shape)

    clean = np.full((nz, ny, nx), bg_level, dtype=np.float64)
    clean[:, muscle2d] = muscle_level
    clean[:, ring2d] = fat_level
    clean[:, fascia2d] = fat_level

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    comp2d = np.where(fascia2d, 0, groups2d).astype(np.uint8)
    labels[:] = comp2d[None, :, :]

    # erase a fraction of fascia voxels in coherent chunks
    fz, fy, fx = np.nonzero(np.broadcast_to(fascia2d, (nz, ny, nx)))
    fascia_idx = np.stack([fz, fy, fx], axis=1)
    erased = _gap_mask(fascia_idx, params.dims, params.boundary_gap_fraction, rng_gap)
    if len(erased):
        ez, ey, ex = fascia_idx[erased].T
        clean[ez, ey, ex] = muscle_level

    # smooth multiplicative bias: a few broad bumps, sup-norm = amplitude
    bias = np.zeros((nz, ny, nx), dtype=np.float64)
    if params.bias_amplitude > 0:
        n_bumps = int(rng_bias.integers(2, 5))
        xs = geom.axis_centers(0)[None, None, :]
        ysc = geom.axis_centers(1)[None, :, None]
        zs = geom.axis_centers(2)[:, None, None]
        for _ in range(n_bumps):
            cxy = rng_bias.uniform(-0.5, 0.5, size=3) * np.array(params.fov_mm)
            amp = rng_bias.uniform(0.5, 1.0) * rng_bias.choice([-1.0, 1.0])
            w = params.bias_smoothness_mm
            bias += amp * np.exp(
                -((xs - cxy[0]) ** 2 + (ysc - cxy[1]) ** 2 + (zs - cxy[2]) ** 2)
                / (2 * w * w)
            )
        # fix the gain convention: multiplicative bias averages to 1 over the
        # object, so overall scanner gain is not part of the field
        obj = clean > bg_level
        if obj.any():
            bias -= bias[obj].mean()
        peak = np.abs(bias).max()
        if peak > 0:
            bias *= params.bias_amplitude / peak

    intensity_range = fat_level - bg_level
    noise = (
        rng_noise.standard_normal((nz, ny, nx)) * params.noise_sigma * intensity_range
        if params.noise_sigma > 0
        else 0.0
    )
    t1 = clean * (1.0 + bias) + noise

    # half-resolution fat indicator with light noise, bias-free
    fat2d = ring2d | (fascia2d & (clean[0] == fat_level))
    fat_indicator = np.zeros((nz, ny, nx), dtype=np.float64)
    fat_indicator[:] = fat2d[None, :, :].astype(np.float64)
    # voxels erased back to muscle are no longer fat
    if len(erased):
        fat_indicator[ez, ey, ex] = 0.0
    ff_geom = VolumeGeometry((max(1, nx // 2), max(1, ny // 2), nz), params.fov_mm)
    ff = resample(ScalarVolume(geom, fat_indicator), ff_geom)
    if params.noise_sigma > 0:
        ff_noise = rng_noise.standard_normal(ff.data.shape) * params.noise_sigma * 0.5
        ff = ScalarVolume(ff_geom, ff.data + ff_noise)

    return PhantomBundle(
        t1_like=ScalarVolume(geom, t1),
        fat_fraction_like=ff,
        truth_labels=LabelVolume(geom, labels),
        true_bias=ScalarVolume(geom, clean * bias),
        params=params,
    )

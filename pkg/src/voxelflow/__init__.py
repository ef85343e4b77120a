"""Semi-automatic 3D segmentation on voxel grids.

Stages: prior-informed fuzzy-clustering bias correction, kernel/dictionary
edge modelling, geodesic marker and anti-marker distance penalties, and a
level-set geometric flow, composed by a deterministic pipeline with a CLI
and a local HTTP service.
"""

from voxelflow.geometry import (
    LabelVolume,
    MaskVolume,
    ScalarVolume,
    VolumeGeometry,
    load_labels,
    load_mask,
    load_volume,
    resample,
    save_volume,
)

__version__ = "0.1.0"

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
    "__version__",
]

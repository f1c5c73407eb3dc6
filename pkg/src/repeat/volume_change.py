"""Partial-liver volume change from a Jacobian determinant map.

The liver mask lives on the fixed (inspiration) grid.  Only voxels whose
mapped position stays inside the moving field of view are counted, so a
liver truncated by either scan yields the change of the tissue visible in
both.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyRegion, FoldingExceeded, GeometryMismatch
from .grid_ops import inside_fov
from .volume_io import DeformationField, Geometry, ImageVolume, JacobianField, Kind

MM3_PER_ML = 1000.0


@dataclass(frozen=True)
class VolumeChangeReport:
    v_fixed_ml: float
    v_mapped_ml: float
    delta_percent: float
    coverage_fraction: float
    folding_fraction: float
    n_voxels: int
    voxel_volume_ml: float
    config_digest: str = ""
    fixed_phase: str = "inspiration"
    moving_phase: str = "expiration"

    def to_dict(self) -> dict:
        return asdict(self)


def fov_valid_mask(field: DeformationField, moving_geometry: Geometry,
                   margin: float = 1.0) -> ImageVolume:
    """1 where ``x + u(x)`` lands at least ``margin`` voxels inside the moving grid."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    idx = moving_geometry.world_to_voxel(field.mapped_points())
    valid = inside_fov(idx, moving_geometry.dims, margin)
    return ImageVolume(field.geometry, valid.astype(float), Kind.MASK)


def _region(liver_mask: ImageVolume, jac: JacobianField, valid: ImageVolume):
    for other in (jac.geometry, valid.geometry):
        if not liver_mask.geometry.isclose(other, 1e-3):
            raise GeometryMismatch("liver mask, Jacobian and validity mask must share a grid")
    liver = liver_mask.data > 0
    region = liver & (valid.data > 0)
    if not region.any():
        raise EmptyRegion("no liver voxel lies inside the shared field of view")
    return liver, region


def mean_jacobian(liver_mask: ImageVolume, jac: JacobianField, valid: ImageVolume) -> float:
    _, region = _region(liver_mask, jac, valid)
    return float(np.mean(jac.det[region]))


def measure_partial_volume_change(liver_mask: ImageVolume, jac: JacobianField,
                                  valid: ImageVolume, max_folding: float = 0.01,
                                  config_digest: str = "") -> VolumeChangeReport:
    """Integrate ``det J`` over liver voxels inside the shared FOV.

    Raises :class:`FoldingExceeded` when more than ``max_folding`` of the
    region has ``det J <= 0``.
    """
    liver, region = _region(liver_mask, jac, valid)
    det = jac.det[region]
    n = int(det.size)
    voxel_ml = liver_mask.geometry.voxel_volume_mm3 / MM3_PER_ML
    v_fixed = n * voxel_ml
    v_mapped = voxel_ml * float(np.sum(det))
    folding = float(np.count_nonzero(det <= 0)) / n
    if folding > max_folding:
        raise FoldingExceeded(
            f"{100 * folding:.2f}% of the measured region folds (limit {100 * max_folding:.2f}%)")
    return VolumeChangeReport(
        v_fixed_ml=v_fixed,
        v_mapped_ml=v_mapped,
        delta_percent=100.0 * (v_mapped - v_fixed) / v_fixed,
        coverage_fraction=n / float(np.count_nonzero(liver)),
        folding_fraction=folding,
        n_voxels=n,
        voxel_volume_ml=voxel_ml,
        config_digest=config_digest,
    )

"""Local volume ratios and QC statistics of a dense deformation field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, GeometryMismatch
from .grid_ops import gradient_image
from .volume_io import DeformationField, Geometry, ImageVolume, JacobianField


@dataclass(frozen=True)
class DisplacementStats:
    mean_mag: float
    max_mag: float
    p99_mag: float
    axis_mean: tuple


def spatial_jacobian(field: DeformationField) -> np.ndarray:
    """``dT/dx = I + du/dx`` in the world frame, shape ``dims + (3, 3)``.

    Derivatives are central differences inside and one-sided on the faces.
    """
    geom = field.geometry
    # du_w / d(index axis a) per mm, stacked as [..., w, a]
    du = np.stack([gradient_image(field.displacements[..., w], geom.spacing) for w in range(3)],
                  axis=-2)
    # chain rule to world axes: d/dx = D d/d(axis)
    jac = du @ geom.direction.T
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    jac[..., 2, 2] += 1.0
    return jac


def det3(m: np.ndarray) -> np.ndarray:
    """Determinant of stacked 3x3 matrices by cofactor expansion."""
    return (m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
            - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
            + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]))


def jacobian_determinant_field(field: DeformationField) -> JacobianField:
    return JacobianField(field.geometry, det3(spatial_jacobian(field)))


def _check_mask(geometry: Geometry, mask: ImageVolume) -> np.ndarray:
    if not geometry.isclose(mask.geometry, 1e-3):
        raise GeometryMismatch("mask and field live on different grids")
    sel = mask.data > 0
    if not sel.any():
        raise EmptyMask("mask selects no voxels")
    return sel


def folding_fraction(jac: JacobianField, mask: ImageVolume) -> float:
    """Fraction of in-mask voxels with ``det J <= 0``."""
    sel = _check_mask(jac.geometry, mask)
    return float(np.count_nonzero(jac.det[sel] <= 0)) / float(np.count_nonzero(sel))


def nearest_rank(values: np.ndarray, pct: float) -> float:
    ordered = np.sort(values)
    rank = int(np.ceil(pct / 100.0 * ordered.size))
    return float(ordered[max(rank, 1) - 1])


def displacement_stats(field: DeformationField, mask: ImageVolume) -> DisplacementStats:
    sel = _check_mask(field.geometry, mask)
    vec = field.displacements[sel]
    mag = np.sqrt(np.sum(vec * vec, axis=1))
    return DisplacementStats(
        mean_mag=float(mag.mean()),
        max_mag=float(mag.max()),
        p99_mag=nearest_rank(mag, 99.0),
        axis_mean=tuple(float(v) for v in vec.mean(axis=0)),
    )

"""Sampling, resampling and mask utilities on :class:`ImageVolume` grids."""
from __future__ import annotations

import enum
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatch, IndexOutOfRange, InvalidSpacing, InvalidWindow, NotAMask
from .volume_io import DeformationField, Geometry, ImageVolume, Kind

LIVER_WINDOW = (-100.0, 400.0)


class Interp(enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


def inside_fov(index: np.ndarray, dims, margin: float = 0.0) -> np.ndarray:
    """True where every component lies in ``[margin, dim - 1 - margin]``."""
    hi = np.asarray(dims, dtype=float) - 1.0 - margin
    return np.all((index >= margin) & (index <= hi), axis=-1)


def trilinear(data: np.ndarray, index: np.ndarray, outside: float = 0.0,
              with_gradient: bool = False):
    """Trilinear interpolation of ``data`` at continuous indices ``(..., 3)``.

    Returns ``(values, inside)`` or, with ``with_gradient``, also the exact
    derivative of the interpolant with respect to the index (per voxel, not
    per mm).  Points outside ``[0, dim-1]`` get ``outside`` and zero gradient.
    """
    index = np.asarray(index, dtype=float)
    dims = np.array(data.shape)
    inside = inside_fov(index, dims)
    base = np.clip(np.floor(index), 0, dims - 2).astype(np.intp)
    frac = np.clip(index - base, 0.0, 1.0)
    sy, sz = data.shape[1] * data.shape[2], data.shape[2]
    flat = data.ravel()
    b = base[..., 0] * sy + base[..., 1] * sz + base[..., 2]
    c000 = flat[b]
    c001 = flat[b + 1]
    c010 = flat[b + sz]
    c011 = flat[b + sz + 1]
    c100 = flat[b + sy]
    c101 = flat[b + sy + 1]
    c110 = flat[b + sy + sz]
    c111 = flat[b + sy + sz + 1]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    gx_, gy_, gz_ = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c00 = c000 * gz_ + c001 * fz
    c01 = c010 * gz_ + c011 * fz
    c10 = c100 * gz_ + c101 * fz
    c11 = c110 * gz_ + c111 * fz
    c0 = c00 * gy_ + c01 * fy
    c1 = c10 * gy_ + c11 * fy
    values = np.where(inside, c0 * gx_ + c1 * fx, outside)
    if not with_gradient:
        return values, inside
    grad = np.empty(index.shape)
    grad[..., 0] = c1 - c0
    grad[..., 1] = (c01 - c00) * gx_ + (c11 - c10) * fx
    dz0 = (c001 - c000) * gy_ + (c011 - c010) * fy
    dz1 = (c101 - c100) * gy_ + (c111 - c110) * fy
    grad[..., 2] = dz0 * gx_ + dz1 * fx
    grad[~inside] = 0.0
    return values, inside, grad


def nearest(data: np.ndarray, index: np.ndarray, outside: float = 0.0):
    index = np.asarray(index, dtype=float)
    dims = np.array(data.shape)
    inside = inside_fov(index, dims)
    idx = np.clip(np.rint(index), 0, dims - 1).astype(np.intp)
    values = data[idx[..., 0], idx[..., 1], idx[..., 2]]
    return np.where(inside, values, outside), inside


def sample_index(vol: ImageVolume, index: np.ndarray, interp: Interp = Interp.TRILINEAR,
                 outside: Optional[float] = None):
    """Vectorized sampling at voxel indices; returns ``(values, inside)``."""
    outside = vol.background if outside is None else outside
    if vol.is_mask and interp is not Interp.NEAREST:
        raise NotAMask("masks are only resampled with nearest-neighbour interpolation")
    if interp is Interp.NEAREST:
        return nearest(vol.data, index, outside)
    return trilinear(vol.data, index, outside)


def sample_world(vol: ImageVolume, points: np.ndarray, interp: Interp = Interp.TRILINEAR,
                 outside: Optional[float] = None):
    return sample_index(vol, vol.geometry.world_to_voxel(points), interp, outside)


def trilinear_sample(vol: ImageVolume, index: Sequence[float],
                     outside: Optional[float] = None) -> Tuple[float, bool]:
    """Sample one continuous index; returns ``(value, inside_fov)``."""
    outside = vol.background if outside is None else outside
    values, inside = trilinear(vol.data, np.asarray(index, dtype=float)[None], outside)
    return float(values[0]), bool(inside[0])


def _default_interp(vol: ImageVolume) -> Interp:
    return Interp.NEAREST if vol.is_mask else Interp.TRILINEAR


def resample_to_geometry(vol: ImageVolume, geometry: Geometry,
                         interp: Optional[Interp] = None) -> ImageVolume:
    interp = _default_interp(vol) if interp is None else interp
    values, _ = sample_world(vol, geometry.world_grid(), interp)
    return ImageVolume(geometry, values, vol.kind, vol.background)


def resample_to_spacing(vol: ImageVolume, target, interp: Optional[Interp] = None) -> ImageVolume:
    """Resample over the same world extent at a new spacing.

    New dims are ``ceil(dims * spacing / target)``; origin and direction
    are kept, so voxel 0 stays in place.
    """
    target = np.asarray(target, dtype=float).reshape(-1)
    if target.size == 1:
        target = np.repeat(target, 3)
    if target.size != 3 or not np.all(target > 0) or not np.all(np.isfinite(target)):
        raise InvalidSpacing(f"target spacing must be 3 positive values, got {target}")
    geom = vol.geometry
    if np.array_equal(target, geom.spacing):
        return vol
    extent = np.asarray(geom.dims) * geom.spacing
    # round before ceil so 64*1/2 stays 32 despite float noise
    dims = np.maximum(np.ceil(np.round(extent / target, 9)).astype(int), 2)
    return resample_to_geometry(vol, geom.with_(dims=tuple(dims), spacing=target), interp)


def window_intensity(vol: ImageVolume, lo: float = LIVER_WINDOW[0],
                     hi: float = LIVER_WINDOW[1]) -> ImageVolume:
    if not lo < hi:
        raise InvalidWindow(f"window needs lo < hi, got [{lo}, {hi}]")
    width = hi - lo
    data = np.clip((vol.data - lo) / width, 0.0, 1.0)
    background = float(np.clip((vol.background - lo) / width, 0.0, 1.0))
    return ImageVolume(vol.geometry, data, Kind.INTENSITY, background)


def gradient_image(data: np.ndarray, spacing) -> np.ndarray:
    """Per-mm gradient along the voxel axes, shape ``data.shape + (3,)``.

    Central differences inside, one-sided differences on the faces.
    """
    parts = np.gradient(data, *[float(s) for s in spacing], edge_order=1)
    return np.stack(parts, axis=-1)


def central_gradient(vol: ImageVolume, index) -> np.ndarray:
    """World-frame gradient (per mm) at one integer voxel index."""
    idx = tuple(int(i) for i in index)
    if any(not 0 <= i < n for i, n in zip(idx, vol.dims)):
        raise IndexOutOfRange(f"index {idx} outside dims {vol.dims}")
    g = np.empty(3)
    for axis in range(3):
        lo = list(idx)
        hi = list(idx)
        n = vol.dims[axis]
        if 0 < idx[axis] < n - 1:
            lo[axis] -= 1
            hi[axis] += 1
        elif idx[axis] == 0:
            hi[axis] += 1
        else:
            lo[axis] -= 1
        step = (hi[axis] - lo[axis]) * vol.spacing[axis]
        g[axis] = (vol.data[tuple(hi)] - vol.data[tuple(lo)]) / step
    return vol.direction @ g


def warp_volume(vol: ImageVolume, field: DeformationField,
                interp: Optional[Interp] = None,
                output_geometry: Optional[Geometry] = None) -> ImageVolume:
    """Pull-back warp: ``out(x) = vol(x + u(x))`` on the field's grid."""
    if output_geometry is not None and not output_geometry.isclose(field.geometry):
        raise GeometryMismatch("deformation field is not defined on the requested output grid")
    interp = _default_interp(vol) if interp is None else interp
    values, _ = sample_world(vol, field.mapped_points(), interp)
    return ImageVolume(field.geometry, values, vol.kind, vol.background)


def threshold_mask(vol: ImageVolume, lo: float, hi: float) -> ImageVolume:
    if not lo < hi:
        raise InvalidWindow(f"threshold needs lo < hi, got [{lo}, {hi}]")
    mask = (vol.data >= lo) & (vol.data <= hi)
    return ImageVolume(vol.geometry, mask.astype(float), Kind.MASK)


def largest_connected_component(mask: ImageVolume) -> ImageVolume:
    """Keep the largest 6-connected component; ties go to the lowest label."""
    if not mask.is_mask:
        raise NotAMask("largest_connected_component needs a mask")
    labels, count = ndimage.label(mask.data > 0)
    if count == 0:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return mask.replace_data((labels == keep).astype(float))


def dilate_mask(mask: ImageVolume, radius_mm: float) -> ImageVolume:
    if not mask.is_mask:
        raise NotAMask("dilate_mask needs a mask")
    if radius_mm <= 0:
        return mask
    r = np.ceil(radius_mm / mask.spacing).astype(int)
    grids = np.meshgrid(*[np.arange(-k, k + 1) * s for k, s in zip(r, mask.spacing)],
                        indexing="ij")
    ball = sum(g ** 2 for g in grids) <= radius_mm ** 2
    return mask.replace_data(ndimage.binary_dilation(mask.data > 0, ball).astype(float))


def gaussian_smooth(vol: ImageVolume, sigma_mm: float) -> ImageVolume:
    if sigma_mm <= 0:
        return vol
    sigma = sigma_mm / vol.spacing
    out = ndimage.gaussian_filter(vol.data, sigma, mode="nearest")
    return vol.replace_data(out)


def crop(vol: ImageVolume, lo, hi) -> ImageVolume:
    """Sub-volume ``[lo, hi)`` in voxel indices with the origin moved accordingly."""
    lo = np.asarray(lo, dtype=int)
    hi = np.asarray(hi, dtype=int)
    if np.any(lo < 0) or np.any(hi > vol.dims) or np.any(hi - lo < 2):
        raise IndexOutOfRange(f"crop box {lo.tolist()}..{hi.tolist()} invalid for {vol.dims}")
    geom = vol.geometry.with_(dims=tuple(hi - lo), origin=vol.geometry.voxel_to_world(lo))
    data = vol.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return ImageVolume(geom, data, vol.kind, vol.background)

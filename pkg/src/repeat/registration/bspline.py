"""Uniform cubic B-spline displacement lattices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from ..errors import GeometryMismatch, OutsideSupport
from ..volume_io import Geometry


def cubic_basis(u: np.ndarray) -> np.ndarray:
    """Weights B0..B3 for local coordinate ``u`` in [0, 1), stacked on the last axis."""
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    return np.stack([
        (1.0 - u) ** 3 / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ], axis=-1)


@dataclass(frozen=True)
class ControlPointGrid:
    """Control lattice aligned with the fixed image's voxel axes.

    Control point ``(a, b, c)`` sits at
    ``origin_cp + direction @ (spacing_cp * (a, b, c))`` and carries a world
    frame displacement in mm.
    """

    spacing_cp: np.ndarray
    origin_cp: np.ndarray
    coefficients: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        coeffs = np.array(self.coefficients, dtype=float)
        if coeffs.ndim != 4 or coeffs.shape[3] != 3 or min(coeffs.shape[:3]) < 4:
            raise ValueError(f"coefficients need shape (nx, ny, nz, 3) with n >= 4, got {coeffs.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("control point coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "spacing_cp", np.array(self.spacing_cp, dtype=float).reshape(3))
        object.__setattr__(self, "origin_cp", np.array(self.origin_cp, dtype=float).reshape(3))
        object.__setattr__(self, "direction", np.array(self.direction, dtype=float).reshape(3, 3))

    @property
    def dims_cp(self) -> Tuple[int, int, int]:
        return self.coefficients.shape[:3]

    def with_coefficients(self, coeffs) -> "ControlPointGrid":
        return ControlPointGrid(self.spacing_cp, self.origin_cp, coeffs, self.direction)

    def lattice_coordinates(self, points) -> np.ndarray:
        """Continuous control-lattice index of world points."""
        points = np.asarray(points, dtype=float)
        return ((points - self.origin_cp) @ self.direction) / self.spacing_cp


def grid_for_geometry(geometry: Geometry, cp_spacing: float) -> ControlPointGrid:
    """Zero lattice covering ``[0, dims * spacing]`` of ``geometry`` plus one ring.

    The extra half voxel on the high side covers coarser resampled grids,
    whose last voxel centre can pass the last fixed voxel centre.
    """
    h = np.full(3, float(cp_spacing))
    extent = np.asarray(geometry.dims) * geometry.spacing
    dims = np.floor(extent / h + 1e-9).astype(int) + 4
    origin = geometry.origin - geometry.direction @ h
    return ControlPointGrid(h, origin, np.zeros(tuple(dims) + (3,)), geometry.direction)


def bspline_evaluate(grid: ControlPointGrid, points) -> np.ndarray:
    """Spline displacement at world points ``(..., 3)`` by the 4x4x4 sum."""
    points = np.asarray(points, dtype=float)
    t = grid.lattice_coordinates(points)
    base = np.floor(t).astype(np.intp)
    dims = np.array(grid.dims_cp)
    if np.any(base - 1 < 0) or np.any(base + 2 > dims - 1):
        raise OutsideSupport("point lies outside the control lattice support")
    w = cubic_basis(t - base)
    out = np.zeros(points.shape)
    c = grid.coefficients
    for a in range(4):
        ia = base[..., 0] - 1 + a
        for b in range(4):
            ib = base[..., 1] - 1 + b
            wab = w[..., 0, a] * w[..., 1, b]
            for k in range(4):
                ik = base[..., 2] - 1 + k
                out += (wab * w[..., 2, k])[..., None] * c[ia, ib, ik]
    return out


def basis_matrix(coords: np.ndarray, n_cp: int) -> np.ndarray:
    """Dense ``(len(coords), n_cp)`` matrix of basis weights along one axis.

    ``coords`` are continuous lattice indices.
    """
    coords = np.asarray(coords, dtype=float)
    base = np.floor(coords).astype(np.intp)
    if np.any(base - 1 < 0) or np.any(base + 2 > n_cp - 1):
        raise OutsideSupport("grid axis leaves the control lattice support")
    w = cubic_basis(coords - base)
    mat = np.zeros((coords.size, n_cp))
    rows = np.arange(coords.size)
    for a in range(4):
        mat[rows, base - 1 + a] += w[:, a]
    return mat


def axis_matrices(grid: ControlPointGrid, geometry: Geometry, offsets=None):
    """Per-axis basis matrices evaluating ``grid`` at every voxel of ``geometry``.

    ``offsets`` optionally shifts the samples along each axis by a per-index
    fraction of a voxel, keeping the sample set a rectilinear grid.
    """
    if np.abs(grid.direction - geometry.direction).max() > 1e-9:
        raise GeometryMismatch("control lattice and image grid directions differ")
    start = grid.lattice_coordinates(geometry.origin)
    mats = []
    for axis in range(3):
        step = geometry.spacing[axis] / grid.spacing_cp[axis]
        index = np.arange(geometry.dims[axis], dtype=float)
        if offsets is not None:
            index = index + offsets[axis]
        coords = start[axis] + step * index
        mats.append(basis_matrix(coords, grid.dims_cp[axis]))
    return mats


def separable_apply(bx, by, bz, coeffs) -> np.ndarray:
    """Dense field ``sum B_x B_y B_z c`` with shape ``(nx, ny, nz, 3)``."""
    t = np.tensordot(bx, coeffs, axes=(1, 0))
    t = np.tensordot(by, t, axes=(1, 1))
    t = np.tensordot(bz, t, axes=(1, 2))
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


def separable_adjoint(bx, by, bz, values) -> np.ndarray:
    """Transpose of :func:`separable_apply`: scatter voxel values onto the lattice."""
    t = np.tensordot(bz, values, axes=(0, 2))
    t = np.tensordot(by, t, axes=(0, 2))
    t = np.tensordot(bx, t, axes=(0, 2))
    return t


def evaluate_on_geometry(grid: ControlPointGrid, geometry: Geometry) -> np.ndarray:
    bx, by, bz = axis_matrices(grid, geometry)
    return separable_apply(bx, by, bz, grid.coefficients)


def _refine_axis(c: np.ndarray, n_new: int, axis: int) -> np.ndarray:
    c = np.moveaxis(c, axis, 0)
    # linear extrapolation pads lattice ends the fine grid may reach
    pad = 2
    lo = [c[0] - (k + 1) * (c[1] - c[0]) for k in range(pad)][::-1]
    hi = [c[-1] + (k + 1) * (c[-1] - c[-2]) for k in range(pad)]
    ext = np.concatenate([np.stack(lo), c, np.stack(hi)])
    out = np.empty((n_new,) + c.shape[1:])
    for j in range(n_new):
        # fine index j sits at old lattice coordinate (j + 1) / 2
        if j % 2:
            i = (j + 1) // 2 + pad
            out[j] = (ext[i - 1] + 6.0 * ext[i] + ext[i + 1]) / 8.0
        else:
            i = j // 2 + pad
            out[j] = (ext[i] + ext[i + 1]) / 2.0
    return np.moveaxis(out, 0, axis)


def refine(grid: ControlPointGrid, geometry: Geometry) -> ControlPointGrid:
    """Halve the control spacing without changing the represented field."""
    target = grid_for_geometry(geometry, grid.spacing_cp[0] / 2.0)
    expected = grid.origin_cp + grid.direction @ (grid.spacing_cp / 2.0)
    if np.abs(expected - target.origin_cp).max() > 1e-9:
        raise GeometryMismatch("lattice was not built for this geometry")
    c = grid.coefficients
    for axis in range(3):
        c = _refine_axis(c, target.dims_cp[axis], axis)
    return target.with_coefficients(c)


def _second_difference_ops(shape):
    """Yield ``(weight, slices)`` stencils of the discrete Hessian entries."""
    ops = []
    for a in range(3):
        if shape[a] < 3:
            continue
        terms = []
        for off, coef in ((2, 1.0), (1, -2.0), (0, 1.0)):
            sl = [slice(None)] * 3
            sl[a] = slice(off, shape[a] - 2 + off)
            terms.append((coef, tuple(sl)))
        ops.append((1.0, terms))
    for a in range(3):
        for b in range(a + 1, 3):
            if shape[a] < 3 or shape[b] < 3:
                continue
            terms = []
            for oa, ob, coef in ((2, 2, 0.25), (2, 0, -0.25), (0, 2, -0.25), (0, 0, 0.25)):
                sl = [slice(None)] * 3
                sl[a] = slice(oa, shape[a] - 2 + oa)
                sl[b] = slice(ob, shape[b] - 2 + ob)
                terms.append((coef, tuple(sl)))
            ops.append((2.0, terms))
    return ops


def bending_energy(grid: ControlPointGrid):
    """Bending energy of the lattice and its gradient.

    Second differences of the coefficients in lattice-index units (so the
    value is in mm^2), summed over the full Hessian and divided by the number
    of control points.  Returns ``(energy, gradient)`` with the gradient
    shaped like ``grid.coefficients``.
    """
    c = grid.coefficients
    shape = c.shape[:3]
    n = float(np.prod(shape))
    energy = 0.0
    grad = np.zeros_like(c)
    for weight, terms in _second_difference_ops(shape):
        diff = sum(coef * c[sl] for coef, sl in terms)
        energy += weight * float(np.sum(diff * diff))
        for coef, sl in terms:
            grad[sl] += (2.0 * weight * coef) * diff
    return energy / n, grad / n

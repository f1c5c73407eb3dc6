"""Similarity metrics and their parameter gradients.

All reductions run over slabs of the fixed grid (along the first voxel
axis).  Slabs may be computed by a thread pool, but partial sums are always
combined in slab order, so results do not depend on the worker count.
"""
from __future__ import annotations

import enum
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import EmptyOverlap, ZeroVarianceWarning
from ..grid_ops import trilinear
from ..volume_io import ImageVolume
from .bspline import ControlPointGrid, axis_matrices, separable_adjoint, separable_apply

SLAB = 8


class Metric(enum.Enum):
    SSD = "ssd"
    NCC = "ncc"


@dataclass(frozen=True)
class AffineParams:
    """World-frame affine map ``x -> linear @ x + translation``."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.array(self.linear, dtype=float).reshape(3, 3)
        tr = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(tr))):
            raise ValueError("affine parameters must be finite")
        if np.linalg.det(lin) <= 0:
            raise ValueError("affine linear part must preserve orientation")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.linear.T + self.translation


@dataclass(frozen=True)
class Transform:
    """Total map ``T(x) = A x + t + s(x)``; ``grid`` may be None for a pure affine."""

    affine: AffineParams
    grid: Optional[ControlPointGrid] = None


def sample_offsets(dims, jitter: float, seed: int):
    """Per-axis sub-voxel offsets; the end samples point inward."""
    if not 0 <= jitter <= 0.5:
        raise ValueError("jitter must lie in [0, 0.5] voxels")
    rng = np.random.default_rng(seed)
    out = []
    for n in dims:
        off = rng.uniform(-jitter, jitter, n)
        off[0] = abs(off[0])
        off[-1] = -abs(off[-1])
        out.append(off)
    return out


def _map(func, items, workers: int):
    if workers <= 1:
        return [func(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


class MetricProblem:
    """Metric evaluation between a fixed grid and a moving volume.

    The fixed grid and the control lattice must share a direction.  The
    same object serves affine and spline parameter gradients.

    With ``jitter > 0`` every sample is displaced by a seeded per-axis offset
    drawn from ``[-jitter, jitter]`` voxels, so both images are interpolated
    off their grids.  Sampling only the moving image between grid points
    blurs it relative to the fixed one and biases sub-voxel shifts toward
    zero.  Offsets depend on one index each, so the samples still form a
    rectilinear grid.
    """

    def __init__(self, fixed: ImageVolume, moving: ImageVolume, metric: Metric = Metric.NCC,
                 sample_mask: Optional[ImageVolume] = None, grid: Optional[ControlPointGrid] = None,
                 stride: int = 1, workers: int = 1, jitter: float = 0.0, seed: int = 0):
        self.fixed = fixed
        self.moving = moving
        self.metric = Metric(metric)
        self.workers = max(1, int(workers))
        geom = fixed.geometry
        self.offsets = None
        if jitter > 0:
            self.offsets = sample_offsets(geom.dims, jitter, seed)
            idx = np.stack(np.meshgrid(*[np.arange(n) + o for n, o in zip(geom.dims, self.offsets)],
                                       indexing="ij"), axis=-1)
            self.points = geom.voxel_to_world(idx)
            self.fvalues = trilinear(fixed.data, idx)[0]
        else:
            self.points = geom.world_grid()
            self.fvalues = fixed.data
        select = np.ones(geom.dims, dtype=bool)
        if sample_mask is not None:
            if sample_mask.dims != geom.dims:
                raise ValueError("sample mask must share the fixed grid")
            select &= sample_mask.data > 0
        if stride > 1:
            keep = np.zeros(geom.dims, dtype=bool)
            keep[::stride, ::stride, ::stride] = True
            select &= keep
        self.select = select
        self.slabs = [slice(i, min(i + SLAB, geom.dims[0])) for i in range(0, geom.dims[0], SLAB)]
        self.mats = None
        if grid is not None:
            self.mats = axis_matrices(grid, geom, self.offsets)
        mg = moving.geometry
        self._to_moving = mg.direction / mg.spacing  # rows: world -> index
        self._grad_to_world = mg.direction / mg.spacing  # index gradient -> world gradient

    # -- sampling ---------------------------------------------------------
    def _sample_slab(self, sl, transform: Transform):
        x = self.points[sl]
        y = transform.affine.apply(x)
        if transform.grid is not None:
            bx, by, bz = self.mats
            y = y + separable_apply(bx[sl], by, bz, transform.grid.coefficients)
        mg = self.moving.geometry
        idx = (y - mg.origin) @ self._to_moving
        values, inside, gidx = trilinear(self.moving.data, idx, 0.0, with_gradient=True)
        omega = inside & self.select[sl]
        gworld = gidx @ self._grad_to_world.T
        return x, values, omega, gworld

    def _sample(self, transform: Transform):
        return _map(lambda sl: self._sample_slab(sl, transform), self.slabs, self.workers)

    # -- metric -----------------------------------------------------------
    def value_and_voxel_gradient(self, transform: Transform):
        """Cost and per-voxel ``dC/dT(x)`` (world frame) for every slab."""
        parts = self._sample(transform)
        fdata = self.fvalues
        stats = []
        for sl, (_, m, omega, _) in zip(self.slabs, parts):
            f = fdata[sl][omega]
            mv = m[omega]
            stats.append((f.size, f.sum(), mv.sum(), (f * f).sum(), (mv * mv).sum(),
                          (f * mv).sum(), ((f - mv) ** 2).sum()))
        n, sf, sm, sff, smm, sfm, sdd = (float(sum(s[k] for s in stats)) for k in range(7))
        if n == 0:
            raise EmptyOverlap("no fixed sample maps inside the moving field of view")
        if self.metric is Metric.SSD:
            cost = sdd / n

            def dcost(f, m):
                return 2.0 * (m - f) / n
        else:
            if n < 8:
                raise EmptyOverlap(f"NCC needs at least 8 overlapping samples, got {int(n)}")
            fbar, mbar = sf / n, sm / n
            var_f = sff - n * fbar * fbar
            var_m = smm - n * mbar * mbar
            cov = sfm - n * fbar * mbar
            tiny = 1e-12 * n
            if var_f <= tiny or var_m <= tiny:
                warnings.warn("zero intensity variance over the overlap; NCC cost set to 1",
                              ZeroVarianceWarning, stacklevel=3)
                cost = 1.0

                def dcost(f, m):
                    return np.zeros_like(m)
            else:
                denom = np.sqrt(var_f * var_m)
                rho = cov / denom
                cost = 1.0 - rho * rho

                def dcost(f, m):
                    return -2.0 * rho * ((f - fbar) / denom - rho * (m - mbar) / var_m)
        voxel_grads = []
        for sl, (x, m, omega, gworld) in zip(self.slabs, parts):
            scale = np.where(omega, dcost(fdata[sl], m), 0.0)
            voxel_grads.append((x, scale[..., None] * gworld))
        return float(cost), voxel_grads

    def value(self, transform: Transform) -> float:
        return self.value_and_voxel_gradient(transform)[0]

    def affine_gradient(self, transform: Transform, center=np.zeros(3)):
        """Cost, ``dC/dlinear`` and ``dC/dtranslation``.

        With ``center`` given, the linear gradient is taken for the map
        written as ``L (x - center) + t'``.
        """
        cost, voxel = self.value_and_voxel_gradient(transform)
        partial = _map(lambda xg: (
            np.tensordot(xg[1], xg[0] - center, axes=([0, 1, 2], [0, 1, 2])),
            xg[1].sum(axis=(0, 1, 2))), voxel, self.workers)
        g_lin = np.zeros((3, 3))
        g_t = np.zeros(3)
        for gl, gt in partial:
            g_lin += gl
            g_t += gt
        return cost, g_lin, g_t

    def grid_gradient(self, transform: Transform):
        """Cost and ``dC/dcoefficients`` for the control lattice."""
        cost, voxel = self.value_and_voxel_gradient(transform)
        bx, by, bz = self.mats
        partial = _map(lambda args: separable_adjoint(bx[args[0]], by, bz, args[1][1]),
                       list(zip(self.slabs, voxel)), self.workers)
        grad = np.zeros_like(transform.grid.coefficients)
        for p in partial:
            grad += p
        return cost, grad


def _metric_value(fixed, moving, transform, sample_mask, metric):
    if isinstance(transform, AffineParams):
        transform = Transform(transform)
    problem = MetricProblem(fixed, moving, metric, sample_mask, transform.grid)
    return problem.value(transform)


def ssd_metric(fixed: ImageVolume, moving: ImageVolume, transform, sample_mask=None) -> float:
    """Mean squared difference over in-mask fixed voxels mapped inside the moving FOV."""
    return _metric_value(fixed, moving, transform, sample_mask, Metric.SSD)


def ncc_metric(fixed: ImageVolume, moving: ImageVolume, transform, sample_mask=None) -> float:
    """``1 - rho^2`` with rho the correlation over the overlap."""
    return _metric_value(fixed, moving, transform, sample_mask, Metric.NCC)

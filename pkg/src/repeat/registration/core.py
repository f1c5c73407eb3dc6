"""Centre-of-mass, affine and multi-resolution B-spline registration.

Fixed is the inspiration phase, moving the expiration phase; every transform
maps fixed world coordinates into moving world coordinates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import List, NamedTuple, Optional

import numpy as np

from ..errors import DegenerateVolume, GeometryMismatch
from ..grid_ops import gaussian_smooth, resample_to_spacing
from ..volume_io import AIR_HU, DeformationField, Geometry, ImageVolume, Kind
from .bspline import ControlPointGrid, bending_energy, evaluate_on_geometry, grid_for_geometry, refine
from .metrics import AffineParams, Metric, MetricProblem, Transform
from .optimize import armijo_descent

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    cp_spacing_coarsest: float = 32.0
    metric: Metric = Metric.NCC
    bending_weight: float = 0.003
    max_iters_per_level: int = 100
    step_init: float = 1.0
    grad_tol: float = 1e-4
    smoothing_sigma: float = 2.0
    seed: int = 0
    sample_stride: int = 1
    optimizer: str = "lbfgs"
    # sub-voxel sample jitter (voxels), seeded by ``seed`` and the level
    sample_jitter: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.optimizer not in ("lbfgs", "gd"):
            raise ValueError("optimizer must be 'lbfgs' or 'gd'")
        if not 1 <= self.levels <= 5:
            raise ValueError("levels must be between 1 and 5")
        for name in ("cp_spacing_coarsest", "step_init", "grad_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("bending_weight", "smoothing_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.sample_jitter <= 0.5:
            raise ValueError("sample_jitter must lie in [0, 0.5]")
        if self.max_iters_per_level < 1 or self.sample_stride < 1:
            raise ValueError("max_iters_per_level and sample_stride must be >= 1")

    def level_sigma(self, level: int) -> float:
        """Gaussian sigma (mm) at ``level`` (1 = coarsest); the finest level is unsmoothed."""
        return self.smoothing_sigma * (self.levels - level)

    def level_factor(self, level: int) -> int:
        return 2 ** (self.levels - level)

    def level_cp_spacing(self, level: int) -> float:
        return self.cp_spacing_coarsest / 2 ** (level - 1)


class CostRecord(NamedTuple):
    stage: str
    level: int
    iteration: int
    metric: float
    bending: float


@dataclass
class RegistrationResult:
    affine: AffineParams
    grid: ControlPointGrid
    field: DeformationField
    cost_history: List[CostRecord]
    converged: List[bool]
    config: RegistrationConfig = field(default_factory=RegistrationConfig)

    def transform(self) -> Transform:
        return Transform(self.affine, self.grid)


def _weights(vol: ImageVolume) -> np.ndarray:
    return np.clip(vol.data - AIR_HU, 0.0, None)


def _centroid(vol: ImageVolume) -> np.ndarray:
    w = _weights(vol)
    total = float(w.sum())
    if total <= 0:
        raise DegenerateVolume("volume has zero total weight above air")
    pts = vol.geometry.world_grid()
    return np.tensordot(w, pts, axes=([0, 1, 2], [0, 1, 2])) / total


def center_of_mass_init(fixed: ImageVolume, moving: ImageVolume) -> AffineParams:
    """Translation aligning intensity centroids, weights ``HU + 1024`` (clipped at 0)."""
    if fixed.is_mask or moving.is_mask:
        raise DegenerateVolume("centre-of-mass initialization needs intensity volumes")
    return AffineParams(np.eye(3), _centroid(moving) - _centroid(fixed))


def _level_volume(vol: ImageVolume, sigma: float, factor: int) -> ImageVolume:
    if vol.is_mask:
        return resample_to_spacing(vol, vol.spacing * factor)
    return resample_to_spacing(gaussian_smooth(vol, sigma), vol.spacing * factor)


class _Pyramid:
    def __init__(self, fixed, moving, sample_mask, config: RegistrationConfig):
        self.levels = {}
        for level in range(1, config.levels + 1):
            sigma = config.level_sigma(level)
            factor = config.level_factor(level)
            mask = None if sample_mask is None else _level_volume(sample_mask, 0.0, factor)
            self.levels[level] = (_level_volume(fixed, sigma, factor),
                                  _level_volume(moving, sigma, factor), mask)

    def __getitem__(self, level):
        return self.levels[level]


def _fov_center(geom: Geometry) -> np.ndarray:
    return geom.voxel_to_world((np.asarray(geom.dims) - 1) / 2.0)


def affine_register(fixed: ImageVolume, moving: ImageVolume, init: Optional[AffineParams] = None,
                    config: RegistrationConfig = RegistrationConfig(),
                    sample_mask: Optional[ImageVolume] = None, workers: int = 1,
                    levels=None, history: Optional[list] = None,
                    pyramid: Optional[_Pyramid] = None) -> AffineParams:
    """Optimize 12 affine parameters by Armijo descent over pyramid levels.

    By default every level except the finest is used (a single level when
    ``config.levels == 1``).  The linear part is optimized about the fixed
    FOV centre and scaled by the FOV half-extent so that one unit of every
    parameter moves tissue by about one millimetre.
    """
    init = AffineParams.identity() if init is None else init
    if levels is None:
        levels = range(1, max(1, config.levels - 1) + 1)
    pyramid = pyramid or _Pyramid(fixed, moving, sample_mask, config)
    center = _fov_center(fixed.geometry)
    radius = float(np.mean((np.asarray(fixed.dims) - 1) * fixed.spacing) / 2.0)
    lin = init.linear
    t_rel = init.translation + init.linear @ center - center
    for level in levels:
        f_l, m_l, mask_l = pyramid[level]
        problem = MetricProblem(f_l, m_l, config.metric, mask_l, stride=config.sample_stride,
                                workers=workers, jitter=config.sample_jitter,
                                seed=config.seed + level)

        def unpack(p):
            lin_ = np.eye(3) + p[:9].reshape(3, 3) / radius
            return lin_, p[9:]

        def fun(p):
            lin_, tr_ = unpack(p)
            if np.linalg.det(lin_) <= 0:
                return np.inf, np.zeros_like(p), (np.inf, 0.0)
            aff = AffineParams(lin_, center + tr_ - lin_ @ center)
            cost, g_lin, g_t = problem.affine_gradient(Transform(aff), center)
            return cost, np.concatenate([g_lin.ravel() / radius, g_t]), (cost, 0.0)

        p0 = np.concatenate([((lin - np.eye(3)) * radius).ravel(), t_rel])
        p, trace = armijo_descent(fun, p0, config.step_init, config.max_iters_per_level,
                                  config.grad_tol, method=config.optimizer)
        lin, t_rel = unpack(p)
        if history is not None:
            history.extend(CostRecord("affine", level, i, m, b)
                           for i, (m, b) in enumerate(trace.extras))
        log.info("affine level %d: cost %.6g -> %.6g in %d steps", level,
                 trace.costs[0], trace.costs[-1], len(trace.costs) - 1)
    return AffineParams(lin, center + t_rel - lin @ center)


def compose_to_dense(affine: AffineParams, grid: ControlPointGrid,
                     fixed_geometry: Geometry) -> DeformationField:
    """Dense displacement ``A x + t + s(x) - x`` at every fixed voxel."""
    x = fixed_geometry.world_grid()
    disp = affine.apply(x) + evaluate_on_geometry(grid, fixed_geometry) - x
    return DeformationField(fixed_geometry, disp)


def ffd_register(fixed: ImageVolume, moving: ImageVolume, affine: AffineParams,
                 config: RegistrationConfig = RegistrationConfig(),
                 sample_mask: Optional[ImageVolume] = None, workers: int = 1,
                 history: Optional[list] = None,
                 pyramid: Optional[_Pyramid] = None) -> RegistrationResult:
    """Multi-resolution cubic B-spline refinement on top of a fixed affine.

    Level 1 is the coarsest; the control spacing halves per level and the
    previous lattice is refined exactly before optimizing
    ``metric + bending_weight * bending``.
    """
    if fixed.kind is not Kind.INTENSITY or moving.kind is not Kind.INTENSITY:
        raise GeometryMismatch("registration needs intensity volumes")
    pyramid = pyramid or _Pyramid(fixed, moving, sample_mask, config)
    history = [] if history is None else history
    converged = []
    grid = None
    lam = config.bending_weight
    for level in range(1, config.levels + 1):
        f_l, m_l, mask_l = pyramid[level]
        if grid is None:
            grid = grid_for_geometry(fixed.geometry, config.level_cp_spacing(level))
        else:
            grid = refine(grid, fixed.geometry)
        problem = MetricProblem(f_l, m_l, config.metric, mask_l, grid,
                                stride=config.sample_stride, workers=workers,
                                jitter=config.sample_jitter, seed=config.seed + level)
        shape = grid.coefficients.shape
        template = grid

        def fun(c):
            g = template.with_coefficients(c.reshape(shape))
            cost, grad = problem.grid_gradient(Transform(affine, g))
            bend, bend_grad = bending_energy(g)
            total = cost + lam * bend
            return total, (grad + lam * bend_grad).ravel(), (cost, bend)

        c, trace = armijo_descent(fun, grid.coefficients.ravel(), config.step_init,
                                  config.max_iters_per_level, config.grad_tol,
                                  method=config.optimizer)
        grid = grid.with_coefficients(c.reshape(shape))
        history.extend(CostRecord("ffd", level, i, m, b) for i, (m, b) in enumerate(trace.extras))
        converged.append(trace.converged)
        log.info("ffd level %d (cp %.1f mm): cost %.6g -> %.6g in %d steps", level,
                 grid.spacing_cp[0], trace.costs[0], trace.costs[-1], len(trace.costs) - 1)
    dense = compose_to_dense(affine, grid, fixed.geometry)
    return RegistrationResult(affine, grid, dense, history, converged, config)


def register(fixed: ImageVolume, moving: ImageVolume,
             config: RegistrationConfig = RegistrationConfig(),
             sample_mask: Optional[ImageVolume] = None, workers: int = 1,
             init: Optional[AffineParams] = None) -> RegistrationResult:
    """Affine then FFD on windowed volumes; ``init`` defaults to identity."""
    pyramid = _Pyramid(fixed, moving, sample_mask, config)
    history: List[CostRecord] = []
    affine = affine_register(fixed, moving, init, config, sample_mask, workers,
                             history=history, pyramid=pyramid)
    return ffd_register(fixed, moving, affine, config, sample_mask, workers,
                        history=history, pyramid=pyramid)


def config_fields() -> List[str]:
    return [f.name for f in fields(RegistrationConfig)]

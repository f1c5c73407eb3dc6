"""Synthetic inspiration/expiration pairs with analytically known warps.

The torso is an elliptic cylinder along z (superior = +z) holding an
ellipsoidal liver with a lung region above a domed diaphragm.  Every warp
has a closed-form map and Jacobian, so volume change and correspondence
are known exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import optimize

from .deformation import det3
from .errors import SpecInvalid, WarpNotInvertible
from .grid_ops import trilinear
from .volume_io import AIR_HU, Geometry, ImageVolume, Kind

INVERSE_TOL_MM = 1e-6
INVERSE_MAX_ITERS = 50


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (96, 96, 96)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    liver_axes: Tuple[float, float, float] = (45.0, 35.0, 30.0)
    liver_center: Tuple[float, float, float] = (-10.0, 0.0, -10.0)
    liver_hu: float = 90.0
    body_hu: float = 40.0
    lung_hu: float = -800.0
    background_hu: float = AIR_HU
    noise_sigma: float = 10.0
    seed: int = 0
    body_axes: Tuple[float, float] = (85.0, 70.0)
    diaphragm_z: float = 28.0
    dome_height: float = 12.0

    def geometry(self) -> Geometry:
        """World grid centred on the origin."""
        dims = np.asarray(self.dims)
        spacing = np.asarray(self.spacing, dtype=float)
        return Geometry(tuple(dims), spacing, -(dims - 1) / 2.0 * spacing)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise SpecInvalid(f"dims must be 3 values >= 2, got {self.dims}")
        if min(self.spacing) <= 0 or min(self.liver_axes) <= 0 or min(self.body_axes) <= 0:
            raise SpecInvalid("spacing and all semi-axes must be positive")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise sigma must be non-negative")
        # the liver surface must sit inside the body and below the lungs
        u = np.linspace(0, np.pi, 25)
        v = np.linspace(0, 2 * np.pi, 49)
        uu, vv = np.meshgrid(u, v)
        surf = np.stack([np.sin(uu) * np.cos(vv), np.sin(uu) * np.sin(vv), np.cos(uu)], -1)
        pts = surf * np.asarray(self.liver_axes) + np.asarray(self.liver_center)
        inside_body = _in_body(self, pts)
        if not np.all(inside_body) or np.any(_in_lung(self, pts)):
            raise SpecInvalid("liver ellipsoid must fit inside the body below the lungs")
        half = (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)
        if np.any(np.abs(pts) > half):
            raise SpecInvalid("liver ellipsoid leaves the field of view")


def _in_body(spec: PhantomSpec, pts) -> np.ndarray:
    ax, ay = spec.body_axes
    return (pts[..., 0] / ax) ** 2 + (pts[..., 1] / ay) ** 2 <= 1.0


def _in_lung(spec: PhantomSpec, pts) -> np.ndarray:
    ax, ay = spec.body_axes
    r2 = (pts[..., 0] / (0.85 * ax)) ** 2 + (pts[..., 1] / (0.85 * ay)) ** 2
    return (r2 <= 1.0) & (pts[..., 2] >= spec.diaphragm_z + spec.dome_height * r2)


def _in_liver(spec: PhantomSpec, pts) -> np.ndarray:
    rel = (pts - np.asarray(spec.liver_center)) / np.asarray(spec.liver_axes)
    return np.sum(rel * rel, axis=-1) <= 1.0


def render_tissue(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Noise-free HU of the phantom at world points."""
    out = np.full(pts.shape[:-1], float(spec.background_hu))
    out[_in_body(spec, pts)] = spec.body_hu
    out[_in_lung(spec, pts)] = spec.lung_hu
    out[_in_liver(spec, pts)] = spec.liver_hu
    return out


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> Tuple[ImageVolume, ImageVolume]:
    """Phantom CT and its exact liver indicator.

    Noise is drawn from a counter-based Philox stream keyed by ``seed``.
    """
    spec.validate()
    geom = spec.geometry()
    pts = geom.world_grid()
    data = render_tissue(spec, pts)
    if spec.noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(key=spec.seed))
        data = data + rng.normal(0.0, spec.noise_sigma, size=geom.dims)
    mask = _in_liver(spec, pts).astype(float)
    return (ImageVolume(geom, data, Kind.INTENSITY, spec.background_hu),
            ImageVolume(geom, mask, Kind.MASK))


def ellipsoid_volume_mm3(axes) -> float:
    a, b, c = axes
    return 4.0 / 3.0 * np.pi * a * b * c


# --------------------------------------------------------------------------
# analytic warps
# --------------------------------------------------------------------------

class AnalyticWarp:
    """Closed-form map ``x -> x + u(x)`` (world mm) with its Jacobian."""

    kind = "abstract"

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def map(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts + self.displacement(pts)

    def det(self, pts) -> np.ndarray:
        return det3(self.jacobian(np.asarray(pts, dtype=float)))

    def inverse(self, pts) -> np.ndarray:
        """Solve ``x + u(x) = y`` by fixed-point iteration."""
        y = np.asarray(pts, dtype=float)
        x = y.copy()
        for _ in range(INVERSE_MAX_ITERS):
            nxt = y - self.displacement(x)
            err = np.abs(nxt - x).max() if x.size else 0.0
            x = nxt
            if err < INVERSE_TOL_MM:
                return x
        raise WarpNotInvertible(
            f"{self.kind} inverse did not converge to {INVERSE_TOL_MM} mm in {INVERSE_MAX_ITERS} iterations")

    def check_valid(self, geometry: Geometry, samples: int = 4096, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        idx = rng.uniform(0, np.asarray(geometry.dims) - 1, size=(samples, 3))
        d = self.det(geometry.voxel_to_world(idx))
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise SpecInvalid(f"{self.kind} warp folds inside the phantom domain")


@dataclass(frozen=True)
class Translation(AnalyticWarp):
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind = "translation"

    def displacement(self, pts):
        return np.broadcast_to(np.asarray(self.offset, dtype=float), pts.shape).copy()

    def jacobian(self, pts):
        return np.broadcast_to(np.eye(3), pts.shape[:-1] + (3, 3)).copy()

    def det(self, pts):
        return np.ones(np.shape(pts)[:-1])

    def params(self):
        return {"offset": list(map(float, self.offset))}


@dataclass(frozen=True)
class UniformScale(AnalyticWarp):
    factor: float = 1.0
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind = "scale"

    def displacement(self, pts):
        return (self.factor - 1.0) * (pts - np.asarray(self.center, dtype=float))

    def jacobian(self, pts):
        return np.broadcast_to(self.factor * np.eye(3), pts.shape[:-1] + (3, 3)).copy()

    def det(self, pts):
        return np.full(np.shape(pts)[:-1], float(self.factor) ** 3)

    def params(self):
        return {"factor": float(self.factor), "center": list(map(float, self.center))}


@dataclass(frozen=True)
class Polynomial(AnalyticWarp):
    """``u_a = sum_b Q[a, b] (x_b - c_b)^2``; ``dT_a/dx_b = delta_ab + 2 Q[a, b] (x_b - c_b)``."""

    coefficients: Tuple[Tuple[float, ...], ...] = ((0.0,) * 3,) * 3
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind = "poly"

    def _q(self):
        return np.asarray(self.coefficients, dtype=float).reshape(3, 3)

    def displacement(self, pts):
        rel = pts - np.asarray(self.center, dtype=float)
        return (rel * rel) @ self._q().T

    def jacobian(self, pts):
        rel = pts - np.asarray(self.center, dtype=float)
        jac = 2.0 * self._q() * rel[..., None, :]
        return jac + np.eye(3)

    def params(self):
        return {"coefficients": self._q().tolist(), "center": list(map(float, self.center))}


@dataclass(frozen=True)
class Respiratory(AnalyticWarp):
    """Cranio-caudal push with mild anterior-posterior compression.

    With ``s(z) = 1 / (1 + exp(-(z - z0) / width))``::

        x' = x
        y' = y0 + (y - y0) (1 - compression s(z))
        z' = z + amplitude s(z)

    The Jacobian is upper triangular, so
    ``det = (1 - compression s) (1 + amplitude s (1 - s) / width)``.
    """

    amplitude: float = 10.0
    compression: float = 0.02
    width: float = 60.0
    z0: float = -10.0
    y0: float = 0.0
    kind = "respiratory"

    def _s(self, z):
        return 1.0 / (1.0 + np.exp(-(z - self.z0) / self.width))

    def displacement(self, pts):
        s = self._s(pts[..., 2])
        u = np.zeros(pts.shape)
        u[..., 1] = -(pts[..., 1] - self.y0) * self.compression * s
        u[..., 2] = self.amplitude * s
        return u

    def jacobian(self, pts):
        s = self._s(pts[..., 2])
        ds = s * (1.0 - s) / self.width
        jac = np.zeros(pts.shape[:-1] + (3, 3))
        jac[..., 0, 0] = 1.0
        jac[..., 1, 1] = 1.0 - self.compression * s
        jac[..., 1, 2] = -(pts[..., 1] - self.y0) * self.compression * ds
        jac[..., 2, 2] = 1.0 + self.amplitude * ds
        return jac

    def det(self, pts):
        pts = np.asarray(pts, dtype=float)
        s = self._s(pts[..., 2])
        return (1.0 - self.compression * s) * (1.0 + self.amplitude * s * (1.0 - s) / self.width)

    def params(self):
        return {"amplitude": self.amplitude, "compression": self.compression,
                "width": self.width, "z0": self.z0, "y0": self.y0}


def warp_analytic(warp: AnalyticWarp, point) -> Tuple[np.ndarray, float]:
    point = np.asarray(point, dtype=float)
    return warp.map(point), float(warp.det(point))


# --------------------------------------------------------------------------
# pairs and ground truth
# --------------------------------------------------------------------------

def _subvoxel_offsets(n: int) -> np.ndarray:
    """``n^3`` regular sample offsets (voxel units) inside one voxel."""
    o = (np.arange(n) + 0.5) / n - 0.5
    return np.stack(np.meshgrid(o, o, o, indexing="ij"), -1).reshape(-1, 3)


def ground_truth_volume_change(mask: ImageVolume, warp: AnalyticWarp,
                               supersample: int = 4, chunk: int = 4096) -> float:
    """Percent volume change of the voxelized mask under ``warp``.

    Integrates the closed-form ``det J`` at ``supersample^3`` regular points
    inside every mask voxel.
    """
    idx = np.argwhere(mask.data > 0).astype(float)
    if idx.size == 0:
        raise SpecInvalid("mask is empty")
    offsets = _subvoxel_offsets(supersample)
    total = 0.0
    for start in range(0, len(idx), chunk):
        pts = (idx[start:start + chunk, None, :] + offsets[None]).reshape(-1, 3)
        total += float(np.sum(warp.det(mask.geometry.voxel_to_world(pts))))
    mean = total / (len(idx) * len(offsets))
    return 100.0 * (mean - 1.0)


def counted_mapped_volume_ml(mask: ImageVolume, warp: AnalyticWarp, upsample: int = 4,
                             seed: int = 0) -> float:
    """Volume of the warped mask by counting moving-space samples on a fine grid.

    Independent of any Jacobian: each fine cell holds one sample ``y``
    (stratified, uniformly placed inside the cell) that counts when the
    voxel containing ``warp^-1(y)`` belongs to the mask.  A regular sample
    lattice would alias against the voxel staircase; stratified samples
    keep the count unbiased.
    """
    geom = mask.geometry
    idx = np.argwhere(mask.data > 0)
    corners = np.array([[i, j, k] for i in (-0.5, 0.5) for j in (-0.5, 0.5) for k in (-0.5, 0.5)])
    lo_i = idx.min(0) + corners.min(0)
    hi_i = idx.max(0) + corners.max(0)
    box = np.array([[a, b, c] for a in (lo_i[0], hi_i[0]) for b in (lo_i[1], hi_i[1])
                    for c in (lo_i[2], hi_i[2])])
    # warps here are monotone per axis, so a padded box of the mapped corners bounds the image
    mapped = geom.world_to_voxel(warp.map(geom.voxel_to_world(box)))
    pad = 2.0
    lo = np.floor(mapped.min(0) - pad)
    hi = np.ceil(mapped.max(0) + pad)
    step = 1.0 / upsample
    axes = [np.arange(lo[a] + step / 2, hi[a], step) for a in range(3)]
    rng = np.random.default_rng(seed)
    count = 0
    data = mask.data
    for x in axes[0]:
        plane = np.stack(np.meshgrid([x], axes[1], axes[2], indexing="ij"), -1).reshape(-1, 3)
        plane = plane + rng.uniform(-step / 2, step / 2, plane.shape)
        src = geom.world_to_voxel(warp.inverse(geom.voxel_to_world(plane)))
        vals, _ = _nearest_mask(data, src)
        count += int(np.count_nonzero(vals))
    return count * geom.voxel_volume_mm3 * step ** 3 / 1000.0


def _nearest_mask(data, idx):
    dims = np.array(data.shape)
    r = np.floor(idx + 0.5).astype(np.intp)
    inside = np.all((r >= 0) & (r < dims), axis=-1)
    r = np.clip(r, 0, dims - 1)
    return np.where(inside, data[r[:, 0], r[:, 1], r[:, 2]], 0.0), inside


def synthesize_pair(phantom: ImageVolume, mask: ImageVolume, warp: AnalyticWarp,
                    supersample: int = 4) -> Tuple[ImageVolume, ImageVolume, float]:
    """Return ``(fixed, moving, ground_truth_percent)``.

    ``moving(y) = phantom(warp^-1(y))`` (trilinear), so tissue at ``x`` in
    fixed appears at ``warp(x)`` in moving.  Source points beyond the grid
    take the nearest edge value: the torso continues past the scanned
    range like a real body instead of ending in an air slab, and the
    phantom is constant along z near both z faces and air at the x/y faces.
    """
    geom = phantom.geometry
    warp.check_valid(geom)
    src = geom.world_to_voxel(warp.inverse(geom.world_grid()))
    src = np.clip(src, 0.0, np.asarray(geom.dims) - 1.0)
    values, _ = trilinear(phantom.data, src)
    moving = ImageVolume(geom, values, Kind.INTENSITY, phantom.background)
    return phantom, moving, ground_truth_volume_change(mask, warp, supersample)


def respiratory_for_target(mask: ImageVolume, target_percent: float, compression: float = 0.02,
                           width: float = 60.0, z0: Optional[float] = None, y0: float = 0.0,
                           supersample: int = 4) -> Respiratory:
    """Respiratory warp whose amplitude gives ``target_percent`` on ``mask``.

    ``z0`` defaults to the mask centroid height.
    """
    if z0 is None:
        idx = np.argwhere(mask.data > 0).mean(axis=0)
        z0 = float(mask.geometry.voxel_to_world(idx)[2])

    def gap(amplitude):
        warp = Respiratory(amplitude, compression, width, z0, y0)
        return ground_truth_volume_change(mask, warp, supersample) - target_percent

    # det stays positive while amplitude > -4 width
    amplitude = optimize.brentq(gap, -3.5 * width, 10.0 * width, xtol=1e-10, rtol=1e-12)
    return Respiratory(float(amplitude), compression, width, z0, y0)

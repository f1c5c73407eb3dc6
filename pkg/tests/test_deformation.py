import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from repeat.deformation import (
    det3,
    displacement_stats,
    folding_fraction,
    jacobian_determinant_field,
    nearest_rank,
    spatial_jacobian,
)
from repeat.errors import EmptyMask, GeometryMismatch
from repeat.phantom import Polynomial, Respiratory, UniformScale
from repeat.volume_io import DeformationField, Geometry, ImageVolume, JacobianField, Kind

from conftest import box_mask

WARPS = {
    "respiratory": Respiratory(22.0, 0.02, 60.0, -10.0, 0.0),
    "steep_respiratory": Respiratory(40.0, 0.05, 20.0, -10.0, 0.0),
    "polynomial": Polynomial(((2e-4, 0, 0), (0, 1e-4, 0), (0, 0, 1.5e-4)), (-10.0, 0.0, -10.0)),
}


def _cube(spacing, extent=96.0):
    n = int(round(extent / spacing))
    return Geometry((n, n, n), (spacing,) * 3, (-(n - 1) / 2.0 * spacing - 10.0,) * 3)


def test_zero_field_is_exactly_one(oblique_geometry):
    jac = jacobian_determinant_field(DeformationField.zeros(oblique_geometry))
    assert np.array_equal(jac.det, np.ones(oblique_geometry.dims))


@pytest.mark.parametrize("seed", range(4))
def test_affine_field_det_everywhere(oblique_geometry, seed):
    rng = np.random.default_rng(seed)
    lin = np.eye(3) + rng.normal(0, 0.15, (3, 3))
    x = oblique_geometry.world_grid()
    field = DeformationField(oblique_geometry, x @ lin.T + rng.normal(0, 5, 3) - x)
    jac = spatial_jacobian(field)
    assert np.abs(jac - lin).max() < 1e-9
    assert np.abs(jacobian_determinant_field(field).det - np.linalg.det(lin)).max() < 1e-9


@pytest.mark.parametrize("name", sorted(WARPS))
def test_analytic_warp_error_and_convergence(name):
    warp = WARPS[name]
    errors = []
    for spacing in (2.0, 1.0):
        geom = _cube(spacing)
        x = geom.world_grid()
        det = jacobian_determinant_field(DeformationField(geom, warp.displacement(x))).det
        errors.append(np.abs(det - warp.det(x)).max())
    assert errors[0] < 0.01
    assert errors[1] <= 0.55 * errors[0]


def test_scale_field_det():
    geom = _cube(2.0, 40.0)
    warp = UniformScale(1.05, (3.0, -2.0, 1.0))
    det = jacobian_determinant_field(DeformationField(geom, warp.displacement(geom.world_grid()))).det
    assert np.abs(det - 1.05 ** 3).max() < 1e-12


@given(arrays(np.float64, (5, 3, 3), elements=st.floats(-10, 10)))
def test_det3_matches_numpy(m):
    assert np.allclose(det3(m), np.linalg.det(m), atol=1e-9 * max(1.0, np.abs(m).max() ** 3))


def test_folding_fraction():
    geom = Geometry((4, 4, 4), (1, 1, 1), (0, 0, 0))
    det = np.ones(geom.dims)
    det[0, 0, :] = [-1.0, 0.0, 0.5, 2.0]
    mask = box_mask((4, 4, 4), (0, 0, 0), (2, 2, 4))
    assert folding_fraction(JacobianField(geom, det), mask) == 2 / 16
    with pytest.raises(EmptyMask):
        folding_fraction(JacobianField(geom, det), box_mask((4, 4, 4), (0, 0, 0), (0, 0, 0)))
    shifted = ImageVolume(geom.with_(origin=(5.0, 0, 0)), mask.data, Kind.MASK)
    with pytest.raises(GeometryMismatch):
        folding_fraction(JacobianField(geom, det), shifted)


def test_nearest_rank():
    values = np.arange(1.0, 101.0)
    assert nearest_rank(values, 99.0) == 99.0
    assert nearest_rank(values, 100.0) == 100.0
    assert nearest_rank(values, 0.0) == 1.0
    assert nearest_rank(np.array([3.0, 1.0, 2.0]), 50.0) == 2.0


def test_displacement_stats():
    geom = Geometry((8, 8, 8), (1, 1, 1), (0, 0, 0))
    disp = np.zeros(geom.dims + (3,))
    disp[..., 0] = 3.0
    disp[..., 1] = 4.0
    disp[0, 0, 0] = (0.0, 0.0, 10.0)
    stats = displacement_stats(DeformationField(geom, disp), box_mask((8, 8, 8), (0, 0, 0), (8, 8, 8)))
    assert stats.max_mag == 10.0
    # nearest rank ceil(0.99 * 512) = 507 lies below the single outlier
    assert stats.p99_mag == 5.0
    assert np.isclose(stats.mean_mag, (511 * 5.0 + 10.0) / 512)
    assert np.allclose(stats.axis_mean, [3.0 * 511 / 512, 4.0 * 511 / 512, 10.0 / 512])

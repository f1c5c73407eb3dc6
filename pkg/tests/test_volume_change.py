import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from repeat.errors import EmptyRegion, FoldingExceeded, GeometryMismatch
from repeat.volume_change import fov_valid_mask, mean_jacobian, measure_partial_volume_change
from repeat.volume_io import DeformationField, Geometry, ImageVolume, JacobianField, Kind

from conftest import box_mask

GEOM = Geometry((6, 6, 6), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))


def _all_valid():
    return ImageVolume(GEOM, np.ones(GEOM.dims), Kind.MASK)


def _liver():
    return box_mask((6, 6, 6), (1, 1, 1), (5, 5, 5), spacing=(2.0, 2.0, 2.0))


def test_constant_expansion():
    jac = JacobianField(GEOM, np.full(GEOM.dims, 1.1))
    rep = measure_partial_volume_change(_liver(), jac, _all_valid(), config_digest="abc")
    assert rep.n_voxels == 64
    assert np.isclose(rep.voxel_volume_ml, 0.008)
    assert np.isclose(rep.v_fixed_ml, 64 * 0.008)
    assert np.isclose(rep.v_mapped_ml, 1.1 * 64 * 0.008)
    assert np.isclose(rep.delta_percent, 10.0)
    assert rep.coverage_fraction == 1.0 and rep.folding_fraction == 0.0
    assert rep.config_digest == "abc"
    assert (rep.fixed_phase, rep.moving_phase) == ("inspiration", "expiration")


def test_partial_coverage_counts_only_valid_voxels():
    det = np.ones(GEOM.dims)
    det[:, :, 3:] = 1.5
    valid = box_mask((6, 6, 6), (0, 0, 0), (6, 6, 3), spacing=(2.0, 2.0, 2.0))
    rep = measure_partial_volume_change(_liver(), JacobianField(GEOM, det), valid)
    assert rep.n_voxels == 32 and rep.coverage_fraction == 0.5
    assert rep.delta_percent == 0.0
    assert mean_jacobian(_liver(), JacobianField(GEOM, det), _all_valid()) == 1.25


def test_folding_limit():
    det = np.ones(GEOM.dims)
    det[1, 1, 1] = -0.5
    jac = JacobianField(GEOM, det)
    rep = measure_partial_volume_change(_liver(), jac, _all_valid(), max_folding=0.02)
    assert rep.folding_fraction == 1 / 64
    with pytest.raises(FoldingExceeded) as info:
        measure_partial_volume_change(_liver(), jac, _all_valid(), max_folding=0.01)
    assert info.value.exit_code == 3


def test_empty_region_and_grid_mismatch():
    jac = JacobianField(GEOM, np.ones(GEOM.dims))
    none_valid = ImageVolume(GEOM, np.zeros(GEOM.dims), Kind.MASK)
    with pytest.raises(EmptyRegion):
        measure_partial_volume_change(_liver(), jac, none_valid)
    other = JacobianField(GEOM.with_(spacing=(1.0, 1.0, 1.0)), np.ones(GEOM.dims))
    with pytest.raises(GeometryMismatch):
        measure_partial_volume_change(_liver(), other, _all_valid())


def test_fov_valid_mask_translation():
    disp = np.zeros(GEOM.dims + (3,))
    disp[..., 0] = 4.0  # two voxels toward +x
    valid = fov_valid_mask(DeformationField(GEOM, disp), GEOM, margin=1.0)
    # mapped index i + 2 must lie in [1, 4]
    expect = np.zeros(GEOM.dims)
    expect[0:3, 1:5, 1:5] = 1
    assert np.array_equal(valid.data, expect)
    assert valid.is_mask
    with pytest.raises(ValueError):
        fov_valid_mask(DeformationField(GEOM, disp), GEOM, margin=-1.0)


@given(arrays(np.float64, (6, 6, 6), elements=st.floats(0.05, 3.0)),
       arrays(np.bool_, (6, 6, 6)))
def test_delta_is_mean_det_minus_one(det, valid):
    valid[2, 2, 2] = True
    vmask = ImageVolume(GEOM, valid.astype(float), Kind.MASK)
    rep = measure_partial_volume_change(_liver(), JacobianField(GEOM, det), vmask)
    region = (_liver().data > 0) & valid
    assert np.isclose(rep.delta_percent, 100.0 * (det[region].mean() - 1.0), rtol=1e-9, atol=1e-9)
    assert rep.n_voxels == region.sum()
    assert 0 < rep.coverage_fraction <= 1

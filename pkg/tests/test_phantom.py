import numpy as np
import pytest
from hypothesis import given, strategies as st

from repeat.errors import SpecInvalid, WarpNotInvertible
from repeat.phantom import (
    PhantomSpec,
    Polynomial,
    Respiratory,
    Translation,
    UniformScale,
    counted_mapped_volume_ml,
    ellipsoid_volume_mm3,
    generate_phantom,
    ground_truth_volume_change,
    respiratory_for_target,
    synthesize_pair,
    warp_analytic,
)

WARPS = [
    Translation((5.0, 0.0, 0.0)),
    UniformScale(1.05, (-10.0, 0.0, -10.0)),
    Polynomial(((2e-4, 0, 1e-4), (0, 1e-4, 0), (-1e-4, 0, 1.5e-4)), (-10.0, 0.0, -10.0)),
    Respiratory(10.0, 0.02, 60.0, -10.0, 0.0),
    Respiratory(10.0, 0.05, 60.0, -10.0, 5.0),
]

# stratified counting oracle (4x, seed 0) on the default phantom mask
COUNTED_A10_C05 = 1.5093365
COUNTED_TARGET8 = 8.0088251


def _fd_jacobian(warp, pts, h=1e-4):
    jac = np.empty(pts.shape[:-1] + (3, 3))
    for b in range(3):
        e = np.zeros(3)
        e[b] = h
        jac[..., :, b] = (warp.map(pts + e) - warp.map(pts - e)) / (2 * h)
    return jac


@pytest.mark.parametrize("warp", WARPS, ids=lambda w: w.kind)
def test_closed_form_det_matches_finite_differences(warp):
    geom = PhantomSpec().geometry()
    rng = np.random.default_rng(7)
    pts = geom.voxel_to_world(rng.uniform(0, 95, (1000, 3)))
    fd = _fd_jacobian(warp, pts)
    assert np.allclose(warp.jacobian(pts), fd, atol=1e-7)
    det_fd = np.linalg.det(fd)
    assert np.max(np.abs(warp.det(pts) - det_fd) / np.abs(det_fd)) < 1e-5


@pytest.mark.parametrize("warp", WARPS, ids=lambda w: w.kind)
def test_inverse_roundtrip(warp):
    rng = np.random.default_rng(3)
    y = rng.uniform(-90, 90, (200, 3))
    assert np.abs(warp.map(warp.inverse(y)) - y).max() < 1e-5


def test_inverse_failure():
    with pytest.raises(WarpNotInvertible):
        UniformScale(3.0).inverse(np.array([[10.0, 0.0, 0.0]]))


def test_trivial_dets():
    assert np.all(Translation((5.0, 0, 0)).det(np.zeros((4, 3))) == 1.0)
    assert np.allclose(UniformScale(1.05).det(np.zeros((4, 3))), 1.157625)
    y, d = warp_analytic(Translation((5.0, 0, 0)), (1.0, 2.0, 3.0))
    assert np.array_equal(y, [6.0, 2.0, 3.0]) and d == 1.0


def test_generation_is_bit_deterministic():
    spec = PhantomSpec(dims=(32, 32, 32), spacing=(6.0, 6.0, 6.0))
    a, ma = generate_phantom(spec)
    b, mb = generate_phantom(spec)
    assert np.array_equal(a.data, b.data) and np.array_equal(ma.data, mb.data)
    c, _ = generate_phantom(PhantomSpec(dims=(32, 32, 32), spacing=(6.0, 6.0, 6.0), seed=1))
    assert not np.array_equal(a.data, c.data)


def test_phantom_tissue_classes(phantom96):
    vol, mask = phantom96
    clean, _ = generate_phantom(PhantomSpec(noise_sigma=0.0))
    assert set(np.unique(clean.data)) == {-1024.0, -800.0, 40.0, 90.0}
    assert np.all(clean.data[mask.data > 0] == 90.0)
    assert abs(np.std(vol.data - clean.data) - 10.0) < 0.1
    liver_ml = mask.data.sum() * mask.geometry.voxel_volume_mm3 / 1000.0
    assert abs(liver_ml / (ellipsoid_volume_mm3((45, 35, 30)) / 1000.0) - 1.0) < 0.01


def test_spec_validation():
    with pytest.raises(SpecInvalid):
        PhantomSpec(liver_axes=(90.0, 35.0, 30.0)).validate()
    with pytest.raises(SpecInvalid):
        PhantomSpec(noise_sigma=-1.0).validate()
    with pytest.raises(SpecInvalid):
        PhantomSpec(liver_center=(-10.0, 0.0, 20.0)).validate()


def test_folding_warp_rejected():
    spec = PhantomSpec(dims=(16, 16, 16), spacing=(12.0, 12.0, 12.0))
    phantom, mask = generate_phantom(spec)
    with pytest.raises(SpecInvalid):
        synthesize_pair(phantom, mask, Respiratory(-300.0, 0.0, 20.0, 0.0, 0.0))


def test_identity_pair_is_exact():
    phantom, mask = generate_phantom(PhantomSpec(noise_sigma=0.0))
    fixed, moving, truth = synthesize_pair(phantom, mask, Translation())
    assert np.abs(moving.data - fixed.data).max() < 1.0
    assert truth == 0.0


def test_integer_translation_shifts_voxels(phantom96):
    phantom, mask = phantom96
    _, moving, truth = synthesize_pair(phantom, mask, Translation((0.0, 0.0, 4.0)))
    # tissue at z appears at z + 4 mm = two voxels up
    assert np.allclose(moving.data[:, :, 2:], phantom.data[:, :, :-2], atol=1e-9)
    assert truth == 0.0


def test_scale_truth(phantom96):
    _, mask = phantom96
    truth = ground_truth_volume_change(mask, UniformScale(1.05, (-10.0, 0.0, -10.0)))
    assert abs(truth - 15.7625) < 1e-6


def test_supersampling_converged(phantom96, respiratory8):
    _, mask = phantom96
    for warp in (respiratory8, Respiratory(10.0, 0.05, 60.0, -10.0, 0.0)):
        assert abs(ground_truth_volume_change(mask, warp, 4)
                   - ground_truth_volume_change(mask, warp, 8)) < 0.05


def test_target_fixture(phantom96, respiratory8):
    _, mask = phantom96
    assert abs(ground_truth_volume_change(mask, respiratory8) - 8.0) < 1e-8
    assert respiratory8.z0 == pytest.approx(-10.0)


def _counted_percent(mask, warp):
    v_fixed = mask.data.sum() * mask.geometry.voxel_volume_mm3 / 1000.0
    return 100.0 * (counted_mapped_volume_ml(mask, warp, 4) / v_fixed - 1.0)


def test_truth_matches_counting_oracle(phantom96, respiratory8):
    _, mask = phantom96
    warp = Respiratory(10.0, 0.05, 60.0, -10.0, 0.0)
    counted = _counted_percent(mask, warp)
    assert counted == pytest.approx(COUNTED_A10_C05, abs=1e-6)
    assert abs(ground_truth_volume_change(mask, warp) - counted) < 0.3
    counted8 = _counted_percent(mask, respiratory8)
    assert counted8 == pytest.approx(COUNTED_TARGET8, abs=1e-6)
    assert abs(counted8 - 8.0) < 0.3


def test_counting_oracle_exact_for_translation(phantom96):
    _, mask = phantom96
    assert _counted_percent(mask, Translation()) == 0.0


@given(st.floats(0.9, 1.1))
def test_scale_truth_property(s):
    mask = generate_phantom(PhantomSpec(dims=(24, 24, 24), spacing=(8.0, 8.0, 8.0)))[1]
    assert abs(ground_truth_volume_change(mask, UniformScale(s, (3.0, 1.0, -2.0))) - 100 * (s ** 3 - 1)) < 1e-6


def test_respiratory_for_target_solves_other_targets(phantom96):
    _, mask = phantom96
    for target in (-4.0, 3.0):
        warp = respiratory_for_target(mask, target, compression=0.03)
        assert abs(ground_truth_volume_change(mask, warp) - target) < 1e-8

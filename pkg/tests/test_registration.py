import numpy as np
import pytest

from repeat.deformation import displacement_stats
from repeat.errors import DegenerateVolume
from repeat.grid_ops import gaussian_smooth, window_intensity
from repeat.phantom import PhantomSpec, Translation, UniformScale, generate_phantom, synthesize_pair
from repeat.registration import (
    AffineParams,
    RegistrationConfig,
    affine_register,
    center_of_mass_init,
    bspline_evaluate,
    compose_to_dense,
    grid_for_geometry,
    register,
)
from repeat.volume_io import Geometry

SPEC = PhantomSpec(dims=(48, 48, 48), spacing=(4.0, 4.0, 4.0))


@pytest.fixture(scope="module")
def small_phantom():
    return generate_phantom(SPEC)


def _windowed(vol):
    return window_intensity(gaussian_smooth(vol, 1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(levels=0)
    with pytest.raises(ValueError):
        RegistrationConfig(bending_weight=-1.0)
    with pytest.raises(ValueError):
        RegistrationConfig(optimizer="newton")
    with pytest.raises(ValueError):
        RegistrationConfig(sample_jitter=0.7)
    with pytest.raises(ValueError):
        RegistrationConfig(metric="mi")


def test_level_schedule():
    cfg = RegistrationConfig(levels=3, cp_spacing_coarsest=32.0, smoothing_sigma=2.0)
    assert [cfg.level_cp_spacing(lv) for lv in (1, 2, 3)] == [32.0, 16.0, 8.0]
    assert [cfg.level_factor(lv) for lv in (1, 2, 3)] == [4, 2, 1]
    assert [cfg.level_sigma(lv) for lv in (1, 2, 3)] == [4.0, 2.0, 0.0]


def test_center_of_mass_identity(small_phantom):
    phantom, _ = small_phantom
    init = center_of_mass_init(phantom, phantom)
    assert np.array_equal(init.translation, np.zeros(3))
    with pytest.raises(DegenerateVolume):
        center_of_mass_init(phantom.replace_data(np.full(phantom.dims, -1024.0)), phantom)


def test_center_of_mass_shift():
    # compact noise-free object: only the liver carries weight, so a shift keeps all mass in view
    spec = PhantomSpec(body_hu=-1024.0, lung_hu=-1024.0, noise_sigma=0.0)
    phantom, mask = generate_phantom(spec)
    fixed, moving, _ = synthesize_pair(phantom, mask, Translation((0.0, 0.0, 7.0)))
    init = center_of_mass_init(fixed, moving)
    assert np.allclose(init.linear, np.eye(3))
    assert np.allclose(init.translation, (0.0, 0.0, 7.0), atol=0.5)
    with pytest.raises(DegenerateVolume):
        center_of_mass_init(mask, moving)


def test_affine_recovers_translation(phantom96):
    phantom, mask = phantom96
    fixed, moving, _ = synthesize_pair(phantom, mask, Translation((3.0, -2.0, 5.0)))
    init = center_of_mass_init(fixed, moving)
    cost = []
    aff = affine_register(_windowed(fixed), _windowed(moving), init, RegistrationConfig(),
                          history=cost)
    assert np.allclose(aff.translation, (3.0, -2.0, 5.0), atol=0.5)
    assert abs(np.linalg.det(aff.linear) - 1.0) < 0.01
    assert cost[-1].metric <= cost[0].metric


def test_affine_recovers_scale(phantom96):
    phantom, mask = phantom96
    warp = UniformScale(1.05, PhantomSpec().liver_center)
    fixed, moving, _ = synthesize_pair(phantom, mask, warp)
    init = center_of_mass_init(fixed, moving)
    aff = affine_register(_windowed(fixed), _windowed(moving), init, RegistrationConfig())
    assert abs(np.linalg.det(aff.linear) / 1.05 ** 3 - 1.0) < 0.01


def test_affine_self_registration_ssd():
    spec = PhantomSpec(dims=(32, 32, 32), spacing=(6.0, 6.0, 6.0))
    img = _windowed(generate_phantom(spec)[0])
    aff = affine_register(img, img, None, RegistrationConfig(metric="ssd"))
    assert np.abs(aff.linear - np.eye(3)).max() < 1e-8
    assert np.abs(aff.translation).max() < 1e-8


def test_self_registration_is_still(small_phantom):
    phantom, mask = small_phantom
    img = _windowed(phantom)
    res = register(img, img, RegistrationConfig(levels=2, max_iters_per_level=30))
    assert displacement_stats(res.field, mask).p99_mag <= 0.1


def test_costs_monotone_per_level(small_phantom):
    phantom, mask = small_phantom
    fixed, moving, _ = synthesize_pair(phantom, mask, UniformScale(1.03, SPEC.liver_center))
    cfg = RegistrationConfig(levels=2, max_iters_per_level=25)
    res = register(_windowed(fixed), _windowed(moving), cfg)
    groups = {}
    for rec in res.cost_history:
        groups.setdefault((rec.stage, rec.level), []).append(rec)
    assert {k[0] for k in groups} == {"affine", "ffd"}
    for (stage, _), recs in groups.items():
        assert [r.iteration for r in recs] == list(range(len(recs)))
        total = np.array([r.metric + cfg.bending_weight * r.bending for r in recs])
        assert np.all(np.diff(total) <= 0), stage
    assert len(res.converged) == cfg.levels


def test_workers_do_not_change_result(small_phantom):
    phantom, mask = small_phantom
    fixed, moving, _ = synthesize_pair(phantom, mask, Translation((0.0, 2.0, 3.0)))
    cfg = RegistrationConfig(levels=2, max_iters_per_level=10)
    a = register(_windowed(fixed), _windowed(moving), cfg, workers=1)
    b = register(_windowed(fixed), _windowed(moving), cfg, workers=3)
    assert np.array_equal(a.field.displacements, b.field.displacements)


def test_compose_to_dense_affine_only():
    geom = SPEC.geometry()
    aff = AffineParams(np.diag([1.1, 1.0, 0.9]), (1.0, 2.0, 3.0))
    field = compose_to_dense(aff, grid_for_geometry(geom, 32.0), geom)
    x = geom.world_grid()
    assert np.allclose(field.displacements, aff.apply(x) - x, atol=1e-12)


def test_polynomial_warp_tre(phantom96):
    """Full pipeline on a quadratic warp whose largest displacement in the FOV is 10 mm."""
    from repeat.cli import run_pipeline
    from repeat.phantom import Polynomial

    phantom, mask = phantom96
    x = phantom.geometry.world_grid()
    q = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.5], [0.5, 0.0, 1.0]])
    center = PhantomSpec().liver_center
    unit = Polynomial(tuple(map(tuple, q)), center)
    q = q * 10.0 / np.linalg.norm(unit.displacement(x), axis=-1).max()
    warp = Polynomial(tuple(map(tuple, q)), center)
    assert np.isclose(np.linalg.norm(warp.displacement(x), axis=-1).max(), 10.0)
    fixed, moving, truth = synthesize_pair(phantom, mask, warp)
    result = run_pipeline(fixed, moving, mask)
    sel = result.mask.data > 0
    xs = x[sel]
    tre = np.linalg.norm(xs + result.registration.field.displacements[sel] - warp.map(xs), axis=1)
    assert tre.mean() < 2.0
    assert abs(result.report.delta_percent - truth) < 1.5


def test_compose_to_dense_matches_pointwise(rng):
    geom = Geometry((10, 9, 8), (3.0, 3.0, 3.0), (-12.0, 4.0, 7.0))
    grid = grid_for_geometry(geom, 12.0)
    grid = grid.with_coefficients(rng.normal(0, 2.0, grid.coefficients.shape))
    aff = AffineParams(np.eye(3) + rng.normal(0, 0.05, (3, 3)), rng.normal(0, 3, 3))
    field = compose_to_dense(aff, grid, geom)
    x = geom.world_grid()
    assert np.abs(field.displacements - (aff.apply(x) + bspline_evaluate(grid, x) - x)).max() < 1e-12
    shift = compose_to_dense(AffineParams(np.eye(3), (5.0, 0.0, 0.0)), grid_for_geometry(geom, 12.0), geom)
    assert np.array_equal(shift.displacements, np.broadcast_to([5.0, 0.0, 0.0], geom.dims + (3,)))

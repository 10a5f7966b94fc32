import numpy as np
import pytest

from spectral_dps import physics, projector
from spectral_dps.physics import PhysicsError, SpectralSinogram

from conftest import make, random_density


def test_air_scan(kind, small_geom):
    sys = make(kind, small_geom)
    ybar = physics.mean_measurement(np.zeros((2, 16, 16)), sys, small_geom)
    air = sys.air_scan()
    for c in range(2):
        active = sys.view_mask[c]
        assert np.allclose(ybar.counts[c, active], air[c], rtol=1e-12)
        assert not ybar.counts[c, ~active].any()


def test_doubling_density_reduces_counts(kind, small_geom, rng):
    sys = make(kind, small_geom)
    x = random_density(rng, 16, 0.1, 1.0)
    a = physics.mean_measurement(x, sys, small_geom)
    b = physics.mean_measurement(2 * x, sys, small_geom)
    act = a.ray_mask
    assert np.all(b.counts[act] <= a.counts[act])
    assert np.all(b.counts[act] > 0)


def test_monotone_in_every_pixel(kind, small_geom, rng):
    sys = make(kind, small_geom)
    x = random_density(rng, 16)
    base = physics.mean_measurement(x, sys, small_geom).counts
    for _ in range(4):
        bumped = x.copy()
        bumped[rng.integers(2), rng.integers(16), rng.integers(16)] += 0.5
        assert np.all(physics.mean_measurement(bumped, sys, small_geom).counts <= base + 1e-9)


def test_monoenergetic_beer_lambert(small_geom, rng):
    sys = make("monoenergetic", small_geom, mas_per_view=1.0, photons_per_mas=1e5)
    x = random_density(rng, 16)
    l = projector.project(x, small_geom)
    ybar = physics.mean_measurement(x, sys, small_geom).counts
    for c, kev in enumerate((60.0, 100.0)):
        e = int(np.searchsorted(physics.ENERGY_GRID, kev))
        qw, qc = sys.Q[0, e], sys.Q[1, e]
        v, d = 7, 11
        expect = 1e5 * np.exp(-qw * l[0, v, d] - qc * l[1, v, d])
        assert ybar[c, v, d] == pytest.approx(expect, rel=1e-12)


def test_poisson_mean_and_variance():
    counts = np.full((1, 100, 100), 1e6)
    mean = SpectralSinogram(counts, counts.copy(), np.ones((1, 100), bool))
    y = physics.sample_measurement(mean, 3).counts
    assert np.all(np.abs(y - 1e6) <= 5 * 1e3)
    assert np.array_equal(y, physics.sample_measurement(mean, 3).counts)
    low = SpectralSinogram(np.full((1, 100, 100), 100.0), np.full((1, 100, 100), 100.0),
                           np.ones((1, 100), bool))
    draws = physics.sample_measurement(low, 4).counts
    assert draws.var() == pytest.approx(100.0, rel=0.05)
    yl = physics.sample_measurement(low, 4)
    assert np.array_equal(yl.variance, np.maximum(yl.counts, 1.0))


def test_sample_rejects_bad_mean():
    bad = SpectralSinogram(np.zeros((1, 2, 3)), np.ones((1, 2, 3)), np.ones((1, 2), bool))
    with pytest.raises(PhysicsError):
        physics.sample_measurement(bad, 0)


def test_fidelity_examples(kind, small_geom, rng):
    sys = make(kind, small_geom)
    x = random_density(rng, 16)
    ybar = physics.mean_measurement(x, sys, small_geom)
    assert physics.data_fidelity(x, ybar, sys, small_geom) == 0.0
    c = 0 if sys.view_mask[0, 3] else 1
    y = SpectralSinogram(ybar.counts.copy(), ybar.variance.copy(), ybar.mask)
    y.counts[c, 3, 5] += np.sqrt(y.variance[c, 3, 5])
    assert physics.data_fidelity(x, y, sys, small_geom) == pytest.approx(1.0, rel=1e-9)
    assert not np.any(physics.data_fidelity_gradient(x, ybar, sys, small_geom))


def test_fidelity_matches_dense_evaluation(kind, rng):
    geom = projector.Geometry(image_size=8, n_views=12, n_det=12, det_pitch=0.8, pixel_size=0.8)
    sys = make(kind, geom)
    x = random_density(rng, 8)
    y = physics.sample_measurement(physics.mean_measurement(random_density(rng, 8), sys, geom), 1)
    A = projector.system_matrix(geom).toarray()
    total = 0.0
    for c in range(2):
        for r in range(geom.n_rays):
            v = r // geom.n_det
            if not sys.view_mask[c, v]:
                continue
            lw, lc = A[r] @ x[0].ravel(), A[r] @ x[1].ravel()
            yb = sum(sys.weights[c, e] * np.exp(-sys.Q[0, e] * lw - sys.Q[1, e] * lc)
                     for e in range(sys.energies.size))
            total += (yb - y.counts.reshape(2, -1)[c, r]) ** 2 / max(y.counts.reshape(2, -1)[c, r], 1.0)
    assert physics.data_fidelity(x, y, sys, geom) == pytest.approx(total, rel=1e-8)


@pytest.mark.parametrize("system", ["dual-kvp", "dual-layer", "monoenergetic"])
def test_gradient_finite_differences(system, small_geom, rng):
    sys = make(system, small_geom, mas_per_view=0.05, photons_per_mas=1e5)
    x = random_density(rng, 16, 0.2, 1.0)
    y = physics.sample_measurement(physics.mean_measurement(random_density(rng, 16, 0.2, 1.0),
                                                            sys, small_geom), 2)
    g = physics.data_fidelity_gradient(x, y, sys, small_geom)
    h = 1e-4
    for idx in [(0, 5, 7), (1, 8, 8), (0, 0, 3), (1, 12, 2), (0, 10, 14)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (physics.data_fidelity(xp, y, sys, small_geom) - physics.data_fidelity(xm, y, sys, small_geom)) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(g[idx]), 1e-3 * np.abs(g).max())


def test_gradient_zero_without_water_attenuation(small_geom, rng):
    sys = make("dual-kvp", small_geom)
    Q = sys.Q.copy()
    Q[0] = 0.0
    sys0 = sys.with_Q(Q)
    x = random_density(rng, 16)
    y = physics.sample_measurement(physics.mean_measurement(random_density(rng, 16), sys0, small_geom), 0)
    g = physics.data_fidelity_gradient(x, y, sys0, small_geom)
    assert not g[0].any() and np.abs(g[1]).max() > 0


def test_batched_fidelity(small_geom, rng):
    sys = make("dual-layer", small_geom)
    xs = np.stack([random_density(rng, 16) for _ in range(3)])
    y = physics.sample_measurement(physics.mean_measurement(xs[0], sys, small_geom), 0)
    vals, grads = physics.fidelity_and_gradient(xs, y, sys, small_geom)
    for k in range(3):
        v, g = physics.fidelity_and_gradient(xs[k], y, sys, small_geom)
        assert vals[k] == pytest.approx(v, rel=1e-12)
        assert np.allclose(grads[k], g, rtol=1e-10, atol=1e-12)


def test_channel_assignment(small_geom):
    kvp = make("dual-kvp", small_geom)
    assert np.all(kvp.view_mask.sum(axis=0) == 1)
    assert kvp.view_mask.sum() == small_geom.n_views
    assert kvp.view_mask[0, 0] and kvp.view_mask[1, 1]
    layer = make("dual-layer", small_geom)
    assert layer.view_mask.all() and layer.view_mask.sum() == 2 * small_geom.n_views


def test_dual_layer_bottom_is_harder():
    sys = physics.make_system("dual-layer", 4)
    top, bottom = sys.mean_energy()
    assert bottom > top


def test_attenuation_tables():
    for m in ("water", "calcium"):
        q = physics.mass_attenuation(m)
        assert np.all(q > 0)
    q = physics.mass_attenuation("water")
    assert np.all(np.diff(q[physics.ENERGY_GRID >= 20]) <= 0)
    s80, s120 = physics.source_spectrum(80), physics.source_spectrum(120)
    assert s120.sum() == pytest.approx(1e6, rel=1e-3)
    assert not s80[physics.ENERGY_GRID > 80].any()


def test_validation_errors(small_geom):
    with pytest.raises(PhysicsError):
        physics.make_system("triple", 4)
    sys = make("dual-kvp", small_geom)
    with pytest.raises(PhysicsError):
        physics.SpectralSystem("dual-kvp", sys.energies[:-1], sys.spectra, sys.response, sys.Q,
                               sys.gains, sys.view_mask)
    with pytest.raises(PhysicsError):
        physics.mean_measurement(np.zeros((2, 16, 16)), physics.make_system("dual-kvp", 10), small_geom)
    bad = SpectralSinogram(np.ones((2, 24, 24)), np.ones((2, 24, 24)), sys.view_mask)
    bad.variance[0, 0, 0] = 0.0
    with pytest.raises(PhysicsError):
        physics.data_fidelity(np.zeros((2, 16, 16)), bad, sys, small_geom)


def test_energy_weighting_flag(small_geom):
    a = make("dual-layer", small_geom)
    b = make("dual-layer", small_geom, energy_weighted=True)
    assert np.allclose(b.air_scan(), (a.weights * a.energies).sum(1))


@pytest.mark.parametrize("system", ["dual-kvp", "dual-layer", "monoenergetic"])
def test_system_text_round_trip(system, tmp_path, small_geom):
    sys = make(system, small_geom, gains=[1.0, 1.1])
    text = physics.system_to_text(sys, tmp_path)
    back = physics.system_from_text(text, tmp_path)
    assert back.kind == sys.kind
    for attr in ("spectra", "response", "Q", "gains", "view_mask"):
        assert np.allclose(getattr(back, attr), getattr(sys, attr), rtol=1e-15)
    assert np.allclose(physics.system_from_text(text).spectra, sys.spectra)

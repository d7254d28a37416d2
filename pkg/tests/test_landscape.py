import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from valleyshuttle.constants import CONSTANTS, PhysicalConstants
from valleyshuttle.errors import DegenerateSamples, InvalidConfig, OutOfBounds, ZeroVariance
from valleyshuttle.landscape import (LandscapeConfig, Path, ValleyLandscape, acf_model, autocorrelation,
                                     calibrate_correlation_kernel, find_low_evs_spots, fit_acf, fit_rice,
                                     generate_landscape, load_landscape, resonance_crossings, save_landscape)

from conftest import constant_landscape


def test_constants_values():
    assert CONSTANTS.mu_B == 57.8838
    assert CONSTANTS.hbar == 0.658212
    assert CONSTANTS.g0 == 2.0
    with pytest.raises(Exception):
        CONSTANTS.mu_B = 1.0


def test_constants_must_be_positive():
    with pytest.raises(ValueError):
        PhysicalConstants(mu_B=-1.0)


# -- synthesis ---------------------------------------------------------------


def test_device_landscape_is_rayleigh(device_landscape):
    # decorrelated subsample at spacing >= 3 a_dot along both axes
    step = int(math.ceil(3 * 17.3))
    samples = device_landscape.evs[::step, ::step].ravel()
    # pool several seeds to get a usable sample size
    pooled = [samples]
    for seed in range(1, 40):
        land = generate_landscape(LandscapeConfig(seed=seed))
        pooled.append(land.evs[::step, ::step].ravel())
    x = np.concatenate(pooled)
    assert stats.kstest(x, stats.rayleigh(scale=61.4).cdf).pvalue > 0.01


def test_zero_disorder_limit():
    land = generate_landscape(LandscapeConfig(rice_nu=100.0, rice_sigma=1e-9, seed=3))
    assert np.allclose(land.evs, 100.0, atol=1e-6)


def test_rayleigh_mean_over_long_trace():
    # oracle: mean of the Rice(0, sigma) pdf by numerical integration
    pdf = lambda e: stats.rice.pdf(e, 0.0, scale=61.4)
    mean_oracle = integrate.quad(lambda e: e * pdf(e), 0, np.inf)[0]
    assert mean_oracle == pytest.approx(61.4 * math.sqrt(math.pi / 2), rel=1e-6)
    land = generate_landscape(LandscapeConfig(extent_x=50 * 17.3, extent_y=36.0, seed=11))
    assert np.mean(land.row(0.0)) == pytest.approx(mean_oracle, rel=0.25)
    assert np.mean(land.evs) == pytest.approx(mean_oracle, rel=0.10)


def test_determinism_bit_exact():
    a = generate_landscape(LandscapeConfig(seed=5))
    b = generate_landscape(LandscapeConfig(seed=5))
    assert np.array_equal(a.delta, b.delta)
    assert np.array_equal(a.g_plus, b.g_plus)
    c = generate_landscape(LandscapeConfig(seed=6))
    assert not np.array_equal(a.delta, c.delta)


@pytest.mark.parametrize("cfg", [
    dict(grid_spacing=10.0),
    dict(rice_sigma=0.0),
    dict(extent_x=-1.0),
    dict(extent_x=40.0),
    dict(rice_nu=-1.0),
])
def test_invalid_configs(cfg):
    with pytest.raises(InvalidConfig):
        generate_landscape(LandscapeConfig(**cfg))


def test_memory_budget():
    with pytest.raises(InvalidConfig):
        generate_landscape(LandscapeConfig(extent_x=20000.0, extent_y=2000.0, max_cells=10_000))


def test_g_fields_rms():
    land = generate_landscape(LandscapeConfig(extent_x=2000.0, seed=9))
    assert np.std(land.g_plus) == pytest.approx(2.7e-4, rel=0.2)
    assert np.std(land.g_minus) == pytest.approx(2.7e-4, rel=0.2)


def test_save_load_round_trip(tmp_path, device_landscape):
    p = tmp_path / "land.csv"
    save_landscape(device_landscape, p)
    back = load_landscape(p)
    assert np.array_equal(back.delta, device_landscape.delta)
    assert np.array_equal(back.g_minus, device_landscape.g_minus)
    assert back.config == device_landscape.config


# -- kernel calibration ------------------------------------------------------


def test_kernel_calibration_round_trip():
    w = calibrate_correlation_kernel(17.3, 1.0)
    # Monte-Carlo oracle: average the measured dot size over independent maps
    a = np.mean([autocorrelation(generate_landscape(
        LandscapeConfig(extent_x=4000.0, seed=s, kernel_width=w)).evs, 1.0).fitted_a_dot
        for s in range(30, 42)])
    assert 16.4 <= a <= 18.2


def test_kernel_calibration_deterministic_and_scales():
    w1 = calibrate_correlation_kernel.__wrapped__(17.3, 1.0)
    w2 = calibrate_correlation_kernel.__wrapped__(17.3, 1.0)
    assert w1 == w2
    w_double = calibrate_correlation_kernel(34.6, 1.0)
    assert w_double == pytest.approx(2 * w1, rel=0.05)


def test_kernel_calibration_precondition():
    with pytest.raises(InvalidConfig):
        calibrate_correlation_kernel(2.0, 1.0)


# -- interpolation -----------------------------------------------------------


def test_evs_at_nodes_and_midpoints():
    x = np.arange(0.0, 10.0)
    y = np.array([0.0, 1.0])
    evs = np.tile(10.0 * (1 + (x == 4)), (2, 1))
    land = ValleyLandscape.from_evs(x, y, evs)
    assert land.evs_at(4.0, 0.0) == 20.0
    assert land.evs_at(3.5, 0.0) == pytest.approx(15.0)
    with pytest.raises(OutOfBounds):
        land.evs_at(20.0, 0.0)


@given(st.integers(0, 392), st.integers(0, 36))
def test_interpolation_exact_at_nodes(device_landscape, ix, iy):
    land = device_landscape
    assert land.evs_at(land.x[ix], land.y[iy]) == land.evs[iy, ix]


@given(st.floats(0, 392), st.floats(-18, 18))
def test_evs_non_negative(device_landscape, x, y):
    assert device_landscape.evs_at(x, y) >= 0


@given(st.floats(0, 1), st.integers(0, 390), st.integers(0, 36))
def test_interpolation_linear_along_rows(device_landscape, t, ix, iy):
    land = device_landscape
    xa, xb = land.x[ix], land.x[ix + 1]
    expected = (1 - t) * land.evs[iy, ix] + t * land.evs[iy, ix + 1]
    assert land.evs_at(xa + t * (xb - xa), land.y[iy]) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_low_minimum_is_common():
    # fraction of device-scale maps with a global minimum below 5 ueV
    mins = [generate_landscape(LandscapeConfig(seed=s)).evs.min() for s in range(100, 200)]
    frac = np.mean(np.array(mins) < 5.0)
    print(f"fraction of 392x36 nm maps with min E_VS < 5 ueV: {frac:.2f}")
    assert frac > 0.5
    assert np.median(mins) < 5.0


# -- Rice fits ---------------------------------------------------------------


def test_rice_fit_rayleigh_draws():
    x = stats.rice.rvs(0.0, scale=61.4, size=2800, random_state=np.random.default_rng(1))
    r = fit_rice(x)
    assert abs(r.nu - 0.0) <= 2 * r.nu_stderr + 1e-9
    assert abs(r.sigma - 61.4) <= 2 * r.sigma_stderr
    assert r.sigma > 0 and r.nu >= 0


def test_rice_fit_offset_draws():
    x = stats.rice.rvs(5.0, scale=10.0, size=10000, random_state=np.random.default_rng(2))
    r = fit_rice(x)
    assert abs(r.nu - 50.0) <= 2 * r.nu_stderr
    assert abs(r.sigma - 10.0) <= 2 * r.sigma_stderr


def test_rice_fit_degenerate():
    with pytest.raises(DegenerateSamples):
        fit_rice(np.full(200, 3.0))


def test_rice_fit_coverage():
    # stderr calibration: the 2-stderr interval on sigma covers the truth in most draws
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(40):
        r = fit_rice(stats.rice.rvs(2.0, scale=20.0, size=1000, random_state=rng))
        hits += abs(r.sigma - 20.0) <= 2 * r.sigma_stderr
    assert hits >= 34


# -- autocorrelation ---------------------------------------------------------


def test_acf_lag_zero_and_model_value():
    rng = np.random.default_rng(0)
    res = autocorrelation(rng.standard_normal(500).cumsum(), 1.0)
    assert res.acf_values[0] == pytest.approx(1.0, abs=1e-12)
    assert acf_model(17.3, 17.3) == pytest.approx(math.exp(-1 / (4 - math.pi)))
    assert acf_model(17.3, 17.3) == pytest.approx(0.3119, abs=5e-5)


def test_acf_recovers_a_dot_seven_rows(device_landscape):
    rows = np.array([device_landscape.row(y) for y in np.arange(-18, 19, 6)])
    assert autocorrelation(rows, 1.0).fitted_a_dot == pytest.approx(17.3, rel=0.25)
    long = generate_landscape(LandscapeConfig(extent_x=50 * 17.3, seed=4))
    rows = np.array([long.row(y) for y in np.arange(-18, 19, 6)])
    assert autocorrelation(rows, 1.0).fitted_a_dot == pytest.approx(17.3, rel=0.10)


def test_acf_zero_variance():
    with pytest.raises(ZeroVariance):
        autocorrelation(np.ones(100), 1.0)


def test_fit_acf_exact_model():
    lags = np.arange(60.0)
    a, resid, _ = fit_acf(lags, acf_model(lags, 12.0))
    assert a == pytest.approx(12.0, rel=1e-6)
    assert resid < 1e-8


def test_statistics_shift_invariant():
    land = generate_landscape(LandscapeConfig(extent_x=2000.0, seed=13))
    left = land.evs[:, :1000]
    right = land.evs[:, 1000:]
    a1 = autocorrelation(left, 1.0).fitted_a_dot
    a2 = autocorrelation(right, 1.0).fitted_a_dot
    assert a1 == pytest.approx(a2, rel=0.2)
    s1 = fit_rice(left.ravel()).sigma
    s2 = fit_rice(right.ravel()).sigma
    assert s1 == pytest.approx(s2, rel=0.2)


# -- path features -----------------------------------------------------------


def test_low_spots_constant_landscape():
    land = constant_landscape(50.0)
    assert find_low_evs_spots(land, Path.straight(0.0, 0, 400), 5.0) == []


def test_low_spot_v_dip():
    x = np.arange(0.0, 101.0)
    evs = 1.0 + 3.0 * np.abs(x - 50.0)
    land = ValleyLandscape.from_evs(x, np.array([-1.0, 0.0, 1.0]), np.tile(evs, (3, 1)))
    spots = find_low_evs_spots(land, Path.straight(0.0, 0, 100), 5.0)
    assert len(spots) == 1
    assert spots[0].x == 50.0 and spots[0].evs == 1.0
    assert spots[0].slope == pytest.approx(3.0, abs=0.1)


def test_low_spots_deterministic(device_landscape):
    p = Path.straight(-18.0, 0, 392)
    a = find_low_evs_spots(device_landscape, p, 5.0)
    b = find_low_evs_spots(generate_landscape(LandscapeConfig(seed=7)), p, 5.0)
    assert a == b


def test_low_spots_out_of_bounds(device_landscape):
    with pytest.raises(OutOfBounds):
        find_low_evs_spots(device_landscape, Path.straight(30.0, 0, 100), 5.0)


def test_crossings_above_max():
    land = generate_landscape(LandscapeConfig(seed=7))
    ez = CONSTANTS.zeeman(1.7)
    assert ez == pytest.approx(196.8, abs=0.05)
    row = land.row(0.0)
    if ez > row.max():
        assert resonance_crossings(land, Path.straight(0.0, 0, 392), 1.7) == []
    huge = CONSTANTS.zeeman(5.0)
    assert huge > land.evs.max()
    assert resonance_crossings(land, Path.straight(0.0, 0, 392), 5.0) == []


def test_crossing_on_linear_ramp():
    x = np.arange(0.0, 101.0)
    land = ValleyLandscape.from_evs(x, np.array([-1.0, 0.0, 1.0]), np.tile(x * 1.0, (3, 1)))
    B = 50.0 / (2 * CONSTANTS.mu_B)
    cr = resonance_crossings(land, Path.straight(0.0, 0, 100), B)
    assert len(cr) == 1
    assert cr[0].x == pytest.approx(50.0)
    assert cr[0].slope == pytest.approx(1.0)


def test_lower_field_moves_first_crossing_out():
    # monotone envelope: deep first dip, shallower later ones
    x = np.arange(0.0, 401.0)
    evs = 60.0 - 40.0 * np.exp(-((x - 100) / 15) ** 2) - 20.0 * np.exp(-((x - 250) / 15) ** 2) \
        - 10.0 * np.exp(-((x - 350) / 15) ** 2)
    land = ValleyLandscape.from_evs(x, np.array([-1.0, 0.0, 1.0]), np.tile(evs, (3, 1)))
    path = Path.straight(0.0, 0, 400)
    first = []
    for ez in (45.0, 35.0, 25.0):
        cr = resonance_crossings(land, path, ez / (2 * CONSTANTS.mu_B))
        first.append(cr[0].x)
    assert first[0] < first[1] < first[2] or (first[0] <= first[1] <= first[2] and first[0] < first[2])


def test_crossings_require_positive_field(device_landscape):
    with pytest.raises(InvalidConfig):
        resonance_crossings(device_landscape, Path.straight(0.0, 0, 100), 0.0)


@given(st.floats(0.5, 5.0), st.floats(10.0, 90.0))
def test_ramp_crossing_property(slope, level):
    x = np.arange(0.0, 101.0)
    land = ValleyLandscape.from_evs(x, np.array([0.0, 1.0]), np.tile(slope * x, (2, 1)))
    B = level / (2 * CONSTANTS.mu_B)
    cr = resonance_crossings(land, Path.straight(0.0, 0, 100), B)
    if level < slope * 100:
        assert len(cr) == 1
        assert cr[0].x == pytest.approx(level / slope, rel=1e-9)
    else:
        assert cr == []

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from valleyshuttle.analysis import (DecayFitResult, NarrowingModel, NarrowingRow, average_delta_g, decay_time,
                                    exponential_decay, fit_exponential, fit_gaussian_two_tone, fit_narrowing_model,
                                    gaussian_two_tone, larmor_phase, mc_decay_time, rtn_coherence, spectral_peaks,
                                    st_fft, telegraph_mc)
from valleyshuttle.analysis import TELEGRAPH_BLOCK
from valleyshuttle.constants import CONSTANTS
from valleyshuttle.dynamics import CouplingParams, EventParams, tau_sweep
from valleyshuttle.errors import (IllConditioned, NonUniformSampling, OutOfBounds, Underdetermined,
                                  ZeroDistance)
from valleyshuttle.landscape import LandscapeConfig, Path, ValleyLandscape, generate_landscape
from valleyshuttle.traces import SingletTrace

from conftest import constant_landscape

TABLE_GRID = [(0.02, 16.8), (0.02, 11.2), (0.02, 5.6), (0.04, 22.4), (0.04, 16.8), (0.04, 11.2), (0.04, 5.6),
              (0.01, 5.6)]


# -- phase integrals ---------------------------------------------------------


def test_average_delta_g_uniform():
    land = constant_landscape(50.0, length=100.0, y_half=1.0)
    land = ValleyLandscape.from_evs(land.x, land.y, np.full(land.evs.shape, 50.0),
                                    np.full(land.evs.shape, 3e-4), np.full(land.evs.shape, -1e-4))
    g_L = (2.0 + 8e-4, 2.0 + 2e-4)
    p = Path.straight(0.0, 0.0, 100.0)
    assert average_delta_g(land, p, 60.0, 0, 0, g_L) == pytest.approx(g_L[0] - (2.0 + 3e-4), abs=1e-15)
    assert average_delta_g(land, p, 60.0, 1, 1, g_L) == pytest.approx(g_L[1] - (2.0 - 1e-4), abs=1e-15)


def test_average_delta_g_errors():
    land = constant_landscape(50.0, length=100.0, y_half=1.0)
    with pytest.raises(ZeroDistance):
        average_delta_g(land, Path.straight(0.0, 0.0, 100.0), 0.0, 0, 0, (2.0, 2.0))
    with pytest.raises(OutOfBounds):
        average_delta_g(land, Path.straight(5.0, 0.0, 100.0), 50.0, 0, 0, (2.0, 2.0))


def test_larmor_phase_value():
    assert CONSTANTS.mu_B * 0.3 == pytest.approx(17.365, abs=1e-3)
    assert larmor_phase(0.3, 1e-3, 1000.0) == pytest.approx(26.38, abs=0.01)


@pytest.mark.parametrize("d", [5.0, 60.0, 300.0])
def test_delta_g_ensemble_spread(d):
    # oracle: variance of a path average of two independent Gaussian-smoothed fields
    diffs = []
    for seed in range(100):
        land = generate_landscape(LandscapeConfig(extent_x=320.0, extent_y=4.0, seed=seed))
        p = Path.straight(0.0, 0.0, 320.0)
        g_L = (2.0, 2.0)
        diffs.append(average_delta_g(land, p, d, 0, 0, g_L) - average_delta_g(land, p, d, 0, 1, g_L))
    w = land.kernel_width
    s = 2.7e-4
    corr = integrate.quad(lambda r: (d - r) * math.exp(-r * r / (4 * w * w)), 0, d)[0] * 2 / d**2
    rms_oracle = math.sqrt(2 * s * s * corr)
    rms = math.sqrt(np.mean(np.square(diffs)))
    # 100 draws: the RMS carries ~7% sampling error
    assert rms == pytest.approx(rms_oracle, rel=0.25)


# -- spectra -----------------------------------------------------------------


def _tau_grid(n=128, h=50.0):
    return h * np.arange(n)


def test_fft_pure_tone():
    tau = _tau_grid()
    B = 0.3
    f0 = 12 / (len(tau) * 50.0)
    ps = 0.5 + 0.5 * np.cos(2 * np.pi * f0 * tau)
    sp = st_fft(tau, ps, B)
    target = f0 * 2 * np.pi * CONSTANTS.hbar / (2 * CONSTANTS.mu_B * B)
    bin_w = sp.delta_g_bar[1] - sp.delta_g_bar[0]
    peak = sp.delta_g_bar[np.argmax(sp.magnitude[0])]
    assert abs(peak - target) <= bin_w


def test_fft_two_tone_ratio():
    tau = _tau_grid()
    n = len(tau)
    f1, f2 = 10 / (n * 50.0), 30 / (n * 50.0)
    A1, A2 = 0.3, 0.12
    ps = gaussian_two_tone(tau, A1, 2 * np.pi * f1, 0.4, 1e12, A2, 2 * np.pi * f2, 1.1, 0.0)
    mag = st_fft(tau, ps, 0.2).magnitude[0]
    assert mag[10] / mag[30] == pytest.approx(A1 / A2, rel=0.1)
    assert set(spectral_peaks(mag)) == {10, 30}


@given(st.floats(-0.2, 0.2))
def test_fft_offset_invariance(eps):
    tau = _tau_grid()
    ps = 0.5 + 0.3 * np.cos(2 * np.pi * 7.3 / (128 * 50.0) * tau) + 0.1 * np.cos(0.02 * tau)
    a = st_fft(tau, ps, 0.3).magnitude[0]
    b = st_fft(tau, ps + eps, 0.3).magnitude[0]
    assert np.array_equal(spectral_peaks(a), spectral_peaks(b))
    assert np.allclose(a, b, atol=1e-9)


def test_fft_sampling_errors():
    tau = _tau_grid()
    bad = tau.copy()
    bad[5] += 3.0
    with pytest.raises(NonUniformSampling):
        st_fft(bad, np.zeros_like(tau), 0.3)


def test_fft_four_components_after_minimum():
    # one low-E_VS spot near the start mixes the mobile valleys; the static
    # dot occupies both valleys, so four g differences appear
    x = np.arange(0.0, 121.0)
    y = np.array([-1.0, 0.0, 1.0])
    evs = np.tile(np.clip(1 + 3 * np.abs(x - 3.0), 0, 150), (3, 1))
    land = ValleyLandscape.from_evs(x, y, evs, np.full(evs.shape, -4e-4), np.full(evs.shape, 6e-4))
    c = CouplingParams(delta_sv=0.0, T2_static=1e12, static_weights=(0.5, 0.5))
    tau = 200.0 + 50.0 * np.arange(320)
    B = 0.5
    ps = tau_sweep([100.0], tau, B, land, c, np.random.default_rng(0), EventParams(q_v=0.5), n_traj=4000)
    sp = st_fft(tau, ps, B)
    peaks = spectral_peaks(sp.magnitude[0], rel_height=0.2)
    assert len(peaks) == 4
    # the peaks sit at |g_L,mu - g_R,nu| on the (2 mu_B B / h) normalized axis;
    # a flipped electron spends the first 3 nm of each leg in its initial valley
    f = 3.0 / 100.0
    g_flipped = f * 6e-4 + (1 - f) * -4e-4
    expected = sorted(abs(gl - gr) / 2 for gl in (8e-4, 2e-4) for gr in (g_flipped, 6e-4))
    bin_w = sp.delta_g_bar[1]
    assert np.allclose(np.sort(sp.delta_g_bar[peaks]), expected, atol=2 * bin_w)


# -- decay fits --------------------------------------------------------------


def eq5_data(T2=1700.0, snr=20.0, n=150, seed=0, A1=0.3):
    tau = np.linspace(0, 6000, n)
    clean = gaussian_two_tone(tau, A1, 2 * np.pi * 1.1e-3, 0.7, T2, 0.08, 2 * np.pi * 0.2e-3, 1.0, 0.03)
    rng = np.random.default_rng(seed)
    return tau, clean + rng.normal(0, 0.3 / snr, n), clean


def eq6_data(T=2600.0, snr=20.0, n=240, seed=0, A=0.3, early=None):
    tau = np.linspace(0, 4 * T, n)
    clean = exponential_decay(tau, A, 2 * np.pi * 0.5e-3, 0.4, T, -0.02)
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0, A / snr, n)
    if early is not None:
        noisy = noisy + early(tau)
    return tau, noisy, clean


def test_eq5_recovers_t2_star():
    tau, y, _ = eq5_data()
    r = fit_gaussian_two_tone((tau, y))
    assert r.params["T2_star"] == pytest.approx(1700.0, rel=0.1)
    assert r.model == "gaussian_two_tone"


def test_eq5_table_row_within_two_stderr():
    tau, y, _ = eq5_data(T2=2000.0, seed=5)
    r = fit_gaussian_two_tone(SingletTrace("tau_S", tau, np.clip(y, 0, 1)))
    assert abs(r.params["T2_star"] - 2000.0) <= 2 * r.stderr["T2_star"]


def test_eq5_noiseless_exact():
    tau, _, clean = eq5_data()
    r = fit_gaussian_two_tone((tau, clean))
    assert r.params["T2_star"] == pytest.approx(1700.0, rel=1e-6)
    assert r.params["omega1"] == pytest.approx(2 * np.pi * 1.1e-3, rel=1e-6)


def test_eq5_unidentifiable():
    tau, y, _ = eq5_data(A1=0.0)
    with pytest.raises(IllConditioned):
        fit_gaussian_two_tone((tau, y))


def test_eq6_recovers_t():
    tau, y, _ = eq6_data()
    r = fit_exponential((tau, y))
    assert r.params["T"] == pytest.approx(2600.0, rel=0.1)


def test_eq6_noiseless_exact():
    tau, _, clean = eq6_data()
    r = fit_exponential((tau, clean))
    assert r.params["T"] == pytest.approx(2600.0, rel=1e-6)
    assert r.residual_rms < 1e-9


def test_eq6_exclusion_removes_early_background():
    early = lambda t: 0.45 * np.exp(-t / 60.0)
    tau, y, _ = eq6_data(n=60, early=early, seed=3)
    kept = fit_exponential((tau, y), exclude_first=3)
    naive = fit_exponential((tau, y), exclude_first=0)
    assert kept.excluded_indices == [0, 1, 2]
    assert kept.params["T"] == pytest.approx(2600.0, rel=0.15)
    assert abs(naive.params["T"] / 2600.0 - 1) > 0.5


def test_fit_result_json_round_trip():
    tau, y, _ = eq6_data()
    r = fit_exponential((tau, y))
    back = DecayFitResult.from_json(r.to_json())
    assert back == r
    assert np.allclose(back.predict(tau), r.predict(tau))


def test_fit_error_shrinks_with_samples():
    errs = []
    for n in (60, 240, 960):
        e = [fit_exponential(eq6_data(n=n, seed=s, snr=10)[:2]).params["T"] - 2600.0 for s in range(20)]
        errs.append(math.sqrt(np.mean(np.square(e))))
    assert errs[2] < errs[1] < errs[0]
    assert errs[0] / errs[2] == pytest.approx(4.0, rel=0.5)


@pytest.mark.slow
def test_model_selection():
    wins6 = wins5 = 0
    for s in range(100):
        tau, y, _ = eq6_data(seed=s, snr=10)
        r6 = fit_exponential((tau, y))
        try:
            r5 = fit_gaussian_two_tone((tau, y)).residual_rms
        except IllConditioned:
            r5 = math.inf
        wins6 += r6.residual_rms < r5
        tau, y, _ = eq5_data(seed=s, snr=10)
        r5 = fit_gaussian_two_tone((tau, y))
        wins5 += r5.residual_rms < fit_exponential((tau, y)).residual_rms
    print(f"eq6 data: eq6 wins {wins6}/100, eq5 data: eq5 wins {wins5}/100")
    assert wins5 >= 95
    assert wins6 >= 95


# -- telegraph model ---------------------------------------------------------


def test_rtn_asymptotes():
    a = 1.0
    assert decay_time(0.05, a) == pytest.approx(20.0, rel=0.2)
    assert decay_time(10.0, a) == pytest.approx(20.0, rel=0.2)


def test_rtn_minimum_near_reference_point():
    a = 1.0
    g = np.geomspace(0.05, 50, 400)
    T = np.array([decay_time(gi, a) for gi in g])
    assert decay_time(a / math.sqrt(2), a) == pytest.approx(2 / a, rel=1.0)
    assert 0.5 * 2 / a <= T.min() <= 1.5 * 2 / a
    assert g[np.argmin(T)] == pytest.approx(a / math.sqrt(2), rel=0.5)
    # non-monotonic: falls then rises
    i = np.argmin(T)
    assert 0 < i < len(g) - 1


def test_decay_time_asymptote_tolerances():
    a = 1.0
    assert decay_time(0.05 * a, a) == pytest.approx(1 / 0.05, rel=0.1)
    assert decay_time(50 * a, a) == pytest.approx(2 * 50 / a**2, rel=0.1)


def test_telegraph_no_flip_limit():
    a = 1.0
    tau = np.linspace(0, 10, 41)
    r = telegraph_mc(0.0, a, 100_000, tau, np.random.default_rng(0))
    assert np.all(np.abs(r.mean_cos - np.cos(a * tau)) <= 3 * r.stderr + 1e-10)


def test_telegraph_zero_splitting():
    r = telegraph_mc(1.0, 0.0, 1000, np.linspace(0, 5, 11), np.random.default_rng(0))
    assert np.all(r.coherence == 1.0)


@pytest.mark.parametrize("ratio", [0.05, 0.3, 1.0, 5.0, 50.0])
def test_rtn_matches_monte_carlo(ratio):
    a = 1.0
    g = ratio * a
    T = decay_time(g, a)
    tau = np.linspace(0, 2 * T, 25)
    r = telegraph_mc(g, a, 100_000, tau, np.random.default_rng(7))
    assert np.all(np.abs(r.coherence - rtn_coherence(g, a, tau)) <= 3 * r.stderr + 1e-12)


def test_rtn_monte_carlo_z_scores_are_calibrated():
    # over many seeds the MC error in units of its own stderr is standard normal
    g, a = 50.0, 1.0
    tau = np.linspace(0, 2 * decay_time(g, a), 25)[1::4]
    z = []
    for s in range(30):
        r = telegraph_mc(g, a, 20_000, tau, np.random.default_rng(500 + s))
        z.append((r.coherence - rtn_coherence(g, a, tau)) / r.stderr)
    z = np.array(z)
    assert np.all(np.abs(z.mean(axis=0)) < 0.6)
    assert np.all((z.std(axis=0) > 0.6) & (z.std(axis=0) < 1.45))


def test_telegraph_decay_minimum():
    a = 1.0
    gs = np.geomspace(0.05, 50, 12) * a
    Ts = []
    for g in gs:
        T = decay_time(g, a)
        r = telegraph_mc(g, a, 20_000, np.linspace(0, 3 * T, 200), np.random.default_rng(1))
        Ts.append(mc_decay_time(r))
    assert 0.3 * 2 / a <= min(Ts) <= 3 * 2 / a
    assert 0 < int(np.argmin(Ts)) < len(gs) - 1


def test_telegraph_blocks_are_prefix_stable():
    # the first block of a larger run is the same stream as a one-block run
    tau = np.linspace(0, 5, 11)
    one = telegraph_mc(1.0, 1.0, TELEGRAPH_BLOCK, tau, np.random.default_rng(3))
    two = telegraph_mc(1.0, 1.0, 2 * TELEGRAPH_BLOCK, tau, np.random.default_rng(3))
    again = telegraph_mc(1.0, 1.0, 2 * TELEGRAPH_BLOCK, tau, np.random.default_rng(3))
    np.testing.assert_array_equal(two.coherence, again.coherence)
    second = 2 * two.mean_cos - one.mean_cos  # mean over the second block alone
    assert not np.allclose(second[1:], one.mean_cos[1:], atol=1e-6)
    assert np.all(np.abs(second - one.mean_cos) < 0.05)


@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0), st.floats(0, 50.0))
def test_rtn_coherence_bounded(g, a, t):
    w = float(rtn_coherence(g, a, t))
    assert 0.0 <= w <= 1.0


# -- narrowing model ---------------------------------------------------------


def test_narrowing_rate_and_40mT():
    m = NarrowingModel()
    assert m.gamma(5.6) * 1e9 == pytest.approx(4.6e5)
    T40 = m.decay_time(0.04, 5.6)
    print(f"model T(40 mT, 5.6 m/s) = {T40:.0f} ns")
    assert T40 == pytest.approx(2600.0, rel=0.3)


def test_narrowing_fit_round_trip():
    m = NarrowingModel()
    T_true = np.array([m.decay_time(b, v) for b, v in TABLE_GRID])
    rng = np.random.default_rng(2)
    T = T_true * (1 + 0.1 * rng.standard_normal(len(T_true)))
    rows = [NarrowingRow(b, v, t, 0.1 * tt) for (b, v), t, tt in zip(TABLE_GRID, T, T_true)]
    f = fit_narrowing_model(rows)
    assert abs(f.Q_v - 0.023) <= 2 * f.Q_v_stderr
    assert abs(f.delta_omega_bar_over_muB_B - 5.4e-4) <= 2 * f.scale_stderr


def test_narrowing_noiseless_exact():
    m = NarrowingModel()
    rows = [NarrowingRow(b, v, m.decay_time(b, v)) for b, v in TABLE_GRID]
    f = fit_narrowing_model(rows)
    assert f.Q_v == pytest.approx(0.023, rel=1e-6)
    assert f.delta_omega_bar_over_muB_B == pytest.approx(5.4e-4, rel=1e-6)


def test_narrowing_excluded_rows_and_underdetermined():
    with pytest.raises(Underdetermined):
        fit_narrowing_model([NarrowingRow(0.02, 5.6, 2000.0)])
    m = NarrowingModel()
    rows = [NarrowingRow(b, v, m.decay_time(b, v)) for b, v in TABLE_GRID]
    rows.append(NarrowingRow(0.01, 11.2, 1.0, excluded=True))
    assert fit_narrowing_model(rows).Q_v == pytest.approx(0.023, rel=1e-6)
    with pytest.raises(Underdetermined):
        fit_narrowing_model([NarrowingRow(0.02, 5.6, t) for t in (1.0, 2.0, 3.0)])

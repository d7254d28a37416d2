import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from valleyshuttle.constants import CONSTANTS
from valleyshuttle.dynamics import CouplingParams
from valleyshuttle.errors import InvalidParams, MismatchedAxes, NoRidgeFound, ZeroField
from valleyshuttle.landscape import LandscapeConfig, ValleyLandscape, autocorrelation, fit_rice, generate_landscape
from valleyshuttle.mapping import (EvsMap, EvsTraceEstimate, MappingSettings, PsScanPatch, assemble_map,
                                   estimate_measurement_time, expected_ps, extract_column, extract_ridge,
                                   normalize_linewise, simulate_ps_scan, tau_w_schedule)

from conftest import constant_landscape

B_GRID = np.arange(0.05, 1.0001, 0.005)
D_GRID = np.arange(1.0, 393.0, 1.0)
Y_OFFSETS = np.arange(7) * 6.0 - 18.0


@pytest.fixture(scope="module")
def round_trip():
    """Seven-trace scan of a device-scale landscape and its recovered map."""
    land = generate_landscape(LandscapeConfig(seed=7))
    c = CouplingParams()
    rng = np.random.default_rng(1)
    traces = [extract_ridge(normalize_linewise(simulate_ps_scan(land, c, y, B_GRID, D_GRID, 800, rng)), c)
              for y in Y_OFFSETS]
    m = assemble_map(traces, Y_OFFSETS)
    X, Y = np.meshgrid(land.x[0] + m.d, m.y)
    truth = land.evs_at(X, Y)
    resolvable = (truth < CONSTANTS.zeeman(B_GRID[-1])) & (truth > CONSTANTS.zeeman(B_GRID[0]))
    return land, traces, m, truth, resolvable


# -- tau_W schedule ----------------------------------------------------------


def test_tau_w_proportionality():
    assert tau_w_schedule(0.2) == pytest.approx(tau_w_schedule(0.1) / 2, rel=1e-15)


def test_tau_w_reference_value():
    base = tau_w_schedule(0.1, 2 * np.pi, 2.0, delta_g_eff=1.0)
    assert base == pytest.approx(2 * np.pi * 0.658212 / (2 * 5.78838), rel=1e-12)
    assert base == pytest.approx(0.357, abs=1e-3)
    assert tau_w_schedule(0.1, 2 * np.pi, 2.0, delta_g_eff=1e-3) == pytest.approx(357.2, abs=0.1)


@given(st.floats(1e-3, 10.0), st.floats(1.001, 100.0))
def test_tau_w_decreasing(B, k):
    assert tau_w_schedule(B * k) < tau_w_schedule(B)


def test_tau_w_zero_field():
    with pytest.raises(ZeroField):
        tau_w_schedule(0.0)


# -- scan synthesis ----------------------------------------------------------


def test_no_resonance_without_coupling():
    land = generate_landscape(LandscapeConfig(extent_x=200.0, seed=2))
    ps0 = expected_ps(land, CouplingParams(delta_sv=0.0), 0.0, B_GRID, np.arange(1.0, 150.0))
    ps_ref = expected_ps(land, CouplingParams(delta_sv=1e-12), 0.0, B_GRID, np.arange(1.0, 150.0))
    assert np.allclose(ps0, ps_ref, atol=1e-9)
    with pytest.raises(NoRidgeFound):
        patch = normalize_linewise(PsScanPatch(B_GRID, np.arange(1.0, 150.0), ps0,
                                               MappingSettings().tau_w(B_GRID), 0.0))
        extract_column(patch, 40, CouplingParams())


def test_constant_landscape_stripe():
    # the coupled scan departs from the uncoupled one only along the row B = E_VS / (g0 mu_B)
    land = constant_landscape(50.0, length=120.0, y_half=1.0)
    B = np.arange(0.3, 0.6, 0.005)
    d = np.arange(1.0, 100.0)
    diff = np.abs(expected_ps(land, CouplingParams(), 0.0, B, d) - expected_ps(land, CouplingParams(delta_sv=0.0),
                                                                                0.0, B, d))
    B_res = 50.0 / (2 * CONSTANTS.mu_B)
    assert B_res == pytest.approx(0.432, abs=1e-3)
    # response confined to a band, centred on B_res in every column (horizontal stripe)
    w = diff**2
    centroid = (B[:, None] * w).sum(axis=0) / w.sum(axis=0)
    assert np.all(np.abs(centroid - B_res) <= 0.005)
    far = np.abs(B - B_res) > 0.05
    assert w[far].sum() < 0.05 * w.sum()


def test_binomial_standard_error():
    land = constant_landscape(50.0, length=60.0, y_half=1.0)
    c = CouplingParams()
    B = np.array([0.2])
    d = np.array([30.0])
    p = expected_ps(land, c, 0.0, B, d)[0, 0]
    rng = np.random.default_rng(0)
    draws = np.array([simulate_ps_scan(land, c, 0.0, B, d, 800, rng).ps[0, 0] for _ in range(2000)])
    se = draws.std()
    assert se <= 0.5 / math.sqrt(800) + 1e-3
    assert se == pytest.approx(math.sqrt(p * (1 - p) / 800), rel=0.1)


def test_scan_validation():
    land = constant_landscape(50.0, length=60.0, y_half=1.0)
    with pytest.raises(InvalidParams):
        simulate_ps_scan(land, CouplingParams(), 0.0, B_GRID, [10.0], 0, np.random.default_rng(0))


def test_patch_csv_round_trip(tmp_path):
    land = constant_landscape(50.0, length=60.0, y_half=1.0)
    p = simulate_ps_scan(land, CouplingParams(), 0.0, B_GRID[:20], np.arange(1.0, 30.0), 100,
                         np.random.default_rng(0), patch_id="p1")
    p.write_csv(tmp_path / "p.csv")
    q = PsScanPatch.read_csv(tmp_path / "p.csv")
    assert np.array_equal(q.ps, p.ps) and np.array_equal(q.B, p.B) and q.patch_id == "p1"


# -- normalization -----------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_normalize_idempotent_and_column_differences(seed):
    rng = np.random.default_rng(seed)
    ps = rng.random((12, 20))
    p = PsScanPatch(np.arange(12.0) * 0.01 + 0.1, np.arange(20.0), ps, np.ones(12), 0.0)
    n1 = normalize_linewise(p)
    n2 = normalize_linewise(n1)
    assert np.allclose(n1.ps.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(n1.ps, n2.ps, atol=1e-14)
    assert np.allclose(np.diff(n1.ps, axis=1), np.diff(ps, axis=1), atol=1e-12)


def test_normalize_constant_row():
    ps = np.tile(np.array([[0.3], [0.7]]), (1, 10))
    n = normalize_linewise(PsScanPatch([0.1, 0.2], np.arange(10.0), ps, [1.0, 1.0], 0.0))
    assert np.allclose(n.ps, 0.0)


def test_normalize_improves_contrast_under_row_drift():
    land = generate_landscape(LandscapeConfig(extent_x=120.0, seed=4))
    c = CouplingParams()
    d = np.arange(1.0, 100.0)
    clean = expected_ps(land, c, 0.0, B_GRID, d)
    rng = np.random.default_rng(0)
    drifted = clean + rng.uniform(-0.1, 0.1, (len(B_GRID), 1))
    base = PsScanPatch(B_GRID, d, clean, MappingSettings().tau_w(B_GRID), 0.0)
    before = PsScanPatch(B_GRID, d, drifted, base.tau_W, 0.0)
    after = normalize_linewise(before)
    ref = normalize_linewise(base).ps

    def contrast(ps):
        a = np.abs(ps)
        return a.max(axis=0) / np.median(a, axis=0)

    # column contrast of the ridge is measured against the drift-free patch
    c_before = contrast(before.ps - before.ps.mean())
    c_after = contrast(after.ps)
    assert np.all(c_after >= c_before - 1e-9) or np.allclose(after.ps, ref)
    assert np.allclose(after.ps, ref, atol=1e-12)


# -- ridge extraction --------------------------------------------------------


def test_ridge_out_of_range():
    land = constant_landscape(150.0, length=120.0, y_half=1.0)
    B = np.arange(0.05, 0.5, 0.005)
    patch = normalize_linewise(simulate_ps_scan(land, CouplingParams(), 0.0, B, np.arange(1.0, 100.0), 800,
                                                np.random.default_rng(0)))
    for j in (0, 50, 98):
        with pytest.raises(NoRidgeFound):
            extract_column(patch, j, CouplingParams())
    with pytest.raises(NoRidgeFound):
        extract_ridge(patch, CouplingParams())


def test_sparse_ridge_is_flagged():
    # E_VS inside the B range on the first 10% of the path only
    x = np.arange(0.0, 121.0)
    evs = np.where(x < 12, 60.0, 150.0)
    land = ValleyLandscape.from_evs(x, np.array([-1.0, 0.0, 1.0]), np.tile(evs, (3, 1)))
    patch = normalize_linewise(simulate_ps_scan(land, CouplingParams(), 0.0, B_GRID, np.arange(1.0, 100.0), 800,
                                                np.random.default_rng(0)))
    try:
        tr = extract_ridge(patch, CouplingParams())
    except NoRidgeFound:
        return
    assert tr.flagged and tr.coverage < 0.8


def test_ridge_round_trip_rms(round_trip):
    land, traces, m, truth, res = round_trip
    for tr, y in zip(traces, Y_OFFSETS):
        t = land.evs_at(land.x[0] + tr.d, np.full_like(tr.d, y))
        r = (t < CONSTANTS.zeeman(B_GRID[-1])) & (t > CONSTANTS.zeeman(B_GRID[0])) & np.isfinite(tr.evs)
        rms = math.sqrt(np.mean((tr.evs[r] - t[r]) ** 2))
        assert rms <= 2 * CONSTANTS.zeeman(0.005)
        assert np.all(tr.confidence[np.isfinite(tr.evs)] > 0)
        assert np.all(tr.evs[np.isfinite(tr.evs)] >= 0)


def test_map_correlates_with_truth(round_trip):
    _, _, m, truth, res = round_trip
    ok = res & np.isfinite(m.evs)
    r = np.corrcoef(m.evs[ok], truth[ok])[0, 1]
    print(f"recovered map: Pearson r = {r:.5f}, coverage = {ok.sum() / res.sum():.3f}")
    assert r > 0.9
    assert ok.sum() / res.sum() > 0.8


def _finite_runs(row, min_len=60):
    ok = np.isfinite(row)
    edges = np.diff(np.concatenate([[0], ok.astype(int), [0]]))
    starts, stops = np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]
    return [(a, b) for a, b in zip(starts, stops) if b - a >= min_len]


def test_recovered_map_statistics(round_trip):
    _, _, m, truth, res = round_trip
    ok = res & np.isfinite(m.evs)
    s_rec = fit_rice(m.evs[ok]).sigma
    s_true = fit_rice(truth[ok]).sigma
    assert s_rec == pytest.approx(s_true, rel=0.15)
    a_rec, a_true = [], []
    for i in range(len(m.y)):
        for a, b in _finite_runs(np.where(ok[i], m.evs[i], np.nan)):
            a_rec.append(autocorrelation(m.evs[i, a:b], 1.0, max_lag=40).fitted_a_dot)
            a_true.append(autocorrelation(truth[i, a:b], 1.0, max_lag=40).fitted_a_dot)
    assert len(a_rec) >= 3
    assert np.mean(a_rec) == pytest.approx(np.mean(a_true), rel=0.2)


def test_seam_between_adjacent_patches():
    land = generate_landscape(LandscapeConfig(seed=11))
    c = CouplingParams()
    checked = 0
    for y in (-18.0, 0.0, 12.0):
        for split in (150.0, 200.0, 250.0):
            rng = np.random.default_rng(int(split + y))
            left = extract_ridge(normalize_linewise(
                simulate_ps_scan(land, c, y, B_GRID, np.arange(split - 100.0, split + 1.0), 800, rng)), c)
            right = extract_ridge(normalize_linewise(
                simulate_ps_scan(land, c, y, B_GRID, np.arange(split, split + 101.0), 800, rng)), c)
            a, b = left.evs[-1], right.evs[0]
            if np.isfinite(a) and np.isfinite(b):
                checked += 1
                assert abs(a - b) <= left.confidence[-1] + right.confidence[0]
    assert checked >= 3


def test_trace_csv_round_trip(tmp_path, round_trip):
    tr = round_trip[1][0]
    tr.write_csv(tmp_path / "t.csv")
    back = EvsTraceEstimate.read_csv(tmp_path / "t.csv")
    assert np.array_equal(back.evs, tr.evs, equal_nan=True)
    assert back.missing == tr.missing and back.y == tr.y


# -- assembly ----------------------------------------------------------------


def _trace(y, values):
    v = np.asarray(values, float)
    return EvsTraceEstimate(np.arange(len(v), dtype=float), v, np.full(len(v), 0.3), y)


def test_assemble_identical_traces():
    v = np.linspace(5, 50, 20)
    m = assemble_map([_trace(0.0, v), _trace(6.0, v)], np.linspace(0, 6, 7))
    assert np.allclose(m.evs, v[None, :])


def test_assemble_linear_midpoint():
    m = assemble_map([_trace(0.0, [10.0] * 5), _trace(6.0, [20.0] * 5)], [0.0, 3.0, 6.0])
    assert np.allclose(m.evs[1], 15.0)
    assert np.array_equal(m.evs[0], [10.0] * 5) and np.array_equal(m.evs[2], [20.0] * 5)


def test_assemble_device_dimensions(round_trip):
    m = round_trip[2]
    assert m.evs.shape == (7, 392)
    assert m.d[-1] - m.d[0] == 391.0 and m.y[-1] - m.y[0] == 36.0


def test_assemble_mismatched():
    with pytest.raises(MismatchedAxes):
        assemble_map([_trace(0.0, [1.0] * 5), _trace(6.0, [1.0] * 6)])
    with pytest.raises(InvalidParams):
        assemble_map([_trace(0.0, [1.0] * 5)])


def test_map_csv_and_landscape_view(tmp_path):
    m = assemble_map([_trace(0.0, np.arange(10.0)), _trace(6.0, np.arange(10.0) + 5)], np.arange(0, 7.0))
    m.write_csv(tmp_path / "m.csv")
    back = EvsMap.read_csv(tmp_path / "m.csv")
    assert np.array_equal(back.evs, m.evs)
    land = back.to_landscape()
    assert land.evs_at(3.0, 6.0) == pytest.approx(8.0)


# -- measurement time --------------------------------------------------------


def test_time_estimate_table_values():
    t = estimate_measurement_time(tau_ss=Fraction(2, 10**6), n_B=600, n_samples=100, n_x=2000, n_y=8, tau_B=600)
    assert t.total_seconds == 2520
    assert t.product_seconds == 1920


def test_time_estimate_doubling_nx():
    t = estimate_measurement_time(tau_ss="2e-6", n_B=600, n_samples=100, n_x=4000, n_y=8, tau_B=600)
    assert t.product_seconds == 3840 and t.total_seconds == 4440


def test_time_estimate_lengths():
    t = estimate_measurement_time(tau_ss="2e-6", n_B=600, n_samples=100, l_x=10000, delta_x=5, l_y=40, delta_y=5,
                                  tau_B=600)
    assert (t.n_x, t.n_y) == (2000, 8)
    assert t.total_seconds == 2520


@pytest.mark.parametrize("kw", [dict(n_samples=0), dict(n_B=-1), dict(tau_ss=0), dict(n_x=1.5)])
def test_time_estimate_invalid(kw):
    base = dict(tau_ss="2e-6", n_B=600, n_samples=100, n_x=2000, n_y=8, tau_B=600)
    base.update(kw)
    with pytest.raises(InvalidParams):
        estimate_measurement_time(**base)


@given(st.sampled_from(["n_B", "n_samples", "n_x", "n_y"]), st.integers(2, 5000))
def test_time_estimate_linear(name, n):
    base = dict(tau_ss="2e-6", n_B=600, n_samples=100, n_x=2000, n_y=8, tau_B=600)
    vals = []
    for k in (n - 1, n, n + 1):
        kw = dict(base)
        kw[name] = k
        vals.append(estimate_measurement_time(**kw).total_seconds)
    assert vals[2] - vals[1] == vals[1] - vals[0]
    per = estimate_measurement_time(**base).product_seconds / base[name]
    assert vals[1] - vals[0] == per

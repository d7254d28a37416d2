"""Spectral analysis, decay fits and the motional-narrowing dephasing model.

Times are in ns and angular frequencies in rad/ns unless a function says
otherwise; the telegraph functions are unit-agnostic (any consistent pair of
time and rate units).
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, signal

from .constants import CONSTANTS
from .errors import (
    IllConditioned,
    InvalidParams,
    NonConvergence,
    NonUniformSampling,
    Underdetermined,
    ZeroDistance,
)
from .landscape import Path, ValleyLandscape
from .traces import SingletTrace

PHASE_GRID = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)


# --------------------------------------------------------------------------
# phase integrals
# --------------------------------------------------------------------------


def average_delta_g(landscape: ValleyLandscape, path: Path, d, mu, nu, g_L, step=None):
    """Path average of g_L,mu - g_R,nu(x) over the first ``d`` nm (trapezoidal).

    ``mu`` and ``nu`` are valley indices (0 = "+", 1 = "-"); ``g_L`` is the
    static-dot pair (g_L+, g_L-).
    """
    if not d > 0:
        raise ZeroDistance("d must be positive")
    seg = path.truncated(d)
    xs, ys = seg.sample(landscape.grid_spacing if step is None else step)
    dg = landscape.g_at(xs, ys)[nu]
    g_r = landscape.constants.g0 + dg
    return float(g_L[mu] - np.trapezoid(g_r, xs) / (xs[-1] - xs[0]))


def larmor_phase(B, delta_g_bar, tau, constants=CONSTANTS):
    """phi = mu_B B delta_g_bar tau / hbar (rad), tau in ns."""
    return constants.mu_B * B * delta_g_bar * tau / constants.hbar


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------


@dataclass
class Spectrum:
    d: np.ndarray
    delta_g_bar: np.ndarray
    magnitude: np.ndarray  # [d, frequency]
    B: float

    def rows(self):
        for i, d in enumerate(self.d):
            for j, g in enumerate(self.delta_g_bar):
                yield d, g, self.magnitude[i, j]


def st_fft(tau_S, ps, B, d=None, constants=CONSTANTS):
    """Column-wise magnitude FFT of P_S(tau_S) on a normalized frequency axis.

    ``ps`` has shape (n_d, n_tau) or (n_tau,). Each column is mean-subtracted
    and Hann-windowed; the frequency f (1/ns) is rescaled to f h / (2 mu_B B).
    """
    tau_S = np.asarray(tau_S, float)
    ps = np.atleast_2d(np.asarray(ps, float))
    if ps.shape[1] != len(tau_S):
        raise InvalidParams("ps columns must match tau_S")
    if len(tau_S) < 8:
        raise InvalidParams("need at least 8 tau_S samples")
    if not B > 0:
        raise InvalidParams("B must be positive")
    steps = np.diff(tau_S)
    if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(abs(steps.mean()), 1.0):
        raise NonUniformSampling("tau_S must be uniformly spaced")
    h = steps.mean()
    win = np.hanning(len(tau_S))
    mag = np.abs(np.fft.rfft((ps - ps.mean(axis=1, keepdims=True)) * win, axis=1))
    f = np.fft.rfftfreq(len(tau_S), h)  # 1/ns
    two_pi_hbar = 2 * np.pi * constants.hbar  # h in ueV ns
    axis = f * two_pi_hbar / (2 * constants.mu_B * B)
    d = np.arange(ps.shape[0], dtype=float) if d is None else np.asarray(d, float)
    return Spectrum(d, axis, mag, B)


def spectral_peaks(magnitude, rel_height=0.15, min_separation=2):
    """Indices of local maxima above ``rel_height`` times the column maximum."""
    m = np.asarray(magnitude, float)
    if m.max() <= 0:
        return np.array([], int)
    idx, _ = signal.find_peaks(np.concatenate([[0.0], m, [0.0]]), height=rel_height * m.max(),
                               distance=min_separation)
    return idx - 1


def _peak_frequencies(t, y, n=2):
    """Angular frequencies of the ``n`` strongest spectral peaks (rad per unit t)."""
    h = np.mean(np.diff(t))
    pad = 8 * len(t)
    win = np.hanning(len(t))
    mag = np.abs(np.fft.rfft((y - y.mean()) * win, n=pad))
    f = np.fft.rfftfreq(pad, h)
    idx, _ = signal.find_peaks(np.concatenate([[0.0], mag, [0.0]]))
    idx = idx - 1
    idx = idx[np.argsort(mag[idx])[::-1]][:n]
    return 2 * np.pi * f[idx]


# --------------------------------------------------------------------------
# decay fits
# --------------------------------------------------------------------------

EQ5_PARAMS = ("A1", "omega1", "phi1", "T2_star", "A2", "omega2", "phi2", "epsilon")
EQ6_PARAMS = ("A", "omega", "phi", "T", "epsilon")


@dataclass
class DecayFitResult:
    model: str  # "gaussian_two_tone" | "exponential"
    params: dict
    stderr: dict
    residual_rms: float
    excluded_indices: list = field(default_factory=list)
    solver_iterations: int = 0

    @property
    def decay_time(self):
        return self.params["T2_star"] if self.model == "gaussian_two_tone" else self.params["T"]

    @property
    def decay_time_stderr(self):
        return self.stderr["T2_star"] if self.model == "gaussian_two_tone" else self.stderr["T"]

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def predict(self, tau):
        fn = gaussian_two_tone if self.model == "gaussian_two_tone" else exponential_decay
        names = EQ5_PARAMS if self.model == "gaussian_two_tone" else EQ6_PARAMS
        return fn(np.asarray(tau, float), *[self.params[k] for k in names])


def gaussian_two_tone(tau, A1, omega1, phi1, T2_star, A2, omega2, phi2, epsilon):
    """Gaussian-damped tone plus an undamped second tone around 1/2 + epsilon."""
    return (A1 * np.cos(omega1 * tau + phi1) * np.exp(-(tau / T2_star) ** 2)
            + A2 * np.cos(omega2 * tau + phi2) + 0.5 + epsilon)


def exponential_decay(tau, A, omega, phi, T, epsilon):
    with np.errstate(over="ignore"):
        return A * np.cos(omega * tau + phi) * np.exp(-tau / T) + 0.5 + epsilon


def _trace_arrays(trace):
    if isinstance(trace, SingletTrace):
        return trace.abscissa, trace.ps
    t, y = trace
    return np.asarray(t, float), np.asarray(y, float)


def _solve(fun, starts):
    best = None
    nfev = 0
    for p0 in starts:
        try:
            res = optimize.least_squares(fun, p0, method="lm", x_scale="jac", max_nfev=4000,
                                         xtol=1e-12, ftol=1e-12, gtol=1e-12)
        except (ValueError, np.linalg.LinAlgError):
            continue
        nfev += res.nfev
        if not np.all(np.isfinite(res.x)):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise NonConvergence("least-squares fit failed from every start")
    return best, nfev


def _covariance(res, n, absolute_sigma=False, max_cond=1e13):
    """Parameter covariance from the Jacobian; infinite where J is rank deficient."""
    J = res.jac
    k = J.shape[1]
    dof = max(n - k, 1)
    s2 = 1.0 if absolute_sigma else 2 * res.cost / dof
    norms = np.linalg.norm(J, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(J)):
        return np.full((k, k), np.inf)
    Jn = J / norms
    sv = np.linalg.svd(Jn, compute_uv=False)
    if sv[-1] <= sv[0] / max_cond:
        return np.full((k, k), np.inf)
    cov = np.linalg.inv(Jn.T @ Jn) / np.outer(norms, norms)
    return cov * s2


def fit_gaussian_two_tone(trace, omega_guess=None, exclude_first=0) -> DecayFitResult:
    """Least-squares fit of the Gaussian two-tone decay.

    Starting frequencies come from the two strongest FFT peaks (or
    ``omega_guess``); phases are started from a four-point grid each.
    """
    t_all, y_all = _trace_arrays(trace)
    t, y = t_all[exclude_first:], y_all[exclude_first:]
    if len(t) < 12:
        raise InvalidParams("need at least 12 points")
    span = t[-1] - t[0]
    if omega_guess is None:
        w = list(_peak_frequencies(t, y, 2))
        if len(w) < 2:
            w = w + [0.5 * np.pi / span] * (2 - len(w))
    else:
        w = list(omega_guess)
    amp = 0.5 * np.ptp(y)
    eps0 = y.mean() - 0.5

    def resid(p):
        return gaussian_two_tone(t, *p) - y

    starts = []
    for w1, w2 in ((w[0], w[1]), (w[1], w[0])):
        for p1 in PHASE_GRID:
            for p2 in PHASE_GRID:
                starts.append([amp, w1, p1, 0.5 * span, 0.3 * amp, w2, p2, eps0])
    res, nfev = _solve(resid, starts)
    p = res.x.copy()
    # canonical form (an equivalent parametrization): positive amplitudes and T2*, phases in [0, 2 pi)
    for a, ph in ((0, 2), (4, 6)):
        if p[a] < 0:
            p[a] = -p[a]
            p[ph] += np.pi
    for om, ph in ((1, 2), (5, 6)):
        if p[om] < 0:
            p[om], p[ph] = -p[om], -p[ph]
    p[3] = abs(p[3])
    p[2] %= 2 * np.pi
    p[6] %= 2 * np.pi
    cov = _covariance(res, len(t))
    err = np.sqrt(np.abs(np.diag(cov)))
    # a vanishing tone leaves the other free to take either role, so T2* is not identifiable
    if (not np.all(np.isfinite(err)) or err[3] > 0.5 * abs(p[3]) or abs(p[0]) < 5 * err[0]
            or abs(p[4]) < 5 * err[4] or p[3] > 2 * span):
        raise IllConditioned("T2* is not identifiable from these data (vanishing or degenerate decaying tone)")
    if abs(p[1] - p[5]) < np.pi / span:
        raise IllConditioned("the two tones are not resolved (omega1 ~ omega2)")
    if res.status <= 0:
        raise NonConvergence("least-squares fit hit the evaluation limit")
    rms = float(np.sqrt(np.mean(res.fun**2)))
    return DecayFitResult("gaussian_two_tone", dict(zip(EQ5_PARAMS, map(float, p))),
                          dict(zip(EQ5_PARAMS, map(float, err))), rms,
                          list(range(exclude_first)), int(nfev))


def fit_exponential(trace, exclude_first=0, omega_guess=None) -> DecayFitResult:
    """Least-squares fit of the exponentially damped tone, skipping the first points."""
    t_all, y_all = _trace_arrays(trace)
    if exclude_first < 0:
        raise InvalidParams("exclude_first must be non-negative")
    t, y = t_all[exclude_first:], y_all[exclude_first:]
    if len(t) < 8:
        raise InvalidParams("need at least 8 points after exclusion")
    span = t[-1] - t[0]
    w = _peak_frequencies(t, y, 2) if omega_guess is None else np.atleast_1d(omega_guess)
    if len(w) == 0:
        w = np.array([np.pi / span])
    amp = 0.5 * np.ptp(y)
    eps0 = y[len(y) // 2:].mean() - 0.5

    def resid(p):
        return exponential_decay(t, *p) - y

    starts = [[amp, wi, ph, T0, eps0] for wi in w for ph in PHASE_GRID for T0 in (0.2 * span, 0.6 * span)]
    res, nfev = _solve(resid, starts)
    p = res.x.copy()
    if p[0] < 0:
        p[0], p[2] = -p[0], p[2] + np.pi
    if p[1] < 0:
        p[1], p[2] = -p[1], -p[2]
    p[2] %= 2 * np.pi
    p[3] = abs(p[3])
    err = np.sqrt(np.abs(np.diag(_covariance(res, len(t)))))
    if not np.isfinite(err[3]):
        raise IllConditioned("decay time is not identifiable")
    if res.status <= 0:
        raise NonConvergence("least-squares fit hit the evaluation limit")
    rms = float(np.sqrt(np.mean(res.fun**2)))
    return DecayFitResult("exponential", dict(zip(EQ6_PARAMS, map(float, p))),
                          dict(zip(EQ6_PARAMS, map(float, err))), rms,
                          list(range(exclude_first)), int(nfev))


# --------------------------------------------------------------------------
# random-telegraph dephasing
# --------------------------------------------------------------------------


def rtn_coherence(gamma, delta_omega_bar, tau):
    """|<exp(i phi(tau))>| for a symmetric telegraph process started in a fixed branch.

    The branch frequencies are +/- ``delta_omega_bar`` around the mean and
    each branch is left at rate ``gamma``.
    """
    tau = np.asarray(tau, float)
    g = float(gamma)
    a = float(delta_omega_bar)
    if g < 0 or a < 0:
        raise InvalidParams("gamma and delta_omega_bar must be non-negative")
    if a == 0:
        return np.ones_like(tau)
    mu = np.sqrt(complex(g * g - a * a))
    if abs(mu) < 1e-9 * max(g, a):
        c = np.exp(-g * tau) * (1 + (g + 1j * a) * tau)
    else:
        k = (g + 1j * a) / mu
        c = 0.5 * ((1 + k) * np.exp((mu - g) * tau) + (1 - k) * np.exp(-(mu + g) * tau))
    return np.clip(np.abs(c), 0.0, 1.0)


def _coherence_scalar(g, a, t):
    mu = cmath.sqrt(g * g - a * a)
    if abs(mu) < 1e-9 * max(g, a):
        c = cmath.exp(-g * t) * (1 + (g + 1j * a) * t)
    else:
        k = (g + 1j * a) / mu
        c = 0.5 * ((1 + k) * cmath.exp((mu - g) * t) + (1 - k) * cmath.exp(-(mu + g) * t))
    return abs(c)


def decay_time(gamma, delta_omega_bar, level=math.exp(-1)):
    """First tau at which :func:`rtn_coherence` falls below ``level``."""
    g, a = float(gamma), float(delta_omega_bar)
    if not g > 0 or not a > 0:
        raise InvalidParams("gamma and delta_omega_bar must be positive")
    # march in steps well below the oscillation period and the decay scale
    h = (1 / g + 2 * g / a**2) / 32 if g > a else min(1 / g, 1 / a) / 8
    t_prev, t = 0.0, h
    for _ in range(100000):
        if _coherence_scalar(g, a, t) < level:
            return float(optimize.brentq(lambda s: _coherence_scalar(g, a, s) - level, t_prev, t,
                                         xtol=1e-14 * t, rtol=1e-13))
        t_prev, t = t, t + h
    raise NonConvergence("coherence never dropped below the level")


@dataclass
class TelegraphResult:
    tau: np.ndarray
    coherence: np.ndarray  # |<exp(i phi)>|
    stderr: np.ndarray
    mean_cos: np.ndarray
    n_traj: int


TELEGRAPH_BLOCK = 8192  # trajectories per independent child stream


def telegraph_mc(gamma, delta_omega_bar, n_traj, tau_grid, rng: np.random.Generator):
    """Monte-Carlo telegraph oracle, sampled exactly on the tau grid.

    Every trajectory starts in the "+" branch with phase rate
    +delta_omega_bar and flips to -delta_omega_bar (and back) at rate gamma.
    Returns the modulus of the trajectory-averaged exp(i phi), its standard
    error and the average cos(phi). Each block of ``TELEGRAPH_BLOCK``
    trajectories draws from its own child of ``rng``.
    """
    tau = np.asarray(tau_grid, float)
    if np.any(np.diff(tau) < 0) or np.any(tau < 0):
        raise InvalidParams("tau_grid must be non-negative and sorted")
    n_traj = int(n_traj)
    a, g = float(delta_omega_bar), float(gamma)
    t_max = float(tau[-1])
    if a == 0 or t_max == 0:
        one = np.ones_like(tau)
        return TelegraphResult(tau, one, np.zeros_like(tau), one, n_traj)
    sums = np.zeros((4, len(tau)))  # cos, sin, cos^2, sin^2 partial sums
    parts = [[] for _ in range(4)]
    n_blocks = -(-n_traj // TELEGRAPH_BLOCK)
    for b, child in enumerate(rng.spawn(n_blocks)):
        m = min(TELEGRAPH_BLOCK, n_traj - b * TELEGRAPH_BLOCK)
        phase = _telegraph_phases(g, a, tau, m, child)
        c, s = np.cos(phase), np.sin(phase)
        for i, arr in enumerate((c, s, c * c, s * s)):
            parts[i].append(arr.sum(axis=0))
    for i in range(4):
        sums[i] = [math.fsum(col) for col in np.array(parts[i]).T]
    mc, ms = sums[0] / n_traj, sums[1] / n_traj
    vc = np.maximum(sums[2] / n_traj - mc**2, 0)
    vs = np.maximum(sums[3] / n_traj - ms**2, 0)
    mod = np.hypot(mc, ms)
    # variance of the projection onto the mean direction (covariance term dropped)
    with np.errstate(invalid="ignore", divide="ignore"):
        ux, uy = np.where(mod > 0, mc / mod, 1.0), np.where(mod > 0, ms / mod, 0.0)
    se = np.sqrt((ux**2 * vc + uy**2 * vs) / n_traj)
    return TelegraphResult(tau, mod, se, mc, n_traj)


def _telegraph_phases(g, a, tau, m, rng):
    # Exact interval-by-interval sampling. Given n Poisson flips in an interval
    # of length h, the n + 1 dwell segments are Dirichlet(1, ..., 1), so the
    # time spent in the starting branch (floor(n/2) + 1 segments) is
    # h * Beta(floor(n/2) + 1, n - floor(n/2)).
    if g == 0:
        return np.broadcast_to(a * tau, (m, len(tau))).copy()
    phase = np.empty((m, len(tau)))
    phi = np.zeros(m)
    sign = np.ones(m)
    t_prev = 0.0
    for j, t in enumerate(tau):
        h = t - t_prev
        if h > 0:
            n = rng.poisson(g * h, m)
            k = n // 2 + 1
            frac = np.ones(m)
            moved = n > 0
            frac[moved] = rng.beta(k[moved], (n - k + 1)[moved])
            phi = phi + sign * a * h * (2 * frac - 1)
            sign = np.where(n % 2 == 1, -sign, sign)
        phase[:, j] = phi
        t_prev = t
    return phase


def mc_decay_time(result: TelegraphResult, level=math.exp(-1)):
    """First 1/e crossing of a Monte-Carlo coherence trace (linear interpolation)."""
    w = result.coherence
    below = np.nonzero(w < level)[0]
    if len(below) == 0:
        raise NonConvergence("coherence trace never drops below the level")
    j = below[0]
    if j == 0:
        return float(result.tau[0])
    t0, t1, w0, w1 = result.tau[j - 1], result.tau[j], w[j - 1], w[j]
    return float(t0 + (w0 - level) * (t1 - t0) / (w0 - w1))


# --------------------------------------------------------------------------
# motional narrowing model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NarrowingModel:
    """Two-parameter dephasing model T(B, v_S).

    gamma = Q_v v_S / lambda (1/ns) and delta_omega_bar = scale mu_B B / hbar
    (rad/ns). Decay times are returned in ns.
    """

    Q_v: float = 0.023
    delta_omega_bar_over_muB_B: float = 5.4e-4
    lam: float = 280.0
    Q_v_stderr: float = float("nan")
    scale_stderr: float = float("nan")
    constants: object = CONSTANTS

    def __post_init__(self):
        if not 0 <= self.Q_v <= 1:
            raise InvalidParams("Q_v must lie in [0, 1]")
        if not self.delta_omega_bar_over_muB_B > 0:
            raise InvalidParams("scale must be positive")

    def gamma(self, v_S):
        return self.Q_v * np.asarray(v_S, float) / self.lam

    def delta_omega_bar(self, B):
        return self.delta_omega_bar_over_muB_B * self.constants.mu_B * np.asarray(B, float) / self.constants.hbar

    def decay_time(self, B, v_S):
        B, v = np.broadcast_arrays(np.asarray(B, float), np.asarray(v_S, float))
        out = np.array([decay_time(self.gamma(vi), self.delta_omega_bar(bi)) for bi, vi in zip(B.ravel(), v.ravel())])
        return out.reshape(B.shape) if B.ndim else float(out[0])

    def to_dict(self):
        return {"Q_v": self.Q_v, "delta_omega_bar_over_muB_B": self.delta_omega_bar_over_muB_B, "lam": self.lam,
                "Q_v_stderr": self.Q_v_stderr, "scale_stderr": self.scale_stderr}


@dataclass
class NarrowingRow:
    B: float  # T
    v_S: float  # nm/ns
    T: float  # ns
    T_err: float | None = None
    excluded: bool = False


def fit_narrowing_model(rows: Sequence[NarrowingRow], lam=280.0, starts=None) -> NarrowingModel:
    """Least-squares fit of (Q_v, scale) to measured decay times.

    Rows with ``T_err`` are weighted by it and their errors are taken as
    absolute; otherwise the fit runs on log T and the covariance is scaled by
    the residual variance.
    """
    use = [r for r in rows if not r.excluded]
    if len(use) < 3:
        raise Underdetermined("need at least 3 included rows")
    B = np.array([r.B for r in use], float)
    v = np.array([r.v_S for r in use], float)
    T = np.array([r.T for r in use], float)
    if len(np.unique(B)) < 2 and len(np.unique(v)) < 2:
        raise Underdetermined("rows must span at least two values of B or v_S")
    if np.any(T <= 0) or np.any(B <= 0) or np.any(v <= 0):
        raise InvalidParams("B, v_S and T must be positive")
    weighted = all(r.T_err is not None and r.T_err > 0 for r in use)
    err = np.array([r.T_err for r in use], float) if weighted else None

    def resid(p):
        m = NarrowingModel(min(math.exp(p[0]), 1.0), math.exp(p[1]), lam).decay_time(B, v)
        return (m - T) / err if weighted else np.log(m) - np.log(T)

    def cost(p):
        return 0.5 * float(np.sum(resid(p) ** 2))

    if starts is None:
        grid = [(math.log(q), math.log(sc)) for q in np.geomspace(1e-3, 0.9, 10) for sc in np.geomspace(2e-5, 1e-2, 10)]
        starts = [min(grid, key=cost)]
    best = None
    for p0 in starts:
        try:
            res = optimize.least_squares(resid, p0, method="lm", x_scale=1.0, xtol=1e-12, ftol=1e-12, max_nfev=2000)
        except (ValueError, NonConvergence):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise NonConvergence("narrowing-model fit failed")
    s2 = 1.0 if weighted else 2 * best.cost / max(len(T) - 2, 1)
    # standard errors are a quarter of the two-sigma profile interval, which keeps
    # the curvature of T(gamma) near its minimum in the error bars
    q, sc = math.exp(best.x[0]), math.exp(best.x[1])
    if s2 <= 1e-24:  # exact fit: the data pin both parameters
        return NarrowingModel(min(q, 1.0), sc, lam, 0.0, 0.0)
    lo_hi = [_profile_interval(cost, best.x, best.cost, i, 0.5 * 4 * s2) for i in range(2)]
    q_err = 0.25 * (math.exp(lo_hi[0][1]) - math.exp(lo_hi[0][0]))
    s_err = 0.25 * (math.exp(lo_hi[1][1]) - math.exp(lo_hi[1][0]))
    return NarrowingModel(min(q, 1.0), sc, lam, q_err, s_err)


def _profile_interval(cost, x_best, c_min, i, delta, max_span=5.0):
    """Profile-likelihood interval of parameter ``i`` where the cost rises by ``delta``.

    The other parameter is re-minimized at every trial value; the search runs
    in the (log) fit coordinates and is capped at ``max_span`` from the optimum.
    """
    j = 1 - i

    def profile(t):
        def inner(u):
            p = np.empty(2)
            p[i], p[j] = t, u
            return cost(p)

        r = optimize.minimize_scalar(inner, bracket=(x_best[j] - 0.1, x_best[j] + 0.1), tol=1e-10)
        return r.fun - c_min - delta

    ends = []
    for sign in (-1, 1):
        step = 0.02
        t_prev = x_best[i]
        t = x_best[i] + sign * step
        while profile(t) < 0 and abs(t - x_best[i]) < max_span:
            t_prev = t
            step *= 2
            t = x_best[i] + sign * step
        if profile(t) < 0:
            ends.append(t)
        else:
            ends.append(optimize.brentq(profile, min(t_prev, t), max(t_prev, t), xtol=1e-8))
    return ends[0], ends[1]

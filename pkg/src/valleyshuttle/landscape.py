"""Disordered valley-splitting landscapes.

The intervalley coupling Delta(x, y) is synthesized as a constant offset plus
white complex Gaussian noise smoothed by an isotropic Gaussian kernel, so that
E_VS = 2|Delta| is Rice distributed. The kernel width is calibrated numerically
so that the Gaussian autocorrelation fit of E_VS returns the requested dot size.

All lengths are in nm and energies in ueV.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize, special

from .constants import CONSTANTS, PhysicalConstants
from .errors import (
    DegenerateSamples,
    InvalidConfig,
    NonConvergence,
    OutOfBounds,
    ZeroVariance,
)
from . import fileio

ACF_FIT_CUTOFF = 0.05
KERNEL_TRUNCATE = 4.0
_BOUNDS_TOL = 1e-9


# --------------------------------------------------------------------------
# configuration and containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LandscapeConfig:
    extent_x: float = 392.0
    extent_y: float = 36.0
    grid_spacing: float = 1.0
    a_dot: float = 17.3
    rice_nu: float = 0.0
    rice_sigma: float = 61.4
    seed: int = 0
    g_rms: float = 2.7e-4
    x_origin: float = 0.0
    y_origin: float | None = None  # None centres the map on y = 0
    kernel_width: float | None = None  # None calibrates from a_dot
    max_cells: int = 20_000_000

    def validate(self):
        for name in ("extent_x", "extent_y", "grid_spacing", "a_dot"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if not self.rice_sigma > 0:
            raise InvalidConfig("rice_sigma must be positive")
        if self.rice_nu < 0:
            raise InvalidConfig("rice_nu must be non-negative")
        if self.g_rms < 0:
            raise InvalidConfig("g_rms must be non-negative")
        if self.grid_spacing > self.a_dot / 3:
            raise InvalidConfig("grid too coarse: grid_spacing must be <= a_dot/3")
        if self.extent_x < 4 * self.a_dot:
            raise InvalidConfig("extent_x must be >= 4*a_dot")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")

    @property
    def y0(self):
        return -self.extent_y / 2 if self.y_origin is None else self.y_origin

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown landscape keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Path:
    """Piecewise-linear lateral trajectory y(x) with strictly increasing x nodes."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 1 or xs.shape != ys.shape or len(xs) < 2:
            raise InvalidConfig("path needs >= 2 nodes with matching x and y")
        if np.any(np.diff(xs) <= 0):
            raise InvalidConfig("path x nodes must be strictly increasing")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @classmethod
    def straight(cls, y, x_start, x_stop):
        return cls(np.array([x_start, x_stop], float), np.array([y, y], float))

    @property
    def x_start(self):
        return float(self.xs[0])

    @property
    def x_stop(self):
        return float(self.xs[-1])

    @property
    def span(self):
        return self.x_stop - self.x_start

    def y_at(self, x):
        return np.interp(x, self.xs, self.ys)

    def truncated(self, distance):
        """The first ``distance`` nm of the path."""
        stop = self.x_start + distance
        if stop > self.x_stop + _BOUNDS_TOL or distance <= 0:
            raise OutOfBounds(f"distance {distance} outside path span {self.span}")
        keep = self.xs < stop
        xs = np.append(self.xs[keep], stop)
        return Path(xs, self.y_at(xs))

    def sample(self, step):
        """Sample points every ``step`` nm; all nodes are included."""
        n = max(1, int(math.ceil(self.span / step - 1e-9)))
        xs = np.union1d(np.linspace(self.x_start, self.x_stop, n + 1), self.xs)
        return xs, self.y_at(xs)

    def to_dict(self):
        return {"xs": self.xs.tolist(), "ys": self.ys.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["xs"], float), np.asarray(d["ys"], float))


@dataclass(frozen=True)
class LowSpot:
    x: float
    y: float
    evs: float
    slope: float  # mean flank |dE_VS/dx|, ueV/nm
    left_slope: float
    right_slope: float


@dataclass(frozen=True)
class Crossing:
    x: float
    y: float
    slope: float  # |dE_VS/dx| at the crossing, ueV/nm
    direction: int  # +1 if E_VS rises through E_Z with increasing x


@dataclass(frozen=True)
class RiceFit:
    nu: float
    sigma: float
    nu_stderr: float
    sigma_stderr: float
    log_likelihood: float
    n: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class AcfResult:
    lags: np.ndarray
    acf_values: np.ndarray
    fitted_a_dot: float
    fit_residual: float
    n_fit: int = 0


@dataclass(frozen=True, eq=False)
class ValleyLandscape:
    """Immutable gridded landscape; arrays are indexed ``[iy, ix]``."""

    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    g_plus: np.ndarray
    g_minus: np.ndarray
    config: LandscapeConfig = field(default_factory=LandscapeConfig)
    kernel_width: float = float("nan")
    constants: PhysicalConstants = CONSTANTS

    def __post_init__(self):
        for name in ("x", "y", "delta", "g_plus", "g_minus"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        shape = (len(self.y), len(self.x))
        for name in ("delta", "g_plus", "g_minus"):
            if getattr(self, name).shape != shape:
                raise InvalidConfig(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        evs = 2.0 * np.abs(self.delta)
        evs.setflags(write=False)
        object.__setattr__(self, "_evs", evs)

    # -- basic geometry -----------------------------------------------------
    @property
    def evs(self):
        return self._evs

    @property
    def grid_spacing(self):
        return float(self.x[1] - self.x[0])

    @property
    def extent(self):
        return float(self.x[-1] - self.x[0]), float(self.y[-1] - self.y[0])

    @property
    def dot_size(self):
        return self.config.a_dot

    @property
    def rice_nu(self):
        return self.config.rice_nu

    @property
    def rice_sigma(self):
        return self.config.rice_sigma

    @property
    def seed(self):
        return self.config.seed

    def contains(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return bool(
            np.all(x >= self.x[0] - _BOUNDS_TOL)
            and np.all(x <= self.x[-1] + _BOUNDS_TOL)
            and np.all(y >= self.y[0] - _BOUNDS_TOL)
            and np.all(y <= self.y[-1] + _BOUNDS_TOL)
        )

    def _interp(self, arr, x, y):
        if not self.contains(x, y):
            raise OutOfBounds(f"query outside landscape extent x=[{self.x[0]}, {self.x[-1]}], y=[{self.y[0]}, {self.y[-1]}]")
        return _bilinear(arr, self.x, self.y, np.asarray(x, float), np.asarray(y, float))

    # -- field queries --------------------------------------------------------
    def evs_at(self, x, y):
        """Bilinear interpolation of 2|Delta|; exact at grid nodes."""
        return self._interp(self._evs, x, y)

    def delta_at(self, x, y):
        return self._interp(self.delta, x, y)

    def g_at(self, x, y):
        """Per-valley g-factor deviations (dg_plus, dg_minus)."""
        return self._interp(self.g_plus, x, y), self._interp(self.g_minus, x, y)

    def row(self, y):
        """E_VS trace along the grid row nearest to ``y``."""
        iy = int(np.argmin(np.abs(self.y - y)))
        return self._evs[iy]

    # -- alternative constructors --------------------------------------------
    @classmethod
    def from_evs(cls, x, y, evs, g_plus=None, g_minus=None, constants=CONSTANTS):
        """Landscape with real, non-negative Delta = evs/2 (engineered maps)."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        evs = np.broadcast_to(np.asarray(evs, float), (len(y), len(x)))
        if np.any(evs < 0):
            raise InvalidConfig("E_VS must be non-negative")
        zeros = np.zeros_like(evs)
        g_plus = zeros if g_plus is None else np.broadcast_to(np.asarray(g_plus, float), evs.shape)
        g_minus = zeros if g_minus is None else np.broadcast_to(np.asarray(g_minus, float), evs.shape)
        h = float(x[1] - x[0])
        cfg = LandscapeConfig(
            extent_x=float(x[-1] - x[0]),
            extent_y=float(y[-1] - y[0]),
            grid_spacing=h,
            x_origin=float(x[0]),
            y_origin=float(y[0]),
        )
        return cls(x, y, (evs / 2).astype(complex), g_plus, g_minus, cfg, constants=constants)

    def with_evs_offset(self, offset):
        """Copy with E_VS raised by ``offset`` everywhere (phase of Delta kept)."""
        mag = np.abs(self.delta)
        phase = np.where(mag > 0, self.delta / np.where(mag > 0, mag, 1), 1.0)
        return dataclasses.replace(self, delta=(mag + offset / 2) * phase)


def _bilinear(arr, xg, yg, x, y):
    h_x = xg[1] - xg[0]
    fx = np.clip((x - xg[0]) / h_x, 0, len(xg) - 1)
    ix = np.minimum(np.floor(fx).astype(int), len(xg) - 2)
    tx = fx - ix
    if len(yg) > 1:
        h_y = yg[1] - yg[0]
        fy = np.clip((y - yg[0]) / h_y, 0, len(yg) - 1)
        iy = np.minimum(np.floor(fy).astype(int), len(yg) - 2)
        ty = fy - iy
    else:
        iy = np.zeros_like(ix)
        ty = np.zeros_like(tx)
    if len(yg) == 1:
        out = arr[0, ix] * (1 - tx) + arr[0, ix + 1] * tx
    else:
        out = (
            arr[iy, ix] * (1 - tx) * (1 - ty)
            + arr[iy, ix + 1] * tx * (1 - ty)
            + arr[iy + 1, ix] * (1 - tx) * ty
            + arr[iy + 1, ix + 1] * tx * ty
        )
    # exact node values: avoid round-off from the zero-weight terms
    node = (tx == 0) & (ty == 0)
    if np.any(node):
        out = np.where(node, arr[iy, ix], out)
    return out[()] if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------


def _kernel_sq_sum(sigma_cells):
    radius = int(KERNEL_TRUNCATE * sigma_cells + 0.5)
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma_cells) ** 2)
    k /= k.sum()
    return float(np.sum(k**2)), radius


def _smoothed_unit_noise(rng, shape, sigma_cells, count):
    """``count`` independent unit-variance Gaussian fields smoothed on ``shape``."""
    sq, radius = _kernel_sq_sum(sigma_cells)
    pad = radius + 1
    padded = tuple(s + 2 * pad for s in shape)
    out = []
    for _ in range(count):
        white = rng.standard_normal(padded)
        smooth = ndimage.gaussian_filter(white, sigma_cells, mode="constant", truncate=KERNEL_TRUNCATE)
        crop = smooth[tuple(slice(pad, pad + s) for s in shape)]
        out.append(crop / math.sqrt(sq ** len(shape)))
    return out


def generate_landscape(config: LandscapeConfig, constants=CONSTANTS) -> ValleyLandscape:
    """Synthesize a Rice-distributed valley-splitting landscape."""
    config.validate()
    h = config.grid_spacing
    nx = int(round(config.extent_x / h)) + 1
    ny = int(round(config.extent_y / h)) + 1
    width = config.kernel_width or calibrate_correlation_kernel(config.a_dot, h)
    sigma_cells = width / h
    _, radius = _kernel_sq_sum(sigma_cells)
    cells = (nx + 2 * radius + 2) * (ny + 2 * radius + 2)
    if cells * 4 > config.max_cells:
        raise InvalidConfig(f"landscape needs ~{cells * 4} cells, above the budget of {config.max_cells}")

    root = np.random.SeedSequence(config.seed)
    field_seq, g_seq = root.spawn(2)
    re, im = _smoothed_unit_noise(np.random.default_rng(field_seq), (ny, nx), sigma_cells, 2)
    gp, gm = _smoothed_unit_noise(np.random.default_rng(g_seq), (ny, nx), sigma_cells, 2)

    delta = 0.5 * (config.rice_nu + config.rice_sigma * (re + 1j * im))
    x = config.x_origin + h * np.arange(nx)
    y = config.y0 + h * np.arange(ny)
    return ValleyLandscape(
        x, y, delta, config.g_rms * gp, config.g_rms * gm, config, kernel_width=width, constants=constants
    )


@functools.lru_cache(maxsize=64)
def calibrate_correlation_kernel(
    a_dot: float,
    grid_spacing: float,
    rel_tol: float = 0.002,
    max_iter: int = 40,
    seed: int = 20240611,
    n_rows: int = 48,
    length_factor: float = 300.0,
) -> float:
    """Smoothing-kernel width (nm) whose E_VS field reproduces ``a_dot``.

    Bisection on the kernel width against a Monte-Carlo measurement that uses
    common random numbers, so the measured dot size is monotone in the width.
    The isotropic kernel is separable; 1D rows therefore have the same
    along-x correlation as rows of the 2D field.
    """
    if not a_dot > 3 * grid_spacing:
        raise InvalidConfig("calibration requires a_dot > 3*grid_spacing")
    n = int(length_factor * a_dot / grid_spacing)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((2, n_rows, n))

    def measured(width):
        s = width / grid_spacing
        re = ndimage.gaussian_filter1d(white[0], s, axis=-1, mode="wrap", truncate=KERNEL_TRUNCATE)
        im = ndimage.gaussian_filter1d(white[1], s, axis=-1, mode="wrap", truncate=KERNEL_TRUNCATE)
        evs = np.hypot(re, im)
        return autocorrelation(evs, grid_spacing, max_lag=int(3 * a_dot / grid_spacing)).fitted_a_dot

    lo, hi = 0.3 * a_dot, 1.2 * a_dot
    f_lo, f_hi = measured(lo) - a_dot, measured(hi) - a_dot
    if f_lo > 0 or f_hi < 0:
        raise NonConvergence("kernel calibration bracket does not contain the target")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = measured(mid) - a_dot
        if abs(f_mid) <= rel_tol * a_dot:
            return float(mid)
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    raise NonConvergence(f"kernel calibration did not converge in {max_iter} iterations")


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def rice_nll(nu, sigma, x):
    return _RiceLikelihood(np.asarray(x, float).ravel()).nll(nu, sigma)


class _RiceLikelihood:
    """Rice negative log-likelihood with the data reduced to a few sums.

    Only the Bessel term needs a pass over the samples; log I0(z) is written
    as log(i0e(z)) + z so it stays finite for large z.
    """

    def __init__(self, x):
        self.x = x
        self.n = x.size
        self.sx = float(np.sum(x))
        self.sxx = float(np.sum(x * x))
        with np.errstate(divide="ignore"):
            self.slog = float(np.sum(np.log(x)))

    def _quad(self, nu):
        return self.sxx - 2 * nu * self.sx + self.n * nu * nu  # sum (x - nu)^2

    def nll(self, nu, sigma):
        nu = abs(nu)
        s2 = sigma * sigma
        bessel = float(np.sum(np.log(special.i0e(self.x * (nu / s2))))) if nu > 0 else 0.0
        return -(self.slog - self.n * math.log(s2) - self._quad(nu) / (2 * s2) + bessel)

    def nll_and_grad(self, p):
        """Objective and gradient in (nu, log sigma)."""
        nu, sigma = p[0], math.exp(p[1])
        s2 = sigma * sigma
        if nu > 0:
            z = self.x * (nu / s2)
            i0 = special.i0e(z)
            bessel = float(np.sum(np.log(i0)))
            r = special.i1e(z) / i0 - 1.0  # d log i0e / dz
            sxr = float(np.sum(self.x * r))
        else:
            bessel, sxr = 0.0, -self.sx  # r(0) = -1
        quad = self._quad(nu)
        f = -(self.slog - self.n * math.log(s2) - quad / (2 * s2) + bessel)
        d_nu = (self.sx - self.n * nu) / s2 + sxr / s2
        d_logs = -2 * self.n + quad / s2 - 2 * nu * sxr / s2
        return f, np.array([-d_nu, -d_logs])


def _hessian(f, p, steps):
    p = np.asarray(p, float)
    n = len(p)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = steps[i]
            ej[j] = steps[j]
            val = (f(p + ei + ej) - f(p + ei - ej) - f(p - ei + ej) + f(p - ei - ej)) / (4 * steps[i] * steps[j])
            H[i, j] = H[j, i] = val
    return H


def fit_rice(samples) -> RiceFit:
    """Maximum-likelihood Rice fit with observed-information standard errors.

    When nu sits at (or near) the zero boundary the Fisher information for nu
    vanishes; its error is then taken from the profile likelihood
    (half-width at a log-likelihood drop of 1/2).
    """
    x = np.asarray(samples, float).ravel()
    if x.size < 100:
        raise DegenerateSamples("need at least 100 samples")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DegenerateSamples("samples must be finite and non-negative")
    if np.ptp(x) == 0:
        raise DegenerateSamples("all samples are equal")

    lik = _RiceLikelihood(x)
    m2 = float(np.mean(x**2))
    mean = float(np.mean(x))
    best = None
    for nu0 in (0.0, 0.5 * mean, mean):
        s0 = math.sqrt(max((m2 - nu0**2) / 2, 1e-12 * m2))
        res = optimize.minimize(lik.nll_and_grad, x0=[nu0, math.log(s0)], jac=True, method="L-BFGS-B",
                                bounds=[(0.0, None), (None, None)],
                                options={"ftol": 1e-13, "gtol": 1e-9 * x.size, "maxiter": 500})
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun) or best.status not in (0,):
        raise NonConvergence(f"Rice fit failed: {best.message}")
    nu, sigma = abs(best.x[0]), math.exp(best.x[1])

    def nll(p):
        return lik.nll(p[0], p[1])

    steps = [1e-3 * sigma, 1e-3 * sigma]
    H = _hessian(nll, [nu, sigma], steps)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.full((2, 2), np.nan)
    sigma_err = math.sqrt(cov[1, 1]) if cov[1, 1] > 0 else math.sqrt(1.0 / H[1, 1]) if H[1, 1] > 0 else float("nan")
    if cov[0, 0] > 0 and nu > 3 * math.sqrt(cov[0, 0]):
        nu_err = math.sqrt(cov[0, 0])
    else:
        nu_err = _profile_nu_error(lik, nu, sigma, -best.fun)
    return RiceFit(nu, sigma, nu_err, sigma_err, -float(best.fun), int(x.size))


def _profile_nu_error(lik, nu_hat, sigma_hat, ll_max):
    def profile(nu):
        res = optimize.minimize_scalar(
            lambda s: lik.nll(nu, s), bounds=(0.2 * sigma_hat, 5 * sigma_hat), method="bounded",
            options={"xatol": 1e-4 * sigma_hat},
        )
        return -res.fun

    def drop(nu):
        return ll_max - profile(nu) - 0.5

    hi = nu_hat + 0.05 * sigma_hat
    while drop(hi) < 0:
        hi = nu_hat + 2 * (hi - nu_hat)
        if hi > nu_hat + 20 * sigma_hat:
            raise NonConvergence("profile likelihood for nu is flat")
    up = optimize.brentq(drop, nu_hat, hi, xtol=1e-4 * sigma_hat)
    return float(up - nu_hat)


def acf_model(d, a_dot):
    """Gaussian dot-size autocorrelation exp(-d^2 / ((4 - pi) a_dot^2))."""
    return np.exp(-np.asarray(d, float) ** 2 / ((4 - math.pi) * a_dot**2))


def autocorrelation(trace, spacing, max_lag=None) -> AcfResult:
    """Row-averaged, mean-subtracted, variance-normalized autocorrelation.

    ``trace`` is a 1D trace or a 2D stack of traces (rows), sampled every
    ``spacing`` nm. The lag-k estimate divides by the N-k overlapping pairs.
    """
    rows = np.atleast_2d(np.asarray(trace, float))
    n = rows.shape[1]
    if n < 50:
        raise ValueError("trace needs at least 50 points")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    max_lag = n // 4 if max_lag is None else min(int(max_lag), n - 1)
    centred = rows - rows.mean(axis=1, keepdims=True)
    var = np.mean(centred**2, axis=1)
    if np.any(var <= 0):
        raise ZeroVariance("trace has zero variance")
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(centred, nfft, axis=1)
    raw = np.fft.irfft(np.abs(spec) ** 2, nfft, axis=1)[:, : max_lag + 1]
    counts = n - np.arange(max_lag + 1)
    acf_rows = raw / counts / var[:, None]
    acf_rows[:, 0] = 1.0
    acf = np.clip(acf_rows.mean(axis=0), -1.0, 1.0)
    lags = spacing * np.arange(max_lag + 1)
    a_dot, resid, n_fit = fit_acf(lags, acf)
    return AcfResult(lags, acf, a_dot, resid, n_fit)


def fit_acf(lags, acf, cutoff=ACF_FIT_CUTOFF):
    """Least-squares dot size from the leading lags where acf > ``cutoff``.

    Returns (a_dot, rms residual, number of lags used).
    """
    lags = np.asarray(lags, float)
    acf = np.asarray(acf, float)
    below = np.nonzero(acf <= cutoff)[0]
    stop = int(below[0]) if below.size else len(acf)
    if stop < 3:
        raise ZeroVariance("autocorrelation decays within two lags; trace is too coarse")
    d, c = lags[:stop], acf[:stop]
    target = math.exp(-1 / (4 - math.pi))
    guess_idx = int(np.argmin(np.abs(c - target)))
    a0 = max(d[guess_idx], d[1])
    popt, _ = optimize.curve_fit(acf_model, d, c, p0=[a0], bounds=(1e-9, np.inf))
    a_dot = float(popt[0])
    resid = float(np.sqrt(np.mean((acf_model(d, a_dot) - c) ** 2)))
    return a_dot, resid, stop


# --------------------------------------------------------------------------
# path features
# --------------------------------------------------------------------------


def _sample_path(landscape, path, step):
    step = landscape.grid_spacing if step is None else step
    xs, ys = path.sample(step)
    if not landscape.contains(xs, ys):
        raise OutOfBounds("path leaves the landscape")
    return xs, ys, landscape.evs_at(xs, ys)


def find_low_evs_spots(landscape, path, threshold=5.0, step=None):
    """Local minima of E_VS along ``path`` that lie below ``threshold``."""
    xs, ys, e = _sample_path(landscape, path, step)
    spots = []
    n = len(e)
    for i in range(1, n - 1):
        if not (e[i] < threshold and e[i] <= e[i - 1] and e[i] < e[i + 1]):
            continue
        left = _flank_slope(xs, e, i - 1)
        right = _flank_slope(xs, e, i + 1)
        spots.append(LowSpot(float(xs[i]), float(ys[i]), float(e[i]), 0.5 * (abs(left) + abs(right)), left, right))
    return spots


def _flank_slope(xs, e, j):
    lo, hi = max(j - 1, 0), min(j + 1, len(e) - 1)
    return float((e[hi] - e[lo]) / (xs[hi] - xs[lo]))


def resonance_crossings(landscape, path, B, g=None, step=None):
    """Positions along ``path`` where E_VS crosses the Zeeman energy g*mu_B*B."""
    if not B > 0:
        raise InvalidConfig("B must be positive")
    ez = landscape.constants.zeeman(B, g)
    xs, ys, e = _sample_path(landscape, path, step)
    return crossings_from_samples(xs, ys, e, ez)


def crossings_from_samples(xs, ys, e, level):
    diff = e - level
    out = []
    for i in range(len(e) - 1):
        a, b = diff[i], diff[i + 1]
        if a == 0 and i > 0:
            continue  # counted as the end of the previous segment
        if a * b < 0 or (b == 0 and a != 0):
            t = a / (a - b)
            x = xs[i] + t * (xs[i + 1] - xs[i])
            y = ys[i] + t * (ys[i + 1] - ys[i])
            slope = abs(e[i + 1] - e[i]) / (xs[i + 1] - xs[i])
            out.append(Crossing(float(x), float(y), float(slope), 1 if b > a else -1))
    return out


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

UNITS = {"x": "nm", "y": "nm", "delta": "ueV", "g": "dimensionless"}
COLUMNS = ["x_nm", "y_nm", "re_delta_ueV", "im_delta_ueV", "dg_plus", "dg_minus"]


def save_landscape(landscape: ValleyLandscape, path):
    header = {
        "kind": "valley_landscape",
        "version": fileio.FORMAT_VERSION,
        "config": landscape.config.to_dict(),
        "seed": landscape.seed,
        "kernel_width": landscape.kernel_width,
        "units": UNITS,
        "nx": len(landscape.x),
        "ny": len(landscape.y),
    }
    X, Y = np.meshgrid(landscape.x, landscape.y)
    cols = [X.ravel(), Y.ravel(), landscape.delta.real.ravel(), landscape.delta.imag.ravel(),
            landscape.g_plus.ravel(), landscape.g_minus.ravel()]
    return fileio.write_csv(path, COLUMNS, zip(*cols), header=header)


def load_landscape(path) -> ValleyLandscape:
    header, cols = fileio.read_columns(path)
    if header is None or header.get("kind") != "valley_landscape":
        raise InvalidConfig(f"{path} is not a landscape file")
    if header.get("version") != fileio.FORMAT_VERSION:
        raise InvalidConfig(f"unsupported landscape file version {header.get('version')!r}")
    nx, ny = header["nx"], header["ny"]

    def grid(name):
        return cols[name].reshape(ny, nx)

    cfg = LandscapeConfig.from_dict(header["config"])
    return ValleyLandscape(
        grid("x_nm")[0].copy(),
        grid("y_nm")[:, 0].copy(),
        grid("re_delta_ueV") + 1j * grid("im_delta_ueV"),
        grid("dg_plus"),
        grid("dg_minus"),
        cfg,
        kernel_width=float(header["kernel_width"]) if header["kernel_width"] is not None else float("nan"),
    )

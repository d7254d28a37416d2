"""Valley-splitting mapping protocol: P_S(B, d) scans, ridge extraction, map assembly.

At each shuttle distance d the spin splitting of the mobile electron is
renormalized where the local E_VS equals the Zeeman energy. Scanning B and
looking for that feature in every d column recovers E_VS(d) along one lateral
offset y; several offsets are then stitched into a 2D map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import interpolate

from . import fileio
from .constants import CONSTANTS
from .dynamics import CouplingParams, dispersive_shift, lz_exponent
from .errors import InvalidParams, MismatchedAxes, NoRidgeFound, OutOfBounds, ZeroField
from .landscape import ValleyLandscape

DEFAULT_B_STEP = 5e-3  # T


def tau_w_schedule(B, phase_budget=2 * np.pi, g_ref=2.0, delta_g_eff=1e-2, constants=CONSTANTS):
    """Wait time that keeps the acquired wait phase fixed across B (ns).

    tau_W = phase_budget * hbar / (g_ref * mu_B * B * delta_g_eff).
    """
    B = np.asarray(B, float)
    if np.any(B <= 0):
        raise ZeroField("tau_W schedule needs B > 0")
    return phase_budget * constants.hbar / (g_ref * constants.mu_B * B * delta_g_eff)


@dataclass
class MappingSettings:
    """Scan protocol knobs shared by simulation and extraction."""

    v_S: float = 28.0  # nm/ns (100 MHz at lambda = 280 nm)
    phase_budget: float = 2 * np.pi
    g_ref: float = 2.0
    delta_g_eff: float = 1e-2
    include_path_flips: bool = True

    def tau_w(self, B, constants=CONSTANTS):
        return tau_w_schedule(B, self.phase_budget, self.g_ref, self.delta_g_eff, constants)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PsScanPatch:
    B: np.ndarray  # T, uniform
    d: np.ndarray  # nm
    ps: np.ndarray  # [iB, id]
    tau_W: np.ndarray  # ns per B
    y: float
    patch_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.B = np.asarray(self.B, float)
        self.d = np.asarray(self.d, float)
        self.ps = np.asarray(self.ps, float)
        self.tau_W = np.asarray(self.tau_W, float)
        if self.ps.shape != (len(self.B), len(self.d)):
            raise MismatchedAxes("P_S matrix must have shape (n_B, n_d)")
        if np.any(np.diff(self.B) <= 0) or np.any(np.diff(self.d) <= 0):
            raise InvalidParams("patch axes must be strictly increasing")

    @property
    def B_step(self):
        return float(np.mean(np.diff(self.B)))

    def write_csv(self, path):
        header = {"kind": "ps_scan_patch", "version": fileio.FORMAT_VERSION, "y_nm": self.y,
                  "patch_id": self.patch_id, "n_B": len(self.B), "n_d": len(self.d),
                  "units": {"B": "T", "d": "nm", "tau_W": "ns"}, "metadata": self.metadata}
        Bg, dg = np.meshgrid(self.B, self.d, indexing="ij")
        tw = np.broadcast_to(self.tau_W[:, None], Bg.shape)
        return fileio.write_columns(path, {"B_T": Bg.ravel(), "d_nm": dg.ravel(), "tau_W_ns": tw.ravel(),
                                           "P_S": self.ps.ravel()}, header=header)

    @classmethod
    def read_csv(cls, path):
        header, cols = fileio.read_columns(path)
        if header is None or header.get("kind") != "ps_scan_patch":
            raise InvalidParams(f"{path} is not a patch file")
        nb, nd = header["n_B"], header["n_d"]
        B = cols["B_T"].reshape(nb, nd)[:, 0]
        d = cols["d_nm"].reshape(nb, nd)[0]
        return cls(B, d, cols["P_S"].reshape(nb, nd), cols["tau_W_ns"].reshape(nb, nd)[:, 0], header["y_nm"],
                   header.get("patch_id", ""), header.get("metadata", {}))


@dataclass
class EvsTraceEstimate:
    d: np.ndarray
    evs: np.ndarray  # NaN where missing
    confidence: np.ndarray
    y: float
    raw: np.ndarray | None = None  # per-column estimates before smoothing
    missing: list = field(default_factory=list)  # column indices without a ridge

    @property
    def coverage(self):
        """Fraction of columns with a detected resonance."""
        return 1.0 - len(self.missing) / len(self.d)

    @property
    def flagged(self):
        """True when fewer than 80% of the columns show a resonance."""
        return self.coverage < 0.8

    def write_csv(self, path):
        header = {"kind": "evs_trace", "version": fileio.FORMAT_VERSION, "y_nm": float(self.y),
                  "missing": [int(j) for j in self.missing], "units": {"d": "nm", "evs": "ueV"}}
        raw = self.raw if self.raw is not None else np.full(len(self.d), np.nan)
        return fileio.write_columns(path, {"d_nm": self.d, "evs_ueV": self.evs, "confidence_ueV": self.confidence,
                                           "raw_ueV": raw}, header=header)

    @classmethod
    def read_csv(cls, path):
        header, cols = fileio.read_columns(path)
        return cls(cols["d_nm"], cols["evs_ueV"], cols["confidence_ueV"], header["y_nm"], cols["raw_ueV"],
                   list(header.get("missing", [])))


@dataclass
class EvsMap:
    d: np.ndarray
    y: np.ndarray
    evs: np.ndarray  # [iy, id]
    confidence: np.ndarray

    def write_csv(self, path):
        D, Y = np.meshgrid(self.d, self.y)
        header = {"kind": "evs_map", "version": fileio.FORMAT_VERSION, "nd": len(self.d), "ny": len(self.y),
                  "units": {"d": "nm", "y": "nm", "evs": "ueV"}}
        return fileio.write_columns(path, {"d_nm": D.ravel(), "y_nm": Y.ravel(), "evs_ueV": self.evs.ravel(),
                                           "confidence_ueV": self.confidence.ravel()}, header=header)

    @classmethod
    def read_csv(cls, path):
        header, cols = fileio.read_columns(path)
        nd, ny = header["nd"], header["ny"]
        return cls(cols["d_nm"].reshape(ny, nd)[0], cols["y_nm"].reshape(ny, nd)[:, 0],
                   cols["evs_ueV"].reshape(ny, nd), cols["confidence_ueV"].reshape(ny, nd))

    def to_landscape(self):
        """Real-valued landscape view of the map (g deviations zero)."""
        evs = np.nan_to_num(self.evs, nan=0.0)
        return ValleyLandscape.from_evs(self.d, self.y, np.clip(evs, 0, None))


# --------------------------------------------------------------------------
# scan synthesis
# --------------------------------------------------------------------------


def _hybrid_visibility(detuning, delta_sv):
    """Singlet visibility left when the spin hybridizes with the other valley at the wait point."""
    det2 = np.asarray(detuning, float) ** 2
    if delta_sv == 0:
        return np.ones_like(det2)
    mix = 4 * delta_sv**2 / (det2 + 4 * delta_sv**2)
    return 1 - 0.5 * mix


def expected_ps(landscape: ValleyLandscape, coupling: CouplingParams, y, B, d,
                settings: MappingSettings = MappingSettings()):
    """Noise-free P_S(B, d) for shuttle-to-d, wait tau_W(B), shuttle-back."""
    B = np.atleast_1d(np.asarray(B, float))
    d = np.atleast_1d(np.asarray(d, float))
    c = landscape.constants
    x0 = landscape.x[0]
    xs = np.union1d(np.arange(x0, x0 + d.max() + landscape.grid_spacing, landscape.grid_spacing), x0 + d)
    xs = xs[xs <= x0 + d.max() + 1e-9]
    ys = np.full_like(xs, float(y))
    if not landscape.contains(xs, ys):
        raise OutOfBounds("scan leaves the landscape")
    e = landscape.evs_at(xs, ys)
    _, dgm = landscape.g_at(xs, ys)
    ez = c.zeeman(B)[:, None]  # [B, 1]
    mub = c.mu_B * B[:, None]
    shift = dispersive_shift(ez - e[None, :], coupling.delta_sv) / mub  # g units
    tau_w = settings.tau_w(B, c)
    v = settings.v_S
    dx = np.diff(xs)
    out = np.zeros((len(B), len(d)))
    xd = x0 + d
    t_total = 2 * d[None, :] / v + tau_w[:, None]
    vis_static = np.exp(-(t_total / coupling.T2_static) ** 2)
    # the mobile electron stays in its ground valley during mapping
    g_dev = dgm[None, :] + shift
    cum = np.concatenate([np.zeros((len(B), 1)), np.cumsum(0.5 * (g_dev[:, 1:] + g_dev[:, :-1]) * dx, axis=1)],
                         axis=1)
    shuttle = np.array([np.interp(xd, xs, row) for row in cum]) * 2 / v  # there and back, ns
    wait = np.array([np.interp(xd, xs, row) for row in g_dev]) * tau_w[:, None]
    e_d = np.interp(xd, xs, e)
    vis = vis_static * _hybrid_visibility(ez - e_d[None, :], coupling.delta_sv)
    if settings.include_path_flips and coupling.delta_sv > 0:
        vis = vis * _path_flip_visibility(xs, e, ez[:, 0], xd, coupling.delta_sv, v, c.hbar)
    k = mub / c.hbar
    for mu in (0, 1):
        w = coupling.static_weights[mu]
        if w == 0:
            continue
        phi = k * ((coupling.g_L[mu] - c.g0) * t_total - shuttle - wait)
        out += w * 0.5 * (1 + vis * np.cos(phi))
    return np.clip(out, 0.0, 1.0)


def _path_flip_visibility(xs, e, ez, xd, delta_sv, v, hbar):
    """Product of Q_svf^2 over resonance crossings before each d (crossed there and back)."""
    out = np.ones((len(ez), len(xd)))
    slope = np.abs(np.diff(e)) / np.diff(xs)
    for i, level in enumerate(ez):
        s = np.sign(e - level)
        idx = np.nonzero(s[:-1] * s[1:] < 0)[0]
        if len(idx) == 0:
            continue
        a = e[idx] - level
        xc = xs[idx] + a / (a - (e[idx + 1] - level)) * (xs[idx + 1] - xs[idx])
        expo = 2 * lz_exponent(delta_sv, np.maximum(slope[idx], 1e-12), v, hbar)
        cum = np.concatenate([[0.0], np.cumsum(expo)])
        out[i] = np.exp(-cum[np.searchsorted(xc, xd, side="left")])
    return out


def simulate_ps_scan(landscape: ValleyLandscape, coupling: CouplingParams, y, B_grid, d_grid, n_samples,
                     rng: np.random.Generator, settings: MappingSettings = MappingSettings(), patch_id=""):
    """Synthesize a mapping patch; each P_S value is a mean of ``n_samples`` single shots."""
    if int(n_samples) < 1:
        raise InvalidParams("n_samples must be >= 1")
    B_grid = np.asarray(B_grid, float)
    d_grid = np.asarray(d_grid, float)
    if np.any(B_grid <= 0):
        raise ZeroField("B grid must be positive")
    p = expected_ps(landscape, coupling, y, B_grid, d_grid, settings)
    ps = rng.binomial(int(n_samples), p) / int(n_samples)
    meta = {"n_samples": int(n_samples), "settings": settings.to_dict(), "coupling": coupling.to_dict()}
    return PsScanPatch(B_grid, d_grid, ps, settings.tau_w(B_grid, landscape.constants), float(y), patch_id, meta)


def normalize_linewise(patch: PsScanPatch) -> PsScanPatch:
    """Subtract the mean of every constant-B row."""
    ps = patch.ps - patch.ps.mean(axis=1, keepdims=True)
    return PsScanPatch(patch.B, patch.d, ps, patch.tau_W, patch.y, patch.patch_id, dict(patch.metadata))


# --------------------------------------------------------------------------
# ridge extraction
# --------------------------------------------------------------------------


@dataclass
class ColumnRidge:
    evs: float
    confidence: float
    score: float


def _column_design(patch, coupling, evs_trial, constants):
    """Lineshape basis for trial resonance energies: rows [trial, B]."""
    ez = constants.zeeman(patch.B)[None, :]
    det = ez - np.asarray(evs_trial, float)[:, None]
    theta = dispersive_shift(det, coupling.delta_sv) * patch.tau_W[None, :] / constants.hbar
    vis = _hybrid_visibility(det, coupling.delta_sv)
    return vis * np.cos(theta), vis * np.sin(theta)


def _fit_trials(col, basis_c, basis_s, q):
    """Explained sum of squares and amplitude of col ~ background + b*C + c*S per trial row.

    The background (columns of ``q``) is projected out of the data and of
    both lineshape components before the two-parameter fit.
    """
    y = col - q @ (q.T @ col)
    C = basis_c - (basis_c @ q) @ q.T
    S = basis_s - (basis_s @ q) @ q.T
    cc = np.einsum("ij,ij->i", C, C)
    ss = np.einsum("ij,ij->i", S, S)
    cs = np.einsum("ij,ij->i", C, S)
    cy = C @ y
    sy = S @ y
    det = cc * ss - cs**2
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = det > 1e-12 * np.maximum(cc * ss, 1e-300)
        a = np.where(ok, (ss * cy - cs * sy) / det, 0.0)
        b = np.where(ok, (cc * sy - cs * cy) / det, 0.0)
    explained = a * cy + b * sy
    return float(y @ y) - explained, explained, np.hypot(a, b)


def _background_basis(n, degree):
    u = np.linspace(-1.0, 1.0, n)
    q, _ = np.linalg.qr(np.vander(u, degree + 1, increasing=True))
    return q


def extract_column(patch: PsScanPatch, j, coupling: CouplingParams, constants=CONSTANTS, min_snr=30.0,
                   min_amplitude=0.1, background_degree=3, noise_var=None) -> ColumnRidge:
    """Matched-filter estimate of the resonance energy in column ``j``.

    Every trial resonance energy on a half-step grid is fitted with the
    dispersive lineshape (free phase and amplitude) on top of a smooth
    polynomial background in B; the best trial is refined on a fine grid.
    A column is rejected when the feature is weak (``min_snr`` in units of
    the shot-noise variance), when the dispersive wings alone (rows more
    than one field step from the resonance) do not reach ``min_snr``, when
    the lineshape amplitude is small, or when it sits at the edge of the B
    range. The wing test rejects single-row artefacts, which the narrow
    hybridization dip would otherwise match.
    """
    col = patch.ps[:, j]
    if noise_var is None:
        noise_var = 0.25 / patch.metadata.get("n_samples", 100)
    q = _background_basis(len(col), background_degree)
    ez = constants.zeeman(patch.B)
    step = constants.zeeman(patch.B_step)
    coarse = np.arange(ez[0], ez[-1] + 0.5 * step, 0.5 * step)
    Cc, Sc = _column_design(patch, coupling, coarse, constants)
    _, explained, _ = _fit_trials(col, Cc, Sc, q)
    i = int(np.argmax(explained))
    fine = np.linspace(coarse[max(i - 1, 0)], coarse[min(i + 1, len(coarse) - 1)], 41)
    Cf, Sf = _column_design(patch, coupling, fine, constants)
    _, explained_f, amp_f = _fit_trials(col, Cf, Sf, q)
    k = int(np.argmax(explained_f))
    best = fine[k]
    score = explained_f[k] / noise_var
    wings = np.abs(ez - best) > step
    qw = _background_basis(int(wings.sum()), background_degree) if wings.sum() > background_degree + 3 else None
    if qw is not None:
        _, expl_w, _ = _fit_trials(col[wings], Cf[k:k + 1, wings], Sf[k:k + 1, wings], qw)
        wing_score = expl_w[0] / noise_var
    else:
        wing_score = 0.0
    edge = 1.5 * step
    if (score < min_snr or wing_score < min_snr or amp_f[k] < min_amplitude
            or best < ez[0] + edge or best > ez[-1] - edge):
        raise NoRidgeFound(f"no resonance in column {j} (score {score:.1f}, wings {wing_score:.1f}, "
                           f"amplitude {amp_f[k]:.3f})")
    # ambiguity: a competing optimum more than 3 steps away with a comparable score
    conf = 0.5 * step
    far = np.abs(coarse - best) > 3 * step
    if np.any(far) and score - np.max(explained[far]) / noise_var < 10.0:
        rival = coarse[far][np.argmax(explained[far])]
        conf = max(conf, 0.5 * abs(rival - best))
    return ColumnRidge(float(best), float(conf), float(score))


def extract_ridge(patch: PsScanPatch, coupling: CouplingParams, smoothing=3.0, max_gap=3, constants=CONSTANTS,
                  min_snr=30.0, jump=3.0, min_run=3, plateau=12.0) -> EvsTraceEstimate:
    """E_VS(d) along the patch from the resonance feature in every column.

    Columns without a feature are recorded as missing; gaps of at most
    ``max_gap`` columns are bridged by the smoothing spline, longer ones stay
    NaN. ``smoothing`` is the spline knot spacing in nm (None for no spline).
    The spline is not carried across raw steps larger than ``jump`` (ueV),
    and runs of fewer than ``min_run`` consecutive detections are discarded,
    as are runs spanning at least ``plateau`` nm that stay within half a field
    step (None keeps them).
    Raises :class:`NoRidgeFound` if no column has a feature.
    """
    nd = len(patch.d)
    raw = np.full(nd, np.nan)
    conf = np.full(nd, np.nan)
    for j in range(nd):
        try:
            r = extract_column(patch, j, coupling, constants, min_snr)
        except NoRidgeFound:
            continue
        raw[j], conf[j] = r.evs, r.confidence
    # isolated detections between steps are not trusted; long runs pinned to one
    # energy are horizontal visibility features of the path, not the local ridge
    flat_tol = 0.5 * constants.zeeman(patch.B_step)
    for a, b in _split_at_jumps(_segments(np.isfinite(raw)), patch.d, raw, jump):
        vals = raw[a:b][np.isfinite(raw[a:b])]
        pinned = plateau is not None and patch.d[b - 1] - patch.d[a] >= plateau and np.ptp(vals) <= flat_tol
        if b - a < min_run or pinned:
            raw[a:b] = np.nan
            conf[a:b] = np.nan
    ok = np.isfinite(raw)
    if not ok.any():
        raise NoRidgeFound("no resonance feature in any column")
    missing = [int(j) for j in np.nonzero(~ok)[0]]
    evs = raw.copy()
    half_step = 0.5 * constants.zeeman(patch.B_step)
    fill = _fillable(ok, max_gap)
    for seg in _split_at_jumps(_segments(ok | fill), patch.d, raw, jump):
        idx = np.arange(seg[0], seg[1])
        good = idx[ok[idx]]
        if len(good) == 0:
            continue
        # never extrapolate beyond the outermost detections of a segment
        idx = idx[(idx >= good[0]) & (idx <= good[-1])]
        if smoothing is not None and len(good) >= 8:
            evs[idx] = _smooth(patch.d[good], raw[good], patch.d[idx], smoothing)
        elif len(good) >= 2:
            evs[idx] = np.interp(patch.d[idx], patch.d[good], raw[good])
    conf = np.where(np.isfinite(conf), conf, np.where(np.isfinite(evs), 2 * half_step, np.nan))
    evs = np.where(np.isfinite(evs), np.maximum(evs, 0.0), np.nan)
    return EvsTraceEstimate(patch.d.copy(), evs, conf, patch.y, raw, missing)


def _fillable(ok, max_gap):
    """Missing positions inside gaps no longer than ``max_gap`` with data on both sides."""
    fill = np.zeros_like(ok)
    j = 0
    n = len(ok)
    while j < n:
        if ok[j]:
            j += 1
            continue
        k = j
        while k < n and not ok[k]:
            k += 1
        if j > 0 and k < n and k - j <= max_gap:
            fill[j:k] = True
        j = k
    return fill


def _segments(mask):
    segs = []
    j = 0
    n = len(mask)
    while j < n:
        if not mask[j]:
            j += 1
            continue
        k = j
        while k < n and mask[k]:
            k += 1
        segs.append((j, k))
        j = k
    return segs


def _split_at_jumps(segs, d, raw, jump, max_slope=10.0):
    """Split segments where a detection departs by more than ``jump`` from the local linear trend.

    Without a trend (first pair of a segment) steps up to ``max_slope`` (ueV/nm)
    times the spacing are accepted.
    """
    out = []
    for a, b in segs:
        good = np.arange(a, b)[np.isfinite(raw[a:b])]
        cuts = [a]
        for n in range(1, len(good)):
            j0, j1 = good[n - 1], good[n]
            pred, tol = raw[j0], max(jump, max_slope * abs(d[j1] - d[j0]))
            if n >= 2 and good[n - 2] >= cuts[-1]:
                jm = good[n - 2]
                pred = raw[j0] + (raw[j0] - raw[jm]) * (d[j1] - d[j0]) / (d[j0] - d[jm])
                tol = jump
            if abs(raw[j1] - pred) > tol:
                cuts.append(j1 if j1 - j0 == 1 else (j0 + j1 + 1) // 2)
        cuts.append(b)
        out.extend((lo, hi) for lo, hi in zip(cuts[:-1], cuts[1:]) if hi > lo)
    return out


def _smooth(x, y, x_eval, knot_spacing):
    n_int = int((x[-1] - x[0]) // knot_spacing)
    knots = np.linspace(x[0], x[-1], n_int + 1)[1:-1] if n_int >= 2 else []
    try:
        spl = interpolate.LSQUnivariateSpline(x, y, knots, k=3)
    except ValueError:
        return np.interp(x_eval, x, y)
    return spl(x_eval)


# --------------------------------------------------------------------------
# map assembly and timing
# --------------------------------------------------------------------------


def assemble_map(traces, y_grid=None) -> EvsMap:
    """Stack traces at distinct y offsets and interpolate linearly in y."""
    if len(traces) < 2:
        raise InvalidParams("need at least two traces")
    traces = sorted(traces, key=lambda t: t.y)
    d = traces[0].d
    for t in traces[1:]:
        if len(t.d) != len(d) or not np.allclose(t.d, d, rtol=0, atol=1e-9):
            raise MismatchedAxes("traces must share the d axis")
    ys = np.array([t.y for t in traces])
    if np.any(np.diff(ys) <= 0):
        raise MismatchedAxes("trace y offsets must be distinct")
    evs = np.array([t.evs for t in traces])
    conf = np.array([t.confidence for t in traces])
    y_grid = ys if y_grid is None else np.asarray(y_grid, float)
    if y_grid.min() < ys[0] - 1e-9 or y_grid.max() > ys[-1] + 1e-9:
        raise OutOfBounds("y grid extends beyond the outermost traces")
    j = np.clip(np.searchsorted(ys, y_grid, side="right") - 1, 0, len(ys) - 2)
    w = ((y_grid - ys[j]) / (ys[j + 1] - ys[j]))[:, None]
    out = (1 - w) * evs[j] + w * evs[j + 1]
    exact = np.isclose(w, 0)[:, 0]
    out[exact] = evs[j[exact]]
    exact1 = np.isclose(w, 1)[:, 0]
    out[exact1] = evs[j[exact1] + 1]
    c = np.maximum((1 - w) * conf[j], w * conf[j + 1])
    return EvsMap(d.copy(), y_grid.copy(), out, c)


@dataclass
class TimeEstimate:
    tau_ss: Fraction  # s
    n_B: int
    n_samples: int
    n_x: int
    n_y: int
    tau_B: Fraction  # s
    l_x: Fraction | None = None
    delta_x: Fraction | None = None
    l_y: Fraction | None = None
    delta_y: Fraction | None = None

    @property
    def product_seconds(self):
        return self.tau_ss * self.n_B * self.n_samples * self.n_x * self.n_y

    @property
    def total_seconds(self):
        return self.product_seconds + self.tau_B

    def to_dict(self):
        def num(v):
            if v is None:
                return None
            v = Fraction(v)
            return int(v) if v.denominator == 1 else float(v)

        return {k: num(getattr(self, k)) for k in ("tau_ss", "n_B", "n_samples", "n_x", "n_y", "tau_B", "l_x",
                                                    "delta_x", "l_y", "delta_y", "product_seconds",
                                                    "total_seconds")}


def _exact(v, name):
    try:
        f = Fraction(str(v)) if not isinstance(v, Fraction) else v
    except (ValueError, TypeError):
        raise InvalidParams(f"{name} is not a number") from None
    return f


def _count(n=None, length=None, resolution=None, name="n"):
    if n is None:
        if length is None or resolution is None:
            raise InvalidParams(f"{name} needs either a count or length and resolution")
        length, resolution = _exact(length, name), _exact(resolution, name)
        if length <= 0 or resolution <= 0:
            raise InvalidParams(f"{name}: length and resolution must be positive")
        n = length / resolution
        if n.denominator != 1:
            raise InvalidParams(f"{name}: length is not a multiple of the resolution")
    n = _exact(n, name)
    if n.denominator != 1 or n <= 0:
        raise InvalidParams(f"{name} must be a positive integer")
    return int(n)


def estimate_measurement_time(tau_ss, n_B, n_samples, n_x=None, n_y=None, tau_B=None, tau_B_per_field=None,
                              l_x=None, delta_x=None, l_y=None, delta_y=None) -> TimeEstimate:
    """T_meas = tau_ss n_B n_samples n_x n_y + tau_B in exact rational arithmetic.

    ``tau_B`` is the total field-change overhead in s; alternatively
    ``tau_B_per_field`` is multiplied by n_B. Counts n_x and n_y may be given
    directly or as length / resolution.
    """
    tau_ss = _exact(tau_ss, "tau_ss")
    if tau_ss <= 0:
        raise InvalidParams("tau_ss must be positive")
    n_B = _count(n_B, name="n_B")
    n_samples = _count(n_samples, name="n_samples")
    nx = _count(n_x, l_x, delta_x, "n_x")
    ny = _count(n_y, l_y, delta_y, "n_y")
    if tau_B is None:
        tau_B = _exact(tau_B_per_field if tau_B_per_field is not None else 0, "tau_B") * n_B
    tau_B = _exact(tau_B, "tau_B")
    if tau_B < 0:
        raise InvalidParams("tau_B must be non-negative")
    opt = {k: (None if v is None else _exact(v, k)) for k, v in
           (("l_x", l_x), ("delta_x", delta_x), ("l_y", l_y), ("delta_y", delta_y))}
    return TimeEstimate(tau_ss, n_B, n_samples, nx, ny, tau_B, **opt)

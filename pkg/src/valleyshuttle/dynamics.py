"""Spin-valley dynamics of the shuttled electron.

Two propagation routes are provided:

* :func:`propagate_full` integrates the 4x4 spin-valley Schroedinger equation
  along the trajectory with a fourth-order commutator-free exponential
  integrator.
* :func:`propagate_events` is a classical event model: Landau-Zener spin-valley
  flips at resonance crossings, stochastic valley flips at E_VS minima, and
  deterministic Larmor phase accumulation in between. It is vectorized over an
  ensemble of trajectories.

Basis ordering is spin-major, ``index = 2*spin + valley`` with spin 0 = up and
valley 0/1 = bare valley states. The valley labels "+" and "-" refer to the
local eigenstates of the intervalley coupling: "+" is the excited valley
(energy +|Delta|), "-" the ground valley.

Units: nm, ns, ueV, T.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constants import CONSTANTS
from .errors import InvalidParams, OutOfBounds, StepTooLarge, ZeroSweepRate
from .landscape import Path, ValleyLandscape, crossings_from_samples, find_low_evs_spots
from .traces import SingletTrace

UP, DOWN = 0, 1
PLUS, MINUS = 0, 1
# below this field (T) the dispersive shift is not folded into g: the g-shift form diverges as 1/B
DISPERSIVE_B_MIN = 1e-9

# fourth-order commutator-free exponential integrator (two exponentials per step)
_SQ3 = math.sqrt(3.0)
_C1, _C2 = 0.5 - _SQ3 / 6, 0.5 + _SQ3 / 6
_A1, _A2 = (3 - 2 * _SQ3) / 12, (3 + 2 * _SQ3) / 12


# --------------------------------------------------------------------------
# schedule and parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DriveWaveform:
    """Four-phase conveyor drive; used only as schedule metadata (mV)."""

    amplitudes: tuple = (150.0, 180.0, 150.0, 180.0)
    offsets: tuple = (700.0, 840.0, 700.0, 840.0)

    def voltages(self, t_ns, f_mhz):
        """Gate voltages V_i(t) = A_i cos(2 pi f t - (i-1) pi/2) + B_i."""
        t = np.asarray(t_ns, float)[..., None]
        i = np.arange(4)
        return np.asarray(self.amplitudes) * np.cos(2 * np.pi * f_mhz * 1e-3 * t - i * np.pi / 2) + np.asarray(self.offsets)


@dataclass(frozen=True)
class ShuttleSchedule:
    """Pulse-sequence parameters.

    ``tau_S`` is the round-trip shuttle time, so the one-way pass takes
    ``tau_S/2`` and v_S = 2 d / tau_S (nm/ns, numerically equal to m/s).
    ``path`` is the lateral trajectory; only its first ``d`` nm are used.
    """

    d: float
    tau_S: float
    B: float
    tau_W: float = 0.0
    n_rep: int = 1
    lam: float = 280.0
    path: Path | None = None
    drive: DriveWaveform = DriveWaveform()

    def __post_init__(self):
        if not self.d > 0:
            raise InvalidParams("d must be positive")
        if not self.tau_S > 0:
            raise InvalidParams("tau_S must be positive")
        if self.tau_W < 0:
            raise InvalidParams("tau_W must be non-negative")
        if int(self.n_rep) != self.n_rep or self.n_rep < 1:
            raise InvalidParams("n_rep must be an integer >= 1")
        if self.B < 0:
            raise InvalidParams("B must be non-negative")
        if not self.lam > 0:
            raise InvalidParams("lambda must be positive")
        if self.path is not None and self.path.span < self.d - 1e-9:
            raise InvalidParams("path is shorter than d")

    @classmethod
    def from_frequency(cls, d, f_mhz, B, lam=280.0, **kw):
        """Schedule with d = lam * f * tau_S / 2 (f in MHz)."""
        v = lam * f_mhz * 1e-3
        return cls(d=d, tau_S=2 * d / v, B=B, lam=lam, **kw)

    @classmethod
    def from_velocity(cls, d, v_S, B, **kw):
        return cls(d=d, tau_S=2 * d / v_S, B=B, **kw)

    @property
    def v_S(self):
        return 2 * self.d / self.tau_S

    @property
    def f_mhz(self):
        return self.v_S / self.lam * 1e3

    @property
    def total_time(self):
        return self.n_rep * (self.tau_S + self.tau_W)

    @property
    def total_distance(self):
        return 2 * self.n_rep * self.d

    def trajectory(self, x_origin=0.0):
        """The active one-way path segment of length d."""
        path = self.path if self.path is not None else Path.straight(0.0, x_origin, x_origin + self.d)
        return path.truncated(self.d)

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "d": self.d, "tau_S": self.tau_S, "B": self.B, "tau_W": self.tau_W,
            "n_rep": self.n_rep, "lam": self.lam,
            "path": None if self.path is None else self.path.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("path") is not None:
            d["path"] = Path.from_dict(d["path"])
        return cls(**d)


@dataclass(frozen=True)
class CouplingParams:
    """Spin-valley coupling and static-dot reference.

    ``g_L`` holds the static-dot g-factors for its (+, -) valley states and
    ``static_weights`` the occupation probabilities of those states.
    """

    delta_sv: float = 0.3
    g_L: tuple = (2.0 + 8e-4, 2.0 + 2e-4)
    T2_static: float = 1400.0
    static_weights: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.delta_sv < 0:
            raise InvalidParams("delta_sv must be non-negative")
        if not self.T2_static > 0:
            raise InvalidParams("T2_static must be positive")
        w = np.asarray(self.static_weights, float)
        if w.shape != (2,) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-12):
            raise InvalidParams("static_weights must be two non-negative numbers summing to 1")

    def to_dict(self):
        return {"delta_sv": self.delta_sv, "g_L": list(self.g_L), "T2_static": self.T2_static,
                "static_weights": list(self.static_weights)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("g_L", "static_weights"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class EventParams:
    """Event-model knobs.

    ``q_v`` is the valley-flip probability per passage of a low-E_VS spot; it
    may be a callable of the shuttle velocity. If ``hazard`` is given it
    replaces the spot model: a segment of length dx with minimum E_VS e flips
    the valley with probability 1 - exp(-hazard(e) * dx).
    """

    q_v: float | Callable[[float], float] = 0.023
    low_evs_threshold: float = 5.0
    hazard: Callable[[np.ndarray], np.ndarray] | None = None
    include_dispersive_shift: bool = True
    valley_flip_loses_coherence: bool = False

    def q_at(self, v_S):
        q = self.q_v(v_S) if callable(self.q_v) else self.q_v
        if not 0 <= q <= 1:
            raise InvalidParams("Q_v must lie in [0, 1]")
        return float(q)


@dataclass
class SpinValleyState:
    rho: np.ndarray
    position: float = 0.0
    time: float = 0.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, complex)
        if self.rho.shape != (4, 4):
            raise InvalidParams("rho must be 4x4")

    @classmethod
    def pure(cls, spin, valley, landscape=None, x=0.0, y=0.0):
        """|spin, valley> with valley a local eigenstate (PLUS/MINUS) of the landscape."""
        vecs = _valley_vectors(landscape.delta_at(x, y) if landscape is not None else 0.0)
        psi = np.kron(np.eye(2)[spin], vecs[valley])
        return cls(np.outer(psi, psi.conj()), float(x), 0.0)

    def check(self, tol=1e-9):
        tr = np.trace(self.rho).real
        herm = np.max(np.abs(self.rho - self.rho.conj().T))
        ev = np.linalg.eigvalsh(0.5 * (self.rho + self.rho.conj().T))
        return abs(tr - 1) < tol and herm < 1e-12 + tol and ev.min() > -tol

    def populations(self, landscape, y=0.0):
        """Populations of (up+, up-, down+, down-) in the local valley eigenbasis."""
        P = _local_basis(landscape.delta_at(self.position, y))
        return np.real(np.einsum("ai,ij,aj->a", P.conj(), self.rho, P))


@dataclass
class Event:
    kind: str  # "resonance_crossing" | "valley_minimum"
    x: float
    probability: float
    pass_index: int = 0
    applied_outcome: str | None = None


@dataclass
class EventLog:
    events: list = field(default_factory=list)

    def add(self, *a, **k):
        self.events.append(Event(*a, **k))

    def __len__(self):
        return len(self.events)

    def of_kind(self, kind):
        return [e for e in self.events if e.kind == kind]

    def rows(self):
        return [(e.pass_index, e.kind, e.x, e.probability, e.applied_outcome or "") for e in self.events]


# --------------------------------------------------------------------------
# Landau-Zener
# --------------------------------------------------------------------------


def lz_flip_probability(delta_sv, slope, v_S, hbar=CONSTANTS.hbar):
    """Spin-valley flip-flop probability P_svf = 1 - exp(-2 pi D^2 / (hbar |dE/dx| v))."""
    rate = abs(slope) * v_S
    if rate == 0:
        if delta_sv > 0:
            raise ZeroSweepRate("zero sweep rate with finite coupling: adiabatic limit, P_svf = 1")
        return 0.0
    return float(-np.expm1(-2 * np.pi * delta_sv**2 / (hbar * rate)))


def lz_exponent(delta_sv, slope, v_S, hbar=CONSTANTS.hbar):
    """-ln(Q_svf); additive cost of one diabatic passage."""
    return 2 * np.pi * delta_sv**2 / (hbar * np.abs(slope) * v_S)


def dispersive_shift(detuning, delta_sv):
    """Energy shift of the spin splitting from the spin-valley anticrossing (ueV).

    ``detuning`` = E_Z - E_VS. The shift has the sign of the detuning and
    magnitude (sqrt(det^2 + 4 D^2) - |det|)/2.
    """
    det = np.asarray(detuning, float)
    return np.sign(det) * 0.5 * (np.sqrt(det**2 + 4 * delta_sv**2) - np.abs(det))


# --------------------------------------------------------------------------
# Hamiltonian
# --------------------------------------------------------------------------


def _valley_vectors(delta):
    """Local valley eigenvectors in the bare basis, shape (..., 2[+/-], 2)."""
    delta = np.asarray(delta, complex)
    # angle() instead of delta/|delta|: the division overflows for subnormal delta
    phase = np.exp(1j * np.angle(delta))
    s = 1 / math.sqrt(2)
    plus = np.stack([np.full_like(phase, s), s * phase], axis=-1)
    minus = np.stack([np.full_like(phase, s), -s * phase], axis=-1)
    return np.stack([plus, minus], axis=-2)


def _local_basis(delta):
    """Rows: |up+>, |up->, |down+>, |down-> in the bare 4D basis."""
    v = _valley_vectors(delta)
    e = np.eye(2)
    return np.stack([np.kron(e[s], v[val]) for s in (UP, DOWN) for val in (PLUS, MINUS)])


def hamiltonian_batch(delta, dg_plus, dg_minus, B, delta_sv, constants=CONSTANTS):
    """Stack of 4x4 Hamiltonians (ueV) for arrays of local field values."""
    delta = np.atleast_1d(np.asarray(delta, complex))
    dgp = np.broadcast_to(np.asarray(dg_plus, float), delta.shape)
    dgm = np.broadcast_to(np.asarray(dg_minus, float), delta.shape)
    n = delta.shape[0]
    mub = constants.mu_B * B
    v = _valley_vectors(delta)  # (n, 2, 2)
    vp, vm = v[:, PLUS], v[:, MINUS]
    proj_p = vp[:, :, None] * vp[:, None, :].conj()
    proj_m = vm[:, :, None] * vm[:, None, :].conj()
    G = dgp[:, None, None] * proj_p + dgm[:, None, None] * proj_m
    hv = np.zeros((n, 2, 2), complex)
    hv[:, 0, 1] = delta.conj()
    hv[:, 1, 0] = delta
    H = np.zeros((n, 4, 4), complex)
    eye2 = np.eye(2)
    sz = np.array([1.0, -1.0])
    for s in (UP, DOWN):
        blk = slice(2 * s, 2 * s + 2)
        H[:, blk, blk] = 0.5 * mub * sz[s] * (constants.g0 * eye2 + G) + hv
    # coupling |up,-><down,+| + h.c.
    c = delta_sv * vm[:, :, None] * vp[:, None, :].conj()
    H[:, 0:2, 2:4] += c
    H[:, 2:4, 0:2] += np.conj(np.transpose(c, (0, 2, 1)))
    return H


def build_hamiltonian(landscape: ValleyLandscape, coupling: CouplingParams, B, x, y):
    """4x4 Hermitian Hamiltonian at position (x, y)."""
    if B < 0:
        raise InvalidParams("B must be non-negative")
    dgp, dgm = landscape.g_at(x, y)
    return hamiltonian_batch(landscape.delta_at(x, y), dgp, dgm, B, coupling.delta_sv, landscape.constants)[0]


def _expm_herm(H, tau, hbar):
    """exp(-i H tau / hbar) for a stack of Hermitian matrices."""
    w, V = np.linalg.eigh(H)
    ph = np.exp(-1j * w * (tau / hbar))
    return (V * ph[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def _ordered_product(U):
    """U[n-1] @ ... @ U[1] @ U[0] by pairwise reduction."""
    U = np.asarray(U)
    while len(U) > 1:
        if len(U) % 2:
            tail = U[-1:]
            U = U[:-1]
        else:
            tail = None
        U = U[1::2] @ U[0::2]
        if tail is not None:
            U = np.concatenate([U, tail])
    return U[0]


# --------------------------------------------------------------------------
# full propagation
# --------------------------------------------------------------------------


@dataclass
class PropagationResult:
    state: SpinValleyState
    unitary: np.ndarray
    events: EventLog
    elapsed: float
    n_steps: int
    B: float


def _pass_positions(trajectory, forward):
    return (trajectory.x_start, trajectory.x_stop) if forward else (trajectory.x_stop, trajectory.x_start)


def _max_gap(landscape, trajectory, B, delta_sv):
    xs, ys = trajectory.sample(landscape.grid_spacing)
    dgp, dgm = landscape.g_at(xs, ys)
    w = np.linalg.eigvalsh(hamiltonian_batch(landscape.delta_at(xs, ys), dgp, dgm, B, delta_sv, landscape.constants))
    return float(np.max(w[:, -1] - w[:, 0]))


def _pass_unitary(landscape, coupling, B, trajectory, forward, duration, dt, chunk=40000):
    x_a, x_b = _pass_positions(trajectory, forward)
    n = max(1, int(math.ceil(duration / dt - 1e-12)))
    h = duration / n
    hbar = landscape.constants.hbar
    total = np.eye(4, dtype=complex)
    for start in range(0, n, chunk):
        k = np.arange(start, min(n, start + chunk))
        t1 = (k + _C1) * h
        t2 = (k + _C2) * h
        x1 = x_a + (x_b - x_a) * t1 / duration
        x2 = x_a + (x_b - x_a) * t2 / duration
        xs = np.concatenate([x1, x2])
        ys = trajectory.y_at(xs)
        dgp, dgm = landscape.g_at(xs, ys)
        H = hamiltonian_batch(landscape.delta_at(xs, ys), dgp, dgm, B, coupling.delta_sv, landscape.constants)
        H1, H2 = H[: len(k)], H[len(k):]
        left = _expm_herm(_A1 * H1 + _A2 * H2, h, hbar)
        right = _expm_herm(_A2 * H1 + _A1 * H2, h, hbar)
        steps = left @ right
        total = _ordered_product(steps) @ total
    return total, n


def propagate_full(
    state: SpinValleyState,
    schedule: ShuttleSchedule,
    landscape: ValleyLandscape,
    coupling: CouplingParams,
    dt_max: float = 0.05,
    phase_tol: float = 0.1,
    dt: float | None = None,
    unitarity_tol: float = 1e-7,
) -> PropagationResult:
    """Time-ordered unitary evolution along the schedule.

    The step is the largest value not exceeding ``dt_max`` that keeps the
    phase advance of the widest eigen-gap below ``phase_tol`` radians. Passing
    ``dt`` fixes the step; a step that violates the phase bound raises
    :class:`StepTooLarge`.
    """
    traj = schedule.trajectory(landscape.x[0])
    if not landscape.contains(traj.xs, traj.ys):
        raise OutOfBounds("trajectory leaves the landscape")
    hbar = landscape.constants.hbar
    gap = _max_gap(landscape, traj, schedule.B, coupling.delta_sv)
    dt_bound = phase_tol * hbar / gap if gap > 0 else dt_max
    if dt is None:
        step = min(dt_max, dt_bound)
    else:
        if dt > dt_bound * (1 + 1e-12):
            raise StepTooLarge(f"dt={dt} ns exceeds the phase bound {dt_bound:.3g} ns")
        step = dt
    half = schedule.tau_S / 2
    log = EventLog()
    _log_path_events(log, landscape, traj, schedule, coupling)
    U = np.eye(4, dtype=complex)
    n_steps = 0
    wait_U = None
    if schedule.tau_W > 0:
        xe, ye = traj.x_stop, traj.ys[-1]
        wait_U = _expm_herm(build_hamiltonian(landscape, coupling, schedule.B, xe, ye), schedule.tau_W, hbar)
    fwd, n1 = _pass_unitary(landscape, coupling, schedule.B, traj, True, half, step)
    bwd, n2 = _pass_unitary(landscape, coupling, schedule.B, traj, False, half, step)
    cycle = bwd @ (wait_U if wait_U is not None else np.eye(4)) @ fwd
    for _ in range(schedule.n_rep):
        U = cycle @ U
        n_steps += n1 + n2
    err = np.max(np.abs(U.conj().T @ U - np.eye(4)))
    if err > unitarity_tol * max(1, schedule.n_rep):
        raise StepTooLarge(f"unitarity violated by {err:.2e}")
    rho = U @ state.rho @ U.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    final = SpinValleyState(rho, traj.x_start, state.time + schedule.total_time)
    return PropagationResult(final, U, log, schedule.total_time, n_steps, schedule.B)


def propagate_pass(state, landscape, coupling, B, path, v_S, forward=True, dt_max=0.05, phase_tol=0.1):
    """Evolve ``state`` over a single one-way pass along ``path`` at constant v_S.

    Returns the propagated state and the pass unitary.
    """
    if not landscape.contains(path.xs, path.ys):
        raise OutOfBounds("path leaves the landscape")
    if not v_S > 0:
        raise InvalidParams("v_S must be positive")
    gap = _max_gap(landscape, path, B, coupling.delta_sv)
    step = min(dt_max, phase_tol * landscape.constants.hbar / gap) if gap > 0 else dt_max
    duration = path.span / v_S
    U, _ = _pass_unitary(landscape, coupling, B, path, forward, duration, step)
    rho = U @ state.rho @ U.conj().T
    end = path.x_stop if forward else path.x_start
    return SpinValleyState(0.5 * (rho + rho.conj().T), end, state.time + duration), U


def _log_path_events(log, landscape, traj, schedule, coupling, threshold=5.0):
    xs, ys = traj.sample(landscape.grid_spacing)
    e = landscape.evs_at(xs, ys)
    if schedule.B > 0:
        for c in crossings_from_samples(xs, ys, e, landscape.constants.zeeman(schedule.B)):
            p = lz_flip_probability(coupling.delta_sv, c.slope, schedule.v_S, landscape.constants.hbar)
            log.add("resonance_crossing", c.x, p, 0)
    for s in find_low_evs_spots(landscape, traj, threshold):
        log.add("valley_minimum", s.x, float("nan"), 0)


# --------------------------------------------------------------------------
# event model
# --------------------------------------------------------------------------


@dataclass
class PathProfile:
    """Pre-sampled fields along a one-way path for the event model."""

    xs: np.ndarray
    ys: np.ndarray
    evs: np.ndarray
    cum: np.ndarray  # (2, n): cumulative integral of (g_R,nu - g0) dx for nu = +, -
    spots: list
    crossings: list

    def integral(self, valley, x_a, x_b):
        """Path length integral of (g_R,nu - g0) between x_a and x_b (either order), in nm."""
        ca = np.interp(x_a, self.xs, self.cum[0]), np.interp(x_a, self.xs, self.cum[1])
        cb = np.interp(x_b, self.xs, self.cum[0]), np.interp(x_b, self.xs, self.cum[1])
        d = np.where(np.asarray(valley) == PLUS, cb[0] - ca[0], cb[1] - ca[1])
        return d if x_b >= x_a else -d


def path_profile(landscape, trajectory, B, coupling, params: EventParams, step=None):
    step = landscape.grid_spacing if step is None else step
    xs, ys = trajectory.sample(step)
    if not landscape.contains(xs, ys):
        raise OutOfBounds("trajectory leaves the landscape")
    e = landscape.evs_at(xs, ys)
    dgp, dgm = landscape.g_at(xs, ys)
    extra = 0.0
    if params.include_dispersive_shift and B > DISPERSIVE_B_MIN and coupling.delta_sv > 0:
        ez = landscape.constants.zeeman(B)
        extra = dispersive_shift(ez - e, coupling.delta_sv) / (landscape.constants.mu_B * B)
    g = np.stack([dgp + extra, dgm + extra])
    dx = np.diff(xs)
    cum = np.concatenate([np.zeros((2, 1)), np.cumsum(0.5 * (g[:, 1:] + g[:, :-1]) * dx, axis=1)], axis=1)
    spots = find_low_evs_spots(landscape, trajectory, params.low_evs_threshold, step) if params.hazard is None else []
    crossings = crossings_from_samples(xs, ys, e, landscape.constants.zeeman(B)) if B > 0 else []
    return PathProfile(xs, ys, e, cum, spots, crossings)


@dataclass
class EventRecord:
    """Ensemble output of the event model.

    ``g_integral`` is int (g_R(t) - g0) dt in ns for each trajectory, ``coherent``
    is False once a spin-valley flip (or, optionally, a valley flip) has
    destroyed the spin superposition. Arrays with a leading round-trip axis
    hold the same quantities after every completed round trip.
    """

    g_integral: np.ndarray
    elapsed: float
    coherent: np.ndarray
    valley: np.ndarray
    n_valley_flips: np.ndarray
    n_spin_flips: np.ndarray
    events: EventLog
    B: float
    per_rep_g_integral: np.ndarray | None = None
    per_rep_coherent: np.ndarray | None = None
    per_rep_elapsed: np.ndarray | None = None
    per_rep_valley_flipped: np.ndarray | None = None


def propagate_events(
    schedule: ShuttleSchedule,
    landscape: ValleyLandscape,
    coupling: CouplingParams,
    rng: np.random.Generator,
    params: EventParams = EventParams(),
    n_traj: int = 1,
    initial_valley: int = MINUS,
    record_round_trips: bool = False,
    profile: PathProfile | None = None,
) -> EventRecord:
    """Stochastic event model over ``n_traj`` independent trajectories."""
    traj = schedule.trajectory(landscape.x[0])
    B, v = schedule.B, schedule.v_S
    prof = profile or path_profile(landscape, traj, B, coupling, params)
    hbar = landscape.constants.hbar

    # events of a forward pass, sorted by x
    fwd = []
    for s in prof.spots:
        fwd.append((s.x, "valley_minimum", params.q_at(v)))
    for c in prof.crossings:
        fwd.append((c.x, "resonance_crossing", lz_flip_probability(coupling.delta_sv, c.slope, v, hbar)))
    fwd.sort(key=lambda t: t[0])
    hazard_p = None
    if params.hazard is not None:
        seg_min = np.minimum(prof.evs[1:], prof.evs[:-1])
        hazard_p = -np.expm1(-np.asarray(params.hazard(seg_min), float) * np.diff(prof.xs))
        seg_mid = 0.5 * (prof.xs[1:] + prof.xs[:-1])
        fwd.extend((float(x), "valley_hazard", float(p)) for x, p in zip(seg_mid, hazard_p) if p > 0)
        fwd.sort(key=lambda t: t[0])

    valley = np.full(n_traj, initial_valley, dtype=np.int8)
    coherent = np.ones(n_traj, bool)
    gint = np.zeros(n_traj)
    n_vf = np.zeros(n_traj, np.int64)
    n_sf = np.zeros(n_traj, np.int64)
    ever_flipped = np.zeros(n_traj, bool)
    log = EventLog()
    x0, x1 = prof.xs[0], prof.xs[-1]
    n_rep = schedule.n_rep
    reps_g = np.empty((n_rep, n_traj)) if record_round_trips else None
    reps_c = np.empty((n_rep, n_traj), bool) if record_round_trips else None
    reps_f = np.empty((n_rep, n_traj), bool) if record_round_trips else None
    ev_x = np.array([e[0] for e in fwd])
    ev_kind = [e[1] for e in fwd]
    ev_p = np.array([e[2] for e in fwd])
    if len(fwd):
        draws_per_pass = len(fwd)
    pass_index = 0

    def run_pass(forward):
        nonlocal gint, pass_index
        order = range(len(fwd)) if forward else range(len(fwd) - 1, -1, -1)
        pos = x0 if forward else x1
        u = rng.random((len(fwd), n_traj)) if len(fwd) else None
        for j in order:
            x = ev_x[j]
            gint = gint + prof.integral(valley, pos, x) / v
            pos = x
            flip = u[j] < ev_p[j]
            kind = ev_kind[j]
            if kind == "resonance_crossing":
                n_sf[flip] += 1
                coherent[flip] = False
            else:
                n_vf[flip] += 1
                ever_flipped[flip] = True
                if params.valley_flip_loses_coherence:
                    coherent[flip] = False
            valley[flip] ^= 1
            if n_traj and (kind != "valley_hazard" or flip[0]):
                log.add(kind, float(x), float(ev_p[j]), pass_index, "flipped" if flip[0] else "not_flipped")
        end = x1 if forward else x0
        gint = gint + prof.integral(valley, pos, end) / v
        pass_index += 1

    elapsed = 0.0
    for r in range(n_rep):
        run_pass(True)
        if schedule.tau_W > 0:
            dgp, dgm = landscape.g_at(x1, prof.ys[-1])
            extra = 0.0
            if params.include_dispersive_shift and B > DISPERSIVE_B_MIN:
                extra = float(dispersive_shift(landscape.constants.zeeman(B) - prof.evs[-1], coupling.delta_sv)) / (landscape.constants.mu_B * B)
            gint = gint + np.where(valley == PLUS, dgp + extra, dgm + extra) * schedule.tau_W
        run_pass(False)
        elapsed += schedule.tau_S + schedule.tau_W
        if record_round_trips:
            reps_g[r] = gint
            reps_c[r] = coherent
            reps_f[r] = ever_flipped
    per_rep_t = schedule.tau_S + schedule.tau_W
    return EventRecord(
        gint, elapsed, coherent.copy(), valley.copy(), n_vf, n_sf, log, B,
        reps_g, reps_c, per_rep_t * np.arange(1, n_rep + 1) if record_round_trips else None, reps_f,
    )


# --------------------------------------------------------------------------
# singlet readout
# --------------------------------------------------------------------------


def static_visibility(elapsed, coupling: CouplingParams):
    return np.exp(-(np.asarray(elapsed, float) / coupling.T2_static) ** 2)


def singlet_return_probability(result, coupling: CouplingParams, constants=CONSTANTS, initial_valley=MINUS,
                               landscape=None, x0=None, y0=0.0, mobile_valley_weights=None):
    """P_S = 1/2 (1 + V cos phi) averaged over the static-dot valley states.

    ``result`` is either a :class:`PropagationResult` (uses the full unitary)
    or an :class:`EventRecord` (uses the accumulated g integral); event
    records give the ensemble mean.
    """
    w_static = np.asarray(coupling.static_weights, float)
    if isinstance(result, PropagationResult):
        return _singlet_from_unitary(result, coupling, constants, landscape, x0, y0, initial_valley, mobile_valley_weights)
    t = result.elapsed
    if t == 0:
        return 1.0
    vis = static_visibility(t, coupling) * result.coherent
    k = constants.mu_B * result.B / constants.hbar
    ps = 0.0
    for mu in (PLUS, MINUS):
        if w_static[mu] == 0:
            continue
        phi = k * ((coupling.g_L[mu] - constants.g0) * t - result.g_integral)
        ps += w_static[mu] * np.mean(0.5 * (1 + vis * np.cos(phi)))
    return float(np.clip(ps, 0.0, 1.0))


def _singlet_from_unitary(res, coupling, constants, landscape, x0, y0, initial_valley, mobile_weights):
    t = res.elapsed
    if t == 0:
        return 1.0
    if landscape is None:
        raise InvalidParams("landscape required to resolve the initial valley state")
    x0 = landscape.x[0] if x0 is None else x0
    vecs = _valley_vectors(landscape.delta_at(x0, y0))
    U = res.unitary
    mw = np.eye(2)[initial_valley] if mobile_weights is None else np.asarray(mobile_weights, float)
    ps = 0.0
    for mu in (PLUS, MINUS):
        wmu = coupling.static_weights[mu]
        if wmu == 0:
            continue
        wl = coupling.g_L[mu] * constants.mu_B * res.B / constants.hbar
        for v0 in (PLUS, MINUS):
            if mw[v0] == 0:
                continue
            up0 = np.kron(np.eye(2)[UP], vecs[v0])
            dn0 = np.kron(np.eye(2)[DOWN], vecs[v0])
            a_dn = U[2:4, :] @ dn0  # <down, v|U|down, v0> over bare v
            a_up = U[0:2, :] @ up0
            amp = 0.5 * (np.exp(-0.5j * wl * t) * a_dn + np.exp(0.5j * wl * t) * a_up)
            p_coh = float(np.sum(np.abs(amp) ** 2))
            ps += wmu * mw[v0] * (0.5 + (p_coh - 0.5) * static_visibility(t, coupling))
    return float(np.clip(ps, 0.0, 1.0))


# --------------------------------------------------------------------------
# ensemble traces
# --------------------------------------------------------------------------


def _ps_from_arrays(g_int, coherent, elapsed, B, coupling, constants):
    vis = static_visibility(elapsed, coupling)[:, None] * coherent
    k = constants.mu_B * B / constants.hbar
    ps = np.zeros(len(elapsed))
    for mu in (PLUS, MINUS):
        w = coupling.static_weights[mu]
        if w == 0:
            continue
        phi = k * ((coupling.g_L[mu] - constants.g0) * elapsed[:, None] - g_int)
        ps += w * np.mean(0.5 * (1 + vis * np.cos(phi)), axis=1)
    return np.clip(ps, 0.0, 1.0)


def accumulated_trace(
    schedule: ShuttleSchedule,
    landscape: ValleyLandscape,
    coupling: CouplingParams,
    rng: np.random.Generator,
    params: EventParams = EventParams(),
    n_traj: int = 400,
    n_rep_values: Sequence[int] | None = None,
    n_shots: int | None = None,
) -> SingletTrace:
    """P_S versus accumulated shuttle time for repeated round trips.

    Every trajectory is run to the largest repetition count once and sampled
    after each round trip. With ``n_shots`` the expected P_S is replaced by a
    binomial estimate from that many single-shot outcomes.
    """
    rec = propagate_events(schedule, landscape, coupling, rng, params, n_traj, record_round_trips=True)
    reps = np.arange(1, schedule.n_rep + 1) if n_rep_values is None else np.asarray(n_rep_values, int)
    if np.any(reps < 1) or np.any(reps > schedule.n_rep):
        raise InvalidParams("n_rep_values must lie in [1, schedule.n_rep]")
    idx = reps - 1
    elapsed = rec.per_rep_elapsed[idx]
    ps = _ps_from_arrays(rec.per_rep_g_integral[idx], rec.per_rep_coherent[idx], elapsed, schedule.B, coupling,
                         landscape.constants)
    if n_shots:
        ps = rng.binomial(n_shots, ps) / n_shots
    meta = {"B": schedule.B, "v_S": schedule.v_S, "d": schedule.d, "n_traj": n_traj,
            "n_samples": n_shots or 0, "n_rep": reps.tolist()}
    return SingletTrace("tau", elapsed, ps, meta)


def tau_sweep(
    d_values,
    tau_values,
    B,
    landscape: ValleyLandscape,
    coupling: CouplingParams,
    rng: np.random.Generator,
    params: EventParams = EventParams(),
    path: Path | None = None,
    n_traj: int = 200,
    v_max: float | None = None,
):
    """P_S(d, tau_S) for single round trips; NaN where v_S exceeds ``v_max``."""
    d_values = np.asarray(d_values, float)
    tau_values = np.asarray(tau_values, float)
    out = np.full((len(d_values), len(tau_values)), np.nan)
    for i, d in enumerate(d_values):
        for j, tau in enumerate(tau_values):
            sched = ShuttleSchedule(d=d, tau_S=tau, B=B, path=path)
            if v_max is not None and sched.v_S > v_max:
                continue
            rec = propagate_events(sched, landscape, coupling, rng, params, n_traj)
            out[i, j] = singlet_return_probability(rec, coupling, landscape.constants)
    return out

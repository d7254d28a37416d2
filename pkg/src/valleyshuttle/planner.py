"""Trajectory planning over a valley-splitting map.

The map grid is turned into an x-ordered lattice DAG. Each edge carries
three non-negative -log fidelity contributions (valley excitation, spin-valley
resonance, dephasing) and the cheapest path is found by dynamic programming.
Plans can be scored with the stochastic event model of :mod:`dynamics`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .analysis import NarrowingModel
from .dynamics import CouplingParams, EventParams, ShuttleSchedule, lz_exponent, propagate_events
from .errors import InvalidParams, NegativeWeight, NoPath, OutOfBounds
from .landscape import Path, ValleyLandscape
from .mapping import EvsMap

CATEGORIES = ("valley_excitation", "resonance", "dephasing")
DEFAULT_T_BUDGET = math.sqrt(2) * 1700.0  # ns, moving-dot share of a 1.7 us singlet decay


@dataclass(frozen=True)
class ExcitationModel:
    """Valley-excitation hazard per nm, logistic in the local E_VS.

    rate(E) = rate_max / (1 + exp((E - midpoint) / width)); a segment of
    length dx is excited with probability 1 - exp(-rate * dx).
    """

    rate_max: float = 0.05  # 1/nm
    midpoint: float = 5.0  # ueV
    width: float = 1.0  # ueV

    def __post_init__(self):
        if self.rate_max < 0:
            raise NegativeWeight("rate_max must be non-negative")
        if not self.width > 0:
            raise InvalidParams("width must be positive")

    def rate(self, evs):
        z = (np.asarray(evs, float) - self.midpoint) / self.width
        with np.errstate(over="ignore"):
            return self.rate_max / (1.0 + np.exp(z))

    def to_dict(self):
        return {"rate_max": self.rate_max, "midpoint": self.midpoint, "width": self.width}


@dataclass
class CostGraph:
    """Lattice DAG over (x_i, y_j).

    ``costs[c, i, j, s]`` is the cost of category ``CATEGORIES[c]`` for the
    edge (x_i, y_j) -> (x_{i+1}, y_{j + s - max_lateral_step}); impossible
    edges are +inf.
    """

    x: np.ndarray
    y: np.ndarray
    evs: np.ndarray  # [iy, ix]
    costs: np.ndarray
    max_lateral_step: int
    B: float
    v_S: float
    T_budget: float
    excitation: ExcitationModel
    weights: dict
    mode: str = "default"

    @property
    def offsets(self):
        m = self.max_lateral_step
        return np.arange(-m, m + 1)

    @property
    def total(self):
        return self.costs.sum(axis=0)

    def edge_cost(self, i, j, k):
        """Per-category costs of the edge (x_i, y_j) -> (x_{i+1}, y_k)."""
        s = k - j + self.max_lateral_step
        if not 0 <= s < len(self.offsets):
            raise NoPath(f"lateral step {k - j} exceeds {self.max_lateral_step}")
        return self.costs[:, i, j, s]


def _as_landscape(source):
    if isinstance(source, EvsMap):
        return source.to_landscape()
    if isinstance(source, ValleyLandscape):
        return source
    raise InvalidParams("expected a ValleyLandscape or an EvsMap")


def build_cost_graph(source, B, v_S, coupling: CouplingParams = CouplingParams(), weights=None,
                     excitation: ExcitationModel = ExcitationModel(), T_budget=DEFAULT_T_BUDGET,
                     max_lateral_step=1, x_range=None, mode="default", narrowing: NarrowingModel | None = None,
                     ) -> CostGraph:
    """Edge costs on the grid of a landscape or a measured map.

    Resonance edges (E_Z between the endpoint E_VS values) cost -ln Q_svf
    with the Landau-Zener slope of the edge; valley excitation costs
    rate(min E_VS) * dx; dephasing costs dx / (v_S * T_budget). In
    ``mode="narrowing"`` the excitation term is dropped and the dephasing
    budget is the motional-narrowing decay time of ``narrowing`` at (B, v_S).
    """
    if not v_S > 0:
        raise InvalidParams("v_S must be positive")
    if B < 0:
        raise InvalidParams("B must be non-negative")
    if int(max_lateral_step) != max_lateral_step or max_lateral_step < 0:
        raise InvalidParams("max_lateral_step must be a non-negative integer")
    w = {c: 1.0 for c in CATEGORIES}
    w.update(weights or {})
    if set(w) != set(CATEGORIES):
        raise InvalidParams(f"weights keys must be among {CATEGORIES}")
    if any(v < 0 for v in w.values()):
        raise NegativeWeight("cost weights must be non-negative")
    if mode == "narrowing":
        if narrowing is None:
            raise InvalidParams("narrowing mode needs a NarrowingModel")
        T_budget = narrowing.decay_time(B, v_S)
        w["valley_excitation"] = 0.0
    elif mode != "default":
        raise InvalidParams(f"unknown planner mode {mode!r}")
    if not T_budget > 0:
        raise NegativeWeight("T_budget must be positive")

    land = _as_landscape(source)
    x = np.asarray(land.x, float)
    if x_range is not None:
        lo, hi = x_range
        if lo < x[0] - 1e-9 or hi > x[-1] + 1e-9 or not hi > lo:
            raise OutOfBounds(f"x range {x_range} outside map [{x[0]}, {x[-1]}]")
        x = x[(x >= lo - 1e-9) & (x <= hi + 1e-9)]
    y = np.asarray(land.y, float)
    X, Y = np.meshgrid(x, y)
    evs = land.evs_at(X, Y)
    m = int(max_lateral_step)
    ny, nx = len(y), len(x)
    dx = np.diff(x)
    ez = land.constants.zeeman(B)
    costs = np.full((3, nx - 1, ny, 2 * m + 1), np.inf)
    for si, s in enumerate(range(-m, m + 1)):
        j0 = np.arange(max(0, -s), min(ny, ny - s))
        j1 = j0 + s
        e0 = evs[j0, :-1].T  # (nx-1, nj)
        e1 = evs[j1, 1:].T
        exc = excitation.rate(np.minimum(e0, e1)) * dx[:, None]
        res = np.zeros_like(e0)
        if B > 0:
            a, b = e0 - ez, e1 - ez
            cross = (a * b < 0) | ((b == 0) & (a != 0))
            if cross.any():
                slope = np.abs(e1 - e0) / dx[:, None]
                res = np.where(cross, lz_exponent(coupling.delta_sv, np.where(cross, slope, 1.0), v_S,
                                                  land.constants.hbar), 0.0)
        deph = np.broadcast_to(dx[:, None] / (v_S * T_budget), e0.shape)
        costs[0, :, j0, si] = (w["valley_excitation"] * exc).T
        costs[1, :, j0, si] = (w["resonance"] * res).T
        costs[2, :, j0, si] = (w["dephasing"] * deph).T
    return CostGraph(x, y, evs, costs, m, float(B), float(v_S), float(T_budget), excitation, w, mode)


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------


@dataclass
class TrajectoryPlan:
    xs: np.ndarray
    ys: np.ndarray
    total_cost: float
    breakdown: dict
    v_S: float
    B: float
    evs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: dict = field(default_factory=dict)

    @property
    def predicted_fidelity(self):
        return math.exp(-self.total_cost)

    def path(self):
        return Path(self.xs, self.ys)

    def to_dict(self):
        return {"path": [[float(a), float(b)] for a, b in zip(self.xs, self.ys)],
                "cost_breakdown": {k: float(v) for k, v in self.breakdown.items()},
                "total_cost": float(self.total_cost), "predicted_fidelity": self.predicted_fidelity,
                "v_S": self.v_S, "B": self.B, "metadata": self.metadata,
                "units": {"x": "nm", "y": "nm", "v_S": "nm/ns", "B": "T"}}

    def to_json(self, path):
        fileio.dump_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, d):
        p = np.asarray(d["path"], float)
        return cls(p[:, 0], p[:, 1], d["total_cost"], dict(d["cost_breakdown"]), d["v_S"], d["B"],
                   metadata=d.get("metadata", {}))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write_csv(self, path):
        header = {"kind": "trajectory_plan", "version": fileio.FORMAT_VERSION,
                  "units": {"x": "nm", "y": "nm", "evs": "ueV"}}
        evs = self.evs if len(self.evs) == len(self.xs) else np.full(len(self.xs), np.nan)
        return fileio.write_columns(path, {"x_nm": self.xs, "y_nm": self.ys, "evs_ueV": evs}, header=header)


def _y_indices(graph, values):
    if values is None:
        return np.arange(len(graph.y))
    idx = []
    for v in np.atleast_1d(values):
        j = int(np.argmin(np.abs(graph.y - v)))
        if abs(graph.y[j] - v) > 1e-6 * max(1.0, abs(v)):
            raise OutOfBounds(f"y={v} is not a grid row")
        idx.append(j)
    return np.unique(idx)


def _better(c, l, a, cb, lb, ab):
    """Lexicographic (cost, lateral travel, |y| sum) with a relative tolerance on cost."""
    fin = np.isfinite(cb)
    tol = 1e-12 * np.maximum(1.0, np.abs(np.where(fin, cb, 0.0)))
    lt = ~fin | (c < cb - tol)
    eq = fin & (np.abs(c - np.where(fin, cb, 0.0)) <= tol)
    return lt | (eq & ((l < lb) | ((l == lb) & (a < ab))))


def plan_trajectory(graph: CostGraph, start=None, end=None) -> TrajectoryPlan:
    """Exact minimum-cost path from the first to the last map column.

    ``start``/``end`` are allowed y values (nm) in the first/last column
    (None: any row). Equal-cost paths are ordered by total lateral travel,
    then by the summed |y| of their nodes.
    """
    ny, nx = len(graph.y), len(graph.x)
    total = graph.total
    m = graph.max_lateral_step
    absy = np.abs(graph.y)
    cost = np.full(ny, np.inf)
    lat = np.zeros(ny, np.int64)
    ysum = np.zeros(ny)
    js = _y_indices(graph, start)
    cost[js] = 0.0
    ysum[js] = absy[js]
    pred = np.full((nx - 1, ny), -1, np.int64)
    # lateral-step preference: straight first
    order = sorted(range(-m, m + 1), key=lambda s: (abs(s), s))
    for i in range(nx - 1):
        nc = np.full(ny, np.inf)
        nl = np.zeros(ny, np.int64)
        na = np.zeros(ny)
        for s in order:
            si = s + m
            j0 = np.arange(max(0, -s), min(ny, ny - s))
            j1 = j0 + s
            c = cost[j0] + total[i, j0, si]
            l_ = lat[j0] + abs(s)
            a = ysum[j0] + absy[j1]
            ok = np.isfinite(c) & _better(c, l_, a, nc[j1], nl[j1], na[j1])
            t = j1[ok]
            nc[t], nl[t], na[t] = c[ok], l_[ok], a[ok]
            pred[i, t] = j0[ok]
        cost, lat, ysum = nc, nl, na
    je = _y_indices(graph, end)
    best = None
    for j in je:
        if not np.isfinite(cost[j]):
            continue
        if best is None or _better(cost[j], lat[j], ysum[j], cost[best], lat[best], ysum[best]):
            best = j
    if best is None:
        raise NoPath("no finite-cost path between the requested start and end rows")
    rows = [int(best)]
    for i in range(nx - 2, -1, -1):
        rows.append(int(pred[i, rows[-1]]))
    rows = np.array(rows[::-1])
    breakdown = {c: 0.0 for c in CATEGORIES}
    for i in range(nx - 1):
        parts = graph.edge_cost(i, rows[i], rows[i + 1])
        for c, v in zip(CATEGORIES, parts):
            breakdown[c] += float(v)
    total_cost = math.fsum(breakdown.values())
    return TrajectoryPlan(graph.x.copy(), graph.y[rows], total_cost, breakdown, graph.v_S, graph.B,
                          graph.evs[rows, np.arange(nx)], {"mode": graph.mode, "T_budget": graph.T_budget})


def path_cost(graph: CostGraph, ys):
    """Per-category cost of an explicit row sequence (y values, one per column)."""
    rows = np.array([int(np.argmin(np.abs(graph.y - v))) for v in ys])
    if len(rows) != len(graph.x):
        raise InvalidParams("need one y value per map column")
    out = np.zeros(3)
    for i in range(len(rows) - 1):
        out += graph.edge_cost(i, rows[i], rows[i + 1])
    return dict(zip(CATEGORIES, out.tolist()))


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------


@dataclass
class TrajectoryScore:
    simulated: float
    simulated_stderr: float
    predicted: float
    n_traj: int
    n_rep: int

    def to_dict(self):
        return dict(self.__dict__)


def score_trajectory(plan: TrajectoryPlan, landscape: ValleyLandscape, coupling: CouplingParams,
                     rng: np.random.Generator, n_rep=1, n_traj=4000, excitation: ExcitationModel | None = None,
                     T_budget=None) -> TrajectoryScore:
    """Simulated and predicted fidelity of ``n_rep`` round trips along a plan.

    The event model runs in hazard mode with the planner's excitation law;
    any spin-valley or valley flip counts as an error, and dephasing enters
    as exp(-t / T_budget). The prediction is exp(-2 n_rep * plan cost).
    """
    excitation = excitation or ExcitationModel()
    T_budget = plan.metadata.get("T_budget", DEFAULT_T_BUDGET) if T_budget is None else T_budget
    path = plan.path()
    sched = ShuttleSchedule.from_velocity(path.span, plan.v_S, plan.B, n_rep=int(n_rep), path=path)
    params = EventParams(hazard=excitation.rate, valley_flip_loses_coherence=True)
    rec = propagate_events(sched, landscape, coupling, rng, params, n_traj=int(n_traj))
    deph = math.exp(-sched.n_rep * sched.tau_S / T_budget)
    alive = rec.coherent.mean()
    sim = float(alive * deph)
    err = float(math.sqrt(max(alive * (1 - alive), 1.0 / n_traj) / n_traj) * deph)
    pred = math.exp(-2 * n_rep * plan.total_cost)
    return TrajectoryScore(sim, err, pred, int(n_traj), int(n_rep))


def corridor_fidelity(distance, v_S, T_budget):
    """One-way fidelity of an event-free corridor: exp(-distance / (v_S T_budget))."""
    return math.exp(-distance / (v_S * T_budget))

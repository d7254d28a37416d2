"""Command-line batch interface.

Every subcommand reads an optional JSON manifest, derives all random streams
from the master seed and writes its outputs into a result bundle directory
(``summary.json`` plus CSV/JSON files with checksums).

Exit codes: 0 success, 2 validation error, 3 model/runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import jsonschema
import numpy as np
from scipy import stats

from . import __version__, fileio
from .analysis import (DecayFitResult, NarrowingModel, NarrowingRow, fit_exponential, fit_gaussian_two_tone,
                       fit_narrowing_model, st_fft)
from .dynamics import (CouplingParams, EventParams, ShuttleSchedule, SpinValleyState, accumulated_trace,
                       propagate_events, propagate_full, singlet_return_probability, tau_sweep)
from .errors import MissingRuns, ModelError, NoRidgeFound, ValidationError
from .landscape import (LandscapeConfig, Path, acf_model, autocorrelation, fit_rice, generate_landscape,
                        load_landscape, save_landscape)
from .mapping import (EvsMap, EvsTraceEstimate, MappingSettings, PsScanPatch, assemble_map, estimate_measurement_time,
                      extract_ridge, normalize_linewise, simulate_ps_scan)
from .planner import (DEFAULT_T_BUDGET, ExcitationModel, build_cost_graph, plan_trajectory, score_trajectory)
from .traces import SingletTrace

MANIFEST_VERSION = "1"
OUT_ENV = "VALLEYSHUTTLE_OUT"
DEFAULT_OUT = "valleyshuttle_out"

_num = {"type": "number"}
_num_list = {"type": "array", "items": _num}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version"],
    "additionalProperties": False,
    "properties": {
        "version": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "tool_version": {"type": "string"},
        "landscape": {"type": "object", "properties": {"file": {"type": "string"}}},
        "coupling": {"type": "object", "additionalProperties": False, "properties": {
            "delta_sv": _num, "g_L": _num_list, "T2_static": _num, "static_weights": _num_list}},
        "events": {"type": "object", "additionalProperties": False, "properties": {
            "q_v": _num, "low_evs_threshold": _num, "include_dispersive_shift": {"type": "boolean"},
            "valley_flip_loses_coherence": {"type": "boolean"}}},
        "schedule": {"type": "object", "additionalProperties": False, "required": ["d", "B"], "properties": {
            "d": _num, "B": _num, "v_S": _num, "tau_S": _num, "f_mhz": _num, "tau_W": _num,
            "n_rep": {"type": "integer", "minimum": 1}, "y": _num, "lam": _num}},
        "shuttle": {"type": "object", "additionalProperties": False, "properties": {
            "n_traj": {"type": "integer", "minimum": 1}, "n_shots": {"type": "integer", "minimum": 1},
            "model": {"enum": ["events", "full"]}, "fit": {"enum": ["eq5", "eq6", "none"]}}},
        "sweep": {"type": "object", "additionalProperties": False, "properties": {
            "B": _num_list, "v_S": _num_list, "y": _num_list, "d": _num_list, "tau_S": _num_list,
            "n_rep": {"type": "array", "items": {"type": "integer", "minimum": 1}}, "v_max": _num}},
        "mapping": {"type": "object", "additionalProperties": False, "properties": {
            "B_min": _num, "B_max": _num, "B_step": _num, "d_min": _num, "d_max": _num, "d_step": _num,
            "y": _num_list, "n_samples": {"type": "integer", "minimum": 1}, "v_S": _num, "delta_g_eff": _num,
            "phase_budget": _num, "smoothing": _num, "max_gap": {"type": "integer", "minimum": 0}}},
        "time_estimate": {"type": "object", "additionalProperties": False, "properties": {
            "tau_ss": _num, "n_B": {"type": "integer"}, "n_samples": {"type": "integer"}, "n_x": {"type": "integer"},
            "n_y": {"type": "integer"}, "tau_B": _num, "tau_B_per_field": _num, "l_x": _num, "delta_x": _num,
            "l_y": _num, "delta_y": _num}},
        "fit": {"type": "object", "additionalProperties": False, "properties": {
            "exclude_first": {"type": "integer", "minimum": 0}, "omega_guess": _num, "lam": _num,
            "rows": {"type": "array", "items": {"type": "object", "required": ["B", "v_S", "T"], "properties": {
                "B": _num, "v_S": _num, "T": _num, "T_err": _num, "excluded": {"type": "boolean"}}}}}},
        "planner": {"type": "object", "additionalProperties": False, "properties": {
            "B": _num, "v_S": _num, "max_lateral_step": {"type": "integer", "minimum": 0}, "T_budget": _num,
            "start": _num_list, "end": _num_list, "mode": {"enum": ["default", "narrowing"]},
            "x_range": _num_list, "weights": {"type": "object"},
            "excitation": {"type": "object", "additionalProperties": False, "properties": {
                "rate_max": _num, "midpoint": _num, "width": _num}},
            "narrowing": {"type": "object", "additionalProperties": False, "properties": {
                "Q_v": _num, "delta_omega_bar_over_muB_B": _num, "lam": _num}},
            "score": {"type": "object", "additionalProperties": False, "properties": {
                "n_rep": {"type": "integer", "minimum": 1}, "n_traj": {"type": "integer", "minimum": 1}}}}},
    },
}


# --------------------------------------------------------------------------
# manifest and seeding
# --------------------------------------------------------------------------


def load_manifest(path=None, seed=None):
    """Validated manifest dict; unknown versions are rejected, never reinterpreted."""
    if path is None:
        m = {"version": MANIFEST_VERSION}
    else:
        try:
            m = json.loads(FsPath(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    validate_manifest(m)
    m = copy.deepcopy(m)
    m.setdefault("seed", 0)
    if seed is not None:
        m["seed"] = int(seed)
    return m


def validate_manifest(m):
    if not isinstance(m, dict) or "version" not in m:
        raise ValidationError("manifest must be an object with a 'version' field")
    if m["version"] != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {m['version']!r}; this tool reads version "
                              f"{MANIFEST_VERSION!r} and does not migrate other versions")
    try:
        jsonschema.validate(m, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"manifest invalid at {loc}: {exc.message}") from exc


def _key(label):
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed_sequence(seed, *labels):
    """Independent stream for a named task: the labels become the spawn key."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(lab) for lab in labels))


def derive_rng(seed, *labels):
    return np.random.default_rng(derive_seed_sequence(seed, *labels))


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# result bundle
# --------------------------------------------------------------------------


WARNING_CODES = {
    "NO_RIDGE_COLUMNS": "columns without a resonance feature",
    "LOW_COVERAGE": "fewer than 80% of columns show a resonance",
    "NO_RIDGE_PATCH": "patch without any resonance feature",
    "FIT_FAILED": "decay fit did not produce a usable result",
}


@dataclass
class ResultBundle:
    """Output directory with a checksummed summary of all runs."""

    out_dir: FsPath
    manifest: dict
    runs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @classmethod
    def open(cls, out_dir, manifest):
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = out / "summary.json"
        runs, warnings = [], []
        if summary.exists():
            old = json.loads(summary.read_text())
            runs, warnings = old.get("runs", []), old.get("warnings", [])
        return cls(out, manifest, runs, warnings)

    @classmethod
    def load(cls, out_dir):
        out = FsPath(out_dir)
        summary = out / "summary.json"
        if not summary.exists():
            raise MissingRuns(f"no result bundle in {out}")
        s = json.loads(summary.read_text())
        return cls(out, s.get("manifest", {}), s.get("runs", []), s.get("warnings", []))

    def path(self, name):
        return self.out_dir / name

    def add_run(self, kind, label, files=None, params=None, results=None):
        self.runs = [r for r in self.runs if not (r["kind"] == kind and r["label"] == label)]
        files = dict(files or {})
        checks = {k: fileio.sha256_file(self.path(v)) for k, v in files.items()}
        self.runs.append({"kind": kind, "label": label, "files": files, "sha256": checks,
                          "params": params or {}, "results": results or {}})

    def warn(self, code, message, **context):
        if code not in WARNING_CODES:
            raise ValueError(f"unknown warning code {code}")
        entry = {"code": code, "message": message, **context}
        if entry not in self.warnings:
            self.warnings.append(entry)

    def runs_of(self, kind):
        return [r for r in self.runs if r["kind"] == kind]

    def verify(self):
        """Every referenced file exists and matches its checksum."""
        for r in self.runs:
            for k, name in r["files"].items():
                p = self.path(name)
                if not p.exists() or fileio.sha256_file(p) != r["sha256"][k]:
                    return False
        return True

    def write(self):
        self.runs.sort(key=lambda r: (r["kind"], r["label"]))
        fileio.dump_json(self.path("manifest.json"), self.manifest)
        fileio.dump_json(self.path("summary.json"), {"manifest": self.manifest, "tool_version": __version__,
                                                      "runs": self.runs, "warnings": self.warnings})


# --------------------------------------------------------------------------
# manifest -> model objects
# --------------------------------------------------------------------------


def _landscape(m):
    block = dict(m.get("landscape", {}))
    if "file" in block:
        return load_landscape(block["file"])
    if "seed" not in block:
        block["seed"] = int(derive_seed_sequence(m["seed"], "landscape").generate_state(1)[0])
    try:
        cfg = LandscapeConfig(**block)
    except TypeError as exc:
        raise ValidationError(f"landscape block: {exc}") from exc
    return generate_landscape(cfg)


def _coupling(m):
    c = dict(m.get("coupling", {}))
    for k in ("g_L", "static_weights"):
        if k in c:
            c[k] = tuple(c[k])
    return CouplingParams(**c)


def _events(m):
    return EventParams(**m.get("events", {}))


def _schedule(m, landscape, **override):
    s = dict(m.get("schedule", {}))
    s.update(override)
    if "d" not in s or "B" not in s:
        raise ValidationError("schedule needs d and B")
    y = s.pop("y", 0.0)
    path = Path.straight(y, landscape.x[0], landscape.x[-1])
    kw = {k: s[k] for k in ("tau_W", "n_rep", "lam") if k in s}
    if "v_S" in s:
        return ShuttleSchedule.from_velocity(s["d"], s["v_S"], s["B"], path=path, **kw)
    if "f_mhz" in s:
        lam = kw.pop("lam", 280.0)
        return ShuttleSchedule.from_frequency(s["d"], s["f_mhz"], s["B"], lam=lam, path=path, **kw)
    if "tau_S" in s:
        return ShuttleSchedule(d=s["d"], tau_S=s["tau_S"], B=s["B"], path=path, **kw)
    raise ValidationError("schedule needs one of v_S, f_mhz, tau_S")


def _tag(**kv):
    return "_".join(f"{k}{v:g}" for k, v in kv.items())


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_landscape_generate(args, m, bundle):
    land = _landscape(m)
    name = "landscape.csv"
    save_landscape(land, bundle.path(name))
    evs = land.evs
    bundle.add_run("landscape", "generate", {"landscape": name}, {"seed": land.seed},
                   {"evs_mean": float(np.mean(evs)), "evs_min": float(evs.min()), "evs_max": float(evs.max())})
    return f"landscape written to {bundle.path(name)}"


def cmd_landscape_stats(args, m, bundle):
    land = load_landscape(args.input) if args.input else _landscape(m)
    rice = fit_rice(land.evs.ravel())
    acf = autocorrelation(land.evs, land.grid_spacing)
    fileio.write_columns(bundle.path("acf.csv"), {"lag_nm": acf.lags, "acf": acf.acf_values,
                                                   "acf_fit": acf_model(acf.lags, acf.fitted_a_dot)},
                         header={"kind": "acf", "units": {"lag": "nm"}})
    hist, edges = np.histogram(land.evs.ravel(), bins=60, density=True)
    centres = 0.5 * (edges[1:] + edges[:-1])
    pdf = stats.rice.pdf(centres, rice.nu / rice.sigma, scale=rice.sigma)
    fileio.write_columns(bundle.path("evs_histogram.csv"), {"evs_ueV": centres, "density": hist, "rice_pdf": pdf},
                         header={"kind": "evs_histogram", "units": {"evs": "ueV", "density": "1/ueV"}})
    res = {"rice_nu": rice.nu, "rice_sigma": rice.sigma, "rice_nu_stderr": rice.nu_stderr,
           "rice_sigma_stderr": rice.sigma_stderr, "a_dot": acf.fitted_a_dot,
           "acf_at_a_dot": float(np.interp(acf.fitted_a_dot, acf.lags, acf.acf_values))}
    bundle.add_run("landscape_stats", "stats", {"acf": "acf.csv", "histogram": "evs_histogram.csv"}, {}, res)
    return "\n".join(f"{k} = {v:.6g}" for k, v in res.items())


def _fit_trace(trace, kind, m, bundle, label):
    f = m.get("fit", {})
    try:
        if kind == "eq5":
            r = fit_gaussian_two_tone(trace, f.get("omega_guess"), f.get("exclude_first", 0))
        else:
            r = fit_exponential(trace, f.get("exclude_first", 0), f.get("omega_guess"))
    except (ModelError, ValidationError) as exc:
        bundle.warn("FIT_FAILED", str(exc), run=label)
        return None
    return r


def cmd_shuttle_run(args, m, bundle):
    land = _landscape(m)
    coupling = _coupling(m)
    sched = _schedule(m, land)
    sh = m.get("shuttle", {})
    rng = derive_rng(m["seed"], "shuttle", "run")
    if sh.get("model", "events") == "full":
        state = SpinValleyState.pure(0, 1, land, land.x[0], sched.trajectory(land.x[0]).ys[0])
        res = propagate_full(state, sched, land, coupling)
        ps = singlet_return_probability(res, coupling, land.constants, landscape=land,
                                        y0=sched.trajectory(land.x[0]).ys[0])
        bundle.add_run("shuttle_run", "full", {}, sched.to_dict(), {"P_S": ps})
        return f"P_S = {ps:.6f}"
    if sched.n_rep > 1:
        tr = accumulated_trace(sched, land, coupling, rng, _events(m), sh.get("n_traj", 400),
                               n_shots=sh.get("n_shots"))
        tr.write_csv(bundle.path("trace.csv"))
        bundle.add_run("accumulated", "run", {"trace": "trace.csv"},
                       {"B": sched.B, "v_S": sched.v_S, "d": sched.d}, {"P_S_last": float(tr.ps[-1])})
        return f"trace written to {bundle.path('trace.csv')}"
    rec = propagate_events(sched, land, coupling, rng, _events(m), sh.get("n_traj", 400))
    ps = singlet_return_probability(rec, coupling, land.constants)
    bundle.add_run("shuttle_run", "events", {}, sched.to_dict(), {"P_S": ps})
    return f"P_S = {ps:.6f}"


def cmd_shuttle_sweep(args, m, bundle):
    land = _landscape(m)
    coupling = _coupling(m)
    params = _events(m)
    sw = m.get("sweep", {})
    sh = m.get("shuttle", {})
    base = m.get("schedule", {})
    Bs = sw.get("B", [base.get("B", 0.04)])
    vs = sw.get("v_S", [base.get("v_S", 5.6)])
    ys = sw.get("y", [base.get("y", 0.0)])
    reps = sw.get("n_rep", None)
    n_rep = max(reps) if reps else base.get("n_rep", 100)
    fit_kind = sh.get("fit", "eq6")
    jobs = [(B, v, y) for B in Bs for v in vs for y in ys]

    def run(job):
        B, v, y = job
        tag = _tag(B=B, v=v, y=y)
        sched = _schedule(m, land, B=B, v_S=v, y=y, n_rep=n_rep, d=base.get("d", 100.0))
        rng = derive_rng(m["seed"], "sweep", tag)
        tr = accumulated_trace(sched, land, coupling, rng, params, sh.get("n_traj", 400), reps, sh.get("n_shots"))
        return tag, sched, tr

    lines = []
    for tag, sched, tr in _pmap(run, jobs, args.threads):
        name = f"trace_{tag}.csv"
        tr.write_csv(bundle.path(name))
        results = {}
        if fit_kind != "none":
            r = _fit_trace(tr, fit_kind, m, bundle, tag)
            if r is not None:
                fname = f"fit_{tag}.json"
                fileio.dump_json(bundle.path(fname), r.to_dict())
                results = {"fit": r.to_dict(), "T": r.decay_time, "T_err": r.decay_time_stderr}
                lines.append(f"{tag}: T = {r.decay_time:.6g} ns")
        bundle.add_run("accumulated", tag, {"trace": name},
                       {"B": sched.B, "v_S": sched.v_S, "d": sched.d, "y": float(sched.path.ys[0])}, results)

    if "tau_S" in sw and "d" in sw:
        tau = np.asarray(sw["tau_S"], float)
        ds = np.asarray(sw["d"], float)

        def run_map(B):
            rng = derive_rng(m["seed"], "tau_sweep", _tag(B=B))
            path = Path.straight(ys[0], land.x[0], land.x[-1])
            return B, tau_sweep(ds, tau, B, land, coupling, rng, params, path, sh.get("n_traj", 200),
                                sw.get("v_max"))

        for B, ps in _pmap(run_map, Bs, args.threads):
            tag = _tag(B=B)
            D, T = np.meshgrid(ds, tau, indexing="ij")
            name = f"tau_sweep_{tag}.csv"
            fileio.write_columns(bundle.path(name), {"d_nm": D.ravel(), "tau_S_ns": T.ravel(), "P_S": ps.ravel()},
                                 header={"kind": "tau_sweep", "B_T": B, "units": {"d": "nm", "tau_S": "ns"}})
            files = {"map": name}
            rows = []
            for i, d in enumerate(ds):
                ok = np.isfinite(ps[i])
                if ok.sum() >= 8:
                    try:
                        sp = st_fft(tau[ok], ps[i, ok], B, [d])
                    except ValidationError:
                        continue
                    rows.append((np.full(len(sp.delta_g_bar), d), sp.delta_g_bar, sp.magnitude[0]))
            if rows:
                sname = f"spectra_{tag}.csv"
                fileio.write_columns(bundle.path(sname), {"d_nm": np.concatenate([r[0] for r in rows]),
                                                          "delta_g_bar": np.concatenate([r[1] for r in rows]),
                                                          "magnitude": np.concatenate([r[2] for r in rows])},
                                     header={"kind": "spectra", "B_T": B})
                files["spectra"] = sname
            bundle.add_run("tau_sweep", tag, files, {"B": B})
    return "\n".join(lines) or "sweep done"


def _mapping_settings(m):
    mp = m.get("mapping", {})
    kw = {k: mp[k] for k in ("v_S", "delta_g_eff", "phase_budget") if k in mp}
    return MappingSettings(**kw)


def cmd_map_simulate(args, m, bundle):
    land = _landscape(m)
    coupling = _coupling(m)
    mp = m.get("mapping", {})
    B = np.arange(mp.get("B_min", 0.05), mp.get("B_max", 1.0) + 1e-9, mp.get("B_step", 0.005))
    d = np.arange(mp.get("d_min", 1.0), mp.get("d_max", 392.0) + 1e-9, mp.get("d_step", 1.0))
    ys = mp.get("y", [0.0])
    settings = _mapping_settings(m)

    def run(y):
        rng = derive_rng(m["seed"], "map", _tag(y=y))
        return y, simulate_ps_scan(land, coupling, y, B, d, mp.get("n_samples", 800), rng, settings,
                                   patch_id=_tag(y=y))

    for y, patch in _pmap(run, ys, args.threads):
        name = f"patch_{_tag(y=y)}.csv"
        patch.write_csv(bundle.path(name))
        bundle.add_run("map_patch", _tag(y=y), {"patch": name}, {"y": y})
    return f"{len(ys)} patches written to {bundle.out_dir}"


def cmd_map_extract(args, m, bundle):
    coupling = _coupling(m)
    mp = m.get("mapping", {})
    inputs = args.input_list or [bundle.path(r["files"]["patch"]) for r in bundle.runs_of("map_patch")]
    if not inputs:
        raise MissingRuns("no patches given and none in the bundle")

    def run(p):
        patch = PsScanPatch.read_csv(p)
        try:
            tr = extract_ridge(normalize_linewise(patch), coupling, mp.get("smoothing", 3.0), mp.get("max_gap", 3))
        except NoRidgeFound as exc:
            return patch, None, str(exc)
        return patch, tr, None

    done = 0
    for patch, tr, err in _pmap(run, inputs, args.threads):
        label = _tag(y=patch.y)
        if tr is None:
            bundle.warn("NO_RIDGE_PATCH", err, patch=label)
            continue
        name = f"ridge_{label}.csv"
        tr.write_csv(bundle.path(name))
        if tr.missing:
            bundle.warn("NO_RIDGE_COLUMNS", f"{len(tr.missing)} columns without resonance", patch=label,
                        columns=tr.missing)
        if tr.flagged:
            bundle.warn("LOW_COVERAGE", f"coverage {tr.coverage:.2f}", patch=label)
        bundle.add_run("ridge", label, {"ridge": name}, {"y": patch.y}, {"coverage": tr.coverage})
        done += 1
    if done == 0:
        raise NoRidgeFound("no patch produced a ridge")
    return f"{done} ridges extracted"


def cmd_map_assemble(args, m, bundle):
    inputs = args.input_list or [bundle.path(r["files"]["ridge"]) for r in bundle.runs_of("ridge")]
    traces = [EvsTraceEstimate.read_csv(p) for p in inputs]
    emap = assemble_map(traces)
    emap.write_csv(bundle.path("evs_map.csv"))
    bundle.add_run("evs_map", "assembled", {"map": "evs_map.csv"}, {"n_traces": len(traces)},
                   {"ny": len(emap.y), "nd": len(emap.d)})
    return f"map written to {bundle.path('evs_map.csv')}"


def cmd_map_time_estimate(args, m, bundle):
    te = m.get("time_estimate")
    if not te:
        raise ValidationError("manifest needs a time_estimate block")
    est = estimate_measurement_time(**te)
    res = est.to_dict()
    fileio.dump_json(bundle.path("time_estimate.json"), res)
    bundle.add_run("time_estimate", "estimate", {"estimate": "time_estimate.json"}, te, res)
    total = res["total_seconds"]
    lines = [f"T_meas = {total} s"]
    lines += [f"  {k} = {v}" for k, v in res.items() if k != "total_seconds" and v is not None]
    return "\n".join(lines)


def cmd_fit(args, m, bundle):
    kind = args.model
    if kind == "narrowing":
        f = m.get("fit", {})
        if args.input:
            _, cols = fileio.read_columns(args.input)
            err = cols.get("T_err_ns")
            rows = [NarrowingRow(b, v, t, None if err is None else e)
                    for b, v, t, e in zip(cols["B_T"], cols["v_S"], cols["T_ns"],
                                          err if err is not None else [None] * len(cols["B_T"]))]
        else:
            rows = [NarrowingRow(r["B"], r["v_S"], r["T"], r.get("T_err"), r.get("excluded", False))
                    for r in f.get("rows", [])]
        model = fit_narrowing_model(rows, f.get("lam", 280.0))
        out = {"model": model.to_dict(), "rows": [r.__dict__ for r in rows]}
        fileio.dump_json(bundle.path("fit_narrowing.json"), out)
        bundle.add_run("narrowing_fit", "fit", {"fit": "fit_narrowing.json"}, {}, out)
        return f"Q_v = {model.Q_v:.6g} +- {model.Q_v_stderr:.2g}, scale = {model.delta_omega_bar_over_muB_B:.6g} " \
               f"+- {model.scale_stderr:.2g}"
    if not args.input:
        raise ValidationError("fit eq5/eq6 needs --input trace.csv")
    trace = SingletTrace.read_csv(args.input)
    f = m.get("fit", {})
    if kind == "eq5":
        r = fit_gaussian_two_tone(trace, f.get("omega_guess"), f.get("exclude_first", 0))
    else:
        r = fit_exponential(trace, f.get("exclude_first", 0), f.get("omega_guess"))
    name = f"fit_{kind}.json"
    fileio.dump_json(bundle.path(name), r.to_dict())
    bundle.add_run(f"fit_{kind}", FsPath(args.input).stem, {"fit": name}, {}, r.to_dict())
    return json.dumps(r.params, sort_keys=True)


def cmd_plan(args, m, bundle):
    p = m.get("planner", {})
    coupling = _coupling(m)
    land = None
    if args.input:
        source = EvsMap.read_csv(args.input)
    else:
        land = _landscape(m)
        source = land
    exc = ExcitationModel(**p.get("excitation", {}))
    narrowing = NarrowingModel(**p["narrowing"]) if "narrowing" in p else NarrowingModel()
    graph = build_cost_graph(source, p.get("B", 0.2), p.get("v_S", 2.8), coupling, p.get("weights"), exc,
                             p.get("T_budget", DEFAULT_T_BUDGET), p.get("max_lateral_step", 1),
                             p.get("x_range"), p.get("mode", "default"), narrowing)
    plan = plan_trajectory(graph, p.get("start"), p.get("end"))
    plan.to_json(bundle.path("plan.json"))
    plan.write_csv(bundle.path("plan.csv"))
    res = {"total_cost": plan.total_cost, "predicted_fidelity": plan.predicted_fidelity,
           "cost_breakdown": plan.breakdown}
    if land is not None and "score" in p:
        sc = p["score"]
        score = score_trajectory(plan, land, coupling, derive_rng(m["seed"], "plan", "score"),
                                 sc.get("n_rep", 1), sc.get("n_traj", 4000), exc)
        res["score"] = score.to_dict()
    bundle.add_run("plan", "plan", {"plan": "plan.json", "path": "plan.csv"}, p, res)
    return f"predicted fidelity {plan.predicted_fidelity:.6f} (cost {plan.total_cost:.6g})"


def cmd_figure(args, m, bundle):
    files = emit_figure_data(bundle, args.figure_id)
    return "\n".join(str(f) for f in files)


# --------------------------------------------------------------------------
# figure data
# --------------------------------------------------------------------------


def _need(bundle, kind, fig):
    runs = bundle.runs_of(kind)
    if not runs:
        raise MissingRuns(f"figure {fig} needs runs of kind {kind!r}")
    return runs


def _fig_patch(bundle, fig):
    out = []
    for r in _need(bundle, "map_patch", fig):
        patch = normalize_linewise(PsScanPatch.read_csv(bundle.path(r["files"]["patch"])))
        Bg, Dg = np.meshgrid(patch.B, patch.d, indexing="ij")
        name = f"fig_{fig}_{r['label']}.csv"
        fileio.write_columns(bundle.path(name), {"B_T": Bg.ravel(), "d_nm": Dg.ravel(), "P_S_norm": patch.ps.ravel()})
        out.append(name)
    return out


def _fig_ridge(bundle, fig):
    out = []
    for r in _need(bundle, "ridge", fig):
        tr = EvsTraceEstimate.read_csv(bundle.path(r["files"]["ridge"]))
        name = f"fig_{fig}_{r['label']}.csv"
        fileio.write_columns(bundle.path(name), {"d_nm": tr.d, "evs_ueV": tr.evs, "confidence_ueV": tr.confidence,
                                                 "raw_ueV": tr.raw})
        out.append(name)
    return out


def _fig_map(bundle, fig):
    r = _need(bundle, "evs_map", fig)[0]
    emap = EvsMap.read_csv(bundle.path(r["files"]["map"]))
    D, Y = np.meshgrid(emap.d, emap.y)
    name = f"fig_{fig}.csv"
    fileio.write_columns(bundle.path(name), {"d_nm": D.ravel(), "y_nm": Y.ravel(), "evs_ueV": emap.evs.ravel()})
    return [name]


def _fig_acf(bundle, fig):
    r = _need(bundle, "landscape_stats", fig)[0]
    _, cols = fileio.read_columns(bundle.path(r["files"]["acf"]))
    name = f"fig_{fig}.csv"
    fileio.write_columns(bundle.path(name), {"lag_nm": cols["lag_nm"], "acf": cols["acf"], "acf_fit": cols["acf_fit"]})
    return [name]


def _fig_hist(bundle, fig):
    r = _need(bundle, "landscape_stats", fig)[0]
    _, cols = fileio.read_columns(bundle.path(r["files"]["histogram"]))
    name = f"fig_{fig}.csv"
    fileio.write_columns(bundle.path(name), cols)
    return [name]


def _by_field(bundle, kind, fig, index, key="B", descending=True):
    runs = sorted(_need(bundle, kind, fig), key=lambda r: r["params"].get(key, 0.0), reverse=descending)
    if index >= len(runs):
        raise MissingRuns(f"figure {fig} needs at least {index + 1} runs of kind {kind!r}")
    return runs[index]


def _fig_tau_map(index):
    def fn(bundle, fig):
        r = _by_field(bundle, "tau_sweep", fig, index)
        _, cols = fileio.read_columns(bundle.path(r["files"]["map"]))
        name = f"fig_{fig}.csv"
        fileio.write_columns(bundle.path(name), cols)
        return [name]
    return fn


def _fig_spectrum(index):
    def fn(bundle, fig):
        r = _by_field(bundle, "tau_sweep", fig, index)
        if "spectra" not in r["files"]:
            raise MissingRuns(f"figure {fig}: tau sweep {r['label']} has no spectra")
        _, cols = fileio.read_columns(bundle.path(r["files"]["spectra"]))
        name = f"fig_{fig}.csv"
        fileio.write_columns(bundle.path(name), cols)
        return [name]
    return fn


def _accumulated(bundle, fig):
    runs = _need(bundle, "accumulated", fig)
    return [(r, SingletTrace.read_csv(bundle.path(r["files"]["trace"]))) for r in runs]


def _fig_traces(bundle, fig):
    out = []
    for r, tr in _accumulated(bundle, fig):
        cols = {"tau_ns": tr.abscissa, "P_S": tr.ps}
        if "fit" in r["results"]:
            cols["P_S_fit"] = DecayFitResult(**r["results"]["fit"]).predict(tr.abscissa)
        name = f"fig_{fig}_{r['label']}.csv"
        fileio.write_columns(bundle.path(name), cols)
        out.append(name)
    return out


def _fig_fit_table(bundle, fig):
    rows = [(r["params"]["B"], r["params"]["v_S"], r["results"].get("T", np.nan), r["results"].get("T_err", np.nan))
            for r, _ in _accumulated(bundle, fig)]
    rows.sort()
    name = f"fig_{fig}.csv"
    a = np.array(rows, float).reshape(-1, 4)
    fileio.write_columns(bundle.path(name), {"B_T": a[:, 0], "v_S": a[:, 1], "T_ns": a[:, 2], "T_err_ns": a[:, 3]})
    return [name]


def _fig_distance(bundle, fig):
    out = []
    for r, tr in _accumulated(bundle, fig):
        D = tr.abscissa * r["params"]["v_S"] * 1e-3  # um
        name = f"fig_{fig}_{r['label']}.csv"
        fileio.write_columns(bundle.path(name), {"D_um": D, "P_S": tr.ps})
        out.append(name)
    return out


def _fig_narrowing(bundle, fig):
    r = _need(bundle, "narrowing_fit", fig)[0]
    md = r["results"]["model"]
    model = NarrowingModel(md["Q_v"], md["delta_omega_bar_over_muB_B"], md["lam"])
    rows = r["results"]["rows"]
    Bs = sorted({row["B"] for row in rows})
    g, b, tm, tf = [], [], [], []
    for B in Bs:
        v_grid = np.geomspace(0.1, 100.0, 60)
        for v in v_grid:
            g.append(model.gamma(v) * 1e9)
            b.append(B)
            tm.append(model.decay_time(B, v) * 1e-3)
            tf.append(np.nan)
        for row in rows:
            if row["B"] == B:
                g.append(model.gamma(row["v_S"]) * 1e9)
                b.append(B)
                tm.append(model.decay_time(B, row["v_S"]) * 1e-3)
                tf.append(row["T"] * 1e-3)
    name = f"fig_{fig}.csv"
    fileio.write_columns(bundle.path(name), {"gamma_per_s": g, "B_T": b, "T_model_us": tm, "T_fit_us": tf})
    return [name]


FIGURES = {
    "1d": _fig_patch, "1e": _fig_ridge, "2b": _fig_map, "2c": _fig_acf, "2d": _fig_hist,
    "3b": _fig_tau_map(0), "3c": _fig_tau_map(1), "3d": _fig_tau_map(2),
    "3e": _fig_spectrum(0), "3f": _fig_spectrum(1), "3g": _fig_spectrum(2),
    "4b": _fig_traces, "4d": _fig_fit_table, "4f": _fig_distance, "4g": _fig_narrowing, "4h": _fig_distance,
}


def emit_figure_data(bundle: ResultBundle, figure_id):
    """Write the plot-ready CSVs of one figure panel; returns their file names."""
    if figure_id not in FIGURES:
        raise MissingRuns(f"unknown figure id {figure_id!r}; valid ids: {', '.join(sorted(FIGURES))}")
    names = FIGURES[figure_id](bundle, figure_id)
    bundle.add_run("figure", figure_id, {f"csv{i}": n for i, n in enumerate(names)})
    return [bundle.path(n) for n in names]


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="JSON manifest")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--input", nargs="+", dest="input_list", help="input file(s)")

    p = argparse.ArgumentParser(prog="valleyshuttle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def group(name, actions):
        g = sub.add_parser(name).add_subparsers(dest="action", required=True)
        for a, fn in actions.items():
            g.add_parser(a, parents=[common]).set_defaults(func=fn)

    group("landscape", {"generate": cmd_landscape_generate, "stats": cmd_landscape_stats})
    group("shuttle", {"run": cmd_shuttle_run, "sweep": cmd_shuttle_sweep})
    group("map", {"simulate": cmd_map_simulate, "extract": cmd_map_extract, "assemble": cmd_map_assemble,
                  "time-estimate": cmd_map_time_estimate})
    fit = sub.add_parser("fit", parents=[common])
    fit.add_argument("model", choices=["eq5", "eq6", "narrowing"])
    fit.set_defaults(func=cmd_fit)
    plan = sub.add_parser("plan", parents=[common])
    plan.set_defaults(func=cmd_plan)
    fig = sub.add_parser("figure", parents=[common])
    fig.add_argument("figure_id")
    fig.set_defaults(func=cmd_figure)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.input = args.input_list[0] if args.input_list else None
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        m = load_manifest(args.manifest, args.seed)
        out = args.out or os.environ.get(OUT_ENV) or m.get("output_dir") or DEFAULT_OUT
        if args.func is cmd_figure:
            bundle = ResultBundle.load(out)
        else:
            bundle = ResultBundle.open(out, m)
        msg = args.func(args, m, bundle)
        bundle.write()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 3
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    if not args.quiet and msg:
        print(msg)
    return 0

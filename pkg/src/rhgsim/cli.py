"""Scenario files, trace/metrics emission and the command-line interface.

A scenario is a single JSON document naming the fleet, horizon, price and
limit schedules, disturbances and solver settings.  Profiles come either
from a CSV table or from a seeded synthetic generator (daily sinusoid plus
evening bump for consumption, clipped midday parabola for solar).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from importlib import resources

import numpy as np

from . import __version__
from .game import assemble, gradient_audit
from .model import (
    BatteryParams,
    FlexParams,
    ModelError,
    ProsumerParams,
)
from .sim import (
    DisturbanceSpec,
    MetricsReport,
    Scenario,
    SimulationError,
    SolverSettings,
    Trace,
    metrics,
    run_mode,
)
from .solver import solve_steady_state


class ScenarioError(ValueError):
    """Scenario file failed validation; the message carries the field path."""


def bundled_scenario_path(name: str) -> str:
    """Filesystem path of a scenario shipped with the package."""
    return str(resources.files("rhgsim").joinpath("scenarios", name))


def list_bundled_scenarios() -> list[str]:
    root = resources.files("rhgsim").joinpath("scenarios")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


# ---------------------------------------------------------------------------
# Schema validation
# ---------------------------------------------------------------------------

def _check_keys(obj: dict, allowed: dict, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ScenarioError(f"{path}{key}: unknown key")
    for key, required in allowed.items():
        if required and key not in obj:
            raise ScenarioError(f"{path}{key}: missing required key")


def _number(obj, key, path, lo=None, hi=None):
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ScenarioError(f"{path}{key}: expected a number, got {val!r}")
    if lo is not None and val < lo:
        raise ScenarioError(f"{path}{key}: {val} below minimum {lo}")
    if hi is not None and val > hi:
        raise ScenarioError(f"{path}{key}: {val} above maximum {hi}")
    return float(val)


def _integer(obj, key, path, lo=None):
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ScenarioError(f"{path}{key}: expected an integer, got {val!r}")
    if lo is not None and val < lo:
        raise ScenarioError(f"{path}{key}: {val} below minimum {lo}")
    return int(val)


def _schedule(obj, key, path, length, lo=None):
    """A per-step schedule given as a scalar or a list of length ``length``."""
    val = obj[key]
    if isinstance(val, (int, float)) and not isinstance(val, bool):
        arr = np.full(length, float(val))
    elif isinstance(val, list):
        if len(val) != length:
            raise ScenarioError(
                f"{path}{key}: schedule has {len(val)} entries, expected {length}"
            )
        arr = np.array([float(v) for v in val])
    else:
        raise ScenarioError(f"{path}{key}: expected number or list")
    if lo is not None and np.any(arr < lo):
        raise ScenarioError(f"{path}{key}: entries below minimum {lo}")
    return arr


def _parse_prosumer(entry: dict, i: int) -> tuple[ProsumerParams, np.ndarray]:
    path = f"prosumers[{i}]."
    _check_keys(entry, {"id": True, "battery": True, "flex": True,
                        "has_generation": False, "initial_state": False}, path)
    pid = entry["id"]
    if not isinstance(pid, str) or not pid:
        raise ScenarioError(f"{path}id: expected a non-empty string")
    bat = entry["battery"]
    _check_keys(bat, {"alpha": True, "beta": True, "q_max": True,
                      "s_eff_min": True, "s_eff_max": True}, path + "battery.")
    flex = entry["flex"]
    _check_keys(flex, {"e_min": True, "e_max": True, "l_max": True,
                       "gamma1": True, "gamma2": True}, path + "flex.")
    try:
        params = ProsumerParams(
            id=pid,
            battery=BatteryParams(
                alpha=_number(bat, "alpha", path + "battery."),
                beta=_number(bat, "beta", path + "battery."),
                q_max=_number(bat, "q_max", path + "battery."),
                s_eff_min=_number(bat, "s_eff_min", path + "battery."),
                s_eff_max=_number(bat, "s_eff_max", path + "battery."),
            ),
            flex=FlexParams(
                e_min=_number(flex, "e_min", path + "flex."),
                e_max=_number(flex, "e_max", path + "flex."),
                l_max=_number(flex, "l_max", path + "flex."),
                gamma1=_number(flex, "gamma1", path + "flex."),
                gamma2=_number(flex, "gamma2", path + "flex."),
            ),
            has_generation=bool(entry.get("has_generation", False)),
        )
    except ModelError as exc:
        raise ScenarioError(f"prosumers[{i}] (id {pid}): {exc}") from exc
    init = entry.get("initial_state", {"zeta": 0.0, "q": 0.0})
    _check_keys(init, {"zeta": True, "q": True}, path + "initial_state.")
    x0 = np.array([_number(init, "zeta", path + "initial_state."),
                   _number(init, "q", path + "initial_state.")])
    return params, x0


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def _synthetic_profiles(cfg: dict, fleet, horizon: int, path: str):
    _check_keys(cfg, {
        "kind": True, "seed": True, "base_kwh": True, "amp_kwh": True,
        "evening_bump_kwh": True, "solar_peak_kwh": True,
        "passive_base_kwh": True, "passive_amp_kwh": True,
        "passive_night_kwh": False, "jitter": False, "eref_surge": False,
    }, path)
    seed = _integer(cfg, "seed", path, lo=0)
    base = _number(cfg, "base_kwh", path, lo=0)
    amp = _number(cfg, "amp_kwh", path, lo=0)
    bump = _number(cfg, "evening_bump_kwh", path, lo=0)
    solar = _number(cfg, "solar_peak_kwh", path, lo=0)
    p_base = _number(cfg, "passive_base_kwh", path, lo=0)
    p_amp = _number(cfg, "passive_amp_kwh", path, lo=0)
    p_night = float(cfg.get("passive_night_kwh", 0.0))
    jitter = float(cfg.get("jitter", 0.15))

    rng = np.random.default_rng(seed)
    M = len(fleet)
    hours = np.arange(horizon) % 24
    day_shape = np.maximum(0.0, np.sin(2.0 * np.pi * (hours - 7.0) / 24.0))
    evening = np.exp(-0.5 * ((hours - 19.0) / 2.5) ** 2)
    night = np.exp(-0.5 * ((hours - 2.5) / 2.0) ** 2)
    solar_shape = np.maximum(0.0, 1.0 - ((hours - 12.5) / 5.5) ** 2)

    e_ref = np.zeros((horizon, M))
    g = np.zeros((horizon, M))
    for v, p in enumerate(fleet):
        scale = 1.0 + jitter * rng.uniform(-1.0, 1.0)
        b_v = base * scale
        a_v = amp * (1.0 + jitter * rng.uniform(-1.0, 1.0))
        ev_v = bump * (1.0 + jitter * rng.uniform(-1.0, 1.0))
        noise = 1.0 + 0.05 * rng.standard_normal(horizon)
        prof = (b_v + a_v * day_shape + ev_v * evening) * np.clip(noise, 0.7, 1.3)
        e_ref[:, v] = np.clip(prof, p.flex.e_min, p.flex.e_max)
        if p.has_generation:
            s_v = solar * (1.0 + jitter * rng.uniform(-1.0, 1.0))
            g[:, v] = s_v * solar_shape
    surge = cfg.get("eref_surge")
    if surge is not None:
        # One-off extra reference consumption (e.g. a night charging surge).
        _check_keys(surge, {"start": True, "duration": True, "add_kwh": True},
                    path + "eref_surge.")
        a = _integer(surge, "start", path + "eref_surge.", lo=0)
        b = a + _integer(surge, "duration", path + "eref_surge.", lo=1)
        add = _number(surge, "add_kwh", path + "eref_surge.", lo=0)
        for v, p in enumerate(fleet):
            sl = slice(a, min(b, horizon))
            e_ref[sl, v] = np.clip(e_ref[sl, v] + add, p.flex.e_min, p.flex.e_max)
    passive_noise = 1.0 + 0.05 * rng.standard_normal(horizon)
    L_passive = (
        p_base + p_amp * (0.6 * day_shape + 0.4 * evening) + p_night * night
    ) * np.clip(passive_noise, 0.7, 1.3)
    return e_ref, g, L_passive


def _csv_profiles(cfg: dict, fleet, horizon: int, scenario_dir: str, path: str):
    _check_keys(cfg, {"kind": True, "path": True}, path)
    rel = cfg["path"]
    if not isinstance(rel, str):
        raise ScenarioError(f"{path}path: expected a string")
    table_path = os.path.join(scenario_dir, rel)
    if not os.path.exists(table_path):
        raise ScenarioError(f"{path}path: profile table not found: {table_path}")
    ids = {p.id: v for v, p in enumerate(fleet)}
    e_ref = np.full((horizon, len(fleet)), np.nan)
    g = np.zeros((horizon, len(fleet)))
    passive = np.full(horizon, np.nan)
    with open(table_path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in ("hour", "id", "e_ref_kwh"):
            if col not in fields:
                raise ScenarioError(f"profile table missing column {col!r}")
        for ln, row in enumerate(reader, start=2):
            try:
                hour = int(row["hour"])
            except ValueError as exc:
                raise ScenarioError(f"profile table line {ln}: bad hour") from exc
            if not 0 <= hour < horizon:
                continue
            rid = row["id"]
            val = float(row["e_ref_kwh"])
            if val < 0:
                raise ScenarioError(f"profile table line {ln}: negative e_ref_kwh")
            gen = float(row.get("g_kwh") or 0.0)
            if gen < 0:
                raise ScenarioError(f"profile table line {ln}: negative g_kwh")
            if rid == "passive":
                passive[hour] = val
            elif rid in ids:
                e_ref[hour, ids[rid]] = val
                g[hour, ids[rid]] = gen
            else:
                raise ScenarioError(f"profile table line {ln}: unknown id {rid!r}")
    for pid, v in ids.items():
        missing = np.nonzero(np.isnan(e_ref[:, v]))[0]
        if len(missing):
            raise ScenarioError(
                f"profile table: id {pid} missing hour {int(missing[0])} "
                f"(hours 0..{horizon - 1} must be contiguous)"
            )
    if np.any(np.isnan(passive)):
        passive = np.where(np.isnan(passive), 0.0, passive)
    return e_ref, g, passive


# ---------------------------------------------------------------------------
# Scenario loading
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "name": True, "description": False, "horizon": True, "steps": True,
    "prosumers": True, "profiles": True, "prices": True,
    "aggregate_limits": True, "shift_bounds": True,
    "disturbances": False, "solver": False,
}


def load_scenario(path: str) -> Scenario:
    """Parse and validate a scenario file into a runnable :class:`Scenario`."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ScenarioError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ScenarioError("scenario root must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "")

    N = _integer(cfg, "horizon", "", lo=1)
    T = _integer(cfg, "steps", "", lo=1)
    horizon = T + N

    if not isinstance(cfg["prosumers"], list) or not cfg["prosumers"]:
        raise ScenarioError("prosumers: expected a non-empty list")
    fleet, x0_rows = [], []
    for i, entry in enumerate(cfg["prosumers"]):
        p, x0 = _parse_prosumer(entry, i)
        fleet.append(p)
        x0_rows.append(x0)
    ids = [p.id for p in fleet]
    if len(set(ids)) != len(ids):
        raise ScenarioError("prosumers: ids must be unique")

    prof = cfg["profiles"]
    if not isinstance(prof, dict) or "kind" not in prof:
        raise ScenarioError("profiles.kind: missing")
    if prof["kind"] == "synthetic":
        e_ref, g, L_passive = _synthetic_profiles(prof, fleet, horizon, "profiles.")
    elif prof["kind"] == "csv":
        e_ref, g, L_passive = _csv_profiles(
            prof, fleet, horizon, os.path.dirname(os.path.abspath(path)), "profiles."
        )
    else:
        raise ScenarioError(f"profiles.kind: unknown kind {prof['kind']!r}")

    prices = cfg["prices"]
    _check_keys(prices, {"rho1": True, "rho2": True, "peak_hours": False,
                         "peak_multiplier": False}, "prices.")
    rho1 = _schedule(prices, "rho1", "prices.", horizon)
    rho2 = _schedule(prices, "rho2", "prices.", horizon, lo=0.0)
    if np.any(rho1 <= 0):
        raise ScenarioError("prices.rho1: must be positive")
    mult = float(prices.get("peak_multiplier", 1.0))
    if mult <= 0:
        raise ScenarioError("prices.peak_multiplier: must be positive")
    windows = prices.get("peak_hours", [])
    if not isinstance(windows, list):
        raise ScenarioError("prices.peak_hours: expected a list of [start, end) pairs")
    hours = np.arange(horizon) % 24
    peak_mask = np.zeros(horizon, dtype=bool)
    for j, wnd in enumerate(windows):
        if (not isinstance(wnd, list) or len(wnd) != 2
                or not all(isinstance(h, int) for h in wnd)):
            raise ScenarioError(f"prices.peak_hours[{j}]: expected [start, end) hours")
        a, b = wnd
        if not 0 <= a < b <= 24:
            raise ScenarioError(f"prices.peak_hours[{j}]: need 0 <= start < end <= 24")
        peak_mask |= (hours >= a) & (hours < b)
    rho1 = np.where(peak_mask, rho1 * mult, rho1)
    rho2 = np.where(peak_mask, rho2 * mult, rho2)

    limits = cfg["aggregate_limits"]
    _check_keys(limits, {"l_min": True, "l_max": True}, "aggregate_limits.")
    L_min = _schedule(limits, "l_min", "aggregate_limits.", horizon)
    L_max = _schedule(limits, "l_max", "aggregate_limits.", horizon)
    if np.any(L_min >= L_max):
        k = int(np.argmax(L_min >= L_max))
        raise ScenarioError(
            f"aggregate_limits: l_min >= l_max at step {k} "
            f"({L_min[k]} >= {L_max[k]})"
        )

    shift = cfg["shift_bounds"]
    _check_keys(shift, {"default_min": True, "default_max": True,
                        "midnight_min": False, "midnight_max": False},
                "shift_bounds.")
    d_lo = _number(shift, "default_min", "shift_bounds.")
    d_hi = _number(shift, "default_max", "shift_bounds.")
    if d_lo > d_hi:
        raise ScenarioError("shift_bounds: default_min > default_max")
    m_lo = float(shift.get("midnight_min", d_lo))
    m_hi = float(shift.get("midnight_max", d_hi))
    if m_lo > m_hi:
        raise ScenarioError("shift_bounds: midnight_min > midnight_max")
    M = len(fleet)
    zeta_min = np.full((horizon + 1, M), d_lo)
    zeta_max = np.full((horizon + 1, M), d_hi)
    for t in range(24, horizon + 1, 24):
        zeta_min[t] = m_lo
        zeta_max[t] = m_hi

    disturbances = []
    for j, entry in enumerate(cfg.get("disturbances", [])):
        dpath = f"disturbances[{j}]."
        _check_keys(entry, {"kind": True, "start": True, "duration": True,
                            "magnitude": True, "visibility": False}, dpath)
        try:
            disturbances.append(DisturbanceSpec(
                kind=entry["kind"],
                start=_integer(entry, "start", dpath, lo=0),
                duration=_integer(entry, "duration", dpath, lo=1),
                magnitude=_number(entry, "magnitude", dpath),
                visibility=entry.get("visibility", "unforeseen"),
            ))
        except SimulationError as exc:
            raise ScenarioError(f"{dpath[:-1]}: {exc}") from exc

    solver_cfg = cfg.get("solver", {})
    _check_keys(solver_cfg, {"algorithm": False, "tol": False, "max_iter": False},
                "solver.")
    try:
        settings = SolverSettings(
            algorithm=solver_cfg.get("algorithm", "direct"),
            tol=float(solver_cfg.get("tol", 1e-8)),
            max_iter=solver_cfg.get("max_iter"),
        )
    except SimulationError as exc:
        raise ScenarioError(f"solver: {exc}") from exc

    gamma1 = np.array([[p.flex.gamma1 for p in fleet]] * horizon)
    gamma2 = np.array([[p.flex.gamma2 for p in fleet]] * horizon)

    scenario = Scenario(
        params=fleet, T=T, N=N,
        e_ref=e_ref, g=g, L_passive=L_passive,
        rho1=rho1, rho2=rho2, gamma1=gamma1, gamma2=gamma2,
        L_min=L_min, L_max=L_max,
        zeta_min=zeta_min, zeta_max=zeta_max,
        x0=np.vstack(x0_rows),
        disturbances=disturbances,
        solver=settings,
        meta={"name": cfg["name"], "config": cfg, "path": os.path.abspath(path)},
    )
    try:
        scenario.validate()
    except (SimulationError, ModelError) as exc:
        raise ScenarioError(str(exc)) from exc
    return scenario


def save_scenario(scenario: Scenario, path: str) -> None:
    """Write the scenario's originating configuration back to disk."""
    cfg = scenario.meta.get("config")
    if cfg is None:
        raise ScenarioError("scenario carries no configuration to save")
    _atomic_write(path, json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise SimulationError(f"refusing to write non-finite value {x!r}")
    return f"{x:.10g}"


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_trace(trace: Trace, out_dir: str,
                report: MetricsReport | None = None) -> dict[str, str]:
    """Emit ``trace.csv``, ``aggregate.csv`` and ``metrics.json`` into ``out_dir``.

    Rows are sorted by step and id (the aggregate pseudo-id sorts first), and
    repeated runs of the same scenario produce byte-identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    if report is None:
        report = metrics(trace)

    buf = io.StringIO()
    buf.write("t,id,e,s,zeta,q,l\n")
    order = sorted(range(len(trace.ids)), key=lambda v: trace.ids[v])
    for t in range(trace.steps):
        rows = [(
            "aggregate",
            float(np.sum(trace.e[t])), float(np.sum(trace.s[t])),
            float(np.sum(trace.zeta[t])), float(np.sum(trace.q[t])),
            float(trace.L[t]),
        )]
        rows += [(
            trace.ids[v],
            trace.e[t, v], trace.s[t, v], trace.zeta[t, v], trace.q[t, v],
            trace.l[t, v],
        ) for v in order]
        rows.sort(key=lambda r: r[0])
        for rid, e, s, zeta, q, load in rows:
            buf.write(f"{t},{rid},{_fmt(e)},{_fmt(s)},{_fmt(zeta)},{_fmt(q)},{_fmt(load)}\n")
    files = {"trace": os.path.join(out_dir, "trace.csv")}
    _atomic_write(files["trace"], buf.getvalue())

    buf = io.StringIO()
    buf.write("t,L,L_min,L_max,price\n")
    for t in range(trace.steps):
        buf.write(
            f"{t},{_fmt(trace.L[t])},{_fmt(trace.L_min[t])},"
            f"{_fmt(trace.L_max[t])},{_fmt(trace.price[t])}\n"
        )
    files["aggregate"] = os.path.join(out_dir, "aggregate.csv")
    _atomic_write(files["aggregate"], buf.getvalue())

    doc = report.to_dict()
    doc["mode"] = trace.mode
    doc["steps"] = trace.steps
    if trace.failure_step is not None:
        doc["failure_step"] = trace.failure_step
        doc["failure_reason"] = trace.failure_reason
    if trace.clip_events:
        doc["clip_events"] = [
            {"t": t, "id": pid, "change": chg} for t, pid, chg in trace.clip_events
        ]
    scenario_meta = dict(trace.meta)
    scenario_meta.pop("day_plans", None)
    scenario_meta.pop("path", None)
    doc["scenario"] = _jsonable(scenario_meta)
    for key, val in doc.items():
        _assert_finite(val, key)
    files["metrics"] = os.path.join(out_dir, "metrics.json")
    _atomic_write(files["metrics"], json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return files


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _assert_finite(val, path):
    if isinstance(val, float) and not math.isfinite(val):
        raise SimulationError(f"metrics field {path} is not finite")
    if isinstance(val, dict):
        for k, v in val.items():
            _assert_finite(v, f"{path}.{k}")
    if isinstance(val, list):
        for i, v in enumerate(val):
            _assert_finite(v, f"{path}[{i}]")


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2


def _cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    scenario.meta["mode"] = args.mode
    try:
        trace = run_mode(scenario, args.mode)
        baseline = trace if args.mode == "none" else run_mode(scenario, "none")
        report = metrics(trace, baseline)
        files = write_trace(trace, args.out, report)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if trace.failure_step is not None:
        print(
            f"error: run failed at step {trace.failure_step}: "
            f"{trace.failure_reason}",
            file=sys.stderr,
        )
        return EXIT_SOLVER
    print(
        f"{args.mode}: {trace.steps} steps, peak {report.peak_kw:.3f} kWh, "
        f"shaving {report.shaving_pct:.1f} %, violations {report.violations}"
    )
    for name, fpath in sorted(files.items()):
        print(f"  wrote {fpath}")
    return EXIT_OK


def _cmd_steady_state(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    ss = solve_steady_state(scenario.params, scenario.steady_window())
    if not ss.feasible:
        print("error: steady-state game is infeasible for the averaged parameters",
              file=sys.stderr)
        return EXIT_SOLVER
    print("prosumer  zeta_bar   q_bar      e_bar      s_bar")
    for p, x, u in zip(scenario.params, ss.x_bar, ss.u_bar):
        print(f"{p.id:<9} {x[0]:>9.5f} {x[1]:>9.5f} {u[0]:>9.5f} {u[1]:>9.5f}")
    lo, hi = ss.coupling_duals
    print(f"coupling duals: lower {lo:.6g}, upper {hi:.6g}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{args.scenario}: valid")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    game = assemble(scenario.x0, scenario.params, scenario.window_at(0))
    err_cost, err_pot = gradient_audit(
        game, samples=args.samples, rng=np.random.default_rng(0)
    )
    print(f"pseudo-gradient vs finite differences: max rel error {err_cost:.3e}")
    print(f"potential gradient vs pseudo-gradient: max rel error {err_pot:.3e}")
    if err_cost > 1e-6 or err_pot > 1e-6:
        print("error: gradient audit failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rhgsim",
        description="Game-theoretic demand-side management simulator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write trace files")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", choices=["rhg", "day-ahead", "none"], default="rhg")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("steady-state",
                       help="equilibrium of the averaged constant-parameter game")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=_cmd_steady_state)

    p = sub.add_parser("validate", help="schema-check a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of the assembled game")
    p.add_argument("--scenario", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.set_defaults(func=_cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

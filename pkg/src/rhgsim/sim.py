"""Closed-loop execution engines and metrics.

Three ways to run a scenario:

* :func:`run_receding_horizon` solves the horizon game at every step and
  applies each prosumer's first input (feedback policy).
* :func:`run_day_ahead` solves the game once per day at midnight and applies
  the whole 24-hour plan open loop; aggregate-limit violations during the day
  are recorded, never prevented.
* :func:`run_no_dsm` applies the nominal consumption with idle batteries.

Unforeseen disturbances alter reality from their onset but enter prediction
windows only once the onset has been reached.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import solver as solver_mod
from .game import GameError, GameQP, ScenarioWindow, assemble
from .model import (
    PriceRates,
    ProsumerParams,
    ProsumerState,
    check_unique_ids,
    price,
    step_state,
)


class SimulationError(ValueError):
    """Raised for malformed scenarios or unusable run configurations."""


class InfeasibleWindowError(RuntimeError):
    """The per-step game has an empty feasible set (or the solver failed)."""

    def __init__(self, message, max_violation=0.0):
        super().__init__(message)
        self.max_violation = max_violation


KIND_LIMIT_SCALE = "aggregate_limit_scale"
KIND_PASSIVE_ADD = "passive_load_add"
KIND_GEN_SCALE = "generation_scale"
_KINDS = (KIND_LIMIT_SCALE, KIND_PASSIVE_ADD, KIND_GEN_SCALE)
_VISIBILITIES = ("foreseen", "unforeseen")


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str
    start: int        # absolute step of onset
    duration: int     # steps the disturbance lasts
    magnitude: float  # scale factor or additive kWh depending on kind
    visibility: str = "unforeseen"

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise SimulationError(f"unknown disturbance kind {self.kind!r}")
        if self.visibility not in _VISIBILITIES:
            raise SimulationError(f"unknown visibility {self.visibility!r}")
        if self.start < 0 or self.duration <= 0:
            raise SimulationError("disturbance needs start >= 0 and duration > 0")

    def active(self, step: int) -> bool:
        return self.start <= step < self.start + self.duration

    def known_at(self, decision_time: int) -> bool:
        return self.visibility == "foreseen" or decision_time >= self.start


@dataclass
class SolverSettings:
    algorithm: str = "direct"   # "direct" or "iterative"
    tol: float = 1e-8
    max_iter: int | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ("direct", "iterative"):
            raise SimulationError(f"unknown solver algorithm {self.algorithm!r}")


@dataclass
class Scenario:
    """Complete description of one simulation run.

    All profile arrays cover ``T + N`` steps so that every prediction window
    is fully specified; shift bounds are indexed by the absolute step of the
    state they constrain (length ``T + N + 1``, index 0 unused).
    """

    params: list[ProsumerParams]
    T: int
    N: int
    e_ref: np.ndarray      # (T+N, M) kWh
    g: np.ndarray          # (T+N, M) kWh
    L_passive: np.ndarray  # (T+N,) kWh
    rho1: np.ndarray       # (T+N,) $/kWh^2
    rho2: np.ndarray       # (T+N,) $/kWh
    gamma1: np.ndarray     # (T+N, M)
    gamma2: np.ndarray     # (T+N, M)
    L_min: np.ndarray      # (T+N,) kWh
    L_max: np.ndarray      # (T+N,) kWh
    zeta_min: np.ndarray   # (T+N+1, M) kWh
    zeta_max: np.ndarray   # (T+N+1, M) kWh
    x0: np.ndarray         # (M, 2) columns (zeta, q)
    disturbances: list[DisturbanceSpec] = field(default_factory=list)
    solver: SolverSettings = field(default_factory=SolverSettings)
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.params)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.params]

    def validate(self) -> None:
        check_unique_ids(self.params)
        M, H = self.M, self.T + self.N
        if self.T < 1 or self.N < 1:
            raise SimulationError("scenario needs T >= 1 and N >= 1")
        shapes = {
            "e_ref": (H, M), "g": (H, M), "gamma1": (H, M), "gamma2": (H, M),
            "L_passive": (H,), "rho1": (H,), "rho2": (H,),
            "L_min": (H,), "L_max": (H,),
            "zeta_min": (H + 1, M), "zeta_max": (H + 1, M),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise SimulationError(
                    f"scenario field {name} has shape {arr.shape}, expected {shape}"
                )
        if self.x0.shape != (M, 2):
            raise SimulationError(f"x0 must have shape ({M}, 2)")
        if np.any(self.L_min >= self.L_max):
            k = int(np.argmax(self.L_min >= self.L_max))
            raise SimulationError(f"L_min >= L_max at step {k}")
        if np.any(self.rho1 <= 0.0):
            raise SimulationError("rho1 must be positive")
        for v, p in enumerate(self.params):
            if not p.has_generation and np.any(self.g[:, v] != 0.0):
                raise SimulationError(f"prosumer {p.id} has no generation but g != 0")
            p.check_state(ProsumerState(*self.x0[v]))

    # -- disturbance application ------------------------------------------

    def _disturbed(self, steps: np.ndarray, decision_time: int | None):
        """Return (L_max, L_passive, g) over ``steps`` with disturbances applied.

        ``decision_time=None`` yields realized values (everything applied);
        otherwise the forecast available at that time.
        """
        L_max = self.L_max[steps].astype(float).copy()
        Lp = self.L_passive[steps].astype(float).copy()
        g = self.g[steps].astype(float).copy()
        for d in self.disturbances:
            if decision_time is not None and not d.known_at(decision_time):
                continue
            mask = (steps >= d.start) & (steps < d.start + d.duration)
            if not np.any(mask):
                continue
            if d.kind == KIND_LIMIT_SCALE:
                L_max[mask] *= d.magnitude
            elif d.kind == KIND_PASSIVE_ADD:
                Lp[mask] += d.magnitude
            else:
                g[mask] *= d.magnitude
        return L_max, Lp, g

    def window_at(self, t: int) -> ScenarioWindow:
        """Prediction window for a decision taken at step ``t``."""
        steps = np.arange(t, t + self.N)
        L_max, Lp, g = self._disturbed(steps, decision_time=t)
        M = self.M
        win = ScenarioWindow(
            e_ref=self.e_ref[steps].copy(),
            g=g,
            rho1=np.repeat(self.rho1[steps, None], M, axis=1),
            rho2=np.repeat(self.rho2[steps, None], M, axis=1),
            gamma1=self.gamma1[steps].copy(),
            gamma2=self.gamma2[steps].copy(),
            L_passive=Lp,
            L_min=self.L_min[steps].copy(),
            L_max=L_max,
            zeta_min=self.zeta_min[t + 1 : t + self.N + 1].copy(),
            zeta_max=self.zeta_max[t + 1 : t + self.N + 1].copy(),
        )
        return win

    def realized_at(self, t: int):
        """Realized (L_min, L_max, L_passive, g_row, rates) at step ``t``."""
        steps = np.array([t])
        L_max, Lp, g = self._disturbed(steps, decision_time=None)
        rates = PriceRates(rho1=float(self.rho1[t]), rho2=float(self.rho2[t]))
        return float(self.L_min[t]), float(L_max[0]), float(Lp[0]), g[0], rates

    def steady_window(self) -> ScenarioWindow:
        """Single-step window of time-averaged nominal parameters.

        Used to compute the steady state referenced by stability metrics.
        """
        sl = slice(0, self.T)
        M = self.M
        return ScenarioWindow(
            e_ref=self.e_ref[sl].mean(axis=0, keepdims=True),
            g=self.g[sl].mean(axis=0, keepdims=True),
            rho1=np.full((1, M), self.rho1[sl].mean()),
            rho2=np.full((1, M), self.rho2[sl].mean()),
            gamma1=self.gamma1[sl].mean(axis=0, keepdims=True),
            gamma2=self.gamma2[sl].mean(axis=0, keepdims=True),
            L_passive=np.array([self.L_passive[sl].mean()]),
            L_min=np.array([self.L_min[sl].min()]),
            L_max=np.array([self.L_max[sl].max()]),
            zeta_min=self.zeta_min[1 : self.T + 1].min(axis=0, keepdims=True),
            zeta_max=self.zeta_max[1 : self.T + 1].max(axis=0, keepdims=True),
        )


@dataclass
class Trace:
    """Time-indexed closed-loop record of one run."""

    mode: str
    ids: list[str]
    e: np.ndarray           # (T, M) kWh
    s: np.ndarray           # (T, M) kWh
    zeta: np.ndarray        # (T, M) state at the start of each step
    q: np.ndarray           # (T, M)
    l: np.ndarray           # (T, M) realized local loads
    L: np.ndarray           # (T,) realized aggregate load
    price: np.ndarray       # (T,) realized price, $/kWh
    L_min: np.ndarray       # (T,) realized limits
    L_max: np.ndarray       # (T,)
    dual_lo: np.ndarray     # (T,) first-step coupling multipliers
    dual_hi: np.ndarray     # (T,)
    iterations: np.ndarray  # (T,) solver iterations (0 for baselines)
    kkt: np.ndarray         # (T,) solver residuals (0 for baselines)
    cum_cost: np.ndarray    # (T, M) cumulative realized cost per prosumer
    final_state: np.ndarray  # (M, 2) state after the last step
    failure_step: int | None = None
    failure_reason: str = ""
    clip_events: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.e.shape[0]

    def states(self) -> np.ndarray:
        """States x_t for t = 0..steps, shape (steps+1, M, 2)."""
        out = np.empty((self.steps + 1, len(self.ids), 2))
        out[: self.steps, :, 0] = self.zeta
        out[: self.steps, :, 1] = self.q
        out[self.steps] = self.final_state
        return out


@dataclass
class PolicyStep:
    """First inputs of the horizon equilibrium plus solver diagnostics."""

    u0: np.ndarray  # (M, 2) columns (e, s)
    solution: solver_mod.Solution
    game: GameQP


def rhg_policy(
    x: np.ndarray,
    window: ScenarioWindow,
    params: Sequence[ProsumerParams],
    settings: SolverSettings | None = None,
) -> PolicyStep:
    """Solve the horizon game from state ``x`` and extract each first input."""
    settings = settings or SolverSettings()
    game = assemble(x, params, window)
    if settings.algorithm == "direct":
        sol = solver_mod.solve_vgne_direct(game, tol=settings.tol)
    else:
        sol = solver_mod.solve_vgne_iterative(
            game, tol=settings.tol, max_iter=settings.max_iter
        )
    if sol.status == solver_mod.STATUS_INFEASIBLE:
        raise InfeasibleWindowError(
            f"horizon game infeasible (max constraint violation "
            f"{sol.max_violation:.3e} kWh)",
            max_violation=sol.max_violation,
        )
    if sol.status != solver_mod.STATUS_CONVERGED:
        raise InfeasibleWindowError(
            f"solver failed to converge (status {sol.status}, "
            f"residual {sol.kkt_residual:.3e})"
        )
    lay = game.layout
    u0 = np.array(
        [
            [sol.z[lay.input_index(v, 0, "e")], sol.z[lay.input_index(v, 0, "s")]]
            for v in range(lay.M)
        ]
    )
    return PolicyStep(u0=u0, solution=sol, game=game)


class _Recorder:
    def __init__(self, scenario: Scenario, mode: str):
        T, M = scenario.T, scenario.M
        self.sc = scenario
        self.mode = mode
        self.e = np.zeros((T, M))
        self.s = np.zeros((T, M))
        self.zeta = np.zeros((T, M))
        self.q = np.zeros((T, M))
        self.l = np.zeros((T, M))
        self.L = np.zeros(T)
        self.price = np.zeros(T)
        self.L_min = np.zeros(T)
        self.L_max = np.zeros(T)
        self.dual_lo = np.zeros(T)
        self.dual_hi = np.zeros(T)
        self.iterations = np.zeros(T, dtype=int)
        self.kkt = np.zeros(T)
        self.cum = np.zeros((T, M))
        self.clip_events: list = []
        self._running = np.zeros(M)
        self.t_done = 0

    def record(self, t, x, u, sol=None):
        sc = self.sc
        L_min_r, L_max_r, Lp_r, g_r, rates = sc.realized_at(t)
        load = u[:, 0] + u[:, 1] - g_r
        L_t = float(np.sum(load) + Lp_r)
        self.e[t], self.s[t] = u[:, 0], u[:, 1]
        self.zeta[t], self.q[t] = x[:, 0], x[:, 1]
        self.l[t] = load
        self.L[t] = L_t
        self.price[t] = price(L_t, rates)
        self.L_min[t], self.L_max[t] = L_min_r, L_max_r
        if sol is not None:
            self.dual_lo[t] = sol.duals_coupling[0, 0]
            self.dual_hi[t] = sol.duals_coupling[0, 1]
            self.iterations[t] = sol.iterations
            self.kkt[t] = sol.kkt_residual
        step_cost = (
            self.price[t] * load
            + sc.gamma1[t] * x[:, 0] ** 2
            + sc.gamma2[t] * x[:, 1] ** 2
        )
        self._running = self._running + step_cost
        self.cum[t] = self._running
        self.t_done = t + 1

    def finish(self, x_final, failure_step=None, failure_reason=""):
        n = self.t_done
        return Trace(
            mode=self.mode, ids=self.sc.ids,
            e=self.e[:n], s=self.s[:n], zeta=self.zeta[:n], q=self.q[:n],
            l=self.l[:n], L=self.L[:n], price=self.price[:n],
            L_min=self.L_min[:n], L_max=self.L_max[:n],
            dual_lo=self.dual_lo[:n], dual_hi=self.dual_hi[:n],
            iterations=self.iterations[:n], kkt=self.kkt[:n],
            cum_cost=self.cum[:n], final_state=x_final.copy(),
            failure_step=failure_step, failure_reason=failure_reason,
            clip_events=self.clip_events,
            meta=dict(self.sc.meta),
        )


def _advance(x, u, t, scenario):
    out = np.empty_like(x)
    for v, p in enumerate(scenario.params):
        st = step_state(
            ProsumerState(*x[v]), u[v, 0], u[v, 1], scenario.e_ref[t, v], p
        )
        out[v] = (st.zeta, st.q)
    return out


def run_receding_horizon(scenario: Scenario) -> Trace:
    """Feedback execution: at every step solve the horizon game, apply the
    first inputs, shift the horizon, repeat."""
    scenario.validate()
    rec = _Recorder(scenario, "rhg")
    x = scenario.x0.copy()
    for t in range(scenario.T):
        try:
            step = rhg_policy(x, scenario.window_at(t), scenario.params,
                              scenario.solver)
        except (InfeasibleWindowError, GameError) as exc:
            return rec.finish(x, failure_step=t, failure_reason=str(exc))
        rec.record(t, x, step.u0, step.solution)
        x = _advance(x, step.u0, t, scenario)
    return rec.finish(x)


def _clip_device(u, x, t, scenario, rec):
    """Enforce physical device limits on an open-loop input; log adjustments.

    Aggregate limits are deliberately left violable.
    """
    out = u.copy()
    _, _, _, g_r, _ = scenario.realized_at(t)
    for v, p in enumerate(scenario.params):
        e, s = out[v]
        s_lo = max(p.battery.s_min, (0.0 - p.battery.alpha * x[v, 1]) / p.battery.beta)
        s_hi = min(
            p.battery.s_max,
            (p.battery.q_max - p.battery.alpha * x[v, 1]) / p.battery.beta,
        )
        s_new = min(max(s, s_lo), s_hi)
        e_lo = max(p.flex.e_min, g_r[v] - s_new)
        e_hi = min(p.flex.e_max, g_r[v] - s_new + p.flex.l_max)
        if e_lo > e_hi:  # load box unsatisfiable; keep consumption box only
            e_lo, e_hi = p.flex.e_min, p.flex.e_max
        e_new = min(max(e, e_lo), e_hi)
        if abs(s_new - s) > 1e-9 or abs(e_new - e) > 1e-9:
            rec.clip_events.append((t, p.id, f"({e:.4f},{s:.4f})->({e_new:.4f},{s_new:.4f})"))
        out[v] = (e_new, s_new)
    return out


def run_day_ahead(scenario: Scenario) -> Trace:
    """Open-loop execution: solve once per day at midnight, apply all 24 inputs.

    States propagate through the true (possibly disturbed) dynamics; device
    boxes are hard-clipped with a logged flag, aggregate-limit violations are
    recorded in the trace and surface in the metrics.
    """
    scenario.validate()
    if scenario.N != 24:
        raise SimulationError("day-ahead execution requires a 24-step horizon")
    if scenario.T % 24 != 0:
        raise SimulationError("day-ahead execution requires T to be a multiple of 24")
    rec = _Recorder(scenario, "day-ahead")
    x = scenario.x0.copy()
    day_plans = []
    for day in range(scenario.T // 24):
        t0 = 24 * day
        try:
            step = rhg_policy(x, scenario.window_at(t0), scenario.params,
                              scenario.solver)
        except (InfeasibleWindowError, GameError) as exc:
            trace = rec.finish(x, failure_step=t0, failure_reason=str(exc))
            trace.meta["day_plans"] = day_plans
            return trace
        lay = step.game.layout
        plan = np.empty((24, scenario.M, 2))
        for k in range(24):
            for v in range(scenario.M):
                plan[k, v, 0] = step.solution.z[lay.input_index(v, k, "e")]
                plan[k, v, 1] = step.solution.z[lay.input_index(v, k, "s")]
        day_plans.append(
            {"t0": t0, "plan": plan.copy(), "z": step.solution.z.copy()}
        )
        for k in range(24):
            t = t0 + k
            u = _clip_device(plan[k], x, t, scenario, rec)
            rec.record(t, x, u, step.solution if k == 0 else None)
            x = _advance(x, u, t, scenario)
    trace = rec.finish(x)
    trace.meta["day_plans"] = day_plans
    return trace


def run_no_dsm(scenario: Scenario) -> Trace:
    """Baseline without demand-side management: nominal consumption, idle battery."""
    scenario.validate()
    rec = _Recorder(scenario, "none")
    x = scenario.x0.copy()
    for t in range(scenario.T):
        u = np.column_stack([scenario.e_ref[t], np.zeros(scenario.M)])
        rec.record(t, x, u)
        x = _advance(x, u, t, scenario)
    return rec.finish(x)


def run_mode(scenario: Scenario, mode: str) -> Trace:
    if mode == "rhg":
        return run_receding_horizon(scenario)
    if mode == "day-ahead":
        return run_day_ahead(scenario)
    if mode == "none":
        return run_no_dsm(scenario)
    raise SimulationError(f"unknown mode {mode!r}")


VIOLATION_TOL = 1e-6  # kWh slack before an aggregate limit counts as violated


@dataclass
class MetricsReport:
    peak_kw: float
    baseline_peak_kw: float
    shaving_pct: float
    violations: int
    violations_max_kwh: float
    total_cost: np.ndarray        # per prosumer, $
    total_cost_sum: float
    eod_dip: float
    midnight_soc_max: list[float]
    stability_errors: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "peak_kw": self.peak_kw,
            "baseline_peak_kw": self.baseline_peak_kw,
            "shaving_pct": self.shaving_pct,
            "violations": self.violations,
            "violations_max_kwh": self.violations_max_kwh,
            "total_cost": [float(c) for c in self.total_cost],
            "total_cost_sum": self.total_cost_sum,
            "eod_dip": self.eod_dip,
            "midnight_soc_max": self.midnight_soc_max,
        }
        if self.stability_errors is not None:
            out["stability_errors"] = [float(v) for v in self.stability_errors]
        return out


def _eod_dip(L: np.ndarray, window: int = 4) -> float:
    """Largest drop of the last hour of a day below its late-evening neighborhood."""
    dips = []
    for t_end in range(23, len(L), 24):
        lo = max(0, t_end - window)
        if lo == t_end:
            continue
        dips.append(abs(float(L[t_end]) - float(np.mean(L[lo:t_end]))))
    return max(dips) if dips else 0.0


def metrics(
    trace: Trace,
    baseline: Trace | None = None,
    steady: np.ndarray | None = None,
) -> MetricsReport:
    """Summarize a trace, optionally against a baseline of equal length.

    ``steady`` is an (M, 2) steady state; when given, the report carries the
    per-step distance of the closed-loop states to it.
    """
    if baseline is not None and baseline.steps != trace.steps:
        raise SimulationError(
            f"trace lengths differ: {trace.steps} vs {baseline.steps}"
        )
    peak = float(np.max(trace.L))
    base_peak = float(np.max(baseline.L)) if baseline is not None else peak
    shaving = (1.0 - peak / base_peak) * 100.0 if base_peak != 0.0 else 0.0
    over = np.maximum(trace.L - trace.L_max - VIOLATION_TOL, 0.0)
    under = np.maximum(trace.L_min - trace.L - VIOLATION_TOL, 0.0)
    n_viol = int(np.sum((over > 0) | (under > 0)))
    max_viol = float(np.max(np.concatenate([over, under]))) if trace.steps else 0.0
    total = trace.cum_cost[-1] if trace.steps else np.zeros(len(trace.ids))
    states = trace.states()
    midnight = [
        float(np.max(states[t, :, 1]))
        for t in range(24, trace.steps + 1, 24)
    ]
    stability = None
    if steady is not None:
        stability = np.linalg.norm(states - steady[None, :, :], axis=(1, 2))
    return MetricsReport(
        peak_kw=peak,
        baseline_peak_kw=base_peak,
        shaving_pct=float(shaving),
        violations=n_viol,
        violations_max_kwh=max_viol,
        total_cost=np.asarray(total, dtype=float),
        total_cost_sum=float(np.sum(total)),
        eod_dip=_eod_dip(trace.L),
        midnight_soc_max=midnight,
        stability_errors=stability,
    )

"""Equilibrium computation for the assembled prosumer game.

Two independent algorithms compute the variational equilibrium (the shared
solution of the coupled first-order conditions):

* :func:`solve_vgne_direct` minimizes the exact potential over the feasible
  polytope with a primal-dual barrier method on the condensed problem,
  followed by an active-set polish that solves the final KKT system exactly.
* :func:`solve_vgne_iterative` runs a projected primal-dual (forward-backward)
  iteration directly on the pseudo-gradient, with per-prosumer boxes handled
  by projection, dynamics eliminated exactly, and all remaining rows dualized.

Both return a :class:`Solution` carrying primal variables, all multipliers
and a verified KKT residual measured on the full-space game.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import LinAlgWarning
from scipy.optimize import linprog

from . import game as game_mod
from .game import CondensedGame, GameQP, ScenarioWindow, condense, prosumer_cost
from .model import ProsumerParams


class SolverError(RuntimeError):
    """Raised on precondition violations or internal solver failures."""


STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible"


@dataclass
class Solution:
    """Primal-dual solution of one game instance."""

    z: np.ndarray                 # decision vector, (4MN,)
    duals_eq: np.ndarray          # multipliers of the dynamics equalities, (2MN,)
    duals_lo: np.ndarray          # lower-side multipliers per inequality row
    duals_hi: np.ndarray          # upper-side multipliers per inequality row
    duals_coupling: np.ndarray    # aggregate-load multipliers, (N, 2) = (lo, hi)
    kkt_residual: float
    iterations: int
    status: str
    max_violation: float = 0.0    # infeasibility certificate (largest violation)
    residuals: np.ndarray | None = None  # per-iteration residual history (iterative)
    diverged: bool = False


@dataclass
class SteadyState:
    """Equilibrium of the steady-state game under constant parameters."""

    x_bar: np.ndarray  # (M, 2) columns (zeta, q)
    u_bar: np.ndarray  # (M, 2) columns (e, s)
    feasible: bool
    coupling_duals: np.ndarray | None = None  # (2,) = (lo, hi) sides


# ---------------------------------------------------------------------------
# Generic dense box-QP solver (barrier method with active-set polish)
# ---------------------------------------------------------------------------

@dataclass
class _QPResult:
    u: np.ndarray
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    status: str
    iterations: int
    max_violation: float


def _one_sided_rows(n, lb, ub, G, lo, hi, eq_tol=1e-11):
    """Split bounds and two-sided rows into one-sided rows ``C u <= d`` plus equalities.

    Returns (C, d, origins, E, de, eq_origins) where each origin is a tuple
    (kind, index, side) with kind in {"lb","ub","lo","hi","veq","req"}.
    """
    rows, data, cols, d, origins = [], [], [], [], []
    erows, edata, ecols, de, eorig = [], [], [], [], []
    r = e = 0
    for i in range(n):
        if np.isfinite(lb[i]) and np.isfinite(ub[i]) and ub[i] - lb[i] <= eq_tol * (1 + abs(ub[i])):
            erows.append(e); ecols.append(i); edata.append(1.0)
            de.append(0.5 * (lb[i] + ub[i])); eorig.append(("veq", i, ""))
            e += 1
            continue
        if np.isfinite(ub[i]):
            rows.append(r); cols.append(i); data.append(1.0)
            d.append(ub[i]); origins.append(("ub", i, "hi")); r += 1
        if np.isfinite(lb[i]):
            rows.append(r); cols.append(i); data.append(-1.0)
            d.append(-lb[i]); origins.append(("lb", i, "lo")); r += 1
    if G is not None and G.shape[0] > 0:
        Gc = G.tocoo()
        by_row: dict[int, list[tuple[int, float]]] = {}
        for i, j, v in zip(Gc.row, Gc.col, Gc.data):
            by_row.setdefault(int(i), []).append((int(j), float(v)))
        for i in range(G.shape[0]):
            entries = by_row.get(i, [])
            if np.isfinite(lo[i]) and np.isfinite(hi[i]) and hi[i] - lo[i] <= eq_tol * (1 + abs(hi[i])):
                for j, v in entries:
                    erows.append(e); ecols.append(j); edata.append(v)
                de.append(0.5 * (lo[i] + hi[i])); eorig.append(("req", i, ""))
                e += 1
                continue
            if np.isfinite(hi[i]):
                for j, v in entries:
                    rows.append(r); cols.append(j); data.append(v)
                d.append(hi[i]); origins.append(("hi", i, "hi")); r += 1
            if np.isfinite(lo[i]):
                for j, v in entries:
                    rows.append(r); cols.append(j); data.append(-v)
                d.append(-lo[i]); origins.append(("lo", i, "lo")); r += 1
    C = sp.csr_matrix((data, (rows, cols)), shape=(r, n))
    E = sp.csr_matrix((edata, (erows, ecols)), shape=(e, n))
    return C, np.array(d), origins, E, np.array(de), eorig


def _feasibility_margin(C, d, E, de, n):
    """Largest uniform slack of ``C u <= d`` subject to ``E u = de``.

    Returns (margin, u) or (None, None) when the LP itself fails.
    """
    m = C.shape[0]
    if m == 0 and E.shape[0] == 0:
        return 1.0, np.zeros(n)
    A_ub = sp.hstack([C, sp.csr_matrix(np.ones((m, 1)))]) if m else None
    A_eq = None
    if E.shape[0]:
        A_eq = sp.hstack([E, sp.csr_matrix((E.shape[0], 1))])
    res = linprog(
        c=np.append(np.zeros(n), -1.0),
        A_ub=A_ub, b_ub=d if m else None,
        A_eq=A_eq, b_eq=de if E.shape[0] else None,
        bounds=[(None, None)] * n + [(None, 1e6)],
        method="highs",
    )
    if res.status == 2:  # proven infeasible (inconsistent equalities)
        return -np.inf, None
    if not res.success:
        return None, None
    return float(res.x[-1]), res.x[:n]


def _sym_solve(K, rhs):
    """Symmetric indefinite solve; near-singular systems fall back to least squares."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        try:
            return sla.solve(K, rhs, assume_a="sym", check_finite=False)
        except sla.LinAlgError:
            return np.linalg.lstsq(K, rhs, rcond=None)[0]


def _kkt_solve(M, E_dense, rhs_u, rhs_e, reg=1e-12):
    """Solve the saddle system [[M, E^T], [E, -reg I]]."""
    p = E_dense.shape[0]
    if p == 0:
        try:
            c, low = sla.cho_factor(M, check_finite=False)
            return sla.cho_solve((c, low), rhs_u, check_finite=False), np.zeros(0)
        except sla.LinAlgError:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LinAlgWarning)
                try:
                    lu, piv = sla.lu_factor(M, check_finite=False)
                    return sla.lu_solve((lu, piv), rhs_u, check_finite=False), np.zeros(0)
                except sla.LinAlgError:
                    return np.linalg.lstsq(M, rhs_u, rcond=None)[0], np.zeros(0)
    K = np.zeros((M.shape[0] + p, M.shape[0] + p))
    K[: M.shape[0], : M.shape[0]] = M
    K[: M.shape[0], M.shape[0]:] = E_dense.T
    K[M.shape[0]:, : M.shape[0]] = E_dense
    K[M.shape[0]:, M.shape[0]:] = -reg * np.eye(p)
    rhs = np.concatenate([rhs_u, rhs_e])
    sol = _sym_solve(K, rhs)
    return sol[: M.shape[0]], sol[M.shape[0]:]


def _solve_box_qp(P, q, lb, ub, G, lo, hi, tol=1e-10, max_iter=100, start=0):
    """Minimize ``0.5 u'Pu + q'u`` over ``lb<=u<=ub`` and ``lo<=Gu<=hi``.

    Barrier (Mehrotra predictor-corrector) phase followed by an active-set
    polish so converged solutions satisfy the KKT system to near machine
    precision.  Two deterministic internal starting points are selectable
    via ``start``.
    """
    n = P.shape[0]
    q = np.asarray(q, dtype=float)

    # Fast rejection of crossed intervals (trivial infeasibility certificate).
    bad_b = np.maximum(lb - ub, 0.0)
    bad_r = np.maximum(lo - hi, 0.0) if len(lo) else np.zeros(0)
    worst = max(bad_b.max() if n else 0.0, bad_r.max() if len(bad_r) else 0.0)
    if worst > 1e-12:
        return _QPResult(np.full(n, np.nan), np.zeros(n), np.zeros(n),
                         np.zeros(len(lo)), np.zeros(len(lo)),
                         STATUS_INFEASIBLE, 0, float(worst))

    C, d, origins, E, de, eorig = _one_sided_rows(n, lb, ub, G, lo, hi)
    m = C.shape[0]
    E_dense = E.toarray() if E.shape[0] else np.zeros((0, n))

    def scatter(u, lam_os, nu_eq):
        lam_lb = np.zeros(n); lam_ub = np.zeros(n)
        lam_lo = np.zeros(len(lo)); lam_hi = np.zeros(len(lo))
        for val, (kind, idx, side) in zip(lam_os, origins):
            if kind == "ub":
                lam_ub[idx] = val
            elif kind == "lb":
                lam_lb[idx] = val
            elif kind == "hi":
                lam_hi[idx] = val
            else:
                lam_lo[idx] = val
        for val, (kind, idx, side) in zip(nu_eq, eorig):
            if kind == "veq":
                lam_ub[idx] = max(val, 0.0)
                lam_lb[idx] = max(-val, 0.0)
            else:
                lam_hi[idx] = max(val, 0.0)
                lam_lo[idx] = max(-val, 0.0)
        return lam_lb, lam_ub, lam_lo, lam_hi

    def residuals(u, lam_os, nu_eq):
        r_stat = P @ u + q
        if m:
            r_stat = r_stat + C.T @ lam_os
        if E.shape[0]:
            r_stat = r_stat + E_dense.T @ nu_eq
        pviol = 0.0
        if m:
            pviol = max(pviol, float(np.max(C @ u - d)))
        if E.shape[0]:
            pviol = max(pviol, float(np.max(np.abs(E_dense @ u - de))))
        comp = float(np.max(np.abs(lam_os * (d - C @ u)))) if m else 0.0
        return float(np.max(np.abs(r_stat))), max(pviol, 0.0), comp

    # Degenerate case: everything pinned by equalities, no inequality rows.
    if m == 0:
        u, nu = _kkt_solve(P + 1e-13 * np.eye(n), E_dense, -q, de)
        stat, pviol, _ = residuals(u, np.zeros(0), nu)
        if pviol > 1e-8:
            return _QPResult(u, *scatter(u, np.zeros(0), nu),
                             STATUS_INFEASIBLE, 0, pviol)
        return _QPResult(u, *scatter(u, np.zeros(0), nu),
                         STATUS_CONVERGED, 1, 0.0)

    # Starting point.
    u = np.zeros(n)
    both = np.isfinite(lb) & np.isfinite(ub)
    frac = 0.5 if start == 0 else 0.75
    u[both] = lb[both] + frac * (ub[both] - lb[both])
    only_lb = np.isfinite(lb) & ~both
    only_ub = np.isfinite(ub) & ~both
    u[only_lb] = lb[only_lb] + 1.0
    u[only_ub] = ub[only_ub] - 1.0
    if E.shape[0]:  # pinned coordinates sit on their target value
        for val, (kind, idx, side) in zip(de, eorig):
            if kind == "veq":
                u[idx] = val
    margin = 1.0 if start == 0 else 10.0
    s = np.maximum(d - C @ u, margin)
    lam = np.full(m, 1.0 if start == 0 else 10.0)
    nu = np.zeros(E.shape[0])

    # The barrier phase only has to localize the active set; an active-set
    # polish (attempted as soon as the gap allows, with machine-precision
    # verification) supplies the final accuracy.
    q_scale = 1.0 + float(np.max(np.abs(q)))
    ptol = max(tol, 1e-9)
    dtol = max(tol * q_scale, 1e-7 * q_scale)
    mtol = max(tol, 1e-11)
    feas_eps = 1e-9 * (1.0 + np.abs(d))

    def try_polish(u_c, lam_c, nu_c):
        u_p, lam_p, nu_p, ok = _polish(P, q, C, d, E_dense, de, u_c, lam_c, m)
        if not ok:
            return None
        stat1, p1, c1 = residuals(u_p, lam_p, nu_p)
        if max(stat1, p1, c1) <= 1e-9 * q_scale:
            return u_p, lam_p, nu_p
        return None

    CT = C.T.tocsr()
    best = None
    stalled = 0
    status = STATUS_MAX_ITER
    polish_gate = 1e-8
    it = 0
    for it in range(1, max_iter + 1):
        r_d = P @ u + q + CT @ lam + (E_dense.T @ nu if E.shape[0] else 0.0)
        r_p = C @ u + s - d
        r_e = (E_dense @ u - de) if E.shape[0] else np.zeros(0)
        mu = float(s @ lam) / m
        pinf = max(float(np.max(C @ u - d)), 0.0)
        if E.shape[0]:
            pinf = max(pinf, float(np.max(np.abs(r_e))))
        dinf = float(np.max(np.abs(r_d)))
        merit = max(pinf, dinf / q_scale, mu)
        if best is None or merit < best[0]:
            if best is not None and merit > 0.9 * best[0]:
                stalled += 1
            else:
                stalled = 0
            best = (merit, u.copy(), lam.copy(), nu.copy())
        else:
            stalled += 1
        if pinf <= ptol and mu <= polish_gate:
            polish_gate *= 1e-3
            done = try_polish(u, lam, nu)
            if done is not None:
                u, lam, nu = done
                status = STATUS_CONVERGED
                break
        if pinf <= ptol and mu <= mtol and dinf <= dtol:
            status = STATUS_CONVERGED
            break
        if stalled >= 10 or not np.isfinite(mu) or mu > 1e16:
            break

        D = np.minimum(lam / s, 1e12)
        Mmat = P + (CT.multiply(D) @ C).toarray()
        Mmat[np.diag_indices_from(Mmat)] += 1e-12 * (1.0 + np.trace(P) / n)

        def solve_dir(r_cc):
            rhs_u = -r_d - CT @ ((lam * r_p - r_cc) / s)
            du, dnu = _kkt_solve(Mmat, E_dense, rhs_u, -r_e)
            ds = -r_p - C @ du
            dlam = (-r_cc - lam * ds) / s
            return du, ds, dlam, dnu

        r_cc = s * lam
        du_a, ds_a, dlam_a, dnu_a = solve_dir(r_cc)
        if not (np.all(np.isfinite(du_a)) and np.all(np.isfinite(dlam_a))):
            break
        frac_to = 0.995 if mu > 1e-6 else 0.9995

        def step_len(vec, dvec):
            neg = dvec < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, frac_to * float(np.min(-vec[neg] / dvec[neg])))

        a_p = step_len(s, ds_a)
        a_d = step_len(lam, dlam_a)
        mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dlam_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        r_cc = s * lam + ds_a * dlam_a - sigma * mu
        du, ds, dlam, dnu = solve_dir(r_cc)
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dlam))):
            break
        a_p = step_len(s, ds)
        a_d = step_len(lam, dlam)
        u = u + a_p * du
        s = np.maximum(s + a_p * ds, 1e-300)
        lam = np.maximum(lam + a_d * dlam, 1e-300)
        if E.shape[0]:
            nu = nu + a_d * dnu

    if status != STATUS_CONVERGED:
        merit_b, u_b, lam_b, nu_b = best
        if merit_b > 1e-5:
            # Possibly infeasible; let an LP certify before giving up.
            margin_val, u_feas = _feasibility_margin(C, d, E, de, n)
            if margin_val is not None and margin_val < -1e-9:
                viol = (float(np.max(C @ u_feas - d))
                        if u_feas is not None else -margin_val)
                lam_lb, lam_ub, lam_lo, lam_hi = scatter(u_b, lam_b, nu_b)
                return _QPResult(u_feas if u_feas is not None else u_b,
                                 lam_lb, lam_ub, lam_lo, lam_hi,
                                 STATUS_INFEASIBLE, it, max(viol, 0.0))
        u, lam, nu = u_b, lam_b, nu_b
        # Last-chance polish from the best iterate.
        u_p, lam_p, nu_p, ok = _polish(P, q, C, d, E_dense, de, u, lam, m)
        if ok:
            stat0, p0, c0 = residuals(u, lam, nu)
            stat1, p1, c1 = residuals(u_p, lam_p, nu_p)
            if max(stat1, p1, c1) <= max(stat0, p0, c0):
                u, lam, nu = u_p, lam_p, nu_p
                if max(stat1, p1, c1) <= 1e-8 * q_scale:
                    status = STATUS_CONVERGED

    lam_lb, lam_ub, lam_lo, lam_hi = scatter(u, lam, nu)
    return _QPResult(u, lam_lb, lam_ub, lam_lo, lam_hi, status, it, 0.0)


def _polish(P, q, C, d, E_dense, de, u, lam, m):
    """Solve the equality-constrained KKT system of the active rows.

    The primal block carries a tiny ridge: the Hessian can be singular along
    cost-flat directions that no active row pins, and the ridge then selects
    the minimum-norm component without materially perturbing the rest.
    """
    n = P.shape[0]
    ridge = 1e-12 * (1.0 + float(np.max(np.abs(P))))
    slack = d - C @ u
    active = (slack < lam) | (slack <= 1e-8 * (1.0 + np.abs(d)))
    C_dense = None
    for _ in range(6):
        idx = np.nonzero(active)[0]
        if C_dense is None:
            C_dense = C.toarray()
        A = np.vstack([E_dense, C_dense[idx]]) if len(idx) else E_dense
        rhs_a = np.concatenate([de, d[idx]])
        p_act = A.shape[0]
        K = np.zeros((n + p_act, n + p_act))
        K[:n, :n] = P + ridge * np.eye(n)
        K[:n, n:] = A.T
        K[n:, :n] = A
        K[n:, n:] = -1e-13 * np.eye(p_act)
        rhs = np.concatenate([-q, rhs_a])
        sol = _sym_solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        u_p = sol[:n]
        w = sol[n:]
        w_ineq = w[E_dense.shape[0]:]
        neg = w_ineq < -1e-9
        viol = (C @ u_p - d) > 1e-9 * (1.0 + np.abs(d))
        viol[idx] = False
        if not np.any(neg) and not np.any(viol):
            lam_p = np.zeros(m)
            lam_p[idx] = np.maximum(w_ineq, 0.0)
            nu_p = w[: E_dense.shape[0]]
            return u_p, lam_p, nu_p, True
        keep = np.ones(len(idx), dtype=bool)
        keep[neg] = False
        active = np.zeros(m, dtype=bool)
        active[idx[keep]] = True
        active[viol] = True
    return u, None, None, False


# ---------------------------------------------------------------------------
# Full-space reconstruction and KKT residual
# ---------------------------------------------------------------------------

def _canonicalize_terminal_split(game: GameQP, red: CondensedGame, u, lam_lo, lam_hi):
    """Deterministic selection among equilibria differing in the final-step split.

    The terminal window states carry no cost, so trading consumption against
    charging in the last step (keeping their sum, hence every load, fixed)
    leaves all costs unchanged.  Whenever the feasible interval of that trade
    has positive width, every point on it is an equilibrium; both solvers
    select the one with the charging input closest to zero.  Multipliers of
    rows that become strictly inactive by the move are zeroed.
    """
    lay, win = game.layout, game.window
    M, N = lay.M, lay.N
    u = u.copy()
    lam_lo = lam_lo.copy()
    lam_hi = lam_hi.copy()
    moved = False
    for v, p in enumerate(game.params):
        base = 2 * N * v
        ie, isx = base + 2 * (N - 1), base + 2 * (N - 1) + 1
        e_cur, s_cur = u[ie], u[isx]
        y = e_cur + s_cur
        if N >= 2:
            zeta_prev = float(red.T[v][2 * (N - 2)] @ u[base : base + 2 * N]
                              + red.t0[v][2 * (N - 2)])
            q_prev = float(red.T[v][2 * (N - 2) + 1] @ u[base : base + 2 * N]
                           + red.t0[v][2 * (N - 2) + 1])
        else:
            zeta_prev, q_prev = game.x0[v]
        al, be = p.battery.alpha, p.battery.beta
        eref = win.e_ref[N - 1, v]
        e_lo = max(p.flex.e_min, win.zeta_min[N - 1, v] - zeta_prev + eref)
        e_hi = min(p.flex.e_max, win.zeta_max[N - 1, v] - zeta_prev + eref)
        s_lo = max(p.battery.s_min, -al * q_prev / be)
        s_hi = min(p.battery.s_max, (p.battery.q_max - al * q_prev) / be)
        face_lo = max(s_lo, y - e_hi)
        face_hi = min(s_hi, y - e_lo)
        if face_hi - face_lo <= 1e-9:
            continue
        s_new = min(max(0.0, face_lo), face_hi)
        if abs(s_new - s_cur) <= 1e-12:
            continue
        u[ie] = y - s_new
        u[isx] = s_new
        moved = True
        # Rows that can only pin the split: e/s boxes at the last step and the
        # terminal state boxes.  Zero their duals where the row went slack.
        row_e = v * N + (N - 1)
        row_s = M * N + v * N + (N - 1)
        row_zeta = 2 * M * N + v * N + (N - 1)
        row_q = 3 * M * N + v * N + (N - 1)
        zeta_new = zeta_prev + u[ie] - eref
        q_new = al * q_prev + be * s_new
        for row, val, lo_b, hi_b in (
            (row_e, u[ie], p.flex.e_min, p.flex.e_max),
            (row_s, s_new, p.battery.s_min, p.battery.s_max),
            (row_zeta, zeta_new, win.zeta_min[N - 1, v], win.zeta_max[N - 1, v]),
            (row_q, q_new, 0.0, p.battery.q_max),
        ):
            if val - lo_b > 1e-9:
                lam_lo[row] = 0.0
            if hi_b - val > 1e-9:
                lam_hi[row] = 0.0
    return u, lam_lo, lam_hi, moved


def _recover_eq_duals(game: GameQP, z, lam_signed):
    """Multipliers of the dynamics rows from the state-coordinate stationarity."""
    lay = game.layout
    x_idx = lay.state_indices
    grad = game.H @ z + game.f + game.G.T @ lam_signed
    A_x = game.Aeq[:, x_idx].T.tocsc()
    nu = spla.spsolve(A_x, -grad[x_idx])
    return np.atleast_1d(nu)


def _full_solution(game: GameQP, red: CondensedGame, qp: _QPResult,
                   iterations, status, residual_hist=None, diverged=False):
    lay = game.layout
    M, N = lay.M, lay.N
    n_rows = game.n_rows
    lam_lo = np.zeros(n_rows)
    lam_hi = np.zeros(n_rows)
    # Input-box duals map onto the e/s rows (stored prosumer-major by step).
    for v in range(M):
        for k in range(N):
            ue = 2 * N * v + 2 * k
            us = ue + 1
            lam_lo[v * N + k] = qp.lam_lb[ue]
            lam_hi[v * N + k] = qp.lam_ub[ue]
            lam_lo[M * N + v * N + k] = qp.lam_lb[us]
            lam_hi[M * N + v * N + k] = qp.lam_ub[us]
    lam_lo[red.row_offset:] = qp.lam_lo
    lam_hi[red.row_offset:] = qp.lam_hi

    if status == STATUS_INFEASIBLE or not np.all(np.isfinite(qp.u)):
        z = np.full(lay.size, np.nan)
        return Solution(
            z=z, duals_eq=np.zeros(2 * M * N), duals_lo=lam_lo, duals_hi=lam_hi,
            duals_coupling=np.zeros((N, 2)), kkt_residual=np.inf,
            iterations=iterations, status=STATUS_INFEASIBLE,
            max_violation=qp.max_violation, residuals=residual_hist,
            diverged=diverged,
        )

    u, lam_lo, lam_hi, _ = _canonicalize_terminal_split(game, red, qp.u, lam_lo, lam_hi)
    z = red.expand(u)
    lam_signed = lam_hi - lam_lo
    nu = _recover_eq_duals(game, z, lam_signed)
    sol = Solution(
        z=z, duals_eq=nu, duals_lo=lam_lo, duals_hi=lam_hi,
        duals_coupling=np.column_stack(
            [lam_lo[game.coupling_rows], lam_hi[game.coupling_rows]]
        ),
        kkt_residual=np.inf, iterations=iterations, status=status,
        residuals=residual_hist, diverged=diverged,
    )
    sol.kkt_residual = kkt_residual(game, sol)
    return sol


def kkt_residual(game: GameQP, sol: Solution) -> float:
    """Infinity-norm residual of the equilibrium conditions at a candidate solution.

    Maximum of stationarity, primal violations (equalities and two-sided rows),
    dual negativity and complementarity products.
    """
    z = sol.z
    if not np.all(np.isfinite(z)):
        return np.inf
    lam_signed = sol.duals_hi - sol.duals_lo
    stat = game.H @ z + game.f + game.Aeq.T @ sol.duals_eq + game.G.T @ lam_signed
    Gz = game.G @ z
    primal = max(
        float(np.max(np.abs(game.Aeq @ z - game.beq))),
        float(np.max(np.maximum(Gz - game.hi, 0.0))),
        float(np.max(np.maximum(game.lo - Gz, 0.0))),
    )
    dual_neg = max(0.0, float(np.max(-sol.duals_lo, initial=0.0)),
                   float(np.max(-sol.duals_hi, initial=0.0)))
    comp = max(
        float(np.max(np.abs(sol.duals_hi * (game.hi - Gz)))),
        float(np.max(np.abs(sol.duals_lo * (Gz - game.lo)))),
    )
    return max(float(np.max(np.abs(stat))), primal, dual_neg, comp)


# ---------------------------------------------------------------------------
# Public solvers
# ---------------------------------------------------------------------------

def solve_vgne_direct(
    game: GameQP,
    tol: float = 1e-8,
    *,
    start: int = 0,
    max_iter: int = 100,
) -> Solution:
    """Compute the unique variational equilibrium by minimizing the potential.

    Requires symmetric pricing.  ``start`` selects one of two deterministic
    internal starting points; both converge to the same equilibrium.
    """
    if not game.symmetric_pricing:
        raise SolverError("direct solver requires symmetric pricing across prosumers")
    red = condense(game)
    P = 0.5 * (red.P + red.P.T)  # exact-potential Hessian
    qp = _solve_box_qp(
        P, red.q_lin, red.lb, red.ub, red.G_r, red.lo_r, red.hi_r,
        tol=max(min(tol * 1e-2, 1e-10), 1e-13), max_iter=max_iter, start=start,
    )
    sol = _full_solution(game, red, qp, qp.iterations, qp.status)
    if sol.status == STATUS_CONVERGED and sol.kkt_residual > tol:
        sol.status = STATUS_MAX_ITER
    return sol


def _restricted_modulus(red: CondensedGame) -> float:
    """Curvature on the complement of the costless terminal-split directions.

    The public :func:`rhgsim.game.monotonicity_modulus` reports the literal
    minimum eigenvalue, which is zero for every game because trading the
    last-step consumption against charging never changes any cost.  For the
    convergence warning we quotient those known flat directions out.
    """
    lay = red.game.layout
    M, N = lay.M, lay.N
    sym = 0.5 * (red.P + red.P.T)
    shift = 2.0 * float(np.max(np.abs(sym))) + 1.0
    for v in range(M):
        d = np.zeros(2 * M * N)
        d[2 * N * v + 2 * (N - 1)] = 1.0 / np.sqrt(2.0)
        d[2 * N * v + 2 * (N - 1) + 1] = -1.0 / np.sqrt(2.0)
        sym = sym + shift * np.outer(d, d)
    return float(np.linalg.eigvalsh(sym)[0])


def _power_norm(op_matvec, n, iters=50):
    """Spectral-norm estimate by power iteration with a fixed start vector."""
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(iters):
        w = op_matvec(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return np.sqrt(lam)


def solve_vgne_iterative(
    game: GameQP,
    tol: float = 1e-6,
    max_iter: int | None = None,
    *,
    tau: float | None = None,
    rho_dual: float = 1.0,
    z0: np.ndarray | None = None,
    duals0: np.ndarray | None = None,
) -> Solution:
    """Projected primal-dual iteration on the pseudo-gradient.

    Per-prosumer input boxes are handled by projection and the dynamics by
    exact elimination; state boxes, load boxes and the aggregate coupling
    rows are enforced through projected dual ascent.  Step sizes follow
    ``tau = 1 / (|H| + |G|^2 / rho_dual)`` with norms estimated by 50 power
    iterations.  Works on non-symmetric pricing too (with a warning, since
    uniqueness is then not guaranteed).
    """
    red = condense(game)
    n_u = red.n_u
    if max_iter is None:
        max_iter = 100 * game.layout.N * game.layout.M

    if _restricted_modulus(red) <= 1e-12:
        warnings.warn(
            "pseudo-gradient is not strongly monotone on the feasible subspace; "
            "convergence of the iterative solver is not guaranteed",
            RuntimeWarning,
        )
    if not game.symmetric_pricing:
        warnings.warn(
            "non-symmetric pricing: computing a solution of the variational "
            "conditions without a uniqueness certificate",
            RuntimeWarning,
        )

    P, q = red.P, red.q_lin
    G = red.G_r.tocsr()
    GT = G.T.tocsr()
    lo, hi = red.lo_r, red.hi_r
    lb, ub = red.lb, red.ub

    L_P = _power_norm(lambda v: P.T @ (P @ v), n_u)
    L_G = _power_norm(lambda v: GT @ (G @ v), n_u)
    sigma = rho_dual
    step = tau if tau is not None else 1.0 / (L_P + L_G**2 / rho_dual)

    if z0 is not None:
        u = np.asarray(z0, dtype=float)[game.layout.input_indices].copy()
    else:
        u = np.clip(np.zeros(n_u), lb, ub)
        both = np.isfinite(lb) & np.isfinite(ub)
        u[both] = 0.5 * (lb[both] + ub[both])
    lam = np.zeros(G.shape[0]) if duals0 is None else np.asarray(duals0, dtype=float).copy()

    def finalize(u_f, lam_f, iters, status, hist, diverged):
        qp = _reduced_to_qpresult(P, q, G, GT, lo, hi, lb, ub, u_f, lam_f)
        sol = _full_solution(
            game, red, qp, iters, status,
            residual_hist=np.asarray(hist), diverged=diverged,
        )
        if sol.status == STATUS_CONVERGED and sol.kkt_residual > tol:
            sol.status = STATUS_MAX_ITER
        return sol

    hist = []
    stall = 0
    best_res = np.inf
    diverged = False
    it = 0
    check_every = 50
    gate = 0.5 * tol
    for it in range(1, max_iter + 1):
        grad = P @ u + q + GT @ lam
        u_new = np.clip(u - step * grad, lb, ub)
        y = G @ (2.0 * u_new - u) + lam / sigma
        lam_new = sigma * (y - np.clip(y, lo, hi))
        res = max(
            float(np.max(np.abs(u_new - u))) / step,
            float(np.max(np.abs(lam_new - lam), initial=0.0)) / sigma,
        )
        hist.append(res)
        u, lam = u_new, lam_new
        # With projections a too-large step does not blow up, it stops making
        # progress: treat 100 iterations without a residual decrease as
        # divergence whenever the residual is still far from the target.
        if res < best_res * (1.0 - 1e-12):
            best_res = res
            stall = 0
        else:
            stall += 1
            if stall >= 100:
                if res > 10.0 * tol:
                    diverged = True
                break
        if res <= gate or it % check_every == 0:
            if _reduced_kkt(P, q, G, GT, lo, hi, lb, ub, u, lam) <= gate:
                sol = finalize(u, lam, it, STATUS_CONVERGED, hist, diverged)
                if sol.status == STATUS_CONVERGED:
                    return sol
                gate *= 0.25  # full-space residual still above tol; go deeper

    if diverged:
        warnings.warn(
            f"iterative solver diverging (residual grew for 100 consecutive "
            f"iterations, step size {step:.3e}); results unreliable",
            RuntimeWarning,
        )

    return finalize(u, lam, it, STATUS_MAX_ITER, hist, diverged)


def _reduced_kkt(P, q, G, GT, lo, hi, lb, ub, u, lam):
    grad = P @ u + q + GT @ lam
    stat = float(np.max(np.abs(u - np.clip(u - grad, lb, ub))))
    Gu = G @ u
    pviol = max(
        float(np.max(np.maximum(Gu - hi, 0.0), initial=0.0)),
        float(np.max(np.maximum(lo - Gu, 0.0), initial=0.0)),
    )
    lam_hi = np.maximum(lam, 0.0)
    lam_lo = np.maximum(-lam, 0.0)
    comp = max(
        float(np.max(np.abs(lam_hi * (hi - Gu)), initial=0.0)),
        float(np.max(np.abs(lam_lo * (Gu - lo)), initial=0.0)),
    )
    return max(stat, pviol, comp)


def _reduced_to_qpresult(P, q, G, GT, lo, hi, lb, ub, u, lam):
    """Package an iterative-solver point in the shape the reconstruction expects."""
    n = len(u)
    grad = P @ u + q + GT @ lam
    lam_lb = np.zeros(n)
    lam_ub = np.zeros(n)
    at_lb = np.abs(u - lb) <= 1e-9 * (1.0 + np.abs(lb))
    at_ub = np.abs(u - ub) <= 1e-9 * (1.0 + np.abs(ub))
    lam_lb[at_lb] = np.maximum(grad[at_lb], 0.0)
    lam_ub[at_ub] = np.maximum(-grad[at_ub], 0.0)
    return _QPResult(
        u=u, lam_lb=lam_lb, lam_ub=lam_ub,
        lam_lo=np.maximum(-lam, 0.0), lam_hi=np.maximum(lam, 0.0),
        status=STATUS_CONVERGED, iterations=0, max_violation=0.0,
    )


def nash_check(game: GameQP, sol: Solution, v: int, tol: float = 1e-8) -> float:
    """Cost decrease prosumer ``v`` could gain by unilaterally deviating.

    Freezes all other prosumers at the solution, solves ``v``'s private
    problem over the sliced feasible set and returns the improvement
    ``J_v(solution) - J_v(best response)``.  Values at or below ``tol``
    certify the equilibrium property for ``v``.
    """
    if sol.status != STATUS_CONVERGED:
        raise SolverError("nash_check requires a converged solution")
    lay, win = game.layout, game.window
    M, N = lay.M, lay.N
    if not 0 <= v < M:
        raise SolverError(f"prosumer index {v} out of range")

    # Other prosumers' realized loads enter as extra passive load.
    other = np.zeros(N)
    for k in range(N):
        for w in range(M):
            if w == v:
                continue
            other[k] += (
                sol.z[lay.input_index(w, k, "e")]
                + sol.z[lay.input_index(w, k, "s")]
                - win.g[k, w]
            )
    sliced = ScenarioWindow(
        e_ref=win.e_ref[:, [v]].copy(), g=win.g[:, [v]].copy(),
        rho1=win.rho1[:, [v]].copy(), rho2=win.rho2[:, [v]].copy(),
        gamma1=win.gamma1[:, [v]].copy(), gamma2=win.gamma2[:, [v]].copy(),
        L_passive=win.L_passive + other,
        L_min=win.L_min.copy(), L_max=win.L_max.copy(),
        zeta_min=win.zeta_min[:, [v]].copy(), zeta_max=win.zeta_max[:, [v]].copy(),
    )
    local = game_mod.assemble(game.x0[[v]], [game.params[v]], sliced)
    br = solve_vgne_direct(local, tol=min(tol, 1e-9))
    if br.status == STATUS_INFEASIBLE:
        raise SolverError(
            "sliced feasible set empty although the joint solution is feasible"
        )
    z_own = np.concatenate(
        [sol.z[lay.input_slice(v)], sol.z[lay.state_slice(v)]]
    )
    j_cur = prosumer_cost(local, z_own, 0)
    j_best = prosumer_cost(local, br.z, 0)
    return float(j_cur - j_best)


def solve_steady_state(
    params: Sequence[ProsumerParams],
    window_row: ScenarioWindow,
    tol: float = 1e-10,
) -> SteadyState:
    """Equilibrium of the steady-state game for one step's constant parameters.

    The shift dynamics force steady consumption to equal its reference, and
    steady charging must balance leakage (``beta s = (1 - alpha) q``), so the
    problem reduces to a small QP in the per-prosumer states.  Infeasibility
    (for instance aggregate limits below the forced load) is reported through
    the ``feasible`` flag, not an exception.
    """
    params = tuple(params)
    M = len(params)
    if window_row.N != 1 or window_row.M != M:
        raise SolverError("steady state needs a single-step window matching the fleet")
    if not window_row.symmetric_pricing:
        raise SolverError("steady-state game requires symmetric pricing")
    window_row.validate()

    e_ref = window_row.e_ref[0]
    g = window_row.g[0]
    rho1 = float(window_row.rho1[0, 0])
    rho2 = float(window_row.rho2[0, 0])
    gamma1 = window_row.gamma1[0]
    gamma2 = window_row.gamma2[0]
    Lp = float(window_row.L_passive[0])
    L_min, L_max = float(window_row.L_min[0]), float(window_row.L_max[0])

    infeasible = SteadyState(
        x_bar=np.full((M, 2), np.nan), u_bar=np.full((M, 2), np.nan), feasible=False
    )

    c = np.array([(1.0 - p.battery.alpha) / p.battery.beta for p in params])
    a = e_ref - g  # steady load when the battery is idle
    for v, p in enumerate(params):
        if not p.flex.e_min - 1e-12 <= e_ref[v] <= p.flex.e_max + 1e-12:
            return infeasible
        if c[v] == 0.0 and not -1e-12 <= a[v] <= p.flex.l_max + 1e-12:
            return infeasible

    # Variables (zeta_v, q_v); steady inputs are e = e_ref, s = c q.
    n = 2 * M
    zi = np.arange(0, n, 2)
    qi = np.arange(1, n, 2)
    P = np.zeros((n, n))
    q_lin = np.zeros(n)
    P[np.ix_(qi, qi)] = rho1 * (np.outer(c, c) + np.diag(c**2))
    P[zi, zi] += 2.0 * gamma1
    P[qi, qi] += 2.0 * gamma2
    A_tot = float(np.sum(a))
    q_lin[qi] = rho1 * (A_tot * c + a * c + Lp * c) + rho2 * c

    lb = np.empty(n)
    ub = np.empty(n)
    lb[zi] = window_row.zeta_min[0]
    ub[zi] = window_row.zeta_max[0]
    lb[qi] = 0.0
    ub[qi] = np.array([p.battery.q_max for p in params])
    for v, p in enumerate(params):
        if c[v] > 0.0:
            ub[qi[v]] = min(ub[qi[v]], p.battery.s_eff_max / (1.0 - p.battery.alpha))
            lb[qi[v]] = max(lb[qi[v]], p.battery.s_eff_min / (1.0 - p.battery.alpha))
            # per-prosumer load box 0 <= a + c q <= l_max
            lb[qi[v]] = max(lb[qi[v]], -a[v] / c[v])
            ub[qi[v]] = min(ub[qi[v]], (p.flex.l_max - a[v]) / c[v])

    rows = np.zeros((1, n))
    rows[0, qi] = c
    G = sp.csr_matrix(rows)
    lo = np.array([L_min - Lp - A_tot])
    hi = np.array([L_max - Lp - A_tot])

    qp = _solve_box_qp(P, q_lin, lb, ub, G, lo, hi, tol=tol)
    if qp.status == STATUS_INFEASIBLE:
        return infeasible
    if qp.status != STATUS_CONVERGED:
        return infeasible

    zeta = qp.u[zi]
    q_soc = qp.u[qi]
    x_bar = np.column_stack([zeta, q_soc])
    u_bar = np.column_stack([e_ref, c * q_soc])
    return SteadyState(
        x_bar=x_bar, u_bar=u_bar, feasible=True,
        coupling_duals=np.array([qp.lam_lo[0], qp.lam_hi[0]]),
    )

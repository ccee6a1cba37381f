"""Horizon-coupled prosumer game in explicit affine-quadratic form.

``assemble`` turns a fleet, an initial state and a parameter window into a
``GameQP``: a pseudo-gradient ``F(z) = H z + f`` stacked over prosumers,
dynamics equalities, and two-sided polyhedral rows (device boxes, per-step
load boxes and the aggregate coupling constraint).  Under symmetric pricing
the game is an exact potential game and ``potential_value`` evaluates the
scalar potential whose gradient coincides with ``F``.

The decision vector has ``4*M*N`` coordinates.  Per prosumer (in id order):
inputs ``(e_0, s_0, ..., e_{N-1}, s_{N-1})`` followed by states
``(zeta_1, q_1, ..., zeta_N, q_N)``.  The initial state is fixed data and is
not part of the vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .model import ProsumerParams, ProsumerState, check_unique_ids


class GameError(ValueError):
    """Raised for inconsistent game data or dimension mismatches."""


# Row kinds of the inequality block, in storage order.
ROW_E = 0         # consumption box,      one row per (prosumer, step)
ROW_S = 1         # charging box,         one row per (prosumer, step)
ROW_ZETA = 2      # shift-state box,      one row per (prosumer, step 1..N)
ROW_Q = 3         # state-of-charge box,  one row per (prosumer, step 1..N)
ROW_LOAD = 4      # per-prosumer grid-draw box, one row per (prosumer, step)
ROW_COUPLING = 5  # aggregate-load limits, one row per step

_VAR_E, _VAR_S, _VAR_ZETA, _VAR_Q = "e", "s", "zeta", "q"


@dataclass(frozen=True)
class Layout:
    """Index map between (prosumer, step, variable) and flat coordinates."""

    M: int  # number of active prosumers
    N: int  # horizon length in steps

    def __post_init__(self) -> None:
        if self.M < 1 or self.N < 1:
            raise GameError(f"layout needs M >= 1 and N >= 1, got ({self.M}, {self.N})")

    @property
    def size(self) -> int:
        return 4 * self.M * self.N

    @property
    def n_inputs(self) -> int:
        return 2 * self.M * self.N

    def base(self, v: int) -> int:
        return 4 * self.N * v

    def input_index(self, v: int, k: int, var: str) -> int:
        """Flat index of input ``var`` in {e, s} of prosumer ``v`` at step ``k``."""
        if not 0 <= v < self.M or not 0 <= k < self.N:
            raise GameError(f"input ({v}, {k}) outside layout ({self.M}, {self.N})")
        return self.base(v) + 2 * k + (0 if var == _VAR_E else 1)

    def state_index(self, v: int, k: int, var: str) -> int:
        """Flat index of state ``var`` in {zeta, q} of prosumer ``v`` at step ``k`` in 1..N."""
        if not 0 <= v < self.M or not 1 <= k <= self.N:
            raise GameError(f"state ({v}, {k}) outside layout ({self.M}, {self.N})")
        return self.base(v) + 2 * self.N + 2 * (k - 1) + (0 if var == _VAR_ZETA else 1)

    def index(self, v: int, k: int, var: str) -> int:
        if var in (_VAR_E, _VAR_S):
            return self.input_index(v, k, var)
        if var in (_VAR_ZETA, _VAR_Q):
            return self.state_index(v, k, var)
        raise GameError(f"unknown variable {var!r}")

    def coord(self, i: int) -> tuple[int, int, str]:
        """Inverse map: flat index -> (prosumer, step, variable)."""
        if not 0 <= i < self.size:
            raise GameError(f"flat index {i} outside layout of size {self.size}")
        v, r = divmod(i, 4 * self.N)
        if r < 2 * self.N:
            return v, r // 2, _VAR_E if r % 2 == 0 else _VAR_S
        r -= 2 * self.N
        return v, r // 2 + 1, _VAR_ZETA if r % 2 == 0 else _VAR_Q

    def input_slice(self, v: int) -> slice:
        return slice(self.base(v), self.base(v) + 2 * self.N)

    def state_slice(self, v: int) -> slice:
        return slice(self.base(v) + 2 * self.N, self.base(v) + 4 * self.N)

    def prosumer_slice(self, v: int) -> slice:
        return slice(self.base(v), self.base(v) + 4 * self.N)

    @property
    def input_indices(self) -> np.ndarray:
        """All input coordinates, prosumer-major."""
        return np.concatenate(
            [np.arange(self.base(v), self.base(v) + 2 * self.N) for v in range(self.M)]
        )

    @property
    def state_indices(self) -> np.ndarray:
        return np.concatenate(
            [
                np.arange(self.base(v) + 2 * self.N, self.base(v) + 4 * self.N)
                for v in range(self.M)
            ]
        )


def build_layout(M: int, N: int) -> Layout:
    """Create the flat index layout for ``M`` prosumers over ``N`` steps."""
    return Layout(M=M, N=N)


@dataclass(frozen=True)
class ScenarioWindow:
    """Exogenous parameters over one prediction window of ``N`` steps.

    Per-step-and-prosumer arrays have shape ``(N, M)``; per-step arrays have
    shape ``(N,)``.  ``zeta_min``/``zeta_max`` bound the shift state at steps
    1..N (row ``j`` holds the bound for step ``j + 1``).
    """

    e_ref: np.ndarray      # nominal consumption, kWh, (N, M)
    g: np.ndarray          # non-dispatchable generation, kWh, (N, M)
    rho1: np.ndarray       # demand-proportional price rate, $/kWh^2, (N, M)
    rho2: np.ndarray       # base price rate, $/kWh, (N, M)
    gamma1: np.ndarray     # shift-discomfort weight, (N, M)
    gamma2: np.ndarray     # battery-usage weight, (N, M)
    L_passive: np.ndarray  # passive load, kWh, (N,)
    L_min: np.ndarray      # lower aggregate limit, kWh, (N,)
    L_max: np.ndarray      # upper aggregate limit, kWh, (N,)
    zeta_min: np.ndarray   # shift lower bound at steps 1..N, kWh, (N, M)
    zeta_max: np.ndarray   # shift upper bound at steps 1..N, kWh, (N, M)

    @property
    def N(self) -> int:
        return self.e_ref.shape[0]

    @property
    def M(self) -> int:
        return self.e_ref.shape[1]

    def validate(self) -> None:
        N, M = self.N, self.M
        for name in ("e_ref", "g", "rho1", "rho2", "gamma1", "gamma2",
                     "zeta_min", "zeta_max"):
            arr = getattr(self, name)
            if arr.shape != (N, M):
                raise GameError(f"window field {name} has shape {arr.shape}, "
                                f"expected {(N, M)}")
        for name in ("L_passive", "L_min", "L_max"):
            arr = getattr(self, name)
            if arr.shape != (N,):
                raise GameError(f"window field {name} has shape {arr.shape}, "
                                f"expected {(N,)}")
        if not np.all(np.isfinite(self.e_ref)) or not np.all(np.isfinite(self.g)):
            raise GameError("window profiles must be finite")
        if np.any(self.L_min >= self.L_max):
            k = int(np.argmax(self.L_min >= self.L_max))
            raise GameError(
                f"aggregate limits need L_min < L_max, violated at step {k}: "
                f"[{self.L_min[k]}, {self.L_max[k]}]"
            )
        if np.any(self.zeta_min > self.zeta_max):
            raise GameError("shift bounds need zeta_min <= zeta_max")
        if np.any(self.rho1 <= 0.0):
            raise GameError("rho1 must be positive at every step")
        if np.any(self.rho2 < 0.0):
            raise GameError("rho2 must be nonnegative at every step")
        if np.any(self.gamma1 < 0.0) or np.any(self.gamma2 < 0.0):
            raise GameError("gamma weights must be nonnegative")

    @property
    def symmetric_pricing(self) -> bool:
        """True when every prosumer sees the same price rates at each step."""
        return bool(
            np.all(self.rho1 == self.rho1[:, :1])
            and np.all(self.rho2 == self.rho2[:, :1])
        )

    @classmethod
    def constant(
        cls,
        M: int,
        N: int,
        *,
        e_ref: float | np.ndarray = 1.0,
        g: float | np.ndarray = 0.0,
        rho1: float = 0.015,
        rho2: float = 0.05,
        gamma1: float = 0.1,
        gamma2: float = 0.1,
        L_passive: float = 0.0,
        L_min: float = -1e6,
        L_max: float = 1e6,
        zeta_min: float | np.ndarray = -1e6,
        zeta_max: float | np.ndarray = 1e6,
    ) -> "ScenarioWindow":
        """Window with time-constant parameters (broadcast over steps)."""
        def nm(x):
            return np.broadcast_to(np.asarray(x, dtype=float), (N, M)).copy()

        def n(x):
            return np.broadcast_to(np.asarray(x, dtype=float), (N,)).copy()

        win = cls(
            e_ref=nm(e_ref), g=nm(g), rho1=nm(rho1), rho2=nm(rho2),
            gamma1=nm(gamma1), gamma2=nm(gamma2),
            L_passive=n(L_passive), L_min=n(L_min), L_max=n(L_max),
            zeta_min=nm(zeta_min), zeta_max=nm(zeta_max),
        )
        win.validate()
        return win


@dataclass(frozen=True)
class GameQP:
    """Assembled generalized game with affine pseudo-gradient ``H z + f``."""

    layout: Layout
    params: tuple[ProsumerParams, ...]
    window: ScenarioWindow
    x0: np.ndarray                # initial states, (M, 2) columns (zeta, q)
    H: np.ndarray                 # pseudo-gradient coefficients, (n, n)
    f: np.ndarray                 # pseudo-gradient offset, (n,)
    c0: float                     # z-independent stage-cost terms
    Aeq: sp.csr_matrix            # dynamics equalities, (2MN, n)
    beq: np.ndarray
    G: sp.csr_matrix              # two-sided inequality rows, (n_rows, n)
    lo: np.ndarray
    hi: np.ndarray
    row_kind: np.ndarray          # ROW_* code per inequality row
    row_prosumer: np.ndarray      # owning prosumer per row, -1 for coupling
    row_step: np.ndarray          # input step (boxes/load) or state step (zeta/q)
    symmetric_pricing: bool

    @property
    def n(self) -> int:
        return self.layout.size

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]

    @property
    def coupling_rows(self) -> slice:
        """Slice of the aggregate-load rows (last N rows, in step order)."""
        return slice(self.n_rows - self.layout.N, self.n_rows)


def _normalize_x0(x0, M: int) -> np.ndarray:
    if isinstance(x0, np.ndarray):
        arr = np.asarray(x0, dtype=float)
        if arr.shape != (M, 2):
            raise GameError(f"x0 must have shape ({M}, 2), got {arr.shape}")
        return arr.copy()
    states = list(x0)
    if len(states) != M:
        raise GameError(f"x0 must hold {M} states, got {len(states)}")
    return np.array([[s.zeta, s.q] for s in states], dtype=float)


def assemble(
    x0,
    params: Sequence[ProsumerParams],
    window: ScenarioWindow,
) -> GameQP:
    """Build the horizon-coupled game from fleet, initial state and window.

    Raises :class:`GameError` on dimension mismatches, inconsistent limits,
    an initial state outside the battery box, or nonzero generation assigned
    to a prosumer without generation capability.
    """
    params = tuple(params)
    check_unique_ids(params)
    M, N = len(params), window.N
    if window.M != M:
        raise GameError(f"window is sized for {window.M} prosumers, fleet has {M}")
    window.validate()
    x0 = _normalize_x0(x0, M)

    for v, p in enumerate(params):
        if not p.has_generation and np.any(window.g[:, v] != 0.0):
            raise GameError(f"prosumer {p.id} has no generation but g != 0 in window")
        p.check_state(ProsumerState(zeta=float(x0[v, 0]), q=float(x0[v, 1])))

    lay = build_layout(M, N)
    n = lay.size
    H = np.zeros((n, n))
    f = np.zeros(n)

    # Energy-cost curvature: per step, own-load coordinates carry 2*rho1 and
    # cross-prosumer load coordinates carry rho1 (row block v uses v's rates).
    ones2 = np.ones((2, 2))
    for k in range(N):
        idx = np.array([lay.input_index(v, k, _VAR_E) for v in range(M)])
        cols = np.concatenate([[i, i + 1] for i in idx])
        G_k = float(np.sum(window.g[k]))
        for v in range(M):
            r1 = window.rho1[k, v]
            rows = [lay.input_index(v, k, _VAR_E), lay.input_index(v, k, _VAR_S)]
            block = np.full((2, 2 * M), r1)
            block[:, 2 * v : 2 * v + 2] = 2.0 * r1
            H[np.ix_(rows, cols)] = block
            f[rows] = (
                r1 * (window.L_passive[k] - G_k - window.g[k, v])
                + window.rho2[k, v]
            )

    # Comfort curvature on states for steps 1..N-1; terminal states carry no cost.
    for v in range(M):
        for k in range(1, N):
            H[lay.state_index(v, k, _VAR_ZETA), lay.state_index(v, k, _VAR_ZETA)] = (
                2.0 * window.gamma1[k, v]
            )
            H[lay.state_index(v, k, _VAR_Q), lay.state_index(v, k, _VAR_Q)] = (
                2.0 * window.gamma2[k, v]
            )

    symmetric = window.symmetric_pricing

    # z-independent stage costs: the fixed initial state and the load-space
    # remainder left over after rewriting the energy cost in (e, s) coordinates.
    c0 = float(
        np.sum(window.gamma1[0] * x0[:, 0] ** 2 + window.gamma2[0] * x0[:, 1] ** 2)
    )
    r1_step = window.rho1[:, 0]
    r2_step = window.rho2[:, 0]
    G_step = np.sum(window.g, axis=1)
    c0 += float(
        np.sum(
            0.5 * r1_step * (G_step**2 + np.sum(window.g**2, axis=1))
            - r1_step * window.L_passive * G_step
            - r2_step * G_step
        )
    )

    # Dynamics equalities, row order: per prosumer, per step, (zeta, q).
    rows_i, cols_i, vals = [], [], []
    beq = np.zeros(2 * M * N)
    r = 0
    for v, p in enumerate(params):
        al, be = p.battery.alpha, p.battery.beta
        for k in range(N):
            # zeta_{k+1} - zeta_k - e_k = -e_ref_k
            rows_i += [r, r]
            cols_i += [lay.state_index(v, k + 1, _VAR_ZETA), lay.input_index(v, k, _VAR_E)]
            vals += [1.0, -1.0]
            beq[r] = -window.e_ref[k, v]
            if k >= 1:
                rows_i.append(r)
                cols_i.append(lay.state_index(v, k, _VAR_ZETA))
                vals.append(-1.0)
            else:
                beq[r] += x0[v, 0]
            r += 1
            # q_{k+1} - alpha q_k - beta s_k = 0
            rows_i += [r, r]
            cols_i += [lay.state_index(v, k + 1, _VAR_Q), lay.input_index(v, k, _VAR_S)]
            vals += [1.0, -be]
            if k >= 1:
                rows_i.append(r)
                cols_i.append(lay.state_index(v, k, _VAR_Q))
                vals.append(-al)
            else:
                beq[r] = al * x0[v, 1]
            r += 1
    Aeq = sp.csr_matrix((vals, (rows_i, cols_i)), shape=(2 * M * N, n))

    # Inequality rows grouped by kind: e, s, zeta, q, load, coupling.
    g_rows, g_cols, g_vals = [], [], []
    lo_list, hi_list, kind, owner, step = [], [], [], [], []
    rr = 0

    def add_row(cols, coeffs, lo_v, hi_v, knd, v, k):
        nonlocal rr
        g_rows.extend([rr] * len(cols))
        g_cols.extend(cols)
        g_vals.extend(coeffs)
        lo_list.append(lo_v)
        hi_list.append(hi_v)
        kind.append(knd)
        owner.append(v)
        step.append(k)
        rr += 1

    for v, p in enumerate(params):
        for k in range(N):
            add_row([lay.input_index(v, k, _VAR_E)], [1.0],
                    p.flex.e_min, p.flex.e_max, ROW_E, v, k)
    for v, p in enumerate(params):
        for k in range(N):
            add_row([lay.input_index(v, k, _VAR_S)], [1.0],
                    p.battery.s_min, p.battery.s_max, ROW_S, v, k)
    for v, p in enumerate(params):
        for k in range(1, N + 1):
            add_row([lay.state_index(v, k, _VAR_ZETA)], [1.0],
                    window.zeta_min[k - 1, v], window.zeta_max[k - 1, v],
                    ROW_ZETA, v, k)
    for v, p in enumerate(params):
        for k in range(1, N + 1):
            add_row([lay.state_index(v, k, _VAR_Q)], [1.0],
                    0.0, p.battery.q_max, ROW_Q, v, k)
    for v, p in enumerate(params):
        for k in range(N):
            add_row(
                [lay.input_index(v, k, _VAR_E), lay.input_index(v, k, _VAR_S)],
                [1.0, 1.0],
                window.g[k, v], p.flex.l_max + window.g[k, v], ROW_LOAD, v, k,
            )
    for k in range(N):
        G_k = float(np.sum(window.g[k]))
        cols = []
        for v in range(M):
            cols += [lay.input_index(v, k, _VAR_E), lay.input_index(v, k, _VAR_S)]
        add_row(
            cols, [1.0] * len(cols),
            window.L_min[k] - window.L_passive[k] + G_k,
            window.L_max[k] - window.L_passive[k] + G_k,
            ROW_COUPLING, -1, k,
        )

    G = sp.csr_matrix((g_vals, (g_rows, g_cols)), shape=(rr, n))

    return GameQP(
        layout=lay, params=params, window=window, x0=x0,
        H=H, f=f, c0=c0, Aeq=Aeq, beq=beq,
        G=G, lo=np.array(lo_list), hi=np.array(hi_list),
        row_kind=np.array(kind, dtype=np.int8),
        row_prosumer=np.array(owner, dtype=np.int32),
        row_step=np.array(step, dtype=np.int32),
        symmetric_pricing=symmetric,
    )


def pseudo_gradient(game: GameQP, z: np.ndarray) -> np.ndarray:
    """Stacked per-prosumer gradients of their own cost, ``H z + f``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (game.n,):
        raise GameError(f"z has shape {z.shape}, expected ({game.n},)")
    return game.H @ z + game.f


def potential_value(game: GameQP, z: np.ndarray) -> float:
    """Exact potential of the game; its gradient coincides with the pseudo-gradient.

    Only defined under symmetric pricing.
    """
    if not game.symmetric_pricing:
        raise GameError("no exact potential: pricing is not symmetric across prosumers")
    z = np.asarray(z, dtype=float)
    if z.shape != (game.n,):
        raise GameError(f"z has shape {z.shape}, expected ({game.n},)")
    return float(0.5 * z @ game.H @ z + game.f @ z + game.c0)


def prosumer_cost(game: GameQP, z: np.ndarray, v: int) -> float:
    """Cost of prosumer ``v`` over the window at joint decision ``z``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (game.n,):
        raise GameError(f"z has shape {z.shape}, expected ({game.n},)")
    lay, win = game.layout, game.window
    total = 0.0
    for k in range(win.N):
        loads = np.array(
            [
                z[lay.input_index(w, k, _VAR_E)]
                + z[lay.input_index(w, k, _VAR_S)]
                - win.g[k, w]
                for w in range(lay.M)
            ]
        )
        L = float(np.sum(loads) + win.L_passive[k])
        sigma = win.rho1[k, v] * L + win.rho2[k, v]
        if k == 0:
            zeta, q = game.x0[v]
        else:
            zeta = z[lay.state_index(v, k, _VAR_ZETA)]
            q = z[lay.state_index(v, k, _VAR_Q)]
        total += sigma * loads[v] + win.gamma1[k, v] * zeta**2 + win.gamma2[k, v] * q**2
    return float(total)


# ---------------------------------------------------------------------------
# Condensed form: states eliminated through the dynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CondensedGame:
    """Game reduced to the input coordinates via ``x^v = T^v u^v + t0^v``.

    The reduced pseudo-gradient is ``P u + q_lin``; box bounds on inputs are
    kept explicit, all other rows become general rows ``lo <= G_r u <= hi``
    ordered exactly like the corresponding rows of :class:`GameQP` (zeta, q,
    load, coupling), so duals transfer one-to-one.
    """

    game: GameQP
    T: tuple[np.ndarray, ...]   # per-prosumer state maps, each (2N, 2N)
    t0: tuple[np.ndarray, ...]  # per-prosumer state offsets, each (2N,)
    P: np.ndarray               # reduced pseudo-gradient coefficients, (2MN, 2MN)
    q_lin: np.ndarray
    c_const: float
    lb: np.ndarray              # input lower bounds (e and s boxes)
    ub: np.ndarray
    G_r: sp.csr_matrix          # reduced general rows
    lo_r: np.ndarray
    hi_r: np.ndarray
    row_offset: int             # full-row index of the first general row

    @property
    def n_u(self) -> int:
        return self.game.layout.n_inputs

    def expand(self, u: np.ndarray) -> np.ndarray:
        """Lift inputs to the full decision vector by rolling out the dynamics."""
        lay = self.game.layout
        z = np.zeros(lay.size)
        for v in range(lay.M):
            uv = u[2 * lay.N * v : 2 * lay.N * (v + 1)]
            z[lay.input_slice(v)] = uv
            z[lay.state_slice(v)] = self.T[v] @ uv + self.t0[v]
        return z


def condense(game: GameQP) -> CondensedGame:
    """Eliminate states through the dynamics equalities."""
    lay, win = game.layout, game.window
    M, N = lay.M, lay.N

    T_list, t0_list = [], []
    for v, p in enumerate(params_of(game)):
        al, be = p.battery.alpha, p.battery.beta
        T = np.zeros((2 * N, 2 * N))
        t0 = np.zeros(2 * N)
        eref = win.e_ref[:, v]
        for k in range(1, N + 1):
            zrow, qrow = 2 * (k - 1), 2 * (k - 1) + 1
            for j in range(k):
                T[zrow, 2 * j] = 1.0                     # zeta_k from e_j
                T[qrow, 2 * j + 1] = al ** (k - 1 - j) * be  # q_k from s_j
            t0[zrow] = game.x0[v, 0] - float(np.sum(eref[:k]))
            t0[qrow] = al**k * game.x0[v, 1]
        T_list.append(T)
        t0_list.append(t0)

    u_idx = lay.input_indices
    P = game.H[np.ix_(u_idx, u_idx)].copy()
    q_lin = game.f[u_idx].copy()
    c_const = game.c0
    for v in range(M):
        xs = lay.state_slice(v)
        Hxx = game.H[xs, xs]
        fx = game.f[xs]
        T, t0 = T_list[v], t0_list[v]
        blk = slice(2 * N * v, 2 * N * (v + 1))
        P[blk, blk] += T.T @ Hxx @ T
        q_lin[blk] += T.T @ (Hxx @ t0 + fx)
        c_const += float(0.5 * t0 @ Hxx @ t0 + fx @ t0)

    # General rows: zeta/q state boxes (rows of T), load and coupling rows.
    n_u = 2 * M * N
    rows_i, cols_i, vals = [], [], []
    lo_r, hi_r = [], []
    rr = 0

    def add(cols, coeffs, lo_v, hi_v):
        nonlocal rr
        rows_i.extend([rr] * len(cols))
        cols_i.extend(cols)
        vals.extend(coeffs)
        lo_r.append(lo_v)
        hi_r.append(hi_v)
        rr += 1

    for v in range(M):
        T, t0 = T_list[v], t0_list[v]
        base = 2 * N * v
        for k in range(1, N + 1):
            row = T[2 * (k - 1)]
            nz = np.nonzero(row)[0]
            add(list(base + nz), list(row[nz]),
                win.zeta_min[k - 1, v] - t0[2 * (k - 1)],
                win.zeta_max[k - 1, v] - t0[2 * (k - 1)])
    for v, p in enumerate(params_of(game)):
        T, t0 = T_list[v], t0_list[v]
        base = 2 * N * v
        for k in range(1, N + 1):
            row = T[2 * (k - 1) + 1]
            nz = np.nonzero(row)[0]
            add(list(base + nz), list(row[nz]),
                0.0 - t0[2 * (k - 1) + 1],
                p.battery.q_max - t0[2 * (k - 1) + 1])
    for v, p in enumerate(params_of(game)):
        base = 2 * N * v
        for k in range(N):
            add([base + 2 * k, base + 2 * k + 1], [1.0, 1.0],
                win.g[k, v], p.flex.l_max + win.g[k, v])
    for k in range(N):
        G_k = float(np.sum(win.g[k]))
        cols = []
        for v in range(M):
            cols += [2 * N * v + 2 * k, 2 * N * v + 2 * k + 1]
        add(cols, [1.0] * len(cols),
            win.L_min[k] - win.L_passive[k] + G_k,
            win.L_max[k] - win.L_passive[k] + G_k)

    G_r = sp.csr_matrix((vals, (rows_i, cols_i)), shape=(rr, n_u))

    lb = np.empty(n_u)
    ub = np.empty(n_u)
    for v, p in enumerate(params_of(game)):
        blk = slice(2 * N * v, 2 * N * (v + 1))
        lb[blk] = np.tile([p.flex.e_min, p.battery.s_min], N)
        ub[blk] = np.tile([p.flex.e_max, p.battery.s_max], N)

    return CondensedGame(
        game=game, T=tuple(T_list), t0=tuple(t0_list),
        P=P, q_lin=q_lin, c_const=c_const,
        lb=lb, ub=ub, G_r=G_r,
        lo_r=np.array(lo_r), hi_r=np.array(hi_r),
        row_offset=2 * M * N,
    )


def params_of(game: GameQP) -> tuple[ProsumerParams, ...]:
    return game.params


def monotonicity_modulus(game: GameQP) -> float:
    """Smallest curvature of the pseudo-gradient along dynamics-consistent directions.

    Returns the minimum eigenvalue of the symmetric part of the reduced
    (state-condensed) coefficient matrix; a positive value certifies strong
    monotonicity on the feasible subspace.
    """
    red = condense(game)
    sym = 0.5 * (red.P + red.P.T)
    return float(np.linalg.eigvalsh(sym)[0])


def gradient_audit(
    game: GameQP,
    samples: int = 20,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Finite-difference audit of the assembled game data.

    Compares, at random points, (a) each prosumer's block of the pseudo-gradient
    against central differences of its cost and (b) the potential's gradient
    against the pseudo-gradient.  Returns the two maximum relative errors.
    Central differences are exact for quadratics, so both checks are limited
    only by roundoff.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    lay = game.layout
    n = lay.size
    err_cost = 0.0
    err_pot = 0.0
    scale = 1.0 + float(np.max(np.abs(game.f)))
    for _ in range(samples):
        z = rng.uniform(-2.0, 2.0, size=n)
        F = pseudo_gradient(game, z)
        for v in range(lay.M):
            sl = lay.prosumer_slice(v)
            for i in range(sl.start, sl.stop):
                h = 0.5
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd = (prosumer_cost(game, zp, v) - prosumer_cost(game, zm, v)) / (2 * h)
                denom = max(1.0, abs(fd), scale)
                err_cost = max(err_cost, abs(F[i] - fd) / denom)
        if game.symmetric_pricing:
            for i in range(n):
                h = 1.0
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd = (potential_value(game, zp) - potential_value(game, zm)) / (2 * h)
                denom = max(1.0, abs(fd), scale)
                err_pot = max(err_pot, abs(F[i] - fd) / denom)
    return err_cost, err_pot

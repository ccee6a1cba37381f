"""Physical and economic prosumer model.

A prosumer consumes ``e``, charges its battery with ``s`` and possibly
generates ``g`` kWh per one-hour step.  Two states are tracked: the energy
shift ``zeta`` (integrated deviation of consumption from its nominal
reference) and the battery state of charge ``q``.  Electricity is priced
as an affine function of the aggregate grid load.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


class ModelError(ValueError):
    """Raised when parameters violate their physical ranges."""


@dataclass(frozen=True)
class BatteryParams:
    alpha: float      # per-step leakage factor, (0, 1]
    beta: float       # charging efficiency, (0, 1]
    q_max: float      # storage capacity, kWh
    s_eff_min: float  # lower bound on effective charge beta*s per step, kWh (<= 0)
    s_eff_max: float  # upper bound on effective charge beta*s per step, kWh (>= 0)

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ModelError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ModelError(f"beta must be in (0, 1], got {self.beta}")
        if not self.q_max > 0.0:
            raise ModelError(f"q_max must be positive, got {self.q_max}")
        if not (self.s_eff_min <= 0.0 <= self.s_eff_max):
            raise ModelError(
                f"charging bounds must straddle zero, got "
                f"[{self.s_eff_min}, {self.s_eff_max}]"
            )

    @property
    def s_min(self) -> float:
        """Lower bound on the raw charging input s, kWh."""
        return self.s_eff_min / self.beta

    @property
    def s_max(self) -> float:
        """Upper bound on the raw charging input s, kWh."""
        return self.s_eff_max / self.beta


@dataclass(frozen=True)
class FlexParams:
    e_min: float   # minimum consumption per step, kWh
    e_max: float   # maximum consumption per step, kWh
    l_max: float   # maximum grid draw per step, kWh
    gamma1: float  # shift-discomfort weight, $/kWh^2 per step
    gamma2: float  # battery-usage weight, $/kWh^2 per step

    def __post_init__(self) -> None:
        if not 0.0 <= self.e_min < self.e_max:
            raise ModelError(
                f"consumption bounds need 0 <= e_min < e_max, got "
                f"[{self.e_min}, {self.e_max}]"
            )
        if not self.l_max > 0.0:
            raise ModelError(f"l_max must be positive, got {self.l_max}")
        if self.gamma1 < 0.0 or self.gamma2 < 0.0:
            raise ModelError("comfort weights gamma1, gamma2 must be nonnegative")


@dataclass(frozen=True)
class PriceRates:
    rho1: float  # demand-proportional rate, $/kWh^2
    rho2: float  # base rate, $/kWh

    def __post_init__(self) -> None:
        if not self.rho1 > 0.0:
            raise ModelError(f"rho1 must be positive, got {self.rho1}")
        if self.rho2 < 0.0:
            raise ModelError(f"rho2 must be nonnegative, got {self.rho2}")


@dataclass(frozen=True)
class ProsumerState:
    zeta: float  # energy-shift state, kWh (signed)
    q: float     # battery state of charge, kWh


@dataclass(frozen=True)
class ProsumerParams:
    id: str
    battery: BatteryParams
    flex: FlexParams
    has_generation: bool = False

    def check_state(self, state: ProsumerState, tol: float = 1e-9) -> None:
        """Check that a state respects the battery capacity box."""
        if not -tol <= state.q <= self.battery.q_max + tol:
            raise ModelError(
                f"prosumer {self.id}: state of charge {state.q} outside "
                f"[0, {self.battery.q_max}]"
            )


def check_unique_ids(params: Sequence[ProsumerParams]) -> None:
    ids = [p.id for p in params]
    if len(set(ids)) != len(ids):
        raise ModelError(f"prosumer ids must be unique, got {ids}")


def local_load(e: float, s: float, g: float) -> float:
    """Grid load of one prosumer: consumption plus charging minus generation."""
    return e + s - g


def aggregate_load(active_loads: Iterable[float], passive_load: float) -> float:
    """Total grid load: active prosumer loads plus the passive contribution."""
    return sum(active_loads) + passive_load


def step_state(
    state: ProsumerState,
    e: float,
    s: float,
    e_ref: float,
    params: ProsumerParams,
) -> ProsumerState:
    """Advance the two-dimensional prosumer state by one step.

    The shift state integrates the deviation from the reference consumption,
    the state of charge leaks by ``alpha`` and absorbs ``beta * s``.
    """
    bat = params.battery
    return ProsumerState(
        zeta=state.zeta + (e - e_ref),
        q=bat.alpha * state.q + bat.beta * s,
    )


def price(L: float, rates: PriceRates) -> float:
    """Electricity price at aggregate load ``L``, $/kWh."""
    return rates.rho1 * L + rates.rho2


def stage_cost(
    state: ProsumerState,
    load: float,
    L: float,
    rates: PriceRates,
    flex: FlexParams,
) -> float:
    """Per-step cost of one prosumer: energy bill plus comfort penalties."""
    return (
        price(L, rates) * load
        + flex.gamma1 * state.zeta**2
        + flex.gamma2 * state.q**2
    )

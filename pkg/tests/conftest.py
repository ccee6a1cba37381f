"""Shared factories for randomized game instances.

Instances are feasible by construction: a random input trajectory within the
device boxes is rolled through the dynamics first, and all state, load and
aggregate bounds are then placed around that witness with random slack.  The
coupling limits can therefore sit close enough to bind without ever making
the game empty.
"""

import numpy as np
import pytest

from rhgsim.game import ScenarioWindow, assemble
from rhgsim.model import BatteryParams, FlexParams, ProsumerParams


def random_fleet(rng, M):
    fleet = []
    for v in range(M):
        alpha = rng.uniform(0.9, 1.0)
        beta = rng.uniform(0.8, 1.0)
        q_max = rng.uniform(4.0, 15.0)
        s_eff = rng.uniform(0.2, 0.7) * q_max
        e_min = rng.uniform(0.0, 0.4)
        e_max = e_min + rng.uniform(0.6, 2.5)
        fleet.append(ProsumerParams(
            id=f"p{v:02d}",
            battery=BatteryParams(alpha=alpha, beta=beta, q_max=q_max,
                                  s_eff_min=-s_eff, s_eff_max=s_eff),
            flex=FlexParams(e_min=e_min, e_max=e_max,
                            l_max=e_max + s_eff / beta + rng.uniform(0.5, 2.0),
                            gamma1=rng.uniform(0.02, 0.3),
                            gamma2=rng.uniform(0.02, 0.3)),
            has_generation=bool(rng.random() < 0.4),
        ))
    return fleet


def random_instance(seed, M=None, N=None, tight_coupling=None):
    """Feasible random game instance; returns (params, window, x0, game)."""
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 6)) if M is None else M
    N = int(rng.integers(1, 9)) if N is None else N
    if tight_coupling is None:
        tight_coupling = bool(rng.random() < 0.5)
    fleet = random_fleet(rng, M)

    e_ref = np.zeros((N, M))
    g = np.zeros((N, M))
    for v, p in enumerate(fleet):
        lo, hi = p.flex.e_min, p.flex.e_max
        e_ref[:, v] = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), N)
        if p.has_generation:
            g[:, v] = rng.uniform(0.0, 0.6, N)

    x0 = np.zeros((M, 2))
    for v, p in enumerate(fleet):
        x0[v] = (rng.uniform(-1.0, 1.0), rng.uniform(0.0, 0.6 * p.battery.q_max))

    # Witness trajectory: random feasible inputs rolled through the dynamics.
    e_w = np.zeros((N, M))
    s_w = np.zeros((N, M))
    zeta_w = np.zeros((N + 1, M))
    q_w = np.zeros((N + 1, M))
    zeta_w[0], q_w[0] = x0[:, 0], x0[:, 1]
    for k in range(N):
        for v, p in enumerate(fleet):
            bat = p.battery
            e_w[k, v] = rng.uniform(p.flex.e_min, p.flex.e_max)
            s_lo = max(bat.s_min, -bat.alpha * q_w[k, v] / bat.beta,
                       g[k, v] - e_w[k, v])
            s_hi = min(bat.s_max,
                       (bat.q_max - bat.alpha * q_w[k, v]) / bat.beta,
                       g[k, v] - e_w[k, v] + p.flex.l_max)
            s_w[k, v] = rng.uniform(s_lo, s_hi)
            zeta_w[k + 1, v] = zeta_w[k, v] + e_w[k, v] - e_ref[k, v]
            q_w[k + 1, v] = bat.alpha * q_w[k, v] + bat.beta * s_w[k, v]

    zeta_slack = rng.uniform(0.2, 2.0)
    zeta_min = np.minimum.reduce([zeta_w[1:], np.zeros((N, M))]) - zeta_slack
    zeta_max = np.maximum.reduce([zeta_w[1:], np.zeros((N, M))]) + zeta_slack

    Lp = rng.uniform(0.0, 4.0, N)
    L_w = np.sum(e_w + s_w - g, axis=1) + Lp
    margin = rng.uniform(0.05, 0.6) if tight_coupling else rng.uniform(3.0, 10.0)
    L_max = L_w + margin
    L_min = L_w - margin - rng.uniform(0.0, 2.0, N)

    rho1 = rng.uniform(0.01, 0.08) * rng.uniform(0.8, 1.25, N)
    rho2 = rng.uniform(0.0, 0.1) * np.ones(N)
    window = ScenarioWindow(
        e_ref=e_ref, g=g,
        rho1=np.repeat(rho1[:, None], M, axis=1),
        rho2=np.repeat(rho2[:, None], M, axis=1),
        gamma1=np.repeat(rng.uniform(0.02, 0.3, (N, 1)), M, axis=1)
        * rng.uniform(0.8, 1.2, (N, M)),
        gamma2=np.repeat(rng.uniform(0.02, 0.3, (N, 1)), M, axis=1)
        * rng.uniform(0.8, 1.2, (N, M)),
        L_passive=Lp, L_min=L_min, L_max=L_max,
        zeta_min=zeta_min, zeta_max=zeta_max,
    )
    window.validate()
    game = assemble(x0, fleet, window)
    return fleet, window, x0, game


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

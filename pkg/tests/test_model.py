import numpy as np
import pytest

from rhgsim.model import (
    BatteryParams,
    FlexParams,
    ModelError,
    PriceRates,
    ProsumerParams,
    ProsumerState,
    aggregate_load,
    check_unique_ids,
    local_load,
    price,
    stage_cost,
    step_state,
)


def make_prosumer(alpha=1.0, beta=1.0, q_max=10.0, s_eff=5.0,
                  e_min=0.0, e_max=2.0, l_max=10.0, gamma1=0.1, gamma2=0.1,
                  pid="a"):
    return ProsumerParams(
        id=pid,
        battery=BatteryParams(alpha=alpha, beta=beta, q_max=q_max,
                              s_eff_min=-s_eff, s_eff_max=s_eff),
        flex=FlexParams(e_min=e_min, e_max=e_max, l_max=l_max,
                        gamma1=gamma1, gamma2=gamma2),
    )


def test_local_load_examples():
    assert local_load(2.0, 1.0, 0.5) == pytest.approx(2.5)
    assert local_load(0.0, 0.0, 0.0) == 0.0
    assert local_load(1.0, -1.0, 0.0) == 0.0


def test_local_load_linearity(rng):
    for _ in range(50):
        a, b = rng.standard_normal(2)
        x = rng.standard_normal(3)
        y = rng.standard_normal(3)
        lhs = local_load(*(a * x + b * y))
        assert lhs == pytest.approx(a * local_load(*x) + b * local_load(*y))


def test_aggregate_load_examples():
    assert aggregate_load([1, 2, 3], 4) == 10
    assert aggregate_load([], 5) == 5
    assert aggregate_load([0.5, -0.5], 0) == 0


def test_aggregate_load_permutation(rng):
    loads = list(rng.standard_normal(6))
    base = aggregate_load(loads, 1.5)
    perm = list(rng.permutation(loads))
    assert aggregate_load(perm, 1.5) == pytest.approx(base)


def test_step_state_leaky_charge():
    alpha = 0.9 ** (1.0 / 24.0)
    p = make_prosumer(alpha=alpha, beta=0.9)
    out = step_state(ProsumerState(zeta=0.0, q=10.0), e=1.0, s=2.0, e_ref=1.0,
                     params=p)
    assert out.zeta == pytest.approx(0.0)
    assert out.q == pytest.approx(alpha * 10.0 + 0.9 * 2.0)


def test_step_state_fixed_point():
    p = make_prosumer()
    out = step_state(ProsumerState(0.0, 0.0), e=1.3, s=0.0, e_ref=1.3, params=p)
    assert out == ProsumerState(0.0, 0.0)


def test_step_state_pure_shift():
    p = make_prosumer(alpha=1.0)
    out = step_state(ProsumerState(1.0, 5.0), e=0.0, s=0.0, e_ref=2.0, params=p)
    assert out.zeta == pytest.approx(-1.0)
    assert out.q == pytest.approx(5.0)


def test_step_state_affine(rng):
    p = make_prosumer(alpha=0.93, beta=0.85)
    for _ in range(25):
        a = rng.uniform(0.0, 1.0)
        x1 = ProsumerState(*rng.uniform(-2, 2, 2))
        x2 = ProsumerState(*rng.uniform(-2, 2, 2))
        u1 = rng.uniform(-1, 2, 2)
        u2 = rng.uniform(-1, 2, 2)
        e_ref = rng.uniform(0, 2)
        mix_in = step_state(
            ProsumerState(a * x1.zeta + (1 - a) * x2.zeta,
                          a * x1.q + (1 - a) * x2.q),
            a * u1[0] + (1 - a) * u2[0], a * u1[1] + (1 - a) * u2[1],
            e_ref, p,
        )
        o1 = step_state(x1, u1[0], u1[1], e_ref, p)
        o2 = step_state(x2, u2[0], u2[1], e_ref, p)
        assert mix_in.zeta == pytest.approx(a * o1.zeta + (1 - a) * o2.zeta)
        assert mix_in.q == pytest.approx(a * o1.q + (1 - a) * o2.q)


def test_leakage_decay():
    p = make_prosumer(alpha=0.8)
    st = ProsumerState(0.0, 7.0)
    last = st.q
    for t in range(40):
        st = step_state(st, e=1.0, s=0.0, e_ref=1.0, params=p)
        assert st.q < last
        last = st.q
    assert st.q == pytest.approx(0.8**40 * 7.0)


def test_price_examples():
    assert price(10.0, PriceRates(0.015, 0.05)) == pytest.approx(0.20)
    assert price(0.0, PriceRates(0.015, 0.05)) == pytest.approx(0.05)
    # peak hours double both rates
    assert price(10.0, PriceRates(0.03, 0.10)) == pytest.approx(0.40)


def test_stage_cost_examples():
    flex = FlexParams(0.0, 2.0, 10.0, gamma1=0.1, gamma2=0.1)
    rates = PriceRates(0.015, 0.05)
    assert stage_cost(ProsumerState(0, 0), 0.0, 5.0, rates, flex) == 0.0
    val = stage_cost(ProsumerState(1.0, 2.0), 1.0, 1.0, rates, flex)
    assert val == pytest.approx(0.065 + 0.1 + 0.4)
    exporting = stage_cost(ProsumerState(1.0, 2.0), -1.0, 0.0, rates, flex)
    assert exporting == pytest.approx(-0.05 + 0.1 + 0.4)


def test_stage_cost_dominates_energy_term(rng):
    flex = FlexParams(0.0, 2.0, 10.0, gamma1=0.2, gamma2=0.05)
    rates = PriceRates(0.02, 0.01)
    for _ in range(50):
        st = ProsumerState(*rng.uniform(-3, 3, 2))
        load, L = rng.uniform(-2, 4, 2)
        assert stage_cost(st, load, L, rates, flex) >= price(L, rates) * load


@pytest.mark.parametrize("field,value", [
    ("alpha", 0.0), ("alpha", 1.2), ("beta", 0.0), ("beta", 1.1),
    ("q_max", 0.0), ("q_max", -1.0),
])
def test_battery_validation(field, value):
    kwargs = dict(alpha=0.95, beta=0.9, q_max=10.0, s_eff_min=-5.0, s_eff_max=5.0)
    kwargs[field] = value
    with pytest.raises(ModelError):
        BatteryParams(**kwargs)


def test_battery_charge_bounds_must_straddle_zero():
    with pytest.raises(ModelError):
        BatteryParams(alpha=0.9, beta=0.9, q_max=5.0, s_eff_min=0.5, s_eff_max=1.0)
    b = BatteryParams(alpha=0.9, beta=0.8, q_max=5.0, s_eff_min=-2.0, s_eff_max=2.0)
    assert b.s_min == pytest.approx(-2.5)
    assert b.s_max == pytest.approx(2.5)


def test_flex_validation():
    with pytest.raises(ModelError):
        FlexParams(e_min=1.0, e_max=1.0, l_max=5.0, gamma1=0.1, gamma2=0.1)
    with pytest.raises(ModelError):
        FlexParams(e_min=-0.1, e_max=1.0, l_max=5.0, gamma1=0.1, gamma2=0.1)
    with pytest.raises(ModelError):
        FlexParams(e_min=0.0, e_max=1.0, l_max=0.0, gamma1=0.1, gamma2=0.1)
    with pytest.raises(ModelError):
        FlexParams(e_min=0.0, e_max=1.0, l_max=5.0, gamma1=-0.1, gamma2=0.1)


def test_price_rates_validation():
    with pytest.raises(ModelError):
        PriceRates(rho1=0.0, rho2=0.05)
    with pytest.raises(ModelError):
        PriceRates(rho1=0.01, rho2=-0.01)


def test_unique_ids_and_state_box():
    p = make_prosumer()
    with pytest.raises(ModelError):
        check_unique_ids([p, make_prosumer(pid="a")])
    p.check_state(ProsumerState(0.0, 10.0))
    with pytest.raises(ModelError):
        p.check_state(ProsumerState(0.0, 10.5))

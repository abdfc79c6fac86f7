import numpy as np
import pytest
from hypothesis import given, strategies as st

from osmhedge.contracts import (PAYOFF_KINDS, ContractSpec, PortfolioSpec, driver,
                                exercise_indicator, payoff, payoff_gradient, reflect_y,
                                reflect_y_single, reflect_z, reflect_z_single, terminal_z)
from osmhedge.errors import ConfigError
from osmhedge.market_models import ModelSpec, TimeGrid


def test_geometric_call_examples():
    c = ContractSpec("geometric_call", 100.0)
    assert payoff(c, np.array([100.0, 100.0])) == 0.0
    assert payoff(c, np.array([100.0, 121.0])) == pytest.approx(10.0, abs=1e-12)


def test_cash_or_nothing_example():
    c = ContractSpec("cash_or_nothing")
    x = np.full(5, 100.0)
    assert payoff(c, x) == 1.0
    x[2] = 200.0
    assert payoff(c, x) == 0.0
    assert np.all(payoff_gradient(c, x) == 0.0)


def test_vanilla_gradient_and_kink():
    c = ContractSpec("vanilla_call", 100.0)
    assert payoff_gradient(c, np.array([120.0]))[0] == 1.0
    assert payoff_gradient(c, np.array([100.0]))[0] == 0.0


def test_geometric_gradient_by_hand():
    c = ContractSpec("geometric_call", 100.0)
    x = np.array([100.0, 121.0])
    g = np.sqrt(100.0 * 121.0)
    np.testing.assert_allclose(payoff_gradient(c, x), 0.5 * g / x, rtol=1e-14)


SMOOTH = [k for k in PAYOFF_KINDS if k != "cash_or_nothing"]


def _contract(kind):
    if kind == "exchange_call":
        return ContractSpec(kind, 0.9, assets=(0, 2))
    if kind.startswith("vanilla"):
        return ContractSpec(kind, 100.0, assets=(1,))
    if kind in ("call_on_max", "put_on_min"):
        return ContractSpec(kind, 100.0, assets=(1, 2, 3))
    return ContractSpec(kind, 100.0)


@pytest.mark.parametrize("kind", SMOOTH)
def test_payoff_gradient_finite_differences(kind):
    c = _contract(kind)
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        x = rng.uniform(60, 140, 4)
        grad = payoff_gradient(c, x)
        fd = np.zeros(4)
        for i in range(4):
            h = 1e-4 * x[i]
            e = np.zeros(4)
            e[i] = h
            lo, hi = payoff(c, x - e), payoff(c, x + e)
            fd[i] = (hi - lo) / (2 * h)
        # skip kink neighbourhoods: the one-sided slopes disagree there
        xs = np.sort(x)
        if abs(payoff(c, x)) < 1e-2 or (len(xs) > 1 and np.min(np.diff(xs)) < 1e-2):
            continue
        if np.all(payoff(c, x) == 0):
            continue
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)
        checked += 1


def test_contract_validation():
    with pytest.raises(ConfigError):
        ContractSpec("digital")
    with pytest.raises(ConfigError):
        ContractSpec("exchange_call", 1.0, assets=(0,))
    with pytest.raises(ConfigError):
        ContractSpec("vanilla_put", dates=(0.0, 0.5))
    c = ContractSpec("vanilla_put", 100.0, 1.0, exercise=4)
    np.testing.assert_allclose(c.exercise_dates, [0, 0.25, 0.5, 0.75, 1.0])
    assert c.is_reflection_time(0.5) and not c.is_reflection_time(1.0)
    assert not c.is_reflection_time(0.0)


def test_portfolio_grid_check(bs1):
    pf = PortfolioSpec((ContractSpec("vanilla_put", 100.0, 1.0, exercise=10),), bs1)
    pf.check_grid(TimeGrid(1.0, 20))
    with pytest.raises(ConfigError):
        pf.check_grid(TimeGrid(1.0, 15))


def test_driver_examples():
    bs = ModelSpec.black_scholes(0.01, 0.25, 0.03, [100.0], q=0.02)
    x = np.array([[100.0]])
    ev = driver(bs, 0, x, np.array([[2.0]]), np.array([[[3.0]]]))
    assert ev.value[0, 0] == pytest.approx(-0.06)
    assert np.max(np.abs(ev.dz)) < 1e-15
    h = ModelSpec.heston(0.1, 0.1, 5.0, 0.16, 0.1, 0.9, [10.0, 0.0625])
    ev = driver(h, 0, h.x0[None], np.array([[4.0]]), np.array([[[1.0, 2.0]]]))
    assert ev.value[0, 0] == -0.1 * 4.0
    bs = ModelSpec.black_scholes(0.1, 0.25, 0.0, [100.0])
    ev = driver(bs, 0, x, np.array([[0.0]]), np.array([[[1.0]]]))
    assert ev.value[0, 0] == pytest.approx(-0.4, abs=1e-15)


@given(st.floats(8, 12), st.floats(0.02, 0.3), st.floats(-5, 5), st.floats(-5, 5))
def test_driver_jacobians_finite_difference(s, nu, z1, z2):
    h = ModelSpec.heston(0.15, 0.05, 5.0, 0.16, 0.1, 0.9, [10.0, 0.0625])
    x = np.array([[s, nu]])
    y = np.array([[1.3]])
    z = np.array([[[z1, z2]]])
    ev = driver(h, 0, x, y, z)
    for b in range(2):
        e = np.zeros(2)
        e[b] = 1e-6 * x[0, b]
        fd = (driver(h, 0, x + e, y, z).value - driver(h, 0, x - e, y, z).value) / (2 * e[b])
        np.testing.assert_allclose(ev.dx[0, 0, b], fd[0, 0], rtol=1e-6, atol=1e-9)
    for b in range(2):
        e = np.zeros((1, 1, 2))
        e[0, 0, b] = 1e-4
        fd = (driver(h, 0, x, y, z + e).value - driver(h, 0, x, y, z - e).value) / 2e-4
        np.testing.assert_allclose(ev.dz[0, 0, b], fd[0, 0], rtol=1e-6, atol=1e-12)
    fd = (driver(h, 0, x, y + 1e-4, z).value - driver(h, 0, x, y - 1e-4, z).value) / 2e-4
    np.testing.assert_allclose(ev.dy, fd, rtol=1e-6)


def test_reflection_examples(bs1):
    c = ContractSpec("vanilla_put", 105.0, 1.0, exercise=4)
    x = np.array([100.0])
    assert reflect_y_single(c, 0.3, x, 3.0) == 3.0
    assert reflect_y_single(c, 0.5, x, 3.0) == 5.0
    assert reflect_y_single(c, 0.5, x, 7.0) == 7.0
    call = ContractSpec("vanilla_call", 100.0, 1.0, exercise=4)
    z = reflect_z_single(call, bs1, 0.5, np.array([120.0]), 1.0, np.array([0.0]))
    assert z[0] == pytest.approx(30.0)
    assert reflect_z_single(call, bs1, 0.3, np.array([120.0]), 1.0, np.array([0.7]))[0] == 0.7
    con = ContractSpec("cash_or_nothing", maturity=1.0, exercise=4)
    z = reflect_z_single(con, bs1, 0.5, np.array([100.0]), 0.2, np.array([5.0]))
    assert z[0] == 0.0


@given(st.lists(st.floats(50, 150), min_size=1, max_size=30), st.floats(-5, 30))
def test_reflection_floor_and_shared_trigger(xs, yt):
    m = ModelSpec.black_scholes(0.0, 0.2, 0.0, [100.0, 100.0])
    pf = PortfolioSpec((ContractSpec("vanilla_put", 110.0, 1.0, exercise=5),
                        ContractSpec("geometric_call", 95.0, 1.0, exercise=5)), m)
    x = np.stack([np.asarray(xs), np.asarray(xs)[::-1]], axis=-1)
    y_t = np.full((len(xs), 2), yt)
    z_t = np.ones((len(xs), 2, 2))
    t = 0.4
    y = reflect_y(pf, t, x, y_t)
    assert np.all(y >= pf.payoff(x))
    z = reflect_z(pf, t, x, y_t, z_t)
    hit = exercise_indicator(pf, t, x, y_t)
    assert np.array_equal(np.any(z != z_t, axis=-1) | hit, hit)
    assert np.array_equal(y != y_t, hit)
    np.testing.assert_array_equal(z[hit], terminal_z(pf, t, x)[hit])

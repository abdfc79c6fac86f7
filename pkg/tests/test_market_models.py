import numpy as np
import pytest
from hypothesis import given, strategies as st

from osmhedge.errors import ConfigError, NotPositiveDefinite, SingularDiffusion
from osmhedge.market_models import (ModelSpec, TimeGrid, cholesky_factor, malliavin_step,
                                    simulate_malliavin, simulate_paths)


def test_cholesky_identity():
    assert np.array_equal(cholesky_factor(np.eye(3)), np.eye(3))


def test_cholesky_two_by_two_by_hand():
    L = cholesky_factor([[1.0, 0.75], [0.75, 1.0]])
    np.testing.assert_allclose(L, [[1, 0], [0.75, np.sqrt(1 - 0.75 ** 2)]], atol=1e-15)


def test_cholesky_rejects_invalid_correlation():
    with pytest.raises(NotPositiveDefinite):
        cholesky_factor([[1.0, 1.5], [1.5, 1.0]])
    with pytest.raises(ConfigError):
        cholesky_factor([[1.0, 0.2], [0.3, 1.0]])


@given(st.integers(2, 8), st.floats(-0.1, 0.9))
def test_cholesky_reconstructs_equicorrelation(d, rho):
    c = np.full((d, d), rho)
    np.fill_diagonal(c, 1.0)
    L = cholesky_factor(c)
    assert np.max(np.abs(L @ L.T - c)) <= 1e-12
    assert np.allclose(L, np.tril(L))


def test_time_grid_nodes():
    g = TimeGrid(2.0, 100)
    assert g.dt == 0.02
    assert g.index_of(1.0) == 50
    assert not g.contains(0.011)
    np.testing.assert_array_equal(g.coarse_indices(5), [0, 20, 40, 60, 80, 100])
    with pytest.raises(ConfigError):
        g.coarse_indices(3)


def test_zero_coefficients_freeze_state():
    m = ModelSpec.black_scholes(0.0, 0.0, 0.0, [100.0, 50.0])
    p = simulate_paths(m, TimeGrid(1.0, 10), 7, seed=3)
    assert np.all(p.states == np.array([100.0, 50.0]))


def test_deterministic_euler_step():
    m = ModelSpec.black_scholes(0.1, 0.0, 0.0, [100.0])
    p = simulate_paths(m, TimeGrid(0.5, 1), 3, seed=0)
    assert np.all(p.states[:, 1, 0] == 105.0)


def test_heston_set_a_positive_volatility(heston_a):
    p = simulate_paths(heston_a, TimeGrid(0.25, 50), 10_000, seed=1)
    assert p.states[:, :, 1].min() >= 0.0
    assert p.states[:, :, 0].min() >= 0.0


def test_paths_deterministic_and_block_stable(bs3):
    g = TimeGrid(1.0, 5)
    a = simulate_paths(bs3, g, 5000, seed=11)
    b = simulate_paths(bs3, g, 5000, seed=11)
    c = simulate_paths(bs3, g, 10, seed=11)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.states[:10], c.states)
    assert np.all(a.states[:, 0] == bs3.x0)


def test_martingale_under_risk_neutral_drift():
    r = 0.03
    m = ModelSpec.black_scholes(r, 0.2, r, [100.0])
    g = TimeGrid(1.0, 10)
    p = simulate_paths(m, g, 100_000, seed=5)
    disc = np.exp(-r) * p.states[:, -1, 0]
    se = disc.std() / np.sqrt(disc.size)
    # Euler compounding (1 + r dt)^N differs from e^{rT} by a known factor
    expected = 100.0 * np.exp(-r) * (1 + r * g.dt) ** g.N
    assert abs(disc.mean() - expected) < 3 * se


def test_malliavin_examples(bs1):
    dxn, dxn1 = malliavin_step(bs1, 0.0, 0.01, np.array([[100.0]]), np.array([[0.1]]))
    assert dxn[0, 0, 0] == 25.0
    assert dxn1[0, 0, 0] == pytest.approx(25.625, abs=1e-12)


def test_malliavin_constant_coefficients():
    # zero drift and zero volatility gradient: sigma vanishes identically
    m = ModelSpec.black_scholes(0.0, 0.0, 0.0, [1.0])
    p = simulate_paths(m, TimeGrid(1.0, 4), 3, seed=0)
    me = simulate_malliavin(m, p)
    assert np.array_equal(me.d_xn, me.d_xn1)


def test_malliavin_matches_euler_jacobian(bs3):
    # D_n X_{n+1} is the Jacobian of the Euler map applied to D_n X_n = sigma
    g = TimeGrid(1.0, 4)
    p = simulate_paths(bs3, g, 6, seed=2)
    me = simulate_malliavin(bs3, p)
    n = 2
    xn, dw = p.states[:, n], p.increments[:, n]
    jac = np.eye(bs3.d) + g.dt * bs3.drift_jacobian(0, xn) + np.einsum(
        "pckb,pk->pcb", bs3.diffusion_jacobian(0, xn), dw)
    want = np.einsum("pcb,pbk->pck", jac, me.d_xn[:, n])
    np.testing.assert_allclose(me.d_xn1[:, n], want, rtol=1e-12)
    np.testing.assert_allclose(me.d_xn[:, n], bs3.diffusion(0, xn), rtol=0)


def test_sigma_inverse_examples(bs1, heston_a):
    assert bs1.apply_sigma_inverse(0, np.array([100.0]), np.array([[50.0]]))[0] == pytest.approx(2.0)
    x = heston_a.x0
    sig = heston_a.diffusion(0, x)
    v = np.array([[0.3, -1.2], [2.0, 0.5]])
    np.testing.assert_allclose(heston_a.apply_sigma_inverse(0, x, v), v @ np.linalg.inv(sig),
                               atol=1e-12)
    np.testing.assert_allclose(heston_a.apply_sigma_inverse(0, x, sig), np.eye(2), atol=1e-12)


def test_sigma_inverse_identity_rows(bs3):
    x = np.array([[95.0, 101.0, 120.0]])
    sig = bs3.diffusion(0, x)
    np.testing.assert_allclose(bs3.apply_sigma_inverse(0, x, sig), np.eye(3)[None], atol=1e-12)


def test_singular_diffusion(heston_a):
    x = np.array([[10.0, 0.0]])
    with pytest.raises(SingularDiffusion):
        heston_a.apply_sigma_inverse(0, x, np.ones((1, 1, 2)))
    out = heston_a.apply_sigma_inverse(0, x, np.ones((1, 1, 2)), strict=False)
    assert np.all(np.isnan(out))


def test_heston_feller_flag():
    with pytest.raises(ConfigError):
        ModelSpec.heston(0.1, 0.1, 1.0, 0.04, 0.0, 0.9, [10.0, 0.04], strict_feller=True)


def test_heston_covariation(heston_a):
    # d<S, nu> = rho eta nu S dt
    x = np.array([12.0, 0.09])
    s = heston_a.diffusion(0, x)
    cov = s @ s.T
    assert cov[0, 1] == pytest.approx(0.1 * 0.9 * 0.09 * 12.0, rel=1e-14)
    assert cov[0, 0] == pytest.approx(0.09 * 144.0, rel=1e-14)


@given(st.floats(5, 20), st.floats(0.01, 0.5))
def test_diffusion_jacobian_finite_difference(s, nu):
    m = ModelSpec.heston(0.1, 0.1, 5.0, 0.16, 0.3, 0.9, [10.0, 0.0625])
    x = np.array([s, nu])
    jac = m.diffusion_jacobian(0, x)
    for b in range(2):
        h = 1e-6 * x[b]
        e = np.zeros(2)
        e[b] = h
        fd = (m.diffusion(0, x + e) - m.diffusion(0, x - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, b], fd, rtol=1e-6, atol=1e-9)


def test_model_round_trip(bs3, heston_a):
    for m in (bs3, heston_a):
        again = ModelSpec.from_dict(m.to_dict())
        assert again.to_dict() == m.to_dict()

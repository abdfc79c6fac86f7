import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import trapezoid

from osmhedge.errors import DegenerateSample, InsufficientSample, ZeroNormalizer
from osmhedge.risk import (PnLSample, kde, relative_pnl, report_row, risk_measures,
                           write_report_csv)

from oracles import risk_oracle_gap


def test_pnl_examples():
    assert np.all(relative_pnl(np.zeros(5), 1.0, 0.03, 2.0).values == 0)
    assert relative_pnl([1.0], 1.0, 0.0, 10.0).values[0] == pytest.approx(0.1)
    assert relative_pnl([1.0], 1.0, 0.04, 1.0).values[0] == pytest.approx(0.960789439, rel=1e-9)
    s = relative_pnl([1.0, np.nan, 2.0], [1.0, 1.0, 0.5], 0.0, 1.0)
    assert s.n == 2 and s.excluded == 1
    with pytest.raises(ZeroNormalizer):
        relative_pnl([1.0], 1.0, 0.0, 0.0)


def test_worked_example():
    rep = risk_measures(np.arange(1, 101) / 100.0)
    assert rep.var_at(0.95) == 0.05
    assert rep.es_at(0.95) == 0.025
    assert rep.var_at(0.99) == 0.01 and rep.es_at(0.99) == 0.01


def test_semivariance_and_constant_sample():
    from osmhedge.risk import semivariance
    assert semivariance(np.array([-2.0, 0.0, 2.0])) == 4.0
    rep = risk_measures(np.full(50, 0.3))
    assert rep.variance == 0 and rep.semivariance == 0
    assert rep.var_at(0.95) == rep.es_at(0.95) == 0.3


def test_insufficient_sample():
    with pytest.raises(InsufficientSample):
        risk_measures(np.arange(19.0))


def test_matches_brute_force_oracle():
    assert risk_oracle_gap(200, seed=1) < 1e-12


samples = st.lists(st.floats(-10, 10, allow_nan=False), min_size=20, max_size=200)


@given(samples, st.floats(-5, 5))
def test_translation_equivariance(xs, c):
    x = np.array(xs)
    a, b = risk_measures(x), risk_measures(x + c)
    tol = 1e-9 * (1 + abs(c) + np.max(np.abs(x)))
    assert abs(b.mean - a.mean - c) < tol
    assert abs(b.var_at(0.95) - a.var_at(0.95) - c) < tol
    assert abs(b.es_at(0.95) - a.es_at(0.95) - c) < tol
    assert abs(b.variance - a.variance) < 1e-7 * (1 + a.variance)


@given(samples, st.floats(0.01, 100))
def test_scale_equivariance(xs, lam):
    x = np.array(xs)
    a, b = risk_measures(x), risk_measures(lam * x)
    assert b.var_at(0.95) == pytest.approx(lam * a.var_at(0.95), rel=1e-12, abs=1e-300)
    assert b.es_at(0.99) == pytest.approx(lam * a.es_at(0.99), rel=1e-12, abs=1e-12)
    assert b.variance == pytest.approx(lam ** 2 * a.variance, rel=1e-9, abs=1e-12)
    assert b.semivariance == pytest.approx(lam ** 2 * a.semivariance, rel=1e-9, abs=1e-12)


@given(samples)
def test_report_invariants(xs):
    rep = risk_measures(np.array(xs))
    assert rep.es_at(0.95) <= rep.var_at(0.95) and rep.semivariance >= 0


def test_kde_examples():
    g, d = kde(np.array([-1.0, 1.0]), 513)
    np.testing.assert_allclose(d, d[::-1], atol=1e-12)
    x = np.random.default_rng(0).standard_normal(100_000)
    g, d = kde(x)
    assert trapezoid(d, g) == pytest.approx(1.0, abs=1e-3)
    phi = np.exp(-g ** 2 / 2) / np.sqrt(2 * np.pi)
    assert np.max(np.abs(d - phi)) <= 0.02
    with pytest.raises(DegenerateSample):
        kde(np.ones(10))
    with pytest.raises(DegenerateSample):
        kde(np.ones(1))


def test_report_csv(tmp_path):
    rep = risk_measures(PnLSample(np.arange(1, 101) / 100.0, "T", 1.0, 3))
    write_report_csv(tmp_path / "r.csv", [report_row("delta", 10, rep)], ["seed=0"])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "strategy,N_rebalance,mean,variance,var95,es95,es99,semivariance,n_paths,excluded"
    assert lines[2].startswith("delta,10,0.505,") and lines[2].endswith(",100,3")

"""PnL samples and risk reports: moments, left-tail VaR, Expected Shortfall,
downside semivariance and Gaussian kernel density curves.

Tail measures use the left-tail convention, so ``VaR_95`` is the lower 5%
order statistic of the relative PnL.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DegenerateSample, InsufficientSample, ZeroNormalizer

MIN_TAIL_SAMPLE = 20
NORMALIZER_TOL = 1e-12
KDE_SMOOTHING = 1.8
REPORT_COLUMNS = ("strategy", "N_rebalance", "mean", "variance", "var95", "es95", "es99",
                  "semivariance", "n_paths", "excluded")


@dataclass(frozen=True, eq=False)
class PnLSample:
    values: np.ndarray      # finite relative PnL values
    horizon: str            # "tau" or "T"
    normalizer: float
    excluded: int = 0

    @property
    def n(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class RiskReport:
    mean: float
    variance: float
    var: Tuple[float, ...]
    es: Tuple[float, ...]
    semivariance: float
    n_paths: int
    excluded: int
    alphas: Tuple[float, ...]

    def var_at(self, alpha: float) -> float:
        return self.var[self.alphas.index(alpha)]

    def es_at(self, alpha: float) -> float:
        return self.es[self.alphas.index(alpha)]


def relative_pnl(P_horizon, t_horizon, r: float, normalizer: float, horizon: str = "T",
                 valid=None) -> PnLSample:
    """Discounted horizon value divided by the initial portfolio price."""
    if not normalizer > NORMALIZER_TOL:
        raise ZeroNormalizer(f"portfolio price {normalizer!r} is not positive")
    P_horizon = np.asarray(P_horizon, dtype=float)
    t_horizon = np.broadcast_to(np.asarray(t_horizon, dtype=float), P_horizon.shape)
    vals = np.exp(-r * t_horizon) * P_horizon / normalizer
    ok = np.isfinite(vals) if valid is None else (np.asarray(valid) & np.isfinite(vals))
    return PnLSample(vals[ok], horizon, float(normalizer), int((~ok).sum()))


def pnl(ledger, r: float, normalizer=None) -> PnLSample:
    """Relative PnL of a hedge ledger at its reporting horizon.

    The normalizer defaults to the estimated initial portfolio price, which
    is common to all paths because every path starts at the same state.
    """
    if normalizer is None:
        p0 = ledger.price0[np.isfinite(ledger.price0)]
        normalizer = float(p0.mean()) if p0.size else float("nan")
    return relative_pnl(ledger.pnl_raw, ledger.horizon_time, r, normalizer,
                        ledger.horizon, ledger.valid)


def _tail_index(alpha: float, n: int) -> int:
    # zero-based position of the order statistic x_(ceil((1-alpha) n))
    k = math.ceil((1.0 - alpha) * n - 1e-9)
    return min(max(k, 1), n) - 1


def value_at_risk(sorted_x: np.ndarray, alpha: float) -> float:
    return float(sorted_x[_tail_index(alpha, sorted_x.size)])


def expected_shortfall(sorted_x: np.ndarray, alpha: float) -> float:
    v = value_at_risk(sorted_x, alpha)
    tail = sorted_x[sorted_x < v]
    return float(tail.mean()) if tail.size else v


def _mean(x: np.ndarray) -> float:
    # exactly rounded sum, so a constant sample has exactly zero spread
    return math.fsum(x) / x.size


def semivariance(x: np.ndarray) -> float:
    mu = _mean(x)
    below = x[x < mu]
    return float(np.mean((below - mu) ** 2)) if below.size else 0.0


def risk_measures(sample, alphas: Sequence[float] = (0.95, 0.99)) -> RiskReport:
    """Moments and left-tail risk measures of a PnL sample."""
    if isinstance(sample, PnLSample):
        x, excluded = sample.values, sample.excluded
    else:
        x, excluded = np.asarray(sample, dtype=float).ravel(), 0
    if x.size < MIN_TAIL_SAMPLE:
        raise InsufficientSample(f"{x.size} observations, need at least {MIN_TAIL_SAMPLE}")
    xs = np.sort(x)
    mu = _mean(x)
    alphas = tuple(float(a) for a in alphas)
    return RiskReport(
        mean=mu,
        variance=float(np.mean((x - mu) ** 2)),
        var=tuple(value_at_risk(xs, a) for a in alphas),
        es=tuple(expected_shortfall(xs, a) for a in alphas),
        semivariance=semivariance(x),
        n_paths=int(x.size),
        excluded=int(excluded),
        alphas=alphas,
    )


def kde(sample, n_points: int = 512, smoothing: float = KDE_SMOOTHING):
    """Gaussian kernel density on a uniform grid over ``[min - 3h, max + 3h]``
    with bandwidth ``h = smoothing * n^(-1/5) * std``."""
    x = np.asarray(sample.values if isinstance(sample, PnLSample) else sample,
                   dtype=float).ravel()
    if x.size < 2:
        raise DegenerateSample("kernel density needs at least two observations")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DegenerateSample("kernel density needs a sample with nonzero variance")
    h = smoothing * x.size ** (-0.2) * sd
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_points)
    dens = np.zeros(n_points)
    for s in range(0, x.size, 8192):
        u = (grid[:, None] - x[None, s:s + 8192]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * h * np.sqrt(2 * np.pi)
    return grid, dens


def report_row(strategy: str, n_rebalance: int, rep: RiskReport) -> dict:
    return {"strategy": strategy, "N_rebalance": int(n_rebalance), "mean": rep.mean,
            "variance": rep.variance, "var95": rep.var_at(0.95), "es95": rep.es_at(0.95),
            "es99": rep.es_at(0.99), "semivariance": rep.semivariance,
            "n_paths": rep.n_paths, "excluded": rep.excluded}


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report_csv(path, rows, header_lines=()) -> None:
    """Report rows with optional ``# key=value`` comment lines on top."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def write_kde_csv(path, grid, density) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "density"])
        for a, b in zip(grid, density):
            w.writerow([repr(float(a)), repr(float(b))])

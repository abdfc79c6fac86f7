"""Closed-form prices and Greeks: Black-Scholes vanillas with a continuous
dividend yield, the Margrabe exchange option and European geometric basket
options (which reduce to a scalar Black-Scholes problem).

Every function broadcasts over array inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .contracts import geometric_mean
from .errors import ConfigError, DegenerateSpread, DomainError

SPREAD_TOL = 1e-10
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True, eq=False)
class VanillaQuote:
    price: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    vega: np.ndarray
    vomma: np.ndarray
    vanna: np.ndarray


def bs_vanilla(S, K, r, q, sigma, tau, kind: str = "call") -> VanillaQuote:
    """Black-Scholes price and Greeks of a European call or put."""
    S, K, sigma, tau = (np.asarray(v, dtype=float) for v in (S, K, sigma, tau))
    if np.any(S <= 0) or np.any(K <= 0) or np.any(sigma <= 0) or np.any(tau <= 0):
        raise DomainError("S, K, sigma and tau must be positive")
    if kind not in ("call", "put"):
        raise ConfigError(f"unknown vanilla kind {kind!r}")
    sq = np.sqrt(tau)
    vs = sigma * sq
    d1 = (np.log(S / K) + (r - q + 0.5 * sigma ** 2) * tau) / vs
    d2 = d1 - vs
    dq = np.exp(-q * tau)
    dr = np.exp(-r * tau)
    pdf1 = normal_pdf(d1)
    if kind == "call":
        price = S * dq * normal_cdf(d1) - K * dr * normal_cdf(d2)
        delta = dq * normal_cdf(d1)
    else:
        price = K * dr * normal_cdf(-d2) - S * dq * normal_cdf(-d1)
        delta = -dq * normal_cdf(-d1)
    gamma = dq * pdf1 / (S * vs)
    vega = S * dq * pdf1 * sq
    vomma = vega * d1 * d2 / sigma
    vanna = -dq * pdf1 * d2 / sigma
    return VanillaQuote(price, delta, gamma, vega, vomma, vanna)


@dataclass(frozen=True, eq=False)
class ExchangeQuote:
    """Margrabe price with first and second derivatives in ``(S_k, S_j)``."""

    price: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    dk: np.ndarray
    dj: np.ndarray
    dkk: np.ndarray
    dkj: np.ndarray
    djk: np.ndarray
    djj: np.ndarray


def exchange_vol(sigma_k, sigma_j, rho):
    return np.sqrt(np.maximum(sigma_k ** 2 + sigma_j ** 2 - 2.0 * rho * sigma_k * sigma_j, 0.0))


def margrabe(S_k, S_j, K, sigma_k, sigma_j, rho, q_k, q_j, tau,
             tol: float = SPREAD_TOL) -> ExchangeQuote:
    """Exchange call ``max(S_k - K S_j, 0)``.

    ``dkj`` is ``d/dS_k`` of ``dC/dS_j`` and ``djk`` is ``d/dS_j`` of
    ``dC/dS_k``; they agree analytically.
    """
    S_k, S_j, tau = (np.asarray(v, dtype=float) for v in (S_k, S_j, tau))
    if np.any(S_k <= 0) or np.any(S_j <= 0) or np.any(tau <= 0):
        raise DomainError("asset prices and time to maturity must be positive")
    s = exchange_vol(sigma_k, sigma_j, rho)
    if np.any(s <= tol):
        raise DegenerateSpread(f"exchange volatility {np.min(s):.3e} is degenerate")
    vs = s * np.sqrt(tau)
    d1 = (np.log(S_k / (K * S_j)) + (q_j - q_k + 0.5 * s * s) * tau) / vs
    d2 = d1 - vs
    ek = np.exp(-q_k * tau)
    ej = np.exp(-q_j * tau)
    price = ek * S_k * normal_cdf(d1) - ej * K * S_j * normal_cdf(d2)
    dk = ek * normal_cdf(d1)
    dj = -ej * K * normal_cdf(d2)
    p1 = normal_pdf(d1)
    p2 = normal_pdf(d2)
    dkk = ek * p1 / (vs * S_k)
    djk = -ek * p1 / (vs * S_j)
    dkj = -ej * K * p2 / (vs * S_k)
    djj = ej * K * p2 / (vs * S_j)
    return ExchangeQuote(price, d1, d2, dk, dj, dkk, dkj, djk, djj)


# -- geometric basket ----------------------------------------------------------

def geometric_reduction(sigma_bar, corr, q, assets=None):
    """Volatility and dividend yield of the geometric mean of ``assets``.

    Under the risk-neutral measure the geometric mean is itself a geometric
    Brownian motion with ``sigma_G^2 = s' C s / d^2`` and
    ``q_G = mean(q) + mean(s^2)/2 - sigma_G^2/2``.
    """
    sigma_bar = np.asarray(sigma_bar, dtype=float)
    corr = np.asarray(corr, dtype=float)
    q = np.asarray(q, dtype=float)
    idx = np.arange(len(sigma_bar)) if assets is None or len(assets) == 0 else np.asarray(assets)
    s = sigma_bar[idx]
    c = corr[np.ix_(idx, idx)]
    d = len(idx)
    var_g = s @ c @ s / d ** 2
    q_g = q[idx].mean() + 0.5 * np.mean(s ** 2) - 0.5 * var_g
    return np.sqrt(var_g), q_g


def geometric_basket(x, K, r, sigma_bar, corr, q, tau, kind="call", assets=None):
    """Price, gradient ``(..., d)`` and Hessian ``(..., d, d)`` of a European
    geometric basket option on states ``x`` ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    dfull = x.shape[-1]
    idx = np.arange(dfull) if assets is None or len(assets) == 0 else np.asarray(assets)
    sig_g, q_g = geometric_reduction(sigma_bar, corr, q, idx)
    xs = x[..., idx]
    G = geometric_mean(xs)
    vq = bs_vanilla(G, K, r, q_g, sig_g, tau, kind)
    n = len(idx)
    dG = np.zeros(x.shape)
    dG[..., idx] = G[..., None] / (n * xs)
    hG = dG[..., :, None] * dG[..., None, :] / G[..., None, None]
    diag = np.zeros(x.shape)
    diag[..., idx] = G[..., None] / (n * xs ** 2)
    hG = hG - diag[..., :, None] * np.eye(dfull)
    grad = vq.delta[..., None] * dG
    hess = vq.gamma[..., None, None] * dG[..., :, None] * dG[..., None, :] \
        + vq.delta[..., None, None] * hG
    return vq.price, grad, hess


# -- closed-form Greek provider ---------------------------------------------------

class ClosedFormGreeks:
    """Exact prices, Deltas and Hessians of European portfolios whose contracts
    all have closed forms under Black-Scholes dynamics (vanillas, exchange
    calls and geometric baskets).

    Exposes the same ``evaluate`` interface as a trained solver artifact so
    the hedging engine can run without any network.
    """

    SUPPORTED = ("vanilla_call", "vanilla_put", "exchange_call",
                 "geometric_call", "geometric_put")

    def __init__(self, portfolio, grid):
        model = portfolio.model
        if model.kind != "black_scholes":
            raise ConfigError("closed-form Greeks need a Black-Scholes model")
        for c in portfolio.contracts:
            if c.kind not in self.SUPPORTED:
                raise ConfigError(f"no closed form for {c.kind}")
            if c.is_bermudan:
                raise ConfigError("closed-form Greeks cover European contracts only")
        self.portfolio = portfolio
        self.grid = grid
        self.has_gamma = True

    def _contract(self, c, tau, x):
        m = self.portfolio.model
        B, d = x.shape
        grad = np.zeros((B, d))
        hess = np.zeros((B, d, d))
        if c.kind.startswith("vanilla"):
            i = c.resolved_assets(d)[0]
            q = bs_vanilla(x[:, i], c.strike, m.r, m.q[i], m.sigma_bar[i], tau,
                           "call" if c.kind == "vanilla_call" else "put")
            grad[:, i] = q.delta
            hess[:, i, i] = q.gamma
            return q.price, grad, hess
        if c.kind == "exchange_call":
            k, j = c.assets
            e = margrabe(x[:, k], x[:, j], c.strike, m.sigma_bar[k], m.sigma_bar[j],
                         m.corr[k, j], m.q[k], m.q[j], tau)
            grad[:, k], grad[:, j] = e.dk, e.dj
            hess[:, k, k], hess[:, j, j] = e.dkk, e.djj
            hess[:, k, j], hess[:, j, k] = e.dkj, e.djk
            return e.price, grad, hess
        kind = "call" if c.kind == "geometric_call" else "put"
        return geometric_basket(x, c.strike, m.r, m.sigma_bar, m.corr, m.q, tau, kind,
                                c.assets)

    def evaluate(self, n, x, strict: bool = True):
        from .solvers import GreekSlice
        from .contracts import terminal_z

        pf = self.portfolio
        model = pf.model
        x = np.atleast_2d(np.asarray(x, dtype=float))
        B, d = x.shape
        J = pf.J
        t = self.grid.t(n)
        hit = np.zeros((B, J), dtype=bool)
        if n == self.grid.N:
            y = pf.payoff(x)
            delta = pf.payoff_gradient(x)
            z = terminal_z(pf, t, x)
            gamma = np.zeros((B, J, d, d))
            return GreekSlice(y, y, z, z, None, delta, gamma, hit)
        tau = self.grid.T - t
        parts = [self._contract(c, tau, x) for c in pf.contracts]
        y = np.stack([p[0] for p in parts], axis=1)
        delta = np.stack([p[1] for p in parts], axis=1)
        gamma = np.stack([p[2] for p in parts], axis=1)
        z = np.einsum("bjc,bck->bjk", delta, model.diffusion(t, x))
        return GreekSlice(y, y, z, z, None, delta, gamma, hit)

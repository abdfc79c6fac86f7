"""Built-in experiment configurations.

Presets are plain config documents. Parameterized presets take variant
overrides in the form ``name:key=value,key=value``, e.g.
``ex2-basket:d=5,K=110`` or ``ex3-portfolio:case=2``.
"""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError

# full-scale training budget of the high-dimensional examples
FULL_TRAIN = {"iters_last": 2 ** 16, "iters": 2 ** 12, "batch": 1024}
LADDER = [1, 2, 5, 10, 20, 100]


def _bs_model(d, mu, sigma, r, q, corr, x0=100.0):
    vec = lambda v: list(np.broadcast_to(np.asarray(v, dtype=float), (d,)).tolist())
    c = np.full((d, d), float(corr))
    np.fill_diagonal(c, 1.0)
    return {"kind": "black_scholes", "mu_bar": vec(mu), "sigma_bar": vec(sigma), "r": r,
            "q": vec(q), "corr": c.tolist(), "x0": vec(x0)}


def _gamma_instruments(d, strike, maturity):
    """Puts on the diagonal and unit-strike exchange calls off the diagonal,
    one instrument per upper-triangular Hessian entry."""
    out = []
    for i in range(d):
        for l in range(i, d):
            if i == l:
                out.append({"kind": "vanilla", "asset": i, "strike": strike,
                            "maturity": maturity, "option": "put"})
            else:
                out.append({"kind": "exchange", "k": i, "j": l, "strike": 1.0,
                            "maturity": maturity})
    return out


def fig1_bs_1d() -> dict:
    return {
        "name": "fig1-bs-1d",
        "seed": 0,
        "model": _bs_model(1, 0.0, 0.25, 0.0, 0.0, 0.0),
        "contracts": [{"kind": "vanilla_call", "strike": 100.0, "maturity": 1.0}],
        "scheme": "osm",
        "grid": 100,
        "train": {"iters_last": 2000, "iters": 500, "batch": 256},
        "hedge": {"strategies": ["delta", "delta-gamma"], "rebalances": LADDER,
                  "index_set": "diagonal",
                  "instruments": [{"kind": "vanilla", "asset": 0, "strike": 100.0,
                                   "maturity": 2.0, "option": "put"}]},
        "evaluation": {"n_paths": 10000},
        "closed_form_greeks": True,
    }


HESTON_INSTRUMENTS = ((0.3, 10.0, 60), (0.4, 10.0, 80), (0.3, 9.0, 60), (0.25, 11.0, 60))


def ex1_heston() -> dict:
    # instrument grids must contain every rebalancing date, so they share the
    # main step size; an instrument expiring with the option is extended by
    # one step so that it can still be quoted at the horizon
    T, N = 0.25, 50
    dt = T / N
    inst = []
    for mat, K, _ in HESTON_INSTRUMENTS:
        if mat <= T:
            mat = mat + dt
        n = int(round(mat / dt))
        inst.append({"kind": "trained", "option": "vanilla_put", "asset": 0,
                     "strike": K, "maturity": mat, "grid": n})
    return {
        "name": "ex1-heston",
        "seed": 0,
        "model": {"kind": "heston", "mu_bar": [0.1], "r": 0.1, "q": [0.0], "kappa": 5.0,
                  "nu_bar": 0.16, "rho": 0.1, "eta": 0.9, "x0": [10.0, 0.0625]},
        "contracts": [{"kind": "vanilla_put", "strike": 10.0, "maturity": T, "exercise": 10}],
        "scheme": "osm",
        "grid": N,
        "train": dict(FULL_TRAIN),
        "hedge": {"strategies": ["delta", "delta-vega", "second-order"],
                  "rebalances": [1, 2, 5, 10, 25, 50],
                  "index_set": [[0, 0], [0, 1], [1, 1]],
                  "instruments": inst},
        "evaluation": {"n_paths": 2 ** 14},
    }


EX2_VARIANTS = {"K": (90.0, 100.0, 110.0), "sigma": (0.25, 0.5, 0.75), "R": (1, 5, 20, 100),
                "d": (1, 5, 20, 50, 100)}


def ex2_basket(d: int = 50, K: float = 100.0, sigma: float = 0.25, R: int = 1) -> dict:
    T = 2.0
    return {
        "name": f"ex2-basket:d={d},K={K:g},sigma={sigma:g},R={R}",
        "seed": 0,
        "model": _bs_model(d, 0.05, sigma, 0.0, 0.02, 0.75),
        "contracts": [{"kind": "geometric_call", "strike": K, "maturity": T, "exercise": R}],
        "scheme": "osm",
        "grid": 100,
        "train": dict(FULL_TRAIN),
        "hedge": {"strategies": ["delta", "delta-gamma"], "rebalances": LADDER,
                  "index_set": "upper", "instruments": _gamma_instruments(d, K, 2 * T)},
        "evaluation": {"n_paths": 10000},
    }


EX3_R_CASE3 = (20, 5, 2, 1, 10, 5, 5, 10, 10) + (100,) * 6 + (2,) + (20,) * 3 + (100,) * 6


def ex3_portfolio(case: int = 1) -> dict:
    if case not in (1, 2, 3):
        raise ConfigError("ex3-portfolio: case must be 1, 2 or 3")
    d, T = 20, 1.0
    half = d // 2
    first, second = list(range(half)), list(range(half, d))
    if case == 1:
        strikes = [100.0] * 25
    else:
        strikes = [100.0, 120.0, 80.0, 100.0, 50.0] + [150.0] * 20
    R = {1: (1,) * 25, 2: (5,) * 25, 3: EX3_R_CASE3}[case]
    kinds = [("geometric_put", []), ("arithmetic_put", first), ("call_on_max", second),
             ("cash_or_nothing", []), ("put_on_min", second)]
    kinds += [("vanilla_call", [i]) for i in range(d)]
    contracts = []
    for (kind, assets), K, r_ in zip(kinds, strikes, R):
        c = {"kind": kind, "strike": K, "maturity": T, "assets": assets, "exercise": r_}
        if kind == "cash_or_nothing":
            c["bounds"] = [50.0, 150.0]
        contracts.append(c)
    mu = np.round(np.linspace(0.2, 0.01, d), 10).tolist()
    sigma = [0.4, 0.25, 0.2, 0.15, 0.1] * (d // 5)
    model = _bs_model(d, 0.0, sigma, 0.04, 0.0, 0.25)
    model["mu_bar"] = mu
    return {
        "name": f"ex3-portfolio:case={case}",
        "seed": 0,
        "model": model,
        "contracts": contracts,
        "scheme": "osm",
        "grid": 100,
        "train": dict(FULL_TRAIN),
        "hedge": {"strategies": ["delta", "delta-gamma"], "rebalances": LADDER,
                  "index_set": "upper", "instruments": _gamma_instruments(d, 100.0, 2 * T),
                  "horizon": "T"},
        "evaluation": {"n_paths": 10000},
    }


CATALOG = {
    "fig1-bs-1d": (fig1_bs_1d, {}, "1-d Black-Scholes call, closed-form Greeks ladder"),
    "ex1-heston": (ex1_heston, {}, "Heston Bermudan put, R=10, delta-vega and second-order"),
    "ex2-basket": (ex2_basket, EX2_VARIANTS, "Geometric basket call on d assets"),
    "ex3-portfolio": (ex3_portfolio, {"case": (1, 2, 3)}, "Portfolio of 25 options on 20 assets"),
}


def parse_preset(name: str) -> Tuple[str, Dict[str, object]]:
    base, _, rest = name.partition(":")
    if base not in CATALOG:
        raise ConfigError(f"unknown preset {base!r}; available: {', '.join(CATALOG)}")
    allowed = CATALOG[base][1]
    kw = {}
    for part in filter(None, rest.split(",")):
        key, eq, val = part.partition("=")
        if not eq or key not in allowed:
            raise ConfigError(f"preset {base}: unknown variant {part!r}; "
                              f"variants: {', '.join(allowed) or 'none'}")
        typ = type(allowed[key][0])
        try:
            kw[key] = typ(float(val)) if typ is int else typ(val)
        except ValueError:
            raise ConfigError(f"preset {base}: bad value for {key}: {val!r}") from None
    return base, kw


def preset_document(name: str) -> dict:
    base, kw = parse_preset(name)
    return CATALOG[base][0](**kw)


def load_preset(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(preset_document(name))


def describe() -> list:
    out = []
    for key, (_, variants, text) in CATALOG.items():
        var = "; ".join(f"{k} in {{{', '.join(f'{v:g}' for v in vals)}}}"
                        for k, vals in variants.items())
        out.append((key, text, var))
    return out

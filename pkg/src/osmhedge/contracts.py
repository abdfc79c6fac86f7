"""Payoffs, BSDE drivers and the discrete reflection operators.

A portfolio is an ordered collection of J contracts written on one shared
risk-factor process. All batched routines take states shaped ``(..., d)``
and return contract-indexed arrays with the J axis right after the batch
axes, e.g. ``(..., J)`` for values and ``(..., J, d)`` for gradient rows.

Asset indices are zero-based.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError
from .market_models import ModelSpec, TimeGrid

PAYOFF_KINDS = (
    "vanilla_call", "vanilla_put", "geometric_call", "geometric_put",
    "arithmetic_put", "call_on_max", "put_on_min", "cash_or_nothing",
    "exchange_call",
)
DATE_TOL = 1e-9


@dataclass(frozen=True)
class ContractSpec:
    """One (possibly Bermudan) contract.

    ``assets`` selects the underlyings the payoff reads; an empty tuple means
    all assets. ``exercise`` is the number R of exercise intervals: the
    exercise dates are ``k T / R`` for ``k = 0..R``, so ``R = 1`` is European.
    Explicit ``dates`` override ``exercise``.
    """

    kind: str
    strike: float = 100.0
    maturity: float = 1.0
    assets: Tuple[int, ...] = ()
    exercise: int = 1
    dates: Optional[Tuple[float, ...]] = None
    bounds: Tuple[float, float] = (50.0, 150.0)

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ConfigError(f"unknown payoff kind {self.kind!r}")
        if self.maturity <= 0:
            raise ConfigError("maturity must be positive")
        object.__setattr__(self, "assets", tuple(int(a) for a in self.assets))
        if any(a < 0 for a in self.assets):
            raise ConfigError("asset indices are zero-based and nonnegative")
        if self.kind == "exchange_call" and len(self.assets) != 2:
            raise ConfigError("exchange_call needs exactly two assets (k, j)")
        if self.kind.startswith("vanilla") and len(self.assets) > 1:
            raise ConfigError("vanilla contracts read a single asset")
        if self.dates is not None:
            ds = tuple(sorted(float(t) for t in self.dates))
            if abs(ds[0]) > DATE_TOL or abs(ds[-1] - self.maturity) > DATE_TOL:
                raise ConfigError("exercise dates must contain 0 and the maturity")
            object.__setattr__(self, "dates", ds)
        elif self.exercise < 1:
            raise ConfigError("exercise count R must be >= 1")
        lo, hi = self.bounds
        if not lo < hi:
            raise ConfigError("cash-or-nothing bounds must satisfy lo < hi")

    @property
    def omega(self) -> int:
        return -1 if self.kind in ("vanilla_put", "geometric_put") else 1

    @property
    def exercise_dates(self) -> np.ndarray:
        if self.dates is not None:
            return np.asarray(self.dates)
        return np.arange(self.exercise + 1) * (self.maturity / self.exercise)

    @property
    def is_bermudan(self) -> bool:
        return len(self.exercise_dates) > 2

    def is_reflection_time(self, t: float) -> bool:
        """True at exercise dates strictly inside ``(0, T)``."""
        if t <= DATE_TOL or t >= self.maturity - DATE_TOL:
            return False
        return bool(np.any(np.abs(self.exercise_dates - t) <= DATE_TOL))

    def resolved_assets(self, d: int) -> np.ndarray:
        idx = np.arange(d) if not self.assets else np.asarray(self.assets)
        if idx.max() >= d:
            raise ConfigError(f"asset index {idx.max()} out of range for d={d}")
        if self.kind.startswith("vanilla") and not self.assets:
            idx = np.array([0])
        return idx

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "strike": self.strike, "maturity": self.maturity,
               "assets": list(self.assets), "exercise": self.exercise}
        if self.dates is not None:
            out["dates"] = list(self.dates)
        if self.kind == "cash_or_nothing":
            out["bounds"] = list(self.bounds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ContractSpec":
        data = dict(data)
        if "dates" in data and data["dates"] is not None:
            data["dates"] = tuple(data["dates"])
        if "assets" in data:
            data["assets"] = tuple(data["assets"])
        if "bounds" in data:
            data["bounds"] = tuple(data["bounds"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"contract: {exc}") from None


def geometric_mean(xs) -> np.ndarray:
    """Geometric mean over the last axis, scaled by the largest entry so that
    equal entries reproduce their common value exactly."""
    ref = xs.max(axis=-1)
    return ref * np.exp(np.mean(np.log(xs / ref[..., None]), axis=-1))


def payoff(contract: ContractSpec, x) -> np.ndarray:
    """Exercise value ``g(x)`` for states ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    idx = contract.resolved_assets(x.shape[-1])
    xs = x[..., idx]
    K = contract.strike
    kind = contract.kind
    if kind == "vanilla_call":
        return np.maximum(xs[..., 0] - K, 0.0)
    if kind == "vanilla_put":
        return np.maximum(K - xs[..., 0], 0.0)
    if kind in ("geometric_call", "geometric_put"):
        g = geometric_mean(xs)
        return np.maximum(contract.omega * (g - K), 0.0)
    if kind == "arithmetic_put":
        return np.maximum(K - xs.mean(axis=-1), 0.0)
    if kind == "call_on_max":
        return np.maximum(xs.max(axis=-1) - K, 0.0)
    if kind == "put_on_min":
        return np.maximum(K - xs.min(axis=-1), 0.0)
    if kind == "cash_or_nothing":
        lo, hi = contract.bounds
        return np.all((xs >= lo) & (xs <= hi), axis=-1).astype(float)
    # exchange_call: max(x_k - K x_j, 0)
    return np.maximum(xs[..., 0] - K * xs[..., 1], 0.0)


def payoff_gradient(contract: ContractSpec, x) -> np.ndarray:
    """Almost-everywhere gradient of the payoff, zero on kinks (OTM branch).

    The cash-or-nothing gradient is identically zero even though the payoff
    itself jumps at the barrier bounds.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    idx = contract.resolved_assets(d)
    xs = x[..., idx]
    K = contract.strike
    kind = contract.kind
    out = np.zeros(x.shape)
    if kind == "vanilla_call":
        out[..., idx[0]] = (xs[..., 0] > K)
    elif kind == "vanilla_put":
        out[..., idx[0]] = -(K > xs[..., 0]).astype(float)
    elif kind in ("geometric_call", "geometric_put"):
        w = contract.omega
        g = geometric_mean(xs)
        itm = (w * (g - K)) > 0
        out[..., idx] = (w * itm * g)[..., None] / (len(idx) * xs)
    elif kind == "arithmetic_put":
        itm = K > xs.mean(axis=-1)
        out[..., idx] = -(itm[..., None] / len(idx)) * np.ones(xs.shape)
    elif kind == "call_on_max":
        am = np.argmax(xs, axis=-1)
        itm = np.take_along_axis(xs, am[..., None], -1)[..., 0] > K
        sub = np.zeros(xs.shape)
        np.put_along_axis(sub, am[..., None], itm[..., None].astype(float), -1)
        out[..., idx] = sub
    elif kind == "put_on_min":
        am = np.argmin(xs, axis=-1)
        itm = K > np.take_along_axis(xs, am[..., None], -1)[..., 0]
        sub = np.zeros(xs.shape)
        np.put_along_axis(sub, am[..., None], -itm[..., None].astype(float), -1)
        out[..., idx] = sub
    elif kind == "exchange_call":
        itm = xs[..., 0] - K * xs[..., 1] > 0
        out[..., idx[0]] = itm
        out[..., idx[1]] = -K * itm
    return out


@dataclass(frozen=True)
class PortfolioSpec:
    """Ordered collection of contracts on one shared model."""

    contracts: Tuple[ContractSpec, ...]
    model: ModelSpec = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "contracts", tuple(self.contracts))
        if not self.contracts:
            raise ConfigError("a portfolio needs at least one contract")
        T = self.contracts[0].maturity
        if any(abs(c.maturity - T) > DATE_TOL for c in self.contracts):
            raise ConfigError("all contracts in a portfolio share one maturity")
        for c in self.contracts:
            c.resolved_assets(self.model.m)

    @property
    def J(self) -> int:
        return len(self.contracts)

    @property
    def T(self) -> float:
        return self.contracts[0].maturity

    def payoff(self, x) -> np.ndarray:
        return np.stack([payoff(c, x) for c in self.contracts], axis=-1)

    def payoff_gradient(self, x) -> np.ndarray:
        return np.stack([payoff_gradient(c, x) for c in self.contracts], axis=-2)

    def reflection_mask(self, t: float) -> np.ndarray:
        return np.array([c.is_reflection_time(t) for c in self.contracts])

    def check_grid(self, grid: TimeGrid) -> None:
        if abs(grid.T - self.T) > DATE_TOL:
            raise ConfigError(f"grid horizon {grid.T} differs from maturity {self.T}")
        for j, c in enumerate(self.contracts):
            for t in c.exercise_dates:
                if not grid.contains(t):
                    raise ConfigError(
                        f"contract {j}: exercise date {t} is not on the grid N={grid.N}")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(),
                "contracts": [c.to_dict() for c in self.contracts]}

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DriverEval:
    value: np.ndarray   # (..., J)
    dx: np.ndarray      # (..., J, d)
    dy: np.ndarray      # (..., J)
    dz: np.ndarray      # (..., J, d)


def driver(model: ModelSpec, t, x, y, z) -> DriverEval:
    """Linear pricing driver ``f = -r y - z @ u(x)`` for every contract row.

    ``u = inv(sigma) theta`` is the market price of risk; for Black-Scholes it
    is the constant ``inv(chol) lambda`` with
    ``lambda_i = (mu_bar_i - r + q_i) / sigma_bar_i``, for Heston the
    variance has no risk premium.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    u = model.risk_premium_direction(t, x)              # (..., d)
    du = model.risk_premium_jacobian(t, x)              # (..., d, d)
    value = -model.r * y - np.einsum("...jd,...d->...j", z, u)
    dz = -np.broadcast_to(u[..., None, :], z.shape)
    dx = -np.einsum("...ja,...ab->...jb", z, du)
    dy = np.full(y.shape, -model.r)
    return DriverEval(value, dx, dy, np.array(dz))


def exercise_indicator(portfolio: PortfolioSpec, t: float, x, y_tilde) -> np.ndarray:
    """``1{t in R \\ {0, T}} 1{g(x) > y_tilde}`` per contract, ``(..., J)``."""
    mask = portfolio.reflection_mask(t)
    y_tilde = np.asarray(y_tilde, dtype=float)
    if not mask.any():
        return np.zeros(y_tilde.shape, dtype=bool)
    return mask & (portfolio.payoff(x) > y_tilde)


def reflect_y(portfolio: PortfolioSpec, t: float, x, y_tilde, hit=None) -> np.ndarray:
    y_tilde = np.asarray(y_tilde, dtype=float)
    if hit is None:
        hit = exercise_indicator(portfolio, t, x, y_tilde)
    if not np.any(hit):
        return y_tilde
    return np.where(hit, portfolio.payoff(x), y_tilde)


def reflect_z(portfolio: PortfolioSpec, t: float, x, y_tilde, z_tilde, hit=None) -> np.ndarray:
    """Replace rows that exercise by ``grad g(x) sigma(t, x)``."""
    z_tilde = np.asarray(z_tilde, dtype=float)
    if hit is None:
        hit = exercise_indicator(portfolio, t, x, y_tilde)
    if not np.any(hit):
        return z_tilde
    gz = terminal_z(portfolio, t, x)
    return np.where(hit[..., None], gz, z_tilde)


def terminal_z(portfolio: PortfolioSpec, t: float, x) -> np.ndarray:
    """``grad g(x) @ sigma(t, x)`` rows, ``(..., J, d)``."""
    sig = portfolio.model.diffusion(t, x)
    return np.einsum("...jc,...ck->...jk", portfolio.payoff_gradient(x), sig)


def single(contract: ContractSpec, model: ModelSpec) -> PortfolioSpec:
    return PortfolioSpec((contract,), model)


def reflect_y_single(contract: ContractSpec, t: float, x, y_tilde):
    """Scalar-contract reflection (``l = g``)."""
    if not contract.is_reflection_time(t):
        return np.asarray(y_tilde, dtype=float)
    g = payoff(contract, x)
    return np.where(g > y_tilde, g, y_tilde)


def reflect_z_single(contract: ContractSpec, model: ModelSpec, t: float, x, y_tilde, z_tilde):
    z_tilde = np.asarray(z_tilde, dtype=float)
    if not contract.is_reflection_time(t):
        return z_tilde
    hit = payoff(contract, x) > y_tilde
    gz = np.einsum("...c,...ck->...k", payoff_gradient(contract, x), model.diffusion(t, x))
    return np.where(np.asarray(hit)[..., None], gz, z_tilde)

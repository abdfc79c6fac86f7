"""Hedge weights from Greeks and the discrete self-financing ledger.

Strategies:

* ``delta``: hold the summed option Deltas in the tradeable assets;
* ``delta-gamma``: additionally trade K instruments so that the portfolio
  Hessian entries in an index set I are offset;
* ``delta-vega``: instruments offset the sensitivities to the non-tradeable
  risk factors (e.g. the Heston variance);
* ``second-order``: vega rows and Hessian rows together.

The instrument weights solve a small sparse least-squares system per path,
handled by a batched LSQR that shares one sparsity pattern across paths.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse

from .closed_form import bs_vanilla, margrabe
from .errors import ConfigError, MissingQuote
from .market_models import ModelSpec, PathEnsemble, TimeGrid

STRATEGIES = ("delta", "delta-vega", "delta-gamma", "second-order")
REBALANCE_PRESETS = {"yearly": 1, "quarterly": 2, "monthly": 5, "fortnightly": 10,
                     "weekly": 20, "daily": 100}
PATH_CHUNK = 2048


# -- instruments -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InstrumentQuote:
    price: np.ndarray   # (B,)
    grad: np.ndarray    # (B, d)
    hess: np.ndarray    # (B, d, d)


class Instrument:
    """A tradeable hedging claim priced as a function of ``(t, x)``.

    ``support`` lists the state components the price depends on; Hessian
    entries outside ``support x support`` are structurally zero.
    """

    maturity: float
    support: Tuple[int, ...]
    label: str

    def quote(self, t: float, x) -> InstrumentQuote:
        raise NotImplementedError


@dataclass(eq=False)
class BSVanilla(Instrument):
    model: ModelSpec
    asset: int
    strike: float
    maturity: float
    kind: str = "put"

    def __post_init__(self):
        if self.model.kind != "black_scholes":
            raise ConfigError("closed-form vanilla instruments need a Black-Scholes model")
        self.support = (self.asset,)
        self.label = f"{self.kind}[{self.asset}]K{self.strike:g}"

    def quote(self, t, x):
        x = np.asarray(x, dtype=float)
        tau = self.maturity - t
        if tau <= 0:
            raise MissingQuote(f"{self.label} has expired at t={t}")
        m, i = self.model, self.asset
        q = bs_vanilla(x[:, i], self.strike, m.r, m.q[i], m.sigma_bar[i], tau, self.kind)
        B, d = x.shape
        grad = np.zeros((B, d))
        hess = np.zeros((B, d, d))
        grad[:, i] = q.delta
        hess[:, i, i] = q.gamma
        return InstrumentQuote(q.price, grad, hess)


@dataclass(eq=False)
class MargrabeExchange(Instrument):
    model: ModelSpec
    k: int
    j: int
    strike: float
    maturity: float

    def __post_init__(self):
        if self.model.kind != "black_scholes":
            raise ConfigError("exchange instruments need a Black-Scholes model")
        if self.k == self.j:
            raise ConfigError("exchange instrument needs two distinct assets")
        self.support = (self.k, self.j)
        self.label = f"exchange[{self.k},{self.j}]K{self.strike:g}"

    def quote(self, t, x):
        x = np.asarray(x, dtype=float)
        tau = self.maturity - t
        if tau <= 0:
            raise MissingQuote(f"{self.label} has expired at t={t}")
        m, k, j = self.model, self.k, self.j
        e = margrabe(x[:, k], x[:, j], self.strike, m.sigma_bar[k], m.sigma_bar[j],
                     m.corr[k, j], m.q[k], m.q[j], tau)
        B, d = x.shape
        grad = np.zeros((B, d))
        hess = np.zeros((B, d, d))
        grad[:, k], grad[:, j] = e.dk, e.dj
        hess[:, k, k], hess[:, j, j] = e.dkk, e.djj
        hess[:, k, j], hess[:, j, k] = e.dkj, e.djk
        return InstrumentQuote(e.price, grad, hess)


@dataclass(eq=False)
class SolverPriced(Instrument):
    """An instrument priced by its own trained solver artifact (J=1).

    The artifact grid must contain every rebalancing date it is queried at.
    """

    artifact: object
    label: str = "solver"

    def __post_init__(self):
        if self.artifact.portfolio.J != 1:
            raise ConfigError("solver-priced instruments are single-contract artifacts")
        if not self.artifact.has_gamma:
            raise ConfigError("solver-priced instruments need second-order Greeks (OSM)")
        self.maturity = self.artifact.grid.T
        self.support = tuple(range(self.artifact.model.d))

    def quote(self, t, x):
        grid = self.artifact.grid
        if not grid.contains(t) or t >= grid.T:
            raise MissingQuote(f"{self.label}: no quote at t={t}")
        s = self.artifact.evaluate(grid.index_of(t), x, strict=False)
        return InstrumentQuote(s.y[:, 0], s.delta[:, 0], s.gamma[:, 0])


# -- configuration -----------------------------------------------------------

@dataclass
class HedgeConfig:
    strategy: str = "delta"
    rebalances: int = 10
    index_set: Tuple[Tuple[int, int], ...] = ()
    instruments: List[Instrument] = field(default_factory=list)
    horizon: Optional[str] = None       # "tau", "T" or None for automatic
    lsqr_atol: float = 1e-10
    lsqr_btol: float = 1e-10
    lsqr_max_iter: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        self.index_set = tuple((int(i), int(l)) for i, l in self.index_set)
        if self.horizon not in (None, "tau", "T"):
            raise ConfigError("horizon must be 'tau' or 'T'")

    @property
    def uses_instruments(self) -> bool:
        return self.strategy != "delta"

    def validate(self, model: ModelSpec, grid: TimeGrid) -> None:
        d, m = model.d, model.m
        for i, l in self.index_set:
            if not (0 <= i < d and 0 <= l < d):
                raise ConfigError(f"index pair ({i},{l}) outside 0..{d - 1}")
        for ins in self.instruments:
            if ins.maturity <= grid.T:
                raise ConfigError(f"instrument {ins.label} expires before the hedge horizon")
        if self.strategy in ("delta-vega", "second-order") and d == m:
            raise ConfigError(f"{self.strategy} needs non-tradeable risk factors (d > m)")
        grid.coarse_indices(self.rebalances)


def index_set_preset(name: str, d: int, m: int) -> Tuple[Tuple[int, int], ...]:
    """Named choices for the hedged Hessian entries."""
    if name in ("empty", "none"):
        return ()
    if name == "diagonal":
        return tuple((i, i) for i in range(m))
    if name == "upper":
        return tuple((i, l) for i in range(m) for l in range(i, m))
    if name == "full":
        return tuple((i, l) for i in range(m) for l in range(m))
    if name == "vomma":
        return tuple((i, l) for i in range(m, d) for l in range(m, d))
    if name == "all":
        return tuple((i, l) for i in range(d) for l in range(d))
    raise ConfigError(f"unknown index set preset {name!r}")


# -- second-order system -----------------------------------------------------

@dataclass(eq=False)
class SecondOrderSystem:
    """Batch of sparse systems ``A beta = b`` sharing one sparsity pattern.

    ``values[b, e]`` is the entry at ``(rows[e], cols[e])`` of path ``b``.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray      # (B, nnz)
    rhs: np.ndarray         # (B, n_rows)
    n_cols: int
    row_labels: List[str]
    col_labels: List[str]

    @property
    def n_rows(self) -> int:
        return self.rhs.shape[1]

    def dense(self) -> np.ndarray:
        A = np.zeros((self.values.shape[0], self.n_rows, self.n_cols))
        np.add.at(A, (slice(None), self.rows, self.cols), self.values)
        return A


def system_pattern(cfg: HedgeConfig, d: int, m: int):
    """Row specification and structural nonzeros of the hedging system."""
    rows = []
    if cfg.strategy in ("delta-vega", "second-order"):
        rows += [("vega", l, l) for l in range(m, d)]
    if cfg.strategy in ("delta-gamma", "second-order"):
        rows += [("gamma", i, l) for i, l in cfg.index_set]
    r_idx, c_idx = [], []
    for r, (kind, i, l) in enumerate(rows):
        for k, ins in enumerate(cfg.instruments):
            sup = ins.support
            if (kind == "vega" and l in sup) or (kind == "gamma" and i in sup and l in sup):
                r_idx.append(r)
                c_idx.append(k)
    return rows, np.array(r_idx, dtype=int), np.array(c_idx, dtype=int)


def assemble_second_order(cfg: HedgeConfig, delta_sum, gamma_sum, quotes,
                          d: int, m: int) -> SecondOrderSystem:
    """Build the per-path systems.

    ``delta_sum`` ``(B, d)`` and ``gamma_sum`` ``(B, d, d)`` are the summed
    option sensitivities of the active contracts; ``quotes`` the instrument
    quotes at the same states.
    """
    rows, r_idx, c_idx = system_pattern(cfg, d, m)
    B = delta_sum.shape[0]
    rhs = np.empty((B, len(rows)))
    for r, (kind, i, l) in enumerate(rows):
        rhs[:, r] = delta_sum[:, l] if kind == "vega" else gamma_sum[:, l, i]
    vals = np.empty((B, len(r_idx)))
    for e, (r, k) in enumerate(zip(r_idx, c_idx)):
        kind, i, l = rows[r]
        q = quotes[k]
        vals[:, e] = q.grad[:, l] if kind == "vega" else q.hess[:, l, i]
    labels = [f"{kind}{i}{l}" if kind == "gamma" else f"vega{l}" for kind, i, l in rows]
    return SecondOrderSystem(r_idx, c_idx, vals, rhs, len(cfg.instruments), labels,
                             [ins.label for ins in cfg.instruments])


@dataclass(eq=False)
class LSQRResult:
    x: np.ndarray           # (B, n_cols)
    istop: np.ndarray       # (B,) stopping reason, 7 = iteration limit
    itn: np.ndarray         # (B,)
    converged: np.ndarray   # (B,) bool


def lsqr_batched(rows, cols, values, rhs, n_cols: int, atol: float = 1e-10,
                 btol: float = 1e-10, max_iter: Optional[int] = None,
                 conlim: float = 1e8) -> LSQRResult:
    """Golub-Kahan bidiagonalization least squares (LSQR), run in lockstep
    over a batch of systems with a shared sparsity pattern.

    Starting from zero, the iterates stay in the row space of A, so
    rank-deficient problems converge to the minimum-norm least-squares
    solution. Stopping rules follow Paige and Saunders; a system whose rules
    fire is frozen while the others continue.
    """
    values = np.asarray(values, dtype=float)
    b = np.asarray(rhs, dtype=float)
    B, n_rows = b.shape
    if max_iter is None:
        max_iter = 4 * max(n_cols, 1)
    nnz = len(rows)
    # scatter matrices: edge values -> rows / cols
    to_rows = sparse.csr_matrix((np.ones(nnz), (rows, np.arange(nnz))), shape=(n_rows, nnz))
    to_cols = sparse.csr_matrix((np.ones(nnz), (cols, np.arange(nnz))), shape=(n_cols, nnz))

    def matvec(v):      # (B, n_cols) -> (B, n_rows)
        return (to_rows @ (values * v[:, cols]).T).T

    def rmatvec(u):     # (B, n_rows) -> (B, n_cols)
        return (to_cols @ (values * u[:, rows]).T).T

    def safe_div(a, c):
        return np.divide(a, c, out=np.zeros_like(a), where=c != 0)

    x = np.zeros((B, n_cols))
    istop = np.zeros(B, dtype=int)
    itn = np.zeros(B, dtype=int)
    u = b.copy()
    bnorm = np.linalg.norm(u, axis=1)
    beta = bnorm.copy()
    u = safe_div(u, beta[:, None])
    v = rmatvec(u)
    alfa = np.linalg.norm(v, axis=1)
    v = safe_div(v, alfa[:, None])
    w = v.copy()
    rhobar, phibar = alfa.copy(), beta.copy()
    anorm = np.zeros(B)
    ddnorm = np.zeros(B)
    xxnorm = np.zeros(B)
    z = np.zeros(B)
    cs2, sn2 = -np.ones(B), np.zeros(B)
    active = alfa * beta > 0        # zero rhs or A^T b = 0: x = 0 is exact
    eps = np.finfo(float).eps
    ctol = 1.0 / conlim if conlim > 0 else 0.0
    it = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        while active.any() and it < max_iter:
            it += 1
            u = matvec(v) - alfa[:, None] * u
            beta = np.linalg.norm(u, axis=1)
            u = safe_div(u, beta[:, None])
            anorm = np.sqrt(anorm ** 2 + alfa ** 2 + beta ** 2)
            v = rmatvec(u) - beta[:, None] * v
            alfa = np.linalg.norm(v, axis=1)
            v = safe_div(v, alfa[:, None])

            rho = np.hypot(rhobar, beta)
            cs = safe_div(rhobar, rho)
            sn = safe_div(beta, rho)
            theta = sn * alfa
            rhobar = -cs * alfa
            phi = cs * phibar
            phibar = sn * phibar
            tau = sn * phi
            t1 = safe_div(phi, rho)
            t2 = safe_div(-theta, rho)
            dk = safe_div(w, rho[:, None])
            x = np.where(active[:, None], x + t1[:, None] * w, x)
            w = v + t2[:, None] * w
            ddnorm = ddnorm + np.sum(dk * dk, axis=1)

            delta = sn2 * rho
            gambar = -cs2 * rho
            rhs_ = phi - delta * z
            zbar = safe_div(rhs_, gambar)
            xnorm = np.sqrt(xxnorm + zbar ** 2)
            gamma = np.hypot(gambar, theta)
            cs2 = safe_div(gambar, gamma)
            sn2 = safe_div(theta, gamma)
            z = safe_div(rhs_, gamma)
            xxnorm = xxnorm + z ** 2

            acond = anorm * np.sqrt(ddnorm)
            rnorm = np.abs(phibar)
            arnorm = alfa * np.abs(tau)
            test1 = safe_div(rnorm, bnorm)
            test2 = safe_div(arnorm, anorm * rnorm + eps)
            test3 = safe_div(np.ones(B), acond)
            t1_ = safe_div(test1, 1 + safe_div(anorm * xnorm, bnorm))
            rtol = btol + atol * safe_div(anorm * xnorm, bnorm)

            stop = np.zeros(B, dtype=int)
            stop = np.where(test1 <= rtol, 1, stop)
            stop = np.where(test2 <= atol, 2, stop)
            stop = np.where((test3 <= ctol) & (acond > 0), 3, stop)
            stop = np.where(1 + t1_ <= 1, 4, stop)
            stop = np.where(1 + test2 <= 1, 5, stop)
            stop = np.where((1 + test3 <= 1) & (acond > 0), 6, stop)
            newly = active & (stop > 0)
            istop = np.where(newly, stop, istop)
            itn = np.where(active, it, itn)
            active = active & ~newly
    istop = np.where(active, 7, istop)
    return LSQRResult(x, istop, itn, istop != 7)


def lsqr_solve(system: SecondOrderSystem, atol=1e-10, btol=1e-10, max_iter=None) -> LSQRResult:
    return lsqr_batched(system.rows, system.cols, system.values, system.rhs,
                        system.n_cols, atol, btol, max_iter)


# -- weights -----------------------------------------------------------------

def delta_weights(delta, active, m: int):
    """Summed Deltas of the active contracts over the tradeables.

    ``delta`` is ``(B, J, d)``, ``active`` ``(B, J)``.
    """
    masked = np.where(np.asarray(active)[..., None], delta, 0.0)
    return masked.sum(axis=-2)[..., :m]


def gamma_weights(cfg: HedgeConfig, delta, gamma, active, quotes, d, m):
    """``(alpha, beta, lsqr_result)`` for the second-order strategies."""
    act = np.asarray(active)
    delta_sum = np.where(act[..., None], delta, 0.0).sum(axis=-2)
    K = len(cfg.instruments)
    B = delta_sum.shape[0]
    if K == 0:
        return delta_sum[:, :m], np.zeros((B, 0)), None
    if gamma is None:
        gamma_sum = np.zeros((B, d, d))
    else:
        gamma_sum = np.where(act[..., None, None], gamma, 0.0).sum(axis=-3)
    system = assemble_second_order(cfg, delta_sum, gamma_sum, quotes, d, m)
    if system.n_rows == 0:
        return delta_sum[:, :m], np.zeros((B, K)), None
    res = lsqr_solve(system, cfg.lsqr_atol, cfg.lsqr_btol, cfg.lsqr_max_iter)
    beta = res.x
    inst_grad = np.stack([q.grad for q in quotes], axis=1)       # (B, K, d)
    alpha = delta_sum[:, :m] - np.einsum("bk,bki->bi", beta, inst_grad[:, :, :m])
    return alpha, beta, res


def charm_estimate(alpha_now, alpha_prev, dt):
    """Finite-difference time sensitivity of the delta weights."""
    return -(np.asarray(alpha_now) - np.asarray(alpha_prev)) / dt


def stopping_time(provider, states, j: int, indices) -> np.ndarray:
    """First date index in ``indices`` (excluding 0) at which contract ``j``
    is exercised, i.e. its payoff exceeds the continuation value on an
    exercise date; the last index otherwise.

    ``states`` is ``(P, N+1, d)`` on the provider's grid.
    """
    states = np.asarray(states, dtype=float)
    P = states.shape[0]
    out = np.full(P, indices[-1])
    open_ = np.ones(P, dtype=bool)
    for n in indices[1:-1]:
        s = provider.evaluate(n, states[:, n], strict=False)
        hit = open_ & s.exercised[:, j]
        out[hit] = n
        open_ &= ~hit
    return out


# -- ledger ------------------------------------------------------------------

@dataclass(eq=False)
class HedgeLedger:
    strategy: str
    times: np.ndarray           # (N_reb + 1,)
    steps: np.ndarray           # fine-grid indices of the rebalancing dates
    P: np.ndarray               # (paths, N_reb + 1)
    bank: np.ndarray            # (paths, N_reb + 1)
    alpha: np.ndarray           # (paths, N_reb + 1, m) weights held after rebalancing
    beta: np.ndarray            # (paths, N_reb + 1, K)
    active: np.ndarray          # (paths, N_reb + 1, J) contracts alive after the date
    tau: np.ndarray             # (paths, J) rebalance index of exercise (N_reb at maturity)
    price0: np.ndarray          # (paths,) portfolio price at the start of each path
    pnl_raw: np.ndarray         # (paths,) P at the reporting horizon
    horizon_time: np.ndarray    # (paths,)
    valid: np.ndarray           # (paths,) bool
    lsqr_failures: int = 0
    horizon: str = "T"

    @property
    def excluded(self) -> int:
        return int((~self.valid).sum())

    def dump_csv(self, path) -> None:
        m, K = self.alpha.shape[2], self.beta.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t", "P", "B"] + [f"alpha_{i + 1}" for i in range(m)]
                       + [f"beta_{k + 1}" for k in range(K)] + ["exercised_mask"])
            for p in range(self.P.shape[0]):
                for s, t in enumerate(self.times):
                    mask = "".join("0" if a else "1" for a in self.active[p, s])
                    w.writerow([p, int(self.steps[s]), repr(float(t)), repr(float(self.P[p, s])),
                                repr(float(self.bank[p, s]))]
                               + [repr(float(v)) for v in self.alpha[p, s]]
                               + [repr(float(v)) for v in self.beta[p, s]] + [mask])


def _weights(cfg, sl, active, quotes, d, m):
    if cfg.strategy == "delta" or not cfg.instruments:
        B = active.shape[0]
        return delta_weights(sl.delta, active, m), np.zeros((B, len(cfg.instruments))), None
    needs_gamma = cfg.strategy in ("delta-gamma", "second-order") and cfg.index_set
    if needs_gamma and sl.gamma is None:
        raise ConfigError(f"strategy {cfg.strategy} needs second-order Greeks; "
                          "the solver provides none")
    return gamma_weights(cfg, sl.delta, sl.gamma if needs_gamma else None, active, quotes, d, m)


def _run_chunk(cfg, provider, model, states, reb, grid):
    P_ = states.shape[0]
    d, m = model.d, model.m
    J = provider.portfolio.J
    K = len(cfg.instruments)
    nr = len(reb) - 1
    dt_r = grid.T / nr
    growth = np.exp(model.r * dt_r)
    q = model.q[:m]
    use_inst = cfg.strategy != "delta" and K > 0

    P = np.zeros((P_, nr + 1))
    bank = np.zeros((P_, nr + 1))
    alpha = np.zeros((P_, nr + 1, m))
    beta = np.zeros((P_, nr + 1, K))
    act_hist = np.zeros((P_, nr + 1, J), dtype=bool)
    tau = np.full((P_, J), nr)
    lsqr_fail = 0

    def quotes_at(n, x):
        return [ins.quote(grid.t(n), x) for ins in cfg.instruments] if use_inst else []

    x0 = states[:, 0]
    sl = provider.evaluate(0, x0, strict=False)
    active = np.ones((P_, J), dtype=bool)
    quotes = quotes_at(0, x0)
    a, b, res = _weights(cfg, sl, active, quotes, d, m)
    if res is not None:
        lsqr_fail += int((~res.converged).sum())
    price0 = sl.y.sum(axis=1)
    S = x0[:, :m]
    B_ = price0 - (a * S).sum(axis=1)
    if use_inst:
        u = np.stack([qq.price for qq in quotes], axis=1)
        B_ = B_ - (b * u).sum(axis=1)
    alpha[:, 0], beta[:, 0], bank[:, 0], act_hist[:, 0] = a, b, B_, active
    for k in range(1, nr + 1):
        n = reb[k]
        x = states[:, n]
        S_prev = S
        S = x[:, :m]
        B_ = B_ * growth + (a * q * S_prev).sum(axis=1) * dt_r
        quotes = quotes_at(n, x)
        if use_inst:
            u = np.stack([qq.price for qq in quotes], axis=1)
        if k < nr:
            sl = provider.evaluate(n, x, strict=False)
            hit = active & sl.exercised
            if hit.any():
                g = provider.portfolio.payoff(x)
                B_ = B_ - np.where(hit, g, 0.0).sum(axis=1)
                tau = np.where(hit, k, tau)
                active = active & ~hit
            value = np.where(active, sl.y, 0.0).sum(axis=1)
        else:
            value = np.where(active, provider.portfolio.payoff(x), 0.0).sum(axis=1)
        hold = (a * S).sum(axis=1)
        if use_inst:
            hold = hold + (b * u).sum(axis=1)
        P[:, k] = -value + hold + B_
        if k < nr:
            a_new, b_new, res = _weights(cfg, sl, active, quotes, d, m)
            if res is not None:
                lsqr_fail += int((~res.converged).sum())
            B_ = B_ - ((a_new - a) * S).sum(axis=1)
            if use_inst:
                B_ = B_ - ((b_new - b) * u).sum(axis=1)
            a, b = a_new, b_new
        else:
            active = np.zeros_like(active)
        alpha[:, k], beta[:, k], bank[:, k], act_hist[:, k] = a, b, B_, active
    return P, bank, alpha, beta, act_hist, tau, price0, lsqr_fail


def run_hedge(cfg: HedgeConfig, provider, paths: PathEnsemble,
              chunk: int = PATH_CHUNK) -> HedgeLedger:
    """Backtest a strategy along simulated paths.

    ``provider`` is any object with ``portfolio``, ``grid`` and
    ``evaluate(n, x, strict)`` returning a GreekSlice: a trained solver
    artifact or a closed-form provider. ``paths`` must live on the
    provider's grid.
    """
    grid = provider.grid
    model = provider.portfolio.model
    if paths.grid != grid:
        raise ConfigError(f"paths grid {paths.grid} differs from solver grid {grid}")
    cfg.validate(model, grid)
    reb = grid.coarse_indices(cfg.rebalances)
    outs = [_run_chunk(cfg, provider, model, paths.states[s:s + chunk], reb, grid)
            for s in range(0, paths.n_paths, chunk)]
    P, bank, alpha, beta, act, tau, price0 = (np.concatenate([o[i] for o in outs])
                                              for i in range(7))
    fails = sum(o[7] for o in outs)
    J = provider.portfolio.J
    horizon = cfg.horizon or ("tau" if J == 1 else "T")
    nr = cfg.rebalances
    times = grid.times[reb]
    if horizon == "tau":
        h_idx = tau[:, 0] if J == 1 else tau.max(axis=1)
    else:
        h_idx = np.full(P.shape[0], nr)
    pnl_raw = P[np.arange(P.shape[0]), h_idx]
    valid = np.isfinite(P).all(axis=1) & np.isfinite(price0)
    return HedgeLedger(cfg.strategy, times, reb, P, bank, alpha, beta, act, tau,
                       price0, pnl_raw, times[h_idx], valid, fails, horizon)

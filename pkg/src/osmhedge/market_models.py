"""Forward diffusions, Euler-Maruyama path ensembles and their one-step
Malliavin derivatives.

Two models are supported, both simulated directly on asset prices:

* multi-asset Black-Scholes, ``mu(x) = mu_bar * x`` and
  ``sigma(x) = diag(sigma_bar * x) @ chol(corr)``;
* Heston on ``x = (s, nu)`` with the variance truncated by taking absolute
  values of the full next state.

Batched arrays put the batch axes first and the state axis last, so a batch
of states is ``(..., d)`` and a batch of diffusion matrices is ``(..., d, d)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, NotPositiveDefinite, SingularDiffusion

PIVOT_TOL = 1e-12
SINGULAR_TOL = 1e-10
PATH_BLOCK = 4096

# spawn-key tags for the independent random streams of one experiment seed
STREAM_PATHS = 0
STREAM_TRAIN = 1


def cholesky_factor(corr, tol: float = PIVOT_TOL) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == corr``.

    Raises NotPositiveDefinite when a pivot falls to ``tol`` or below.
    """
    c = np.array(corr, dtype=float, ndmin=2)
    if c.shape[0] != c.shape[1]:
        raise ConfigError(f"correlation matrix must be square, got {c.shape}")
    if not np.allclose(c, c.T, atol=1e-14):
        raise ConfigError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(c), 1.0, atol=1e-14):
        raise ConfigError("correlation matrix must have a unit diagonal")
    n = c.shape[0]
    L = np.zeros_like(c)
    for j in range(n):
        pivot = c[j, j] - L[j, :j] @ L[j, :j]
        if pivot <= tol:
            raise NotPositiveDefinite(
                f"pivot {pivot:.3e} at column {j} is not positive; "
                "the correlation input is invalid")
        L[j, j] = np.sqrt(pivot)
        L[j + 1:, j] = (c[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant partition ``t_n = n T / N`` of ``[0, T]``."""

    T: float
    N: int

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ConfigError(f"invalid time grid T={self.T}, N={self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def t(self, n: int) -> float:
        return n * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid node."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.N or abs(k * self.dt - t) > tol * max(1.0, self.T):
            raise ConfigError(f"time {t} is not on the grid T={self.T}, N={self.N}")
        return k

    def contains(self, t: float, tol: float = 1e-9) -> bool:
        try:
            self.index_of(t, tol)
        except ConfigError:
            return False
        return True

    def coarse_indices(self, n_coarse: int) -> np.ndarray:
        """Fine-grid indices of an equidistant sub-grid with ``n_coarse`` intervals."""
        if n_coarse < 1 or self.N % n_coarse:
            raise ConfigError(
                f"{n_coarse} rebalancing intervals do not divide the grid N={self.N}")
        return np.arange(n_coarse + 1) * (self.N // n_coarse)


@dataclass(frozen=True)
class HestonParams:
    kappa: float
    nu_bar: float
    rho: float
    eta: float

    @property
    def feller(self) -> bool:
        return 2.0 * self.kappa * self.nu_bar >= self.eta ** 2


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Parametrized forward diffusion.

    Build instances with :meth:`black_scholes` or :meth:`heston`.
    """

    kind: str
    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    q: np.ndarray
    r: float
    corr: np.ndarray
    x0: np.ndarray
    heston_params: Optional[HestonParams] = None
    singular_tol: float = SINGULAR_TOL
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "black_scholes":
            d = self.x0.shape[0]
            for name in ("mu_bar", "sigma_bar", "q"):
                if getattr(self, name).shape != (d,):
                    raise ConfigError(f"{name} must have length d={d}")
            if self.corr.shape != (d, d):
                raise ConfigError(f"corr must be {d}x{d}")
            chol = cholesky_factor(self.corr)
        elif self.kind == "heston":
            if self.x0.shape != (2,):
                raise ConfigError("Heston state is (s, nu), d=2")
            hp = self.heston_params
            if hp is None or not abs(hp.rho) < 1.0:
                raise ConfigError("Heston needs parameters with |rho| < 1")
            chol = cholesky_factor(self.corr)
        else:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        chol.setflags(write=False)
        object.__setattr__(self, "chol", chol)

    # -- constructors ---------------------------------------------------------
    @classmethod
    def black_scholes(cls, mu_bar, sigma_bar, r, x0, q=None, corr=None, **kw):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        d = x0.shape[0]
        vec = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (d,))
        corr = np.eye(d) if corr is None else np.asarray(corr, dtype=float)
        if np.ndim(corr) == 0:
            c = float(corr)
            corr = np.full((d, d), c)
            np.fill_diagonal(corr, 1.0)
        return cls("black_scholes", _frozen(vec(mu_bar)), _frozen(vec(sigma_bar)),
                   _frozen(vec(0.0 if q is None else q)), float(r),
                   _frozen(np.atleast_2d(corr)), _frozen(x0), **kw)

    @classmethod
    def heston(cls, mu_bar, r, kappa, nu_bar, rho, eta, x0, q=0.0,
               strict_feller=False, **kw):
        hp = HestonParams(float(kappa), float(nu_bar), float(rho), float(eta))
        if strict_feller and not hp.feller:
            raise ConfigError("Feller condition 2 kappa nu_bar >= eta^2 violated")
        rho_ = float(rho)
        return cls("heston", _frozen([float(mu_bar)]), _frozen([np.nan]),
                   _frozen([float(q)]), float(r),
                   _frozen([[1.0, rho_], [rho_, 1.0]]), _frozen(np.asarray(x0, float)),
                   heston_params=hp, **kw)

    # -- dimensions -----------------------------------------------------------
    @property
    def d(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return 1 if self.kind == "heston" else self.d

    # -- coefficients ---------------------------------------------------------
    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "black_scholes":
            return self.mu_bar * x
        hp = self.heston_params
        return np.stack([self.mu_bar[0] * x[..., 0],
                         hp.kappa * (hp.nu_bar - x[..., 1])], axis=-1)

    def diffusion(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "black_scholes":
            return (self.sigma_bar * x)[..., :, None] * self.chol
        hp = self.heston_params
        s, nu = x[..., 0], x[..., 1]
        sq = np.sqrt(np.abs(nu))
        a = np.sqrt(1.0 - hp.rho ** 2)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = a * sq * s
        out[..., 0, 1] = hp.rho * sq * s
        out[..., 1, 1] = hp.eta * sq
        return out

    def drift_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "black_scholes":
            return np.broadcast_to(np.diag(self.mu_bar), x.shape[:-1] + (self.d, self.d))
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = self.mu_bar[0]
        out[..., 1, 1] = -self.heston_params.kappa
        return out

    def diffusion_jacobian(self, t, x):
        """``J[..., c, k, b] = d sigma_{ck} / d x_b``."""
        x = np.asarray(x, dtype=float)
        d = self.d
        if self.kind == "black_scholes":
            out = np.zeros(x.shape[:-1] + (d, d, d))
            for c in range(d):
                out[..., c, :, c] = self.sigma_bar[c] * self.chol[c]
            return out
        hp = self.heston_params
        s, nu = x[..., 0], x[..., 1]
        sq = np.sqrt(np.abs(nu))
        a = np.sqrt(1.0 - hp.rho ** 2)
        half_inv = 0.5 / np.where(sq > 0, sq, np.inf)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = a * sq
        out[..., 0, 1, 0] = hp.rho * sq
        out[..., 0, 0, 1] = a * s * half_inv
        out[..., 0, 1, 1] = hp.rho * s * half_inv
        out[..., 1, 1, 1] = hp.eta * half_inv
        return out

    def malliavin_noise(self, t, x, dx_block, dw):
        """``sum_k grad(sigma^k)(t, x) @ dx_block * dw_k``, batched."""
        if self.kind == "black_scholes":
            scale = self.sigma_bar * (dw @ self.chol.T)
            return scale[..., :, None] * dx_block
        jac = self.diffusion_jacobian(t, x)
        return np.einsum("...ckb,...bl,...k->...cl", jac, dx_block, dw)

    def delta_diffusion_contraction(self, t, x, delta):
        """``C[..., j, a, b] = sum_c delta[..., j, c] d sigma_{ca} / d x_b``.

        This is the correction term that turns the network gamma into the
        Hessian of the value function.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "black_scholes":
            # d sigma_{ca}/d x_b = delta_{bc} sigma_bar_c chol_{ca}
            scaled = delta * self.sigma_bar                        # (..., J, b)
            return np.swapaxes(scaled[..., :, None] * self.chol, -1, -2)
        jac = self.diffusion_jacobian(t, x)
        return np.einsum("...jc,...cab->...jab", delta, jac)

    def singular_states(self, x) -> np.ndarray:
        """Boolean mask over the batch axes of states with a singular diffusion."""
        x = np.asarray(x, dtype=float)
        if self.kind == "black_scholes":
            return np.any(np.abs(self.sigma_bar * x) <= self.singular_tol, axis=-1)
        sq = np.sqrt(np.abs(x[..., 1]))
        return (sq <= self.singular_tol) | (np.abs(x[..., 0]) <= self.singular_tol)

    def _check_sigma(self, x, strict=True):
        bad = self.singular_states(x)
        if strict and np.any(bad):
            if self.kind == "black_scholes":
                raise SingularDiffusion("diffusion is singular: |sigma_bar_i x_i| <= tol")
            raise SingularDiffusion("Heston diffusion is singular: sqrt(nu) <= tol")
        return bad

    def apply_sigma_inverse(self, t, x, v, strict: bool = True):
        """Row-block product ``v @ inv(sigma(t, x))``.

        ``x`` has shape ``(..., d)`` and ``v`` has shape ``(..., J, d)``; no
        explicit inverse is formed for the Black-Scholes factor. With
        ``strict=False`` singular states yield NaN rows instead of raising.
        """
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        bad = self._check_sigma(x, strict)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "black_scholes":
                d = self.d
                # w @ chol = v  <=>  chol.T @ w.T = v.T
                flat = v.reshape(-1, d).T
                w = solve_triangular(self.chol.T, flat, lower=False).T.reshape(v.shape)
                out = w / (self.sigma_bar * x)[..., None, :]
            else:
                hp = self.heston_params
                a = np.sqrt(1.0 - hp.rho ** 2)
                s = x[..., 0][..., None]
                sq = np.sqrt(np.abs(x[..., 1]))[..., None]
                w0 = v[..., 0] / (a * sq * s)
                w1 = (a * v[..., 1] - hp.rho * v[..., 0]) / (a * hp.eta * sq)
                out = np.stack([w0, w1], axis=-1)
        if not strict and np.any(bad):
            out = np.where(bad[..., None, None], np.nan, out)
        return out

    def apply_sigma_inverse_transpose(self, t, x, m, strict: bool = True):
        """``inv(sigma).T @ m`` for a batch of ``(..., J, d, d)`` matrices."""
        mt = np.swapaxes(m, -1, -2)
        shape = mt.shape
        xb = np.broadcast_to(np.asarray(x, float)[..., None, :], shape[:-2] + (self.d,))
        res = self.apply_sigma_inverse(t, xb, mt, strict)
        return np.swapaxes(res.reshape(shape), -1, -2)

    def risk_premium_direction(self, t, x, strict: bool = True):
        """``u = inv(sigma) @ theta`` with ``theta_i = (mu_bar_i - r + q_i) x_i``
        on tradeables; the driver is ``f = -r y - z @ u``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "black_scholes":
            lam = (self.mu_bar - self.r + self.q) / self.sigma_bar
            u = solve_triangular(self.chol, lam, lower=True)
            return np.broadcast_to(u, x.shape)
        self._check_sigma(x, strict)
        hp = self.heston_params
        c = self.mu_bar[0] - self.r + self.q[0]
        a = np.sqrt(1.0 - hp.rho ** 2)
        sq = np.sqrt(np.abs(x[..., 1]))
        if c == 0.0:
            return np.zeros(x.shape)
        with np.errstate(divide="ignore"):
            return np.stack([c / (a * sq), np.zeros_like(sq)], axis=-1)

    def risk_premium_jacobian(self, t, x):
        """``du_a / dx_b`` as ``(..., d, d)``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.d, self.d))
        if self.kind == "heston":
            hp = self.heston_params
            c = self.mu_bar[0] - self.r + self.q[0]
            a = np.sqrt(1.0 - hp.rho ** 2)
            if c != 0.0:
                nu = np.abs(x[..., 1])
                with np.errstate(divide="ignore"):
                    out[..., 0, 1] = -0.5 * c / (a * nu ** 1.5)
        return out

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        out = {"kind": self.kind, "r": self.r, "x0": self.x0.tolist(),
               "mu_bar": self.mu_bar.tolist(), "q": self.q.tolist()}
        if self.kind == "black_scholes":
            out["sigma_bar"] = self.sigma_bar.tolist()
            out["corr"] = self.corr.tolist()
        else:
            hp = self.heston_params
            out.update(kappa=hp.kappa, nu_bar=hp.nu_bar, rho=hp.rho, eta=hp.eta)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        kind = data.pop("kind", None)
        try:
            if kind == "black_scholes":
                return cls.black_scholes(data["mu_bar"], data["sigma_bar"], data["r"],
                                         data["x0"], q=data.get("q"), corr=data.get("corr"))
            if kind == "heston":
                mu = data["mu_bar"]
                q = data.get("q", 0.0)
                return cls.heston(mu[0] if isinstance(mu, list) else mu, data["r"],
                                  data["kappa"], data["nu_bar"], data["rho"], data["eta"],
                                  data["x0"], q=q[0] if isinstance(q, list) else q,
                                  strict_feller=data.get("strict_feller", False))
        except KeyError as exc:
            raise ConfigError(f"model: missing field {exc.args[0]!r}") from None
        raise ConfigError(f"model: unknown kind {kind!r}")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    states: np.ndarray       # (n_paths, N + 1, d)
    increments: np.ndarray   # (n_paths, N, d)
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def dump_csv(self, path) -> None:
        d = self.states.shape[2]
        times = self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t"] + [f"x_{i + 1}" for i in range(d)])
            for p in range(self.n_paths):
                for n, t in enumerate(times):
                    w.writerow([p, n, repr(float(t))] + [repr(float(v)) for v in self.states[p, n]])


@dataclass(frozen=True, eq=False)
class MalliavinEnsemble:
    steps: np.ndarray        # time indices n covered
    d_xn: np.ndarray         # (n_paths, len(steps), d, d)   D_n X_n
    d_xn1: np.ndarray        # (n_paths, len(steps), d, d)   D_n X_{n+1}


def brownian_increments(seed: int, n_paths: int, n_steps: int, d: int, dt: float,
                        stream=(STREAM_PATHS,)) -> np.ndarray:
    """Brownian increments drawn block-wise from path-indexed substreams.

    Path ``p`` always lands in block ``p // PATH_BLOCK`` and receives the same
    draws whatever ``n_paths`` is.
    """
    out = np.empty((n_paths, n_steps, d))
    sd = np.sqrt(dt)
    for b0 in range(0, n_paths, PATH_BLOCK):
        nb = min(PATH_BLOCK, n_paths - b0)
        ss = np.random.SeedSequence(seed, spawn_key=tuple(stream) + (b0 // PATH_BLOCK,))
        rng = np.random.Generator(np.random.Philox(ss))
        out[b0:b0 + nb] = rng.standard_normal((nb, n_steps, d)) * sd
    return out


def euler_states(model: ModelSpec, grid: TimeGrid, dw: np.ndarray,
                 x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Run the Euler-Maruyama recursion over the increments ``dw``."""
    n_paths, n_steps, d = dw.shape
    x = np.empty((n_paths, n_steps + 1, d))
    x[:, 0] = model.x0 if x0 is None else x0
    dt = grid.dt
    bs = model.kind == "black_scholes"
    for n in range(n_steps):
        xn = x[:, n]
        t = grid.t(n)
        if bs:
            noise = (model.sigma_bar * xn) * (dw[:, n] @ model.chol.T)
            x[:, n + 1] = xn + model.drift(t, xn) * dt + noise
        else:
            trunc = np.stack([xn[:, 0], np.abs(xn[:, 1])], axis=-1)
            step = xn + model.drift(t, xn) * dt + np.einsum(
                "pij,pj->pi", model.diffusion(t, trunc), dw[:, n])
            x[:, n + 1] = np.abs(step)
    return x


def simulate_paths(model: ModelSpec, grid: TimeGrid, n_paths: int, seed: int) -> PathEnsemble:
    if n_paths < 1:
        raise ConfigError("n_paths must be positive")
    dw = brownian_increments(seed, n_paths, grid.N, model.d, grid.dt)
    states = euler_states(model, grid, dw)
    states.setflags(write=False)
    dw.setflags(write=False)
    return PathEnsemble(grid, states, dw, seed)


def malliavin_step(model: ModelSpec, t: float, dt: float, xn, dwn):
    """``(D_n X_n, D_n X_{n+1})`` for a batch of states and increments."""
    dxn = model.diffusion(t, xn)
    dxn1 = (dxn + dt * (model.drift_jacobian(t, xn) @ dxn)
            + model.malliavin_noise(t, xn, dxn, dwn))
    return dxn, dxn1


def simulate_malliavin(model: ModelSpec, paths: PathEnsemble,
                       steps: Optional[Sequence[int]] = None) -> MalliavinEnsemble:
    grid = paths.grid
    steps = np.arange(grid.N) if steps is None else np.asarray(steps, dtype=int)
    n_p, d = paths.n_paths, model.d
    d_xn = np.empty((n_p, len(steps), d, d))
    d_xn1 = np.empty_like(d_xn)
    for i, n in enumerate(steps):
        d_xn[:, i], d_xn1[:, i] = malliavin_step(
            model, grid.t(n), grid.dt, paths.states[:, n], paths.increments[:, n])
    return MalliavinEnsemble(steps, d_xn, d_xn1)

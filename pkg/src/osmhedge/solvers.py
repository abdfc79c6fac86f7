"""Backward deep BSDE solvers for collections of discretely reflected BSDEs.

Two schemes are provided:

* ``osm``: the One Step Malliavin scheme. At every time step a delta network
  ``psi`` and a gamma network ``chi`` are fitted to the Malliavin BSDE, then a
  price network ``phi`` is fitted to the (theta-implicit) value BSDE.
* ``rdbdp``: the reflected deep backward dynamic programming baseline, which
  fits ``phi`` and ``psi`` jointly and has no gamma network.

Both march backward from the terminal condition and warm-start each step from
the parameters of the step after it.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import nn
from .contracts import (ContractSpec, PortfolioSpec, driver, exercise_indicator,
                        reflect_y, reflect_z, terminal_z)
from .errors import ConfigError, IncompatibleArtifact, NonFiniteLoss
from .market_models import (STREAM_TRAIN, ModelSpec, TimeGrid, euler_states,
                            malliavin_step)

ROLES_OSM = ("y", "z", "gamma")
ROLES_RDBDP = ("y", "z")
MANIFEST = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Budget and hyper-parameters of a backward training run.

    ``iters_last`` SGD iterations are spent at the last step ``n = N-1``
    (random initialization), ``iters`` at every earlier step (transfer
    initialization). Each iteration draws ``batch`` fresh paths.
    """

    iters_last: int = 2 ** 16
    iters: int = 2 ** 12
    batch: int = 1024
    theta_y: float = 0.5
    seed: int = 0
    hidden_layers: int = 4
    width: int = 50
    lr: tuple = (1e-3, 1e-4, 1e-5)
    freeze_bn_affine: bool = True

    def __post_init__(self):
        if self.iters_last < 1 or self.iters < 1 or self.batch < 2:
            raise ConfigError("training budget and batch size must be positive (batch >= 2)")
        if not 0.0 <= self.theta_y <= 1.0:
            raise ConfigError("theta_y must lie in [0, 1]")
        self.lr = tuple(float(v) for v in self.lr)

    def budget(self, n: int, N: int) -> int:
        return self.iters_last if n == N - 1 else self.iters

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lr"] = list(self.lr)
        return out


@dataclass(eq=False)
class GreekSlice:
    """Prices and Greeks of every contract at a batch of states ``(B, d)``."""

    y_tilde: np.ndarray            # (B, J)
    y: np.ndarray                  # (B, J)
    z_tilde: np.ndarray            # (B, J, d)
    z: np.ndarray                  # (B, J, d)
    gamma_net: Optional[np.ndarray]  # (B, J, d, d), network Gamma
    delta: np.ndarray              # (B, J, d)
    gamma: Optional[np.ndarray]    # (B, J, d, d), Hessian of the value
    exercised: np.ndarray          # (B, J) reflection indicator


@dataclass(eq=False)
class SolverArtifact:
    scheme: str
    grid: TimeGrid
    portfolio: PortfolioSpec
    config: TrainConfig
    nets: Dict[str, List[nn.ParamSet]]
    losses: Dict[str, List[float]] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def model(self) -> ModelSpec:
        return self.portfolio.model

    @property
    def has_gamma(self) -> bool:
        return "gamma" in self.nets

    # -- evaluation -----------------------------------------------------------
    def _net(self, role, n, x):
        return nn.forward(self.nets[role][n], x)

    def continuation(self, n: int, x):
        """Network outputs ``(y_tilde, z_tilde, gamma)`` at step ``n < N``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        yt = self._net("y", n, x)
        zt = self._net("z", n, x)
        gm = self._net("gamma", n, x) if self.has_gamma else None
        return yt, zt, gm

    def evaluate(self, n: int, x, strict: bool = True) -> GreekSlice:
        """Greeks at grid index ``n`` for states ``(B, d)``.

        At ``n = N`` the terminal condition is used and no network runs;
        Gammas are then unavailable and returned as NaN.
        """
        model = self.model
        pf = self.portfolio
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = self.grid.t(n)
        B, d = x.shape
        J = pf.J
        if n == self.grid.N:
            y = pf.payoff(x)
            z = terminal_z(pf, t, x)
            delta = model.apply_sigma_inverse(t, x, z, strict)
            nan = np.full((B, J, d, d), np.nan)
            return GreekSlice(y, y, z, z, nan, delta, nan, np.zeros((B, J), bool))
        if not 0 <= n < self.grid.N:
            raise ConfigError(f"time index {n} outside 0..{self.grid.N}")
        yt, zt, gm = self.continuation(n, x)
        hit = exercise_indicator(pf, t, x, yt)
        y = reflect_y(pf, t, x, yt, hit)
        z = reflect_z(pf, t, x, yt, zt, hit)
        delta = model.apply_sigma_inverse(t, x, z, strict)
        gamma = None
        if gm is not None:
            gamma = hessian_from_gamma(model, t, x, gm, delta, strict)
        return GreekSlice(yt, y, zt, z, gm, delta, gamma, hit)

    def price0(self) -> np.ndarray:
        return self.evaluate(0, self.model.x0[None, :]).y[0]

    # -- persistence ----------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "scheme": self.scheme,
            "grid": {"T": self.grid.T, "N": self.grid.N},
            "portfolio": self.portfolio.to_dict(),
            "portfolio_hash": self.portfolio.content_hash(),
            "train": self.config.to_dict(),
            "seeds": {"train": self.config.seed},
            "losses": self.losses,
            "content_hash": self.content_hash(),
            "wall_time_s": self.wall_time,
        }

    def content_hash(self) -> str:
        """Hash of configuration, losses and every network array.

        Timing information is excluded so reruns with the same seed agree.
        """
        h = hashlib.sha256()
        meta = {"scheme": self.scheme, "grid": [self.grid.T, self.grid.N],
                "portfolio": self.portfolio.to_dict(), "train": self.config.to_dict(),
                "losses": self.losses}
        h.update(json.dumps(meta, sort_keys=True).encode())
        for role in sorted(self.nets):
            for p in self.nets[role]:
                for k in sorted(p.weights):
                    h.update(np.ascontiguousarray(p.weights[k]).tobytes())
                for k in sorted(p.running):
                    h.update(np.ascontiguousarray(p.running[k]).tobytes())
        return h.hexdigest()

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for role, lst in self.nets.items():
            for n, p in enumerate(lst):
                nn.save_params(directory / f"net_{role}_{n}.bin", p, role, n)
        with open(directory / MANIFEST, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return directory

    @classmethod
    def load(cls, directory) -> "SolverArtifact":
        directory = Path(directory)
        path = directory / MANIFEST
        if not path.exists():
            raise IncompatibleArtifact(f"{directory} holds no {MANIFEST}")
        with open(path) as fh:
            man = json.load(fh)
        if man.get("format_version") != FORMAT_VERSION:
            raise IncompatibleArtifact(f"unsupported artifact version {man.get('format_version')}")
        model = ModelSpec.from_dict(man["portfolio"]["model"])
        pf = PortfolioSpec(tuple(ContractSpec.from_dict(c) for c in man["portfolio"]["contracts"]),
                           model)
        grid = TimeGrid(man["grid"]["T"], man["grid"]["N"])
        train = man["train"]
        cfg = TrainConfig(**{**train, "lr": tuple(train["lr"])})
        roles = ROLES_OSM if man["scheme"] == "osm" else ROLES_RDBDP
        nets = {role: [nn.load_params(directory / f"net_{role}_{n}.bin", role, n)
                       for n in range(grid.N)] for role in roles}
        art = cls(man["scheme"], grid, pf, cfg, nets, man.get("losses", {}),
                  man.get("wall_time_s", 0.0))
        if art.content_hash() != man.get("content_hash"):
            raise IncompatibleArtifact(f"{directory}: network files do not match the manifest")
        return art


def hessian_from_gamma(model: ModelSpec, t, x, gamma_net, delta, strict=True):
    """Value Hessian ``inv(sigma).T (Gamma - C)`` with the diffusion-gradient
    correction ``C[a, b] = sum_c Delta_c d sigma_{ca} / d x_b``."""
    corr = model.delta_diffusion_contraction(t, x, delta)
    return model.apply_sigma_inverse_transpose(t, x, gamma_net - corr, strict)


# -- training batches ---------------------------------------------------------

@dataclass(eq=False)
class _Batch:
    xn: np.ndarray
    dw: np.ndarray
    xn1: np.ndarray
    valid: np.ndarray


def _draw_batch(model: ModelSpec, grid: TimeGrid, n: int, size: int, key) -> _Batch:
    """Fresh Euler paths up to ``t_{n+1}`` from the training substream ``key``."""
    ss = np.random.SeedSequence(key[0], spawn_key=(STREAM_TRAIN,) + tuple(key[1:]))
    rng = np.random.Generator(np.random.Philox(ss))
    dw = rng.standard_normal((size, n + 1, model.d)) * np.sqrt(grid.dt)
    xs = euler_states(model, grid, dw)
    return _Batch(xs[:, n], dw[:, n], xs[:, n + 1], np.ones(size, bool))


class _NextStep:
    """Reflected and continuation values of the already trained step ``n+1``."""

    def __init__(self, art_nets, pf: PortfolioSpec, grid: TimeGrid, n1: int):
        self.nets = art_nets
        self.pf = pf
        self.grid = grid
        self.n1 = n1

    def __call__(self, x):
        pf, t = self.pf, self.grid.t(self.n1)
        if self.n1 == self.grid.N:
            y = pf.payoff(x)
            z = terminal_z(pf, t, x)
            return y, y, z, z
        yt = nn.forward(self.nets["y"][self.n1], x)
        zt = nn.forward(self.nets["z"][self.n1], x)
        hit = exercise_indicator(pf, t, x, yt)
        return yt, reflect_y(pf, t, x, yt, hit), zt, reflect_z(pf, t, x, yt, zt, hit)


def _check_finite(loss, n):
    if not np.isfinite(loss):
        raise NonFiniteLoss(n, loss)


# -- OSM losses ---------------------------------------------------------------

@dataclass(eq=False)
class ZTarget:
    """Parameter-independent pieces of the Malliavin residual at step ``n``.

    The residual per contract row is ``const - psi + u @ (chi sigma_n)`` with
    ``u = dt grad_z f - dW``.
    """

    const: np.ndarray   # (B, J, d)
    u: np.ndarray       # (B, J, d)
    sigma_n: np.ndarray  # (B, d, d)
    valid: np.ndarray   # (B,)


def z_target(model: ModelSpec, pf: PortfolioSpec, grid: TimeGrid, n: int,
             batch: _Batch, nxt) -> ZTarget:
    dt = grid.dt
    t, t1 = grid.t(n), grid.t(n + 1)
    xn, xn1, dw = batch.xn, batch.xn1, batch.dw
    dxn, dxn1 = malliavin_step(model, t, dt, xn, dw)
    yt1, y1, zt1, z1 = nxt(xn1)
    with np.errstate(invalid="ignore", over="ignore"):
        # D_n Y_{n+1} = Z_{n+1} inv(sigma_{n+1}) D_n X_{n+1}, likewise for the continuation
        dy1 = model.apply_sigma_inverse(t1, xn1, z1, strict=False) @ dxn1
        dyt1 = model.apply_sigma_inverse(t1, xn1, zt1, strict=False) @ dxn1
        fe = driver(model, t1, xn1, yt1, z1)
        const = dy1 + dt * (fe.dx @ dxn1 + fe.dy[..., None] * dyt1)
        u = dt * fe.dz - dw[:, None, :]
    valid = batch.valid & np.all(np.isfinite(const), axis=(1, 2)) & np.all(np.isfinite(u), axis=(1, 2))
    const = np.where(valid[:, None, None], const, 0.0)
    u = np.where(valid[:, None, None], u, 0.0)
    return ZTarget(const, u, dxn, valid)


def loss_z(target: ZTarget, psi, chi):
    """OSM Malliavin loss and its gradients with respect to ``psi`` and ``chi``.

    ``psi`` is ``(B, J, d)``, ``chi`` is ``(B, J, d, d)``. The loss is the batch
    mean of ``(1/J) sum_j |R_j|^2`` over valid samples.
    """
    B, J, d = psi.shape
    M = chi @ target.sigma_n[:, None]                      # (B, J, d, d)
    R = target.const - psi + np.einsum("bja,bjak->bjk", target.u, M)
    R = R * target.valid[:, None, None]
    nb = max(int(target.valid.sum()), 1)
    loss = float(np.sum(R * R) / (nb * J))
    dR = 2.0 * R / (nb * J)
    dpsi = -dR
    dM = target.u[..., :, None] * dR[..., None, :]        # (B, J, a, k)
    dchi = dM @ np.swapaxes(target.sigma_n, -1, -2)[:, None]
    return loss, dpsi, dchi


@dataclass(eq=False)
class YTarget:
    """Parameter-independent pieces of the price residual at step ``n``."""

    base: np.ndarray    # (B, J): Y_{n+1} + (1-theta) dt f_{n+1}
    psi: np.ndarray     # (B, J, d) trained continuation Z at X_n
    zrefl: np.ndarray   # (B, J, d) payoff-gradient row grad g sigma at X_n
    refl_mask: np.ndarray  # (J,) reflection dates
    payoff: np.ndarray  # (B, J)
    u_n: np.ndarray     # (B, d) market price of risk at X_n
    dw: np.ndarray      # (B, d)
    valid: np.ndarray


def y_target(model, pf, grid, n, batch: _Batch, nxt, psi_n, theta_y) -> YTarget:
    dt = grid.dt
    t, t1 = grid.t(n), grid.t(n + 1)
    xn, xn1 = batch.xn, batch.xn1
    yt1, y1, zt1, z1 = nxt(xn1)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        f1 = driver(model, t1, xn1, yt1, z1).value
        base = y1 + (1.0 - theta_y) * dt * f1
        u_n = model.risk_premium_direction(t, xn, strict=False)
    mask = pf.reflection_mask(t)
    zrefl = terminal_z(pf, t, xn) if mask.any() else np.zeros_like(psi_n)
    valid = (batch.valid & np.all(np.isfinite(base), axis=1) & np.all(np.isfinite(u_n), axis=1)
             & np.all(np.isfinite(psi_n), axis=(1, 2)))
    base = np.where(valid[:, None], base, 0.0)
    u_n = np.where(valid[:, None], u_n, 0.0)
    return YTarget(base, psi_n, zrefl, mask, pf.payoff(xn), u_n, batch.dw, valid)


def loss_y(target: YTarget, phi, r: float, dt: float, theta_y: float):
    """Price loss and its gradient with respect to ``phi`` ``(B, J)``.

    ``Z_n`` is the trained continuation delta reflected with the exercise
    decision implied by the current ``phi``; it is held fixed when
    differentiating.
    """
    if target.refl_mask.any():
        hit = target.refl_mask & (target.payoff > phi)
        z = np.where(hit[..., None], target.zrefl, target.psi)
    else:
        z = target.psi
    zu = np.einsum("bjd,bd->bj", z, target.u_n)
    zdw = np.einsum("bjd,bd->bj", z, target.dw)
    f_n = -r * phi - zu
    res = target.base + theta_y * dt * f_n - phi - zdw
    res = res * target.valid[:, None]
    nb = max(int(target.valid.sum()), 1)
    loss = float(np.sum(res * res) / nb)
    dphi = 2.0 * res * (-1.0 - theta_y * dt * r) / nb
    return loss, dphi


def loss_rdbdp(model, pf, grid, n, batch: _Batch, nxt, phi, psi):
    """Joint price/delta loss of the reflected backward dynamic programming
    scheme, ``|Y_{n+1} + dt f(t_n, X_n, phi, psi) - phi - psi dW|^2`` summed
    over contracts."""
    dt, r = grid.dt, model.r
    xn, xn1, dw = batch.xn, batch.xn1, batch.dw
    _, y1, _, _ = nxt(xn1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_n = model.risk_premium_direction(grid.t(n), xn, strict=False)
    valid = batch.valid & np.all(np.isfinite(u_n), axis=1) & np.all(np.isfinite(y1), axis=1)
    u_n = np.where(valid[:, None], u_n, 0.0)
    y1 = np.where(valid[:, None], y1, 0.0)
    f = -r * phi - np.einsum("bjd,bd->bj", psi, u_n)
    res = y1 + dt * f - phi - np.einsum("bjd,bd->bj", psi, dw)
    res = res * valid[:, None]
    nb = max(int(valid.sum()), 1)
    loss = float(np.sum(res * res) / nb)
    g = 2.0 * res / nb
    dphi = g * (-1.0 - dt * r)
    dpsi = g[..., None] * (-dt * u_n[:, None, :] - dw[:, None, :])
    return loss, dphi, dpsi


# -- training loops -----------------------------------------------------------

def _specs(pf: PortfolioSpec, cfg: TrainConfig):
    d, J = pf.model.d, pf.J
    mk = lambda shape: nn.MLPSpec(d, shape, cfg.hidden_layers, cfg.width, True)
    return {"y": mk((J,)), "z": mk((J, d)), "gamma": mk((J, d, d))}


def _init_step(n, N, cfg, specs, roles, nets):
    if n == N - 1:
        out = {}
        for i, role in enumerate(roles):
            ss = np.random.SeedSequence(cfg.seed, spawn_key=(2, i))
            out[role] = nn.init_params(specs[role], np.random.Generator(np.random.Philox(ss)))
        return out
    return {role: nn.transfer_init(nets[role][n + 1], specs[role]) for role in roles}


def _trainable(params: nn.ParamSet, n, N, cfg):
    if cfg.freeze_bn_affine and n < N - 1:
        return [k for k in params.weights if not k.startswith(("gamma", "beta"))]
    return list(params.weights)


def _optimizer(params, n, N, cfg, iters):
    return nn.OptimizerState.for_params(params, nn.piecewise_lr(iters, cfg.lr),
                                        _trainable(params, n, N, cfg))


def _tail_mean(values, frac=0.1):
    k = max(1, int(len(values) * frac))
    return float(np.mean(values[-k:]))


def osm_train(portfolio: PortfolioSpec, grid: TimeGrid, cfg: TrainConfig,
              progress=None) -> SolverArtifact:
    """Backward OSM training over all steps ``n = N-1, ..., 0``."""
    portfolio.check_grid(grid)
    model = portfolio.model
    N, dt = grid.N, grid.dt
    specs = _specs(portfolio, cfg)
    nets = {role: [None] * N for role in ROLES_OSM}
    losses = {"z": [0.0] * N, "y": [0.0] * N}
    t0 = time.perf_counter()
    for n in range(N - 1, -1, -1):
        iters = cfg.budget(n, N)
        cur = _init_step(n, N, cfg, specs, ROLES_OSM, nets)
        nxt = _NextStep(nets, portfolio, grid, n + 1)

        pz, pg = cur["z"], cur["gamma"]
        oz, og = _optimizer(pz, n, N, cfg, iters), _optimizer(pg, n, N, cfg, iters)
        hist = []
        for i in range(iters):
            batch = _draw_batch(model, grid, n, cfg.batch, (cfg.seed, n, 0, i))
            tgt = z_target(model, portfolio, grid, n, batch, nxt)
            psi, cz = nn.forward(pz, batch.xn, training=True)
            chi, cg = nn.forward(pg, batch.xn, training=True)
            loss, dpsi, dchi = loss_z(tgt, psi, chi)
            _check_finite(loss, n)
            gz, _ = nn.backward(pz, cz, dpsi)
            gg, _ = nn.backward(pg, cg, dchi)
            nn.adam_step(oz, pz, gz)
            nn.adam_step(og, pg, gg)
            hist.append(loss)
        pz.frozen = pg.frozen = True
        losses["z"][n] = _tail_mean(hist)

        py = cur["y"]
        oy = _optimizer(py, n, N, cfg, iters)
        hist = []
        for i in range(iters):
            batch = _draw_batch(model, grid, n, cfg.batch, (cfg.seed, n, 1, i))
            psi_n = nn.forward(pz, batch.xn)
            tgt = y_target(model, portfolio, grid, n, batch, nxt, psi_n, cfg.theta_y)
            phi, cy = nn.forward(py, batch.xn, training=True)
            loss, dphi = loss_y(tgt, phi, model.r, dt, cfg.theta_y)
            _check_finite(loss, n)
            gy, _ = nn.backward(py, cy, dphi)
            nn.adam_step(oy, py, gy)
            hist.append(loss)
        py.frozen = True
        losses["y"][n] = _tail_mean(hist)
        for role in ROLES_OSM:
            nets[role][n] = cur[role]
        if progress is not None:
            progress(n, losses["z"][n], losses["y"][n])
    art = SolverArtifact("osm", grid, portfolio, cfg, nets, losses)
    art.wall_time = time.perf_counter() - t0
    return art


def rdbdp_train(portfolio: PortfolioSpec, grid: TimeGrid, cfg: TrainConfig,
                progress=None) -> SolverArtifact:
    """Backward RDBDP training; price and delta networks are fitted jointly."""
    portfolio.check_grid(grid)
    model = portfolio.model
    N = grid.N
    specs = _specs(portfolio, cfg)
    nets = {role: [None] * N for role in ROLES_RDBDP}
    losses = {"yz": [0.0] * N}
    t0 = time.perf_counter()
    for n in range(N - 1, -1, -1):
        iters = cfg.budget(n, N)
        cur = _init_step(n, N, cfg, specs, ROLES_RDBDP, nets)
        nxt = _NextStep(nets, portfolio, grid, n + 1)
        py, pz = cur["y"], cur["z"]
        oy, oz = _optimizer(py, n, N, cfg, iters), _optimizer(pz, n, N, cfg, iters)
        hist = []
        for i in range(iters):
            batch = _draw_batch(model, grid, n, cfg.batch, (cfg.seed, n, 2, i))
            phi, cy = nn.forward(py, batch.xn, training=True)
            psi, cz = nn.forward(pz, batch.xn, training=True)
            loss, dphi, dpsi = loss_rdbdp(model, portfolio, grid, n, batch, nxt, phi, psi)
            _check_finite(loss, n)
            gy, _ = nn.backward(py, cy, dphi)
            gz, _ = nn.backward(pz, cz, dpsi)
            nn.adam_step(oy, py, gy)
            nn.adam_step(oz, pz, gz)
            hist.append(loss)
        py.frozen = pz.frozen = True
        losses["yz"][n] = _tail_mean(hist)
        for role in ROLES_RDBDP:
            nets[role][n] = cur[role]
        if progress is not None:
            progress(n, losses["yz"][n], None)
    art = SolverArtifact("rdbdp", grid, portfolio, cfg, nets, losses)
    art.wall_time = time.perf_counter() - t0
    return art


def train(scheme: str, portfolio: PortfolioSpec, grid: TimeGrid, cfg: TrainConfig,
          progress=None) -> SolverArtifact:
    if scheme == "osm":
        return osm_train(portfolio, grid, cfg, progress)
    if scheme == "rdbdp":
        return rdbdp_train(portfolio, grid, cfg, progress)
    raise ConfigError(f"unknown scheme {scheme!r}")

"""Experiment configuration: one versioned JSON document describing the
model, the portfolio, the training budget, the hedge ladder and the
evaluation sample.

Parsing is strict: unknown keys, wrong types and inconsistent grids are
reported as ConfigError with the offending key path (and the line for
malformed JSON).
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .contracts import ContractSpec, PortfolioSpec
from .errors import ConfigError
from .hedging import STRATEGIES, BSVanilla, MargrabeExchange, index_set_preset
from .market_models import ModelSpec, TimeGrid
from .solvers import TrainConfig

SCHEMA_VERSION = 1
SCHEMES = ("osm", "rdbdp")
INSTRUMENT_KINDS = ("vanilla", "exchange", "trained")

_TOP_KEYS = {"schema_version", "name", "seed", "model", "contracts", "scheme", "grid",
             "train", "hedge", "evaluation", "closed_form_greeks"}
_HEDGE_KEYS = {"strategies", "rebalances", "index_set", "instruments", "horizon"}
_EVAL_KEYS = {"n_paths", "alphas", "kde_points", "dump_ledger"}
_TRAIN_KEYS = {"iters_last", "iters", "batch", "theta_y", "hidden_layers", "width", "lr",
               "freeze_bn_affine"}
_INSTRUMENT_KEYS = {
    "vanilla": {"kind", "asset", "strike", "maturity", "option"},
    "exchange": {"kind", "k", "j", "strike", "maturity"},
    "trained": {"kind", "option", "asset", "strike", "maturity", "grid"},
}


def _unknown(path: str, data: dict, allowed) -> None:
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(extra)}")


def _need(path: str, data: dict, key: str):
    if key not in data:
        raise ConfigError(f"{path}: missing key {key!r}")
    return data[key]


def _as_int(path: str, v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    return v


@dataclass(frozen=True)
class InstrumentSpec:
    """Declarative hedging instrument; ``build`` turns it into a priced object.

    ``trained`` instruments are single European contracts priced by their own
    OSM artifact, trained on a grid with the same step size as the main grid.
    """

    kind: str
    strike: float
    maturity: float
    asset: int = 0
    k: int = 0
    j: int = 1
    option: str = "put"
    grid: int = 0

    def to_dict(self) -> dict:
        keys = sorted(_INSTRUMENT_KEYS[self.kind])
        return {key: getattr(self, key) for key in keys}

    @classmethod
    def from_dict(cls, data: dict, path: str = "instrument") -> "InstrumentSpec":
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected an object")
        kind = _need(path, data, "kind")
        if kind not in INSTRUMENT_KINDS:
            raise ConfigError(f"{path}.kind: unknown instrument kind {kind!r}")
        _unknown(path, data, _INSTRUMENT_KEYS[kind])
        out = cls(kind, float(_need(path, data, "strike")), float(_need(path, data, "maturity")),
                  asset=_as_int(f"{path}.asset", data.get("asset", 0)),
                  k=_as_int(f"{path}.k", data.get("k", 0)),
                  j=_as_int(f"{path}.j", data.get("j", 1)),
                  option=data.get("option", "put"),
                  grid=_as_int(f"{path}.grid", data.get("grid", 0)))
        if kind == "vanilla" and out.option not in ("call", "put"):
            raise ConfigError(f"{path}.option: expected 'call' or 'put'")
        if kind == "trained":
            if out.option not in ("vanilla_call", "vanilla_put"):
                raise ConfigError(f"{path}.option: expected 'vanilla_call' or 'vanilla_put'")
            if out.grid < 1:
                raise ConfigError(f"{path}.grid: trained instruments need a positive grid size")
        return out

    def portfolio(self, model: ModelSpec) -> PortfolioSpec:
        return PortfolioSpec((ContractSpec(self.option, self.strike, self.maturity,
                                           (self.asset,)),), model)

    def build(self, model: ModelSpec, artifact=None):
        if self.kind == "vanilla":
            return BSVanilla(model, self.asset, self.strike, self.maturity, self.option)
        if self.kind == "exchange":
            return MargrabeExchange(model, self.k, self.j, self.strike, self.maturity)
        from .hedging import SolverPriced
        if artifact is None:
            raise ConfigError("trained instrument requested without its artifact")
        return SolverPriced(artifact, f"{self.option}K{self.strike:g}T{self.maturity:g}")


@dataclass
class HedgeSpec:
    strategies: Tuple[str, ...] = ("delta", "delta-gamma")
    rebalances: Tuple[int, ...] = (1, 2, 5, 10, 20, 100)
    index_set: object = "diagonal"         # preset name or explicit pairs
    instruments: Tuple[InstrumentSpec, ...] = ()
    horizon: Optional[str] = None

    def resolved_index_set(self, d: int, m: int):
        if isinstance(self.index_set, str):
            return index_set_preset(self.index_set, d, m)
        return tuple((int(i), int(l)) for i, l in self.index_set)

    def to_dict(self) -> dict:
        return {"strategies": list(self.strategies), "rebalances": list(self.rebalances),
                "index_set": (self.index_set if isinstance(self.index_set, str)
                              else [list(p) for p in self.index_set]),
                "instruments": [i.to_dict() for i in self.instruments],
                "horizon": self.horizon}


@dataclass
class EvalSpec:
    n_paths: int = 10000
    alphas: Tuple[float, ...] = (0.95, 0.99)
    kde_points: int = 512
    dump_ledger: bool = False

    def to_dict(self) -> dict:
        return {"n_paths": self.n_paths, "alphas": list(self.alphas),
                "kde_points": self.kde_points, "dump_ledger": self.dump_ledger}


@dataclass
class ExperimentConfig:
    name: str
    model: ModelSpec
    contracts: Tuple[ContractSpec, ...]
    grid: int
    scheme: str = "osm"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    hedge: HedgeSpec = field(default_factory=HedgeSpec)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    closed_form_greeks: bool = False

    # -- derived objects --------------------------------------------------------
    @property
    def portfolio(self) -> PortfolioSpec:
        return PortfolioSpec(self.contracts, self.model)

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.portfolio.T, self.grid)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train.to_dict(), "lr": tuple(self.train.lr),
                              "seed": self.seed})

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme: expected one of {SCHEMES}, got {self.scheme!r}")
        pf = self.portfolio
        grid = self.time_grid
        pf.check_grid(grid)
        for s in self.hedge.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"hedge.strategies: unknown strategy {s!r}")
        for nr in self.hedge.rebalances:
            if nr < 1 or grid.N % nr:
                raise ConfigError(f"hedge.rebalances: {nr} does not divide the grid N={grid.N}")
        d, m = self.model.d, self.model.m
        for i, l in self.hedge.resolved_index_set(d, m):
            if not (0 <= i < d and 0 <= l < d):
                raise ConfigError(f"hedge.index_set: pair ({i},{l}) outside 0..{d - 1}")
        for k, ins in enumerate(self.hedge.instruments):
            if ins.maturity <= pf.T:
                raise ConfigError(f"hedge.instruments[{k}]: maturity must exceed {pf.T}")
            if ins.kind == "trained":
                step = ins.maturity / ins.grid
                if abs(step - grid.dt) > 1e-9:
                    raise ConfigError(f"hedge.instruments[{k}]: grid step {step} differs "
                                      f"from the main grid step {grid.dt}")
        if self.evaluation.n_paths < 1:
            raise ConfigError("evaluation.n_paths must be positive")
        if not all(0.0 < a < 1.0 for a in self.evaluation.alphas):
            raise ConfigError("evaluation.alphas must lie in (0, 1)")

    # -- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        tr = self.train.to_dict()
        tr.pop("seed", None)
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "contracts": [c.to_dict() for c in self.contracts],
            "scheme": self.scheme,
            "grid": self.grid,
            "train": tr,
            "hedge": self.hedge.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "closed_form_greeks": self.closed_form_greeks,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        data = copy.deepcopy(data)
        _unknown("config", data, _TOP_KEYS)
        ver = data.get("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {ver!r}")
        try:
            model = ModelSpec.from_dict(_need("config", data, "model"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None
        raw_contracts = _need("config", data, "contracts")
        if not isinstance(raw_contracts, list) or not raw_contracts:
            raise ConfigError("contracts: expected a nonempty list")
        contracts = []
        for k, c in enumerate(raw_contracts):
            try:
                contracts.append(ContractSpec.from_dict(c))
            except ConfigError as exc:
                raise ConfigError(f"contracts[{k}]: {exc}") from None
        tr = data.get("train", {})
        _unknown("train", tr, _TRAIN_KEYS)
        train = TrainConfig(**{**tr, "lr": tuple(tr.get("lr", TrainConfig().lr))})
        h = data.get("hedge", {})
        _unknown("hedge", h, _HEDGE_KEYS)
        defaults = HedgeSpec()
        idx = h.get("index_set", defaults.index_set)
        if not isinstance(idx, str):
            idx = tuple((int(i), int(l)) for i, l in idx)
        hedge = HedgeSpec(
            strategies=tuple(h.get("strategies", defaults.strategies)),
            rebalances=tuple(_as_int("hedge.rebalances", v)
                             for v in h.get("rebalances", defaults.rebalances)),
            index_set=idx,
            instruments=tuple(InstrumentSpec.from_dict(v, f"hedge.instruments[{k}]")
                              for k, v in enumerate(h.get("instruments", []))),
            horizon=h.get("horizon"),
        )
        ev = data.get("evaluation", {})
        _unknown("evaluation", ev, _EVAL_KEYS)
        evaluation = EvalSpec(
            n_paths=_as_int("evaluation.n_paths", ev.get("n_paths", EvalSpec.n_paths)),
            alphas=tuple(float(a) for a in ev.get("alphas", EvalSpec.alphas)),
            kde_points=_as_int("evaluation.kde_points", ev.get("kde_points", EvalSpec.kde_points)),
            dump_ledger=bool(ev.get("dump_ledger", False)),
        )
        cfg = cls(
            name=str(data.get("name", "custom")),
            model=model,
            contracts=tuple(contracts),
            grid=_as_int("grid", _need("config", data, "grid")),
            scheme=data.get("scheme", "osm"),
            seed=_as_int("seed", data.get("seed", 0)),
            train=train,
            hedge=hedge,
            evaluation=evaluation,
            closed_form_greeks=bool(data.get("closed_form_greeks", False)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            return cls.from_json(text)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None

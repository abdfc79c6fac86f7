"""Command-line front end: ``train``, ``hedge``, ``report``, ``margrabe-check``
and ``presets list``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import presets
from .closed_form import ClosedFormGreeks, margrabe
from .config import ExperimentConfig
from .errors import (ConfigError, DegenerateSample, IncompatibleArtifact, NoReports,
                     NumericError, OSMHedgeError)
from .hedging import STRATEGIES, HedgeConfig, run_hedge
from .market_models import TimeGrid, simulate_paths
from .risk import (REPORT_COLUMNS, kde, pnl, report_row, risk_measures, write_kde_csv,
                   write_report_csv)
from .solvers import SolverArtifact, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
ARTIFACT_DIR = "artifact"
REPORT_FILE = "report.csv"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- configuration ------------------------------------------------------------

def _csv_ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma separated list of integers, got {text!r}") from None


def build_config(args) -> ExperimentConfig:
    """Preset or config file with command-line overrides applied."""
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno}, column {exc.colno}: "
                              f"{exc.msg}") from None
    elif getattr(args, "preset", None):
        doc = presets.preset_document(args.preset)
    else:
        raise ConfigError("pass --preset or --config")
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    tr = doc.setdefault("train", {})
    hd = doc.setdefault("hedge", {})
    ev = doc.setdefault("evaluation", {})
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.scheme is not None:
        doc["scheme"] = args.scheme
    if args.grid is not None:
        doc["grid"] = args.grid
        if args.rebalances is None and "rebalances" in hd:
            # keep the rebalancing counts that still fit the new grid
            hd["rebalances"] = [n for n in hd["rebalances"] if args.grid % n == 0]
    if args.paths_per_step is not None:
        tr["batch"] = args.paths_per_step
    if args.steps is not None:
        tr["iters_last"] = args.steps
        tr["iters"] = args.steps_transfer or max(1, args.steps // 4)
    elif args.steps_transfer is not None:
        tr["iters"] = args.steps_transfer
    if args.strategy is not None:
        hd["strategies"] = [args.strategy]
    if args.rebalances is not None:
        hd["rebalances"] = _csv_ints(args.rebalances)
    if args.index_set is not None:
        hd["index_set"] = args.index_set
    if args.instruments is not None:
        if args.instruments != "none":
            raise ConfigError("--instruments accepts only 'none'; declare instruments in the config")
        hd["instruments"] = []
    if args.n_paths is not None:
        ev["n_paths"] = args.n_paths
    if args.closed_form_greeks:
        doc["closed_form_greeks"] = True
    if args.dump_ledger:
        ev["dump_ledger"] = True
    return ExperimentConfig.from_dict(doc)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train --------------------------------------------------------------------

def _progress(label: str):
    def cb(n, la, lb):
        tail = "" if lb is None else f" / {lb:.4e}"
        _log(f"[{label}] step {n}: loss {la:.4e}{tail}")
    return cb


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args)
    (out / "config.json").write_text(cfg.to_json())
    tcfg = cfg.train_config()
    t0 = time.perf_counter()
    art = train(cfg.scheme, cfg.portfolio, cfg.time_grid, tcfg, progress=_progress("main"))
    art.save(out / ARTIFACT_DIR)
    _log(f"trained {cfg.scheme} on N={cfg.grid}: Y0 = {art.price0()} "
         f"({time.perf_counter() - t0:.1f}s)")
    for k, ins in enumerate(cfg.hedge.instruments):
        if ins.kind != "trained":
            continue
        a = train("osm", ins.portfolio(cfg.model), TimeGrid(ins.maturity, ins.grid), tcfg,
                  progress=_progress(f"instrument {k}"))
        a.save(out / f"instrument_{k}")
    print(out / ARTIFACT_DIR)
    return EXIT_OK


# -- hedge --------------------------------------------------------------------

def _provider(cfg: ExperimentConfig, args, out: Path):
    if cfg.closed_form_greeks:
        return ClosedFormGreeks(cfg.portfolio, cfg.time_grid)
    art = SolverArtifact.load(Path(args.artifact) if args.artifact else out / ARTIFACT_DIR)
    want = cfg.portfolio.content_hash()
    if art.portfolio.content_hash() != want:
        raise IncompatibleArtifact(f"artifact portfolio hash {art.portfolio.content_hash()} "
                                   f"does not match the config ({want})")
    if art.grid != cfg.time_grid:
        raise IncompatibleArtifact(f"artifact grid N={art.grid.N} differs from config "
                                   f"grid N={cfg.grid}")
    return art


def _instruments(cfg: ExperimentConfig, args, out: Path):
    base = Path(args.artifact).parent if args.artifact else out
    built = []
    for k, ins in enumerate(cfg.hedge.instruments):
        art = None
        if ins.kind == "trained":
            art = SolverArtifact.load(base / f"instrument_{k}")
        built.append(ins.build(cfg.model, art))
    return built


def run_ladder(cfg: ExperimentConfig, provider, instruments, out: Optional[Path] = None):
    """Hedge every (strategy, N) pair on one path ensemble; returns report rows."""
    d, m = cfg.model.d, cfg.model.m
    idx = cfg.hedge.resolved_index_set(d, m)
    for s in cfg.hedge.strategies:
        if s in ("delta-gamma", "second-order") and idx and not provider.has_gamma:
            raise ConfigError(f"strategy {s} needs Gammas, which a {cfg.scheme} artifact "
                              "does not provide; train with --scheme osm")
    paths = simulate_paths(cfg.model, cfg.time_grid, cfg.evaluation.n_paths, cfg.seed)
    rows = []
    for strategy in cfg.hedge.strategies:
        for nr in cfg.hedge.rebalances:
            hc = HedgeConfig(strategy, nr, idx if strategy != "delta" else (),
                             list(instruments) if strategy != "delta" else [],
                             cfg.hedge.horizon)
            ledger = run_hedge(hc, provider, paths)
            sample = pnl(ledger, cfg.model.r)
            rep = risk_measures(sample, cfg.evaluation.alphas)
            rows.append(report_row(strategy, nr, rep))
            if out is not None:
                try:
                    xs, ds = kde(sample, cfg.evaluation.kde_points)
                    write_kde_csv(out / f"kde_{strategy}_N{nr}.csv", xs, ds)
                except DegenerateSample as exc:
                    _log(f"skipping density for {strategy} N={nr}: {exc}")
                if cfg.evaluation.dump_ledger:
                    ledger.dump_csv(out / f"ledger_{strategy}_N{nr}.csv")
                if ledger.lsqr_failures:
                    _log(f"{strategy} N={nr}: {ledger.lsqr_failures} LSQR systems "
                         "did not converge")
    return rows


def cmd_hedge(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args)
    provider = _provider(cfg, args, out)
    instruments = _instruments(cfg, args, out)
    rows = run_ladder(cfg, provider, instruments, out)
    header = [f"preset={cfg.name}", f"seed={cfg.seed}", f"config={config_hash(cfg)}",
              f"greeks={'closed-form' if cfg.closed_form_greeks else cfg.scheme}"]
    write_report_csv(out / REPORT_FILE, rows, header)
    for r in rows:
        print(f"{r['strategy']:>13} N={r['N_rebalance']:<4d} var={r['variance']:.3e} "
              f"VaR95={r['var95']:+.3e} ES95={r['es95']:+.3e}")
    return EXIT_OK


# -- report -------------------------------------------------------------------

def read_report(path: Path):
    """Rows of one report file, with the preset taken from its header."""
    preset = path.parent.name or str(path)
    lines = path.read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key == "preset":
                preset = val
        elif line.strip():
            body.append(line)
    reader = csv.reader(body)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise ConfigError(f"{path}: empty report") from None
    if tuple(header) != tuple(c.lower() for c in REPORT_COLUMNS):
        raise ConfigError(f"{path}: unexpected columns {header}")
    rows = []
    for rec in reader:
        row = dict(zip(header, rec))
        row["preset"] = preset
        row["N_rebalance"] = int(row["n_rebalance"])
        del row["n_rebalance"]
        rows.append(row)
    return rows


def _collect(inputs) -> List[Path]:
    files = []
    for p in map(Path, inputs):
        if p.is_dir():
            files.extend(sorted(p.rglob(REPORT_FILE)))
        elif p.is_file():
            files.append(p)
        else:
            raise ConfigError(f"{p}: no such file or directory")
    return files


MERGED_COLUMNS = ("preset",) + REPORT_COLUMNS


def merge_reports(inputs):
    files = _collect(inputs)
    if not files:
        raise NoReports("no report files found in " + ", ".join(map(str, inputs)))
    rows = [r for f in files for r in read_report(f)]
    strat_order = {s: i for i, s in enumerate(STRATEGIES)}
    rows.sort(key=lambda r: (r["preset"], strat_order.get(r["strategy"], 99), r["strategy"],
                             r["N_rebalance"]))
    return rows


def side_by_side(rows, metrics=("mean", "variance", "var95", "es95", "semivariance")):
    """One line per (preset, N) with one column group per strategy."""
    strategies = []
    for r in rows:
        if r["strategy"] not in strategies:
            strategies.append(r["strategy"])
    keyed = {(r["preset"], r["N_rebalance"], r["strategy"]): r for r in rows}
    header = ["preset", "N_rebalance"] + [f"{s}:{m}" for s in strategies for m in metrics]
    table = []
    for preset, n in sorted({(r["preset"], r["N_rebalance"]) for r in rows}):
        line = [preset, str(n)]
        for s in strategies:
            r = keyed.get((preset, n, s))
            line += [r[m] if r else "" for m in metrics]
        table.append(line)
    return header, table


def _write_table(path: Path, header, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(table)


def _markdown(header, table) -> str:
    def fmt(v):
        try:
            return f"{float(v):.2E}"
        except ValueError:
            return v
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(fmt(v) if i > 1 else v for i, v in enumerate(line)) + " |"
            for line in table]
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    rows = merge_reports(args.inputs)
    out = _out_dir(args)
    _write_table(out / "merged.csv", MERGED_COLUMNS,
                 [[str(r[c]) for c in MERGED_COLUMNS] for r in rows])
    header, table = side_by_side(rows)
    _write_table(out / "comparison.csv", header, table)
    ch, ct = side_by_side(rows, ("var95",))
    _write_table(out / "convergence.csv", ch, ct)
    if args.markdown:
        (out / "comparison.md").write_text(_markdown(header, table))
        (out / "convergence.md").write_text(_markdown(ch, ct))
    print(out / "merged.csv")
    return EXIT_OK


# -- margrabe-check -------------------------------------------------------------

def margrabe_check(n_draws: int = 50, seed: int = 0, h_rel: float = 1e-4):
    """Largest relative finite-difference mismatch of the exchange-option
    derivatives, the cross-derivative asymmetry and the homogeneity defect."""
    rng = np.random.default_rng(seed)
    worst_fd = worst_sym = worst_hom = 0.0
    for _ in range(n_draws):
        sk, sj = rng.uniform(50, 150, 2)
        K = rng.uniform(0.5, 1.5)
        vk, vj = rng.uniform(0.1, 0.5, 2)
        rho = rng.uniform(-0.8, 0.8)
        qk, qj = rng.uniform(0, 0.05, 2)
        tau = rng.uniform(0.2, 2.0)
        f = lambda a, b: margrabe(a, b, K, vk, vj, rho, qk, qj, tau)
        e = f(sk, sj)
        hk, hj = h_rel * sk, h_rel * sj
        pk, mk = f(sk + hk, sj), f(sk - hk, sj)
        pj, mj = f(sk, sj + hj), f(sk, sj - hj)
        pairs = [
            (e.dk, (pk.price - mk.price) / (2 * hk)),
            (e.dj, (pj.price - mj.price) / (2 * hj)),
            (e.dkk, (pk.dk - mk.dk) / (2 * hk)),
            (e.djk, (pj.dk - mj.dk) / (2 * hj)),
            (e.dkj, (pk.dj - mk.dj) / (2 * hk)),
            (e.djj, (pj.dj - mj.dj) / (2 * hj)),
        ]
        for exact, fd in pairs:
            worst_fd = max(worst_fd, abs(exact - fd) / max(abs(exact), 1e-8))
        worst_sym = max(worst_sym, abs(e.dkj - e.djk) / max(abs(e.dkj), 1e-300))
        hom = sk * e.dk + sj * e.dj - e.price
        worst_hom = max(worst_hom, abs(hom) / max(abs(e.price), 1.0))
    return float(worst_fd), float(worst_sym), float(worst_hom)


def cmd_margrabe(args) -> int:
    fd, sym, hom = margrabe_check(args.draws, args.seed if args.seed is not None else 0)
    ok = fd < 1e-4 and sym < 1e-12 and hom < 1e-10
    print(f"finite differences: max rel err {fd:.2e} (tol 1e-4)")
    print(f"cross-derivative symmetry: max rel err {sym:.2e} (tol 1e-12)")
    print(f"homogeneity: max rel err {hom:.2e} (tol 1e-10)")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- presets ------------------------------------------------------------------

def cmd_presets(args) -> int:
    if args.action == "show":
        if not args.name:
            raise ConfigError("presets show needs a preset name")
        print(presets.load_preset(args.name).to_json(), end="")
        return EXIT_OK
    for name, text, variants in presets.describe():
        print(f"{name:15s} {text}")
        if variants:
            print(f"{'':15s}   variants: {variants}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="built-in config, e.g. fig1-bs-1d or ex2-basket:d=5")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--grid", type=int, help="number of fine time steps N'")
    p.add_argument("--scheme", choices=("osm", "rdbdp"))
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--rebalances", help="comma separated rebalancing counts")
    p.add_argument("--closed-form-greeks", action="store_true",
                   help="use analytic Greeks instead of a trained artifact")
    p.add_argument("--paths-per-step", type=int, help="training batch size")
    p.add_argument("--steps", type=int, help="SGD iterations at the last time step")
    p.add_argument("--steps-transfer", type=int,
                   help="SGD iterations at earlier time steps (default: --steps / 4)")
    p.add_argument("--index-set", help="hedged Hessian entries: empty, diagonal, upper, "
                                       "full, vomma or all")
    p.add_argument("--instruments", help="'none' drops every hedging instrument")
    p.add_argument("--n-paths", type=int, help="evaluation sample size")
    p.add_argument("--artifact", help="trained artifact directory (default OUT/artifact)")
    p.add_argument("--dump-ledger", action="store_true", help="write per-path ledgers")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="osmhedge", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a deep BSDE solver")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("hedge", help="backtest hedging strategies and write reports")
    _add_config_flags(p)
    p.set_defaults(func=cmd_hedge)
    p = sub.add_parser("report", help="merge report files into comparison tables")
    p.add_argument("inputs", nargs="+", help="report files or directories")
    p.add_argument("--out", default="out/report")
    p.add_argument("--markdown", action="store_true")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("margrabe-check", help="verify the exchange-option Greeks")
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_margrabe)
    p = sub.add_parser("presets", help="list or show built-in configs")
    p.add_argument("action", choices=("list", "show"))
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except OSMHedgeError as exc:
        _log(f"error: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

    cbma SUBCOMMAND [--config FILE] [--alpha F] [--n INT] ... [--out DIR]

Settings come from a flat ``key = value`` file, overridden by flags; the
``CBMA_SEED`` environment variable is consulted only when neither sets a seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .conformal import LabelGrid, full_conformal_set
from .errors import CBMAError, ConfigError
from .experiments import (
    QUADRATIC_PRIOR_MEAN,
    GeneratorSpec,
    consecutive_pairs,
    convergence_study,
    default_csv_path,
    generate,
    hermite_space,
    pairs_space,
    quadratic_space,
    read_csv,
    run_experiment,
)
from .linear import fit_model

SUBCOMMANDS = ("simulate-quadratic", "simulate-hermite", "run-csv", "convergence", "predict-one")


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _models(text):
    """``1,2; 2,3`` -> ((0, 1), (1, 2)): 1-based covariate positions per model."""
    out = []
    for part in text.split(";"):
        if part.strip():
            cols = _ints(part)
            if any(c < 1 for c in cols):
                raise ValueError("model columns are 1-based")
            out.append(tuple(c - 1 for c in cols))
    if not out:
        raise ValueError("empty model list")
    return tuple(out)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    subcommand: str = ""
    alpha: Optional[float] = None
    n: int = 100
    reps: int = 50
    draws: int = 4000
    grid_points: int = 200
    grid_expand: float = 0.5
    seed: Optional[int] = None
    threads: int = 0
    out: str = "results"
    test_fraction: float = 0.4
    theta: float = 1.0
    K: int = 11
    noise_sd: float = 0.2
    prior_sd: float = 5.0
    noise_scale: float = 1.0
    csv: str = ""
    response: str = "y"
    covariates: tuple = ()
    models: tuple = ()
    n_list: tuple = (50, 200, 800)
    test_x: tuple = ()
    exact: bool = False
    record_times: bool = False

    def validate(self) -> "RunConfig":
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
        if self.alpha is None:
            raise ConfigError("alpha is required (set `alpha = ...` in the config or pass --alpha)")
        checks = [
            ("alpha", 0 < self.alpha < 1, "must lie in (0, 1)"),
            ("draws", self.draws >= 100, "must be >= 100"),
            ("grid_points", self.grid_points >= 10, "must be >= 10"),
            ("grid_expand", self.grid_expand > 0, "must be > 0"),
            ("n", self.n >= 4, "must be >= 4"),
            ("reps", self.reps >= 1, "must be >= 1"),
            ("threads", self.threads >= 0, "must be >= 0 (0 = all cores)"),
            ("test_fraction", 0 < self.test_fraction < 1, "must lie in (0, 1)"),
            ("K", self.K >= 1, "must be >= 1"),
            ("noise_sd", self.noise_sd > 0, "must be > 0"),
            ("prior_sd", self.prior_sd > 0, "must be > 0"),
            ("noise_scale", self.noise_scale > 0, "must be > 0"),
            ("n_list", len(self.n_list) > 0 and min(self.n_list) >= 4, "needs sizes >= 4"),
        ]
        for key, ok, bound in checks:
            if not ok:
                raise ConfigError(f"{key} {bound} (got {getattr(self, key)!r})")
        if self.subcommand == "predict-one" and not self.test_x:
            raise ConfigError("predict-one needs test_x (comma-separated covariate row)")
        return self


PARSERS = {
    "alpha": float, "n": int, "reps": int, "draws": int, "grid_points": int, "grid_expand": float,
    "seed": int, "threads": int, "out": str, "test_fraction": float, "theta": float, "K": int,
    "noise_sd": float, "prior_sd": float, "noise_scale": float, "csv": str, "response": str,
    "covariates": _names, "models": _models, "n_list": _ints, "test_x": _floats, "exact": _bool,
    "record_times": _bool,
}
VALID_KEYS = sorted(PARSERS)


def _parse_value(key, raw, where):
    try:
        return PARSERS[key](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {key} = {raw.strip()!r} ({exc})") from None


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected `key = value`")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in PARSERS:
            raise ConfigError(f"{path} line {lineno}: unknown key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
        values[key] = _parse_value(key, raw, f"{path} line {lineno}")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbma", description="Conformal Bayesian model averaging experiments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value settings file")
    for flag, key in [("--alpha", "alpha"), ("--n", "n"), ("--reps", "reps"), ("--draws", "draws"),
                      ("--grid-points", "grid_points"), ("--grid-expand", "grid_expand"), ("--seed", "seed"),
                      ("--threads", "threads"), ("--out", "out"), ("--theta", "theta"), ("--csv", "csv"),
                      ("--response", "response"), ("--covariates", "covariates"), ("--models", "models"),
                      ("--n-list", "n_list"), ("--test-x", "test_x"), ("--test-fraction", "test_fraction")]:
        p.add_argument(flag, dest=key, metavar=key.upper())
    p.add_argument("--exact", dest="exact", action="store_const", const="true")
    p.add_argument("--record-times", dest="record_times", action="store_const", const="true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None, environ=None) -> RunConfig:
    """Defaults < CBMA_SEED (seed only) < config file < flags."""
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    values = {}
    if environ.get("CBMA_SEED"):
        values["seed"] = _parse_value("seed", environ["CBMA_SEED"], "CBMA_SEED")
    if args.config:
        values.update(read_config_file(args.config))
    for key in PARSERS:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = _parse_value(key, raw, f"--{key.replace('_', '-')}")
    return RunConfig(subcommand=args.subcommand, **values).validate()


def _threads(cfg: RunConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def _csv_space(cfg: RunConfig, d: int):
    pairs = cfg.models or (consecutive_pairs(min(4, d - 1)) if d > 1 else ((0,),))
    if any(c >= d for cols in pairs for c in cols):
        raise ConfigError(f"models reference covariate positions beyond d={d}")
    return pairs_space(pairs, cfg.prior_sd, cfg.noise_scale)


def _write_outputs(cfg: RunConfig, report):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv", record_times=cfg.record_times)
    report.write_summary(out / "summary.json", config=_config_echo(cfg))
    print(f"wrote {out / 'report.csv'} and {out / 'summary.json'}")


def _config_echo(cfg: RunConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def _experiment(cfg: RunConfig, generator, space):
    report = run_experiment(generator, space, cfg.alpha, cfg.reps, cfg.test_fraction, cfg.draws,
                            cfg.grid_expand, cfg.grid_points, cfg.seed, _threads(cfg), cfg.exact)
    _write_outputs(cfg, report)


def _format_set(s) -> str:
    if s.empty:
        return "empty"
    return " U ".join(f"[{a:.4f}, {b:.4f}]" for a, b in s.intervals())


def _predict_one(cfg: RunConfig):
    path = cfg.csv or default_csv_path()
    data = read_csv(path, cfg.response, cfg.covariates or None)
    x_test = np.asarray(cfg.test_x, dtype=float)
    if x_test.size != data.d:
        raise ConfigError(f"test_x has {x_test.size} values but the data has {data.d} covariates")
    # fit on standardized data; report the sets back in response units
    mx, sx = data.x.mean(axis=0), data.x.std(axis=0, ddof=1)
    my, sy = data.y.mean(), data.y.std(ddof=1)
    train = data.standardize()
    space = _csv_space(cfg, data.d)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(space))
    fits = [fit_model(train, spec, cfg.draws, np.random.default_rng(s)) for spec, s in zip(space, seeds)]
    grid = LabelGrid.from_training(train.y, cfg.grid_expand, cfg.grid_points)
    res = full_conformal_set(fits, (x_test - mx) / sx, grid, cfg.alpha, space, exact=cfg.exact)
    unit = LabelGrid(my + sy * grid.values, sy * grid.spacing)

    def show(name, s):
        s = type(s)(unit, s.included, s.alpha, s.metadata)
        print(f"{name}: {_format_set(s)}  length={s.length():.4f}")

    show("CBMA", res.cbma)
    for name, s in zip(space.names, res.per_model):
        show(f"CB-{name}", s)
    inc = res.cbma.included
    q = res.table.agg_weights[inc].mean(axis=0) if inc.any() else res.table.agg_weights[~res.table.degenerate].mean(axis=0)
    print("posterior model probabilities: " + " ".join(f"{n}={p:.4f}" for n, p in zip(space.names, res.posterior.probs)))
    print("mean q over CBMA set: " + " ".join(f"{n}={v:.4f}" for n, v in zip(space.names, q)))
    print(f"degenerate grid points: {res.cbma.metadata['degenerate_points']}")


def run(cfg: RunConfig):
    if cfg.subcommand == "simulate-quadratic":
        _experiment(cfg, GeneratorSpec("quadratic", n=cfg.n, noise_sd=cfg.noise_sd), quadratic_space(cfg.noise_sd))
    elif cfg.subcommand == "simulate-hermite":
        _experiment(cfg, GeneratorSpec("hermite", n=cfg.n, theta=cfg.theta),
                    hermite_space(cfg.K, cfg.prior_sd, cfg.noise_scale))
    elif cfg.subcommand == "run-csv":
        gen = GeneratorSpec("csv", n=cfg.n, path=cfg.csv or default_csv_path(), response=cfg.response,
                            covariates=cfg.covariates or None)
        d = generate(gen).d
        _experiment(cfg, gen, _csv_space(cfg, d))
    elif cfg.subcommand == "convergence":
        truth = GeneratorSpec("quadratic", n=cfg.n, noise_sd=cfg.noise_sd, beta=QUADRATIC_PRIOR_MEAN)
        result = convergence_study(truth, quadratic_space(cfg.noise_sd), cfg.n_list, cfg.reps, true_index=0,
                                   T=cfg.draws, grid_expand=cfg.grid_expand, grid_points=cfg.grid_points,
                                   seed=cfg.seed, threads=_threads(cfg))
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.json", "w") as fh:
            json.dump({"q_true": {str(n): v for n, v in result.items()}, "config": _config_echo(cfg)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        for n, v in result.items():
            print(f"n={n}: median q_true={v['median']:.4f} (Q1 {v['q1']:.4f}, Q3 {v['q3']:.4f})")
    else:
        _predict_one(cfg)


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        argv_seen = sys.argv[1:] if argv is None else argv
        verbose = any(a in ("-v", "--verbose") for a in argv_seen)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(message)s")
        run(cfg)
    except CBMAError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

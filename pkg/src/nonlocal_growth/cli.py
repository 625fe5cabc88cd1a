"""Command-line entry points: simulate, infer, converge, diagnose.

Configuration is a flat JSON object; any key can be overridden by a flag.
Precedence is flags > config file > defaults.  Every command writes a
``manifest.json`` holding the fully resolved configuration, which can be fed
back through ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    CELL_LINES,
    Dataset,
    DatasetError,
    builtin_priors,
    builtin_sigma_tilde_ratio,
    load_dataset,
    parse_window,
)
from .inference import (
    PARAM_NAMES,
    Chain,
    PriorSpec,
    diagnostics,
    map_estimate,
    posterior_predictive,
    read_chain_csv,
    run_chain,
    write_chain_csv,
    write_diagnostics_json,
    write_predictive_csv,
)
from .measures import tail_mass
from .model import DiscretizationConfig, ModelParams, default_r_max, front_speed, initial_masses
from .solver import (
    QuantileConfig,
    SolverInstabilityError,
    convergence_study,
    integrate,
    write_state_dump_csv,
    write_trajectory_csv,
)

log = logging.getLogger("nonlocal_growth")

TRUNCATION_FRACTION = 0.9
TRUNCATION_TOL = 1e-6


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    # model / prior
    cell_line: str | None = None
    prior_location: list | None = None
    prior_scale: list | None = None
    alpha: float | None = None
    sigma_k: float | None = None
    sigma_o: float = 0.1
    sigma_i: float | None = None
    # discretization
    n_particles: int = 200
    r_max: float | None = None
    r_max_factor: float = 3.0
    time_step: float = 0.01
    q_exponent: int = 13
    sigma_tilde_ratio: float | None = None
    # quantile
    quantile_level: float = 0.95
    regularize: bool = False
    epsilon: float = 0.005
    # mcmc
    iterations: int = 450_000
    burn_in: int = 50_000
    seed: int = 0
    initial_step_size: float = 0.1
    target_acceptance: float = 0.23
    chains: int = 1
    predictive_draws: int = 500
    max_lag: int = 100
    # io
    data: str | None = None
    unit: str = "diameter"
    window: str | None = None
    out: str = "out"
    # simulate / converge
    horizon: float = 30.0
    output_interval: float = 1.0
    dump_states: bool = False
    counts: list | None = None
    reference: int | None = None
    weight_exponent: int = 1
    n_times: int = 6

    # ---- resolution into module-level objects -------------------------------------------

    def prior(self) -> PriorSpec:
        if self.prior_location is not None or self.prior_scale is not None:
            if self.prior_location is None or self.prior_scale is None:
                raise ConfigError("prior_location and prior_scale must be given together")
            try:
                return PriorSpec(tuple(self.prior_location), tuple(self.prior_scale))
            except ValueError as exc:
                raise ConfigError(f"prior_location/prior_scale: {exc}") from None
        if self.cell_line is None:
            raise ConfigError("cell_line: required unless prior_location/prior_scale are given")
        try:
            return builtin_priors(self.cell_line)
        except KeyError as exc:
            raise ConfigError(f"cell_line: {exc.args[0]}") from None

    def params(self) -> ModelParams:
        missing = [k for k in ("alpha", "sigma_k", "sigma_i") if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"{missing[0]}: required for this command")
        for k in ("alpha", "sigma_k", "sigma_o", "sigma_i"):
            if not getattr(self, k) > 0.0:
                raise ConfigError(f"{k}: must be positive, got {getattr(self, k)!r}")
        return ModelParams.from_natural(self.alpha, self.sigma_k, self.sigma_o, self.sigma_i)

    def quantile(self) -> QuantileConfig:
        try:
            return QuantileConfig(self.quantile_level, bool(self.regularize), self.epsilon)
        except ValueError as exc:
            raise ConfigError(f"quantile_level/epsilon: {exc}") from None

    def edge_ratio(self) -> float:
        if self.sigma_tilde_ratio is not None:
            return self.sigma_tilde_ratio
        return builtin_sigma_tilde_ratio(self.cell_line) if self.cell_line in CELL_LINES else 1.065

    def discretization(self, r_max: float) -> DiscretizationConfig:
        try:
            return DiscretizationConfig(self.n_particles, r_max, self.q_exponent, self.edge_ratio(), self.time_step)
        except ValueError as exc:
            raise ConfigError(f"discretization: {exc}") from None

    def dataset(self) -> Dataset:
        if self.data is None:
            raise ConfigError("data: a dataset path is required for this command")
        if self.unit not in ("diameter", "radius"):
            raise ConfigError(f"unit: must be diameter or radius, got {self.unit!r}")
        try:
            ds = load_dataset(self.data, self.unit, parse_window(self.window), self.cell_line or "custom")
        except (DatasetError, OSError) as exc:
            raise ConfigError(f"data: {exc}") from None
        if len(ds) == 0:
            raise ConfigError("data: no observations left after windowing")
        return ds

    def validate(self) -> "RunConfig":
        for name, lo in (("n_particles", 2), ("iterations", 1), ("chains", 1), ("predictive_draws", 1),
                         ("q_exponent", 1), ("n_times", 2)):
            v = getattr(self, name)
            if int(v) != v or v < lo:
                raise ConfigError(f"{name}: must be an integer >= {lo}, got {v!r}")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError(f"burn_in: need 0 <= burn_in < iterations, got {self.burn_in} / {self.iterations}")
        for name in ("time_step", "initial_step_size", "r_max_factor", "epsilon", "output_interval"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        if self.r_max is not None and not self.r_max > 0.0:
            raise ConfigError(f"r_max: must be positive, got {self.r_max!r}")
        if not self.horizon >= 0.0:
            raise ConfigError(f"horizon: must be >= 0, got {self.horizon!r}")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ConfigError("target_acceptance: must lie in (0, 1)")
        if self.weight_exponent not in (1, 2):
            raise ConfigError("weight_exponent: must be 1 or 2")
        if self.window is not None:
            try:
                parse_window(self.window)
            except DatasetError as exc:
                raise ConfigError(f"window: {exc}") from None
        self.quantile()
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from None
        if isinstance(doc, dict) and "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]  # a previous run's manifest
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = sorted(set(doc) - set(_FIELD_TYPES))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown configuration key")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None
    return cfg.validate()


def _write_manifest(out: Path, command: str, cfg: RunConfig, outputs: list[Path], extra: dict | None = None) -> Path:
    payload = {
        "command": command,
        "version": __version__,
        "config": asdict(cfg),
        "outputs": [p.name for p in outputs],
    }
    if extra:
        payload.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2))
    return path


def _float_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row])
    return path


# ---- commands ---------------------------------------------------------------------------


def _forward_r_max(cfg: RunConfig, params: ModelParams) -> float:
    """Configured ``r_max``, or enough room for the front to travel over the horizon."""
    if cfg.r_max is not None:
        return cfg.r_max
    edge = cfg.edge_ratio() * params.sigma_i
    return cfg.r_max_factor * (edge + front_speed(params.alpha, params.sigma_k) * cfg.horizon)


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    params = cfg.params()
    disc = cfg.discretization(_forward_r_max(cfg, params))
    qcfg = cfg.quantile()
    n_out = int(math.floor(cfg.horizon / cfg.output_interval + 1e-9))
    times = np.arange(n_out + 1) * cfg.output_interval
    if cfg.horizon - times[-1] > 1e-9:
        times = np.r_[times, cfg.horizon]
    try:
        initial = initial_masses(params, disc)
    except ValueError as exc:
        raise ConfigError(f"r_max: {exc}") from None
    traj = integrate(initial, params, disc, times, qcfg)
    final = traj.obs_states()[-1]
    tv = final.masses.sum()
    if tail_mass(final, TRUNCATION_FRACTION * disc.r_max) > TRUNCATION_TOL * tv:
        raise ConfigError(
            f"r_max: colony mass reaches {TRUNCATION_FRACTION:.0%} of r_max={disc.r_max:.6g} mm; increase r_max"
        )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        write_trajectory_csv(traj, out / "trajectory.csv"),
        _float_csv(out / "diameter.csv", ["time_day", "diameter_mm"], zip(traj.obs_times, 2.0 * traj.radii)),
    ]
    if cfg.dump_states:
        written.append(write_state_dump_csv(traj, out / "states.csv"))
    written.append(_write_manifest(out, "simulate", cfg, written, {"resolved_r_max": disc.r_max}))
    return written


def _chain_job(args):
    ds, prior, disc, qcfg, cfg, seed = args
    return run_chain(ds, prior, disc, qcfg, cfg.iterations, cfg.burn_in, seed,
                     cfg.initial_step_size, cfg.target_acceptance)


def cmd_infer(cfg: RunConfig) -> list[Path]:
    ds = cfg.dataset()
    prior = cfg.prior()
    r_max = cfg.r_max if cfg.r_max is not None else default_r_max(ds.radii, cfg.r_max_factor)
    disc = cfg.discretization(r_max)
    qcfg = cfg.quantile()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        seeds = [cfg.seed + k for k in range(cfg.chains)]
        jobs = [(ds, prior, disc, qcfg, cfg, s) for s in seeds]
        if cfg.chains == 1:
            chains = [_chain_job(jobs[0])]
        else:
            with ProcessPoolExecutor(max_workers=cfg.chains) as pool:
                chains = list(pool.map(_chain_job, jobs))

        per_chain = {}
        for k, ch in enumerate(chains):
            name = "chain.csv" if cfg.chains == 1 else f"chain_{k}.csv"
            written.append(write_chain_csv(ch, out / name))
            per_chain[name] = {
                "seed": ch.seed,
                "acceptance_rate": ch.acceptance_rate,
                "burn_in_acceptance": ch.burn_in_acceptance,
                "final_step_size": ch.final_step_size,
            }
        pooled = chains[0] if len(chains) == 1 else Chain(
            np.concatenate([c.thetas for c in chains]),
            np.concatenate([c.log_posterior for c in chains]),
            np.concatenate([c.accepted for c in chains]),
            burn_in=cfg.burn_in,
            iterations=cfg.iterations,
        )
        diag = diagnostics(pooled, min(cfg.max_lag, len(pooled) - 1))
        best = map_estimate(pooled)
        extra = {
            "map": {"log": dict(zip(PARAM_NAMES, best.as_array().tolist())),
                    "natural": {"alpha": best.alpha, "sigma_k": best.sigma_k,
                                "sigma_o": best.sigma_o, "sigma_i": best.sigma_i}},
            "chains": per_chain,
        }
        if cfg.chains > 1:
            extra["per_chain"] = {
                name: diagnostics(c, min(cfg.max_lag, len(c) - 1)).to_dict()["ess"]
                for name, c in zip(per_chain, chains)
            }
        written.append(write_diagnostics_json(diag, out / "diagnostics.json", extra))

        t_pred = np.union1d(np.linspace(0.0, float(ds.times[-1]), 101), ds.times)
        pred = posterior_predictive(pooled, ds, disc, qcfg, cfg.predictive_draws,
                                    np.random.default_rng(cfg.seed), times=t_pred)
        if pred.n_failed:
            log.warning("%d of %d predictive draws failed", pred.n_failed, pred.n_draws)
        written.append(write_predictive_csv(pred, out / "predictive.csv"))
        written.append(_write_manifest(out, "infer", cfg, written,
                                       {"resolved_r_max": disc.r_max, "predictive_failed_draws": pred.n_failed}))
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return written


def cmd_converge(cfg: RunConfig) -> list[Path]:
    params = cfg.params()
    disc = cfg.discretization(_forward_r_max(cfg, params))
    counts = cfg.counts or [100, 200, 400]
    times = np.linspace(0.0, cfg.horizon, cfg.n_times)
    try:
        study = convergence_study(params, disc, counts, times, cfg.reference, cfg.weight_exponent)
    except ValueError as exc:
        raise ConfigError(f"counts: {exc}") from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ratios = list(study.ratios) + [math.nan]
    table = _float_csv(
        out / "convergence.csv",
        ["n_particles", "sup_error", "ratio_to_next"],
        ((n, e, r) for n, e, r in zip(study.counts, study.sup_errors, ratios)),
    )
    summary = out / "convergence.json"
    summary.write_text(json.dumps({
        "counts": study.counts,
        "reference": study.reference,
        "times": study.times.tolist(),
        "weight_exponent": study.weight_exponent,
        "errors": study.errors.tolist(),
        "sup_errors": study.sup_errors.tolist(),
        "ratios": study.ratios.tolist(),
        "decay_exponent": study.decay_exponent,
    }, indent=2))
    written = [table, summary]
    written.append(_write_manifest(out, "converge", cfg, written, {"resolved_r_max": disc.r_max}))
    print(f"{'N':>8} {'sup error':>14} {'ratio':>8}")
    for n, e, r in zip(study.counts, study.sup_errors, ratios):
        print(f"{n:>8d} {e:>14.6e} {r:>8.3f}")
    print(f"fitted decay exponent: {study.decay_exponent:.3f}")
    return written


def cmd_diagnose(cfg: RunConfig, chain_path: str) -> list[Path]:
    try:
        chain = read_chain_csv(chain_path)
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"chain: cannot read {chain_path}: {exc}") from None
    if len(chain) < 2:
        raise ConfigError("chain: needs at least two samples")
    diag = diagnostics(chain, min(cfg.max_lag, len(chain) - 1))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    best = map_estimate(chain)
    path = write_diagnostics_json(diag, out / "diagnostics.json",
                                  {"map": {"log": dict(zip(PARAM_NAMES, best.as_array().tolist()))},
                                   "source": str(chain_path)})
    return [path]


# ---- argument parsing -------------------------------------------------------------------


def _counts(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or a previous manifest.json")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--cell-line", dest="cell_line", choices=sorted(CELL_LINES) + ["custom"])
    common.add_argument("--particles", dest="n_particles", type=int)
    common.add_argument("--r-max", dest="r_max", type=float)
    common.add_argument("--time-step", dest="time_step", type=float)
    common.add_argument("--regularize", action="store_const", const=True, default=None)
    common.add_argument("--epsilon", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    theta = argparse.ArgumentParser(add_help=False)
    theta.add_argument("--alpha", type=float)
    theta.add_argument("--sigma-k", dest="sigma_k", type=float)
    theta.add_argument("--sigma-i", dest="sigma_i", type=float)
    theta.add_argument("--horizon", type=float, help="days")

    parser = argparse.ArgumentParser(prog="nonlocal-growth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, theta], help="forward run from explicit parameters")
    p.add_argument("--output-interval", dest="output_interval", type=float)
    p.add_argument("--dump-states", dest="dump_states", action="store_const", const=True, default=None)

    p = sub.add_parser("infer", parents=[common], help="random-walk Metropolis on a dataset")
    p.add_argument("--data")
    p.add_argument("--unit", choices=["diameter", "radius"])
    p.add_argument("--window", help="T0:T1 in days")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--predictive-draws", dest="predictive_draws", type=int)

    p = sub.add_parser("converge", parents=[common, theta], help="particle-count refinement study")
    p.add_argument("--counts", type=_counts, help="e.g. 100,200,400")
    p.add_argument("--reference", type=int)
    p.add_argument("--weight-exponent", dest="weight_exponent", type=int, choices=[1, 2])

    p = sub.add_parser("diagnose", parents=[common], help="diagnostics for an existing chain CSV")
    p.add_argument("chain", help="chain CSV written by infer")
    p.add_argument("--max-lag", dest="max_lag", type=int)
    return parser


_NON_CONFIG = {"command", "config", "verbose", "chain"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            written = cmd_simulate(cfg)
        elif args.command == "infer":
            written = cmd_infer(cfg)
        elif args.command == "converge":
            written = cmd_converge(cfg)
        else:
            written = cmd_diagnose(cfg, args.chain)
    except (ConfigError, SolverInstabilityError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    missing = [p for p in written if not p.is_file() or p.stat().st_size == 0]
    if missing:
        print(f"error: output not written: {missing[0]}", file=sys.stderr)
        return 1
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Log-normal priors, log-radius Gaussian likelihood and random-walk Metropolis.

Parameters live in log-space, ``theta = (log alpha, log sigma_k, log sigma_o,
log sigma_i)``.  The sampler proposes ``theta + s * Z`` with ``Z`` standard
normal and accepts with probability ``min(1, post(cand) / post(cur))``.
During burn-in the step size ``s`` is tuned by a Robbins-Monro recursion on
``log s`` towards a target acceptance rate; it is frozen afterwards so the
retained samples come from a fixed Metropolis kernel.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from .model import DiscretizationConfig, ModelParams
from .solver import QuantileConfig, SolverInstabilityError, forward_radii

if TYPE_CHECKING:
    from .data import Dataset

log = logging.getLogger(__name__)

PARAM_NAMES = ModelParams.NAMES
TARGET_ACCEPTANCE = 0.23
LOW_ESS_THRESHOLD = 400.0

__all__ = [
    "PARAM_NAMES",
    "PriorSpec",
    "Chain",
    "Diagnostics",
    "Predictive",
    "log_prior",
    "log_likelihood",
    "propose",
    "accept_probability",
    "metropolis",
    "run_chain",
    "map_estimate",
    "autocorrelation",
    "effective_sample_size",
    "diagnostics",
    "posterior_predictive",
    "write_chain_csv",
    "read_chain_csv",
    "write_diagnostics_json",
    "write_predictive_csv",
]


@dataclass(frozen=True)
class PriorSpec:
    """Independent normals on the four log-parameters (location = log of the median)."""

    location: tuple[float, float, float, float]
    scale: tuple[float, float, float, float]

    def __post_init__(self):
        loc = tuple(float(v) for v in self.location)
        sc = tuple(float(v) for v in self.scale)
        if len(loc) != 4 or len(sc) != 4:
            raise ValueError("a prior needs four locations and four scales")
        if not all(math.isfinite(v) for v in loc):
            raise ValueError(f"prior locations must be finite, got {loc}")
        if not all(v > 0.0 and math.isfinite(v) for v in sc):
            raise ValueError(f"prior scales must be positive, got {sc}")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scale", sc)

    @classmethod
    def from_medians(cls, alpha, sigma_k, sigma_o, sigma_i, scale=(1.0, 1.0, 5.0, 1.0)) -> "PriorSpec":
        return cls(tuple(math.log(v) for v in (alpha, sigma_k, sigma_o, sigma_i)), tuple(scale))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.location) + np.asarray(self.scale) * rng.standard_normal(4)

    def to_dict(self) -> dict:
        return {"location": list(self.location), "scale": list(self.scale)}


def log_prior(theta: ModelParams | np.ndarray, prior: PriorSpec) -> float:
    """Sum of normal log-densities of the log-parameters, normalisation included."""
    x = theta.as_array() if isinstance(theta, ModelParams) else np.asarray(theta, dtype=float)
    loc = np.asarray(prior.location)
    sc = np.asarray(prior.scale)
    z = (x - loc) / sc
    return float(np.sum(-0.5 * z * z - np.log(sc) - 0.5 * math.log(2.0 * math.pi)))


def _gaussian_log_residuals(obs_radii: np.ndarray, model_radii: np.ndarray, sigma_o: float) -> float:
    res = np.log(obs_radii) - np.log(model_radii)
    n = obs_radii.size
    return float(-n * math.log(math.sqrt(2.0 * math.pi) * sigma_o) - np.dot(res, res) / (2.0 * sigma_o**2))


def log_likelihood(
    theta: ModelParams,
    data: "Dataset",
    cfg: DiscretizationConfig,
    qcfg: QuantileConfig | None = None,
) -> float:
    """Log-normal observation model on colony radii.

    Returns ``-inf`` when the forward model cannot be evaluated at ``theta``
    (unstable time step, or an initial colony that does not fit inside
    ``r_max``), so that the candidate is simply rejected.
    """
    if len(data.times) == 0:
        raise ValueError("log_likelihood needs at least one observation")
    if np.any(data.radii <= 0.0):
        raise ValueError("observed radii must be positive")
    try:
        model = forward_radii(theta, cfg, data.times, qcfg)
    except SolverInstabilityError as exc:
        log.debug("forward model unstable at %s: %s", theta, exc)
        return -math.inf
    except ValueError as exc:
        if "r_max" not in str(exc):
            raise
        return -math.inf
    return _gaussian_log_residuals(data.radii, model, theta.sigma_o)


def propose(current: ModelParams | np.ndarray, step_size: float, rng: np.random.Generator):
    """Isotropic Gaussian random-walk move with standard deviation ``step_size`` per log-parameter."""
    if not step_size >= 0.0:
        raise ValueError(f"step_size must be non-negative, got {step_size!r}")
    if isinstance(current, ModelParams):
        return ModelParams.from_array(current.as_array() + step_size * rng.standard_normal(4))
    return np.asarray(current, dtype=float) + step_size * rng.standard_normal(np.shape(current))


def accept_probability(log_post_current: float, log_post_candidate: float) -> float:
    if not math.isfinite(log_post_current):
        raise ValueError("current log-posterior must be finite")
    if log_post_candidate == -math.inf:
        return 0.0
    d = log_post_candidate - log_post_current
    return 1.0 if d >= 0.0 else math.exp(d)


@dataclass(eq=False)
class Chain:
    """Retained Metropolis samples plus the burn-in step-size trace."""

    thetas: np.ndarray
    log_posterior: np.ndarray
    accepted: np.ndarray
    step_sizes: np.ndarray = field(default_factory=lambda: np.empty(0))
    seed: int | None = None
    burn_in: int = 0
    iterations: int = 0
    burn_in_acceptance: float = math.nan

    def __len__(self) -> int:
        return self.thetas.shape[0]

    @property
    def final_step_size(self) -> float:
        return float(self.step_sizes[-1]) if self.step_sizes.size else math.nan

    @property
    def samples(self):
        for th, lp, acc in zip(self.thetas, self.log_posterior, self.accepted):
            yield ModelParams.from_array(th), float(lp), bool(acc)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self) else math.nan


def metropolis(
    log_target: Callable[[np.ndarray], float],
    theta0,
    iterations: int,
    burn_in: int,
    rng: np.random.Generator,
    step_size: float = 0.1,
    target_acceptance: float = TARGET_ACCEPTANCE,
    adapt_exponent: float = 0.6,
) -> Chain:
    """Random-walk Metropolis on an arbitrary log-density.

    Runs ``iterations`` proposals and keeps the last ``iterations - burn_in``
    states.  During burn-in, ``log s`` moves by ``k**-adapt_exponent *
    (accepted - target_acceptance)`` after proposal ``k``.
    """
    if burn_in < 0 or iterations <= burn_in:
        raise ValueError(f"need iterations > burn_in >= 0, got {iterations} and {burn_in}")
    if not step_size > 0.0:
        raise ValueError("initial step size must be positive")
    if not 0.0 < target_acceptance < 1.0:
        raise ValueError("target acceptance must lie in (0, 1)")

    cur = np.array(theta0, dtype=float)
    dim = cur.size
    cur_lp = float(log_target(cur))
    if not math.isfinite(cur_lp):
        raise ValueError("log-target is not finite at the initial state")

    n_keep = iterations - burn_in
    thetas = np.empty((n_keep, dim))
    lps = np.empty(n_keep)
    acc = np.zeros(n_keep, dtype=bool)
    trace = np.empty(burn_in)
    log_s = math.log(step_size)
    burn_accepts = 0

    for k in range(1, iterations + 1):
        s = math.exp(log_s)
        cand = cur + s * rng.standard_normal(dim)
        u = rng.random()
        cand_lp = float(log_target(cand))
        # the proposal is symmetric, so only the target ratio enters
        ok = cand_lp > -math.inf and (cand_lp >= cur_lp or u <= math.exp(cand_lp - cur_lp))
        if ok:
            # the carried value doubles as the likelihood cache: a rejection never re-solves
            cur, cur_lp = cand, cand_lp
        if k <= burn_in:
            burn_accepts += ok
            log_s += k ** (-adapt_exponent) * (float(ok) - target_acceptance)
            trace[k - 1] = math.exp(log_s)
        else:
            j = k - burn_in - 1
            thetas[j] = cur
            lps[j] = cur_lp
            acc[j] = ok

    return Chain(
        thetas=thetas,
        log_posterior=lps,
        accepted=acc,
        step_sizes=trace if burn_in else np.array([step_size]),
        burn_in=burn_in,
        iterations=iterations,
        burn_in_acceptance=burn_accepts / burn_in if burn_in else math.nan,
    )


class _Posterior:
    """Callable log-posterior over log-parameter arrays."""

    def __init__(self, data, prior, cfg, qcfg, loglik=None):
        self.data = data
        self.prior = prior
        self.cfg = cfg
        self.qcfg = qcfg
        if loglik is not None:
            self.loglik = loglik
        elif data is None or len(data.times) == 0:
            self.loglik = lambda theta: 0.0
        else:
            self.loglik = lambda theta: log_likelihood(theta, data, cfg, qcfg)

    def __call__(self, x: np.ndarray) -> float:
        lp = log_prior(x, self.prior)
        try:
            theta = ModelParams.from_array(x)
        except ValueError:
            return -math.inf
        return lp + self.loglik(theta)


def run_chain(
    data: "Dataset | None",
    prior: PriorSpec,
    cfg: DiscretizationConfig,
    qcfg: QuantileConfig | None = None,
    iterations: int = 450_000,
    burn_in: int = 50_000,
    seed: int = 0,
    initial_step_size: float = 0.1,
    target_acceptance: float = TARGET_ACCEPTANCE,
    log_likelihood_fn: Callable[[ModelParams], float] | None = None,
    max_init_draws: int = 1000,
) -> Chain:
    """Posterior sampling for the growth model.

    The starting point is drawn from the prior (redrawn while the forward
    model fails there).  ``data=None`` or an empty dataset samples the prior.
    ``log_likelihood_fn`` replaces the model likelihood, e.g. for test targets.
    """
    if burn_in < 0 or iterations <= burn_in:
        raise ValueError(f"need iterations > burn_in >= 0, got {iterations} and {burn_in}")
    qcfg = qcfg or QuantileConfig()
    rng = np.random.default_rng(seed)
    post = _Posterior(data, prior, cfg, qcfg, log_likelihood_fn)
    for _ in range(max_init_draws):
        theta0 = prior.sample(rng)
        if math.isfinite(post(theta0)):
            break
    else:
        raise RuntimeError(f"no prior draw with a finite posterior in {max_init_draws} attempts")
    chain = metropolis(post, theta0, iterations, burn_in, rng, initial_step_size, target_acceptance)
    chain.seed = seed
    return chain


def map_estimate(chain: Chain) -> ModelParams:
    """Retained sample with the largest log-posterior (earliest on ties)."""
    if len(chain) == 0:
        raise ValueError("empty chain has no MAP estimate")
    return ModelParams.from_array(chain.thetas[int(np.argmax(chain.log_posterior))])


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Biased sample autocorrelation at all lags (FFT based); NaN for a constant series."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0 or np.all(x == x[0]):
        return np.full(n, np.nan)
    d = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0.0:
        return np.full(n, np.nan)
    rho = acov / acov[0]
    rho[0] = 1.0
    return rho


def effective_sample_size(x: np.ndarray) -> float:
    """ESS with Geyer's initial positive sequence; capped at the sample count."""
    rho = autocorrelation(x)
    n = rho.size
    if np.isnan(rho[0]):
        return math.nan
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
    return float(min(n, n / tau))


@dataclass
class Diagnostics:
    acceptance_rate: float
    autocorrelation: dict[str, list[float]]
    effective_sample_size: dict[str, float]
    posterior_quantiles: dict[str, tuple[float, float, float]]
    degenerate: dict[str, bool]
    n_samples: int
    low_ess: bool

    def to_dict(self) -> dict:
        return {
            "acceptance_rate": self.acceptance_rate,
            "ess": {k: (None if math.isnan(v) else v) for k, v in self.effective_sample_size.items()},
            "autocorrelation": {
                k: [None if math.isnan(v) else v for v in vals] for k, vals in self.autocorrelation.items()
            },
            "quantiles": {k: {"q2.5": q[0], "q50": q[1], "q97.5": q[2]} for k, q in self.posterior_quantiles.items()},
            "degenerate": self.degenerate,
            "n_samples": self.n_samples,
            "low_ess": self.low_ess,
        }


def diagnostics(chain: Chain, max_lag: int = 100) -> Diagnostics:
    n = len(chain)
    if max_lag < 0 or n < max_lag + 1:
        raise ValueError(f"need at least max_lag + 1 = {max_lag + 1} samples, chain has {n}")
    acf, ess, quant, degen = {}, {}, {}, {}
    for j, name in enumerate(PARAM_NAMES):
        col = chain.thetas[:, j]
        rho = autocorrelation(col)
        acf[name] = rho[: max_lag + 1].tolist()
        ess[name] = effective_sample_size(col)
        degen[name] = bool(np.isnan(rho[0]))
        quant[name] = tuple(float(v) for v in np.quantile(col, [0.025, 0.5, 0.975]))
    finite_ess = [v for v in ess.values() if not math.isnan(v)]
    low = any(degen.values()) or min(finite_ess, default=0.0) < LOW_ESS_THRESHOLD
    return Diagnostics(
        acceptance_rate=chain.acceptance_rate,
        autocorrelation=acf,
        effective_sample_size=ess,
        posterior_quantiles=quant,
        degenerate=degen,
        n_samples=n,
        low_ess=low,
    )


@dataclass
class Predictive:
    times: np.ndarray
    low: np.ndarray
    median: np.ndarray
    high: np.ndarray
    n_draws: int
    n_failed: int


def posterior_predictive(
    chain: Chain,
    data: "Dataset | None",
    cfg: DiscretizationConfig,
    qcfg: QuantileConfig | None,
    n_draws: int,
    rng: np.random.Generator,
    times=None,
) -> Predictive:
    """Pointwise 2.5/50/97.5% bands of the noise-free model radius.

    Parameter vectors are drawn uniformly from the retained samples; draws on
    which the forward model fails are skipped and counted.
    """
    if len(chain) == 0:
        raise ValueError("posterior predictive needs a non-empty chain")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    t = np.asarray(times if times is not None else data.times, dtype=float)
    picks = rng.integers(0, len(chain), size=n_draws)
    cache: dict[tuple, np.ndarray] = {}
    curves = []
    failed = 0
    for k in picks:
        key = tuple(chain.thetas[k])
        if key not in cache:
            try:
                cache[key] = forward_radii(ModelParams.from_array(chain.thetas[k]), cfg, t, qcfg)
            except (SolverInstabilityError, ValueError) as exc:
                log.warning("predictive draw skipped: %s", exc)
                cache[key] = None
        if cache[key] is None:
            failed += 1
        else:
            curves.append(cache[key])
    if not curves:
        raise RuntimeError("every posterior predictive draw failed")
    lo, med, hi = np.quantile(np.array(curves), [0.025, 0.5, 0.975], axis=0)
    return Predictive(t, lo, med, hi, n_draws, failed)


def write_chain_csv(chain: Chain, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", *PARAM_NAMES, "log_posterior", "accepted"])
        for j, (th, lp, acc) in enumerate(zip(chain.thetas, chain.log_posterior, chain.accepted)):
            w.writerow([chain.burn_in + j + 1, *(repr(float(v)) for v in th), repr(float(lp)), int(acc)])
    return path


def read_chain_csv(path) -> Chain:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    expected = ["iter", *PARAM_NAMES, "log_posterior", "accepted"]
    if header != expected:
        raise ValueError(f"{path}: unexpected chain header {header}")
    body = rows[1:]
    if not body:
        return Chain(np.empty((0, 4)), np.empty(0), np.empty(0, dtype=bool))
    arr = np.array([[float(v) for v in r] for r in body])
    first_iter = int(arr[0, 0])
    return Chain(
        thetas=arr[:, 1:5],
        log_posterior=arr[:, 5],
        accepted=arr[:, 6].astype(bool),
        burn_in=first_iter - 1,
        iterations=int(arr[-1, 0]),
    )


def write_diagnostics_json(diag: Diagnostics, path, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = diag.to_dict()
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2))
    return path


def write_predictive_csv(pred: Predictive, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_day", "radius_lo_mm", "radius_med_mm", "radius_hi_mm"])
        for row in zip(pred.times, pred.low, pred.median, pred.high):
            w.writerow([repr(float(v)) for v in row])
    return path

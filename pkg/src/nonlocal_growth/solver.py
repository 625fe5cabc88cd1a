"""Particle (EBT) time stepping for the radial model and the colony-radius observable.

Particles sit on the fixed grid ``x_i = i r_max / N``; only their masses
evolve, by

    dm_i/dt = (cap_i - m_i) * sum_j L(x_i, x_j) m_j,    cap_i = 4 pi x_i^2 r_max / N.

The kernel matrix depends on the parameters and the grid only, so it is built
once per integration and the right-hand side becomes a banded mat-vec.  The
inner sum runs over ``j`` in ascending order, and nothing is parallelised,
so results are bit-reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .measures import DiscreteMeasure, difference, weighted_flat_norm
from .model import (
    DiscretizationConfig,
    ModelParams,
    initial_masses,
    kernel_matrix,
    particle_caps,
    particle_grid,
)

__all__ = [
    "SolverInstabilityError",
    "QuantileConfig",
    "Trajectory",
    "kernel_band",
    "rhs",
    "integrate",
    "forward_radii",
    "radius",
    "regularized_cdf",
    "write_trajectory_csv",
    "write_state_dump_csv",
    "ConvergenceStudy",
    "convergence_study",
]

NEGATIVE_TOL = 1e-12
CAP_TOL = 1e-9

_OK, _NEGATIVE, _OVER_CAP, _NOT_FINITE = 0, 1, 2, 3


class SolverInstabilityError(RuntimeError):
    """A time step drove a mass out of ``[0, cap]`` beyond round-off."""


@dataclass(frozen=True)
class QuantileConfig:
    """How the colony radius is read off a particle state.

    With ``regularize`` off the radius is the first grid point at which the
    running mass strictly exceeds ``level`` of the total.  With it on, the
    state is smoothed by a Laplace density of scale ``epsilon`` (mm) and the
    radius is the exact ``level``-quantile of the result.
    """

    level: float = 0.95
    regularize: bool = False
    epsilon: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {self.level!r}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")


@dataclass(eq=False)
class Trajectory:
    """Masses on a fixed grid at a sequence of times.

    ``masses[k]`` is the state at ``times[k]``.  ``radii[k]`` is the colony
    radius at ``obs_times[k]``; when only observation times are stored the two
    time axes coincide.
    """

    grid: np.ndarray
    times: np.ndarray
    masses: np.ndarray
    obs_times: np.ndarray
    radii: np.ndarray
    caps: np.ndarray = field(repr=False)

    @property
    def states(self) -> list[DiscreteMeasure]:
        return [DiscreteMeasure(self.grid, m) for m in self.masses]

    def state_at(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.grid, self.masses[k])

    @property
    def total_mass(self) -> np.ndarray:
        return self.masses.sum(axis=1)

    def obs_states(self) -> list[DiscreteMeasure]:
        idx = np.searchsorted(self.times, self.obs_times, side="right") - 1
        return [self.state_at(k) for k in idx]


def kernel_band(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``[lo, hi)`` column range holding all non-zero kernel entries."""
    nz = K != 0.0
    any_nz = nz.any(axis=1)
    n = K.shape[1]
    lo = np.where(any_nz, np.argmax(nz, axis=1), 0)
    hi = np.where(any_nz, n - np.argmax(nz[:, ::-1], axis=1), 0)
    return lo.astype(np.int64), hi.astype(np.int64)


@numba.njit(cache=True)
def _rhs_into(m, K, lo, hi, cap, out):
    for i in range(m.size):
        s = 0.0
        for j in range(lo[i], hi[i]):
            s += K[i, j] * m[j]
        out[i] = (cap[i] - m[i]) * s


@numba.njit(cache=True)
def _rk4_run(m, K, lo, hi, cap, steps, record, out):
    """Advance ``m`` in place through ``steps``; copy it into ``out`` at flagged steps.

    Returns (status, step index, particle index).
    """
    n = m.size
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    row = 0
    for s in range(steps.size):
        h = steps[s]
        if h > 0.0:
            _rhs_into(m, K, lo, hi, cap, k1)
            for i in range(n):
                tmp[i] = m[i] + 0.5 * h * k1[i]
            _rhs_into(tmp, K, lo, hi, cap, k2)
            for i in range(n):
                tmp[i] = m[i] + 0.5 * h * k2[i]
            _rhs_into(tmp, K, lo, hi, cap, k3)
            for i in range(n):
                tmp[i] = m[i] + h * k3[i]
            _rhs_into(tmp, K, lo, hi, cap, k4)
            tv = 0.0
            for i in range(n):
                m[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if m[i] > 0.0:
                    tv += m[i]
            for i in range(n):
                v = m[i]
                if not np.isfinite(v):
                    return 3, s, i
                if v < 0.0:
                    if v >= -NEGATIVE_TOL * tv:
                        m[i] = 0.0
                    else:
                        return 1, s, i
                elif v > cap[i] * (1.0 + CAP_TOL):
                    return 2, s, i
        if record[s]:
            for i in range(n):
                out[row, i] = m[i]
            row += 1
    return 0, -1, -1


def _check_state(initial: DiscreteMeasure, cfg: DiscretizationConfig) -> np.ndarray:
    x = particle_grid(cfg)
    if len(initial) != x.size or not np.allclose(initial.locations, x, rtol=1e-12, atol=0.0):
        raise ValueError("state is not on the canonical particle grid of this configuration")
    return x


def rhs(state: DiscreteMeasure, params: ModelParams, cfg: DiscretizationConfig) -> np.ndarray:
    """Mass rates of the particle system at ``state``."""
    x = _check_state(state, cfg)
    K = kernel_matrix(x, params.alpha, params.sigma_k)
    lo, hi = kernel_band(K)
    out = np.empty(x.size)
    _rhs_into(np.array(state.masses), K, lo, hi, particle_caps(cfg), out)
    return out


def _step_schedule(obs_times: np.ndarray, dt: float, record_steps: bool):
    """Step sizes and record flags for fixed-step RK4 landing exactly on ``obs_times``.

    Each observation time gets exactly one recorded state (a zero-length step
    for repeated times); a remainder shorter than ``1e-9 dt`` is absorbed into
    the last full step instead of producing a sliver step.
    """
    steps = [0.0]
    record = [record_steps]
    times = [0.0]
    t = 0.0
    for t_obs in obs_times:
        duration = t_obs - t
        n_full = int(math.floor(duration / dt + 1e-9))
        rem = duration - n_full * dt
        if rem > 1e-9 * dt:
            sizes = [dt] * n_full + [rem]
        elif n_full:
            sizes = [dt] * (n_full - 1) + [dt + rem]
        else:
            sizes = [0.0]
        for k, h in enumerate(sizes, start=1):
            last = k == len(sizes)
            steps.append(h)
            record.append(record_steps or last)
            times.append(t_obs if last else t + k * dt)
        t = t_obs
    record_a = np.asarray(record)
    return np.asarray(steps), record_a, np.asarray(times)[record_a]


def integrate(
    initial: DiscreteMeasure,
    params: ModelParams,
    cfg: DiscretizationConfig,
    obs_times,
    qcfg: QuantileConfig | None = None,
    record_steps: bool = False,
) -> Trajectory:
    """Classical RK4 with step ``cfg.time_step`` from ``t = 0`` through ``obs_times``.

    The last step before each observation time is shortened so the solution
    lands on it exactly.  With ``record_steps`` every intermediate state is
    kept as well.  Raises :class:`SolverInstabilityError` when a step leaves
    the admissible box ``[0, cap]`` by more than round-off.
    """
    obs = np.asarray(obs_times, dtype=float).reshape(-1)
    if obs.size == 0:
        raise ValueError("obs_times must not be empty")
    if obs[0] < 0.0 or np.any(np.diff(obs) < 0.0):
        raise ValueError("obs_times must be non-decreasing and start at t >= 0")
    qcfg = qcfg or QuantileConfig()
    x = _check_state(initial, cfg)
    caps = particle_caps(cfg)
    K = kernel_matrix(x, params.alpha, params.sigma_k)
    lo, hi = kernel_band(K)

    steps, record, times = _step_schedule(obs, cfg.time_step, record_steps)
    m = np.array(initial.masses)
    out = np.empty((times.size, x.size))
    status, s_fail, i_fail = _rk4_run(m, K, lo, hi, caps, steps, record, out)
    if status != _OK:
        what = {_NEGATIVE: "negative mass", _OVER_CAP: "mass above capacity", _NOT_FINITE: "non-finite mass"}
        raise SolverInstabilityError(
            f"{what[status]} at particle {i_fail} (x={x[i_fail]:.6g}) on step {s_fail}; "
            f"reduce time_step (currently {cfg.time_step})"
        )
    # obs may repeat a time that was already recorded; map each to the last match
    obs_idx = np.searchsorted(times, obs, side="right") - 1
    # the radius of an empty colony is undefined; report NaN rather than fail the run
    radii = np.array([_radius_from_masses(x, out[k], qcfg) if out[k].sum() > 0.0 else math.nan for k in obs_idx])
    return Trajectory(grid=x, times=times, masses=out, obs_times=obs, radii=radii, caps=caps)


def forward_radii(params: ModelParams, cfg: DiscretizationConfig, obs_times, qcfg: QuantileConfig | None = None):
    """Model colony radii at ``obs_times`` starting from the parametrised initial colony."""
    return integrate(initial_masses(params, cfg), params, cfg, obs_times, qcfg).radii


def _laplace_cdf(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z < 0.0, 0.5 * e, 1.0 - 0.5 * e)


def regularized_cdf(x: float, state: DiscreteMeasure, epsilon: float) -> float:
    """Mass fraction below ``x`` after convolving ``state`` with a Laplace density of scale ``epsilon``."""
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    tv = state.masses.sum()
    if not tv > 0.0:
        raise ValueError("regularized CDF of the zero measure is undefined")
    return float(np.dot(state.masses, _laplace_cdf((x - state.locations) / epsilon)) / tv)


def _radius_from_masses(x: np.ndarray, m: np.ndarray, qcfg: QuantileConfig) -> float:
    tv = m.sum()
    if not tv > 0.0:
        raise ValueError("colony radius of an empty state is undefined")
    if not qcfg.regularize:
        cum = np.cumsum(m)
        i = int(np.argmax(cum > qcfg.level * tv))
        if not cum[i] > qcfg.level * tv:
            # cumsum round-off can leave the total a hair under level * tv only when level ~ 1
            i = x.size - 1
        return float(x[i])
    eps = qcfg.epsilon
    lo = x[0] - 60.0 * eps
    hi = x[-1] + 60.0 * eps
    target = qcfg.level * tv
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.dot(m, _laplace_cdf((mid - x) / eps)) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def radius(state: DiscreteMeasure, qcfg: QuantileConfig | None = None) -> float:
    """Colony radius of ``state`` per ``qcfg`` (raw 95% quantile by default)."""
    return _radius_from_masses(state.locations, np.asarray(state.masses), qcfg or QuantileConfig())


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    """Columns ``time_day, radius_mm, total_mass`` at the observation times."""
    path = Path(path)
    idx = np.searchsorted(traj.times, traj.obs_times, side="right") - 1
    totals = traj.total_mass[idx]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_day", "radius_mm", "total_mass"])
        for t, r, tot in zip(traj.obs_times, traj.radii, totals):
            w.writerow([repr(float(t)), repr(float(r)), repr(float(tot))])
    return path


def write_state_dump_csv(traj: Trajectory, path) -> Path:
    """Long-format dump ``time_day, x_mm, mass`` of every stored state."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_day", "x_mm", "mass"])
        for t, m in zip(traj.times, traj.masses):
            ts = repr(float(t))
            for xi, mi in zip(traj.grid, m):
                w.writerow([ts, repr(float(xi)), repr(float(mi))])
    return path


@dataclass
class ConvergenceStudy:
    """Weighted flat-norm distance of coarse runs to a fine reference run.

    ``errors[k, j]`` belongs to ``counts[k]`` at ``times[j]``; ``sup_errors``
    takes the maximum over times.
    """

    counts: list[int]
    reference: int
    times: np.ndarray
    errors: np.ndarray
    weight_exponent: int

    @property
    def sup_errors(self) -> np.ndarray:
        return self.errors.max(axis=1)

    @property
    def ratios(self) -> np.ndarray:
        """Error reduction factor between consecutive counts."""
        e = self.sup_errors
        with np.errstate(divide="ignore", invalid="ignore"):
            return e[:-1] / e[1:]

    @property
    def decay_exponent(self) -> float:
        """Least-squares slope ``p`` of ``log error ~ -p log N`` (zero errors, e.g. the reference itself, are skipped)."""
        e = self.sup_errors
        keep = e > 0.0
        if keep.sum() < 2:
            return math.nan
        slope = np.polyfit(np.log(np.asarray(self.counts)[keep]), np.log(e[keep]), 1)[0]
        return float(-slope)


def convergence_study(
    params: ModelParams,
    cfg: DiscretizationConfig,
    counts,
    times,
    reference: int | None = None,
    weight_exponent: int = 1,
) -> ConvergenceStudy:
    """Particle-count refinement study against a reference run (default ``4 * max(counts)``)."""
    counts = [int(c) for c in counts]
    if len(counts) < 3:
        raise ValueError("a convergence study needs at least three particle counts")
    if len(set(counts)) != len(counts):
        raise ValueError(f"particle counts must be distinct, got {counts}")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError(f"particle counts must be increasing, got {counts}")
    reference = int(reference) if reference is not None else 4 * counts[-1]
    if reference < counts[-1]:
        raise ValueError("the reference count must be at least the largest count")
    times = np.asarray(times, dtype=float)

    def run(n):
        c = cfg.with_(n_particles=n)
        return integrate(initial_masses(params, c), params, c, times).obs_states()

    ref_states = run(reference)
    errors = np.array([
        [weighted_flat_norm(difference(a, b), weight_exponent) for a, b in zip(run(n), ref_states)]
        for n in counts
    ])
    return ConvergenceStudy(counts, reference, times, errors, weight_exponent)

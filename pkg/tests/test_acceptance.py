"""Acceptance suite: ten end-to-end criteria at their stated tolerances and time budgets.

Each criterion prints one ``PASS``/``FAIL`` line.  Run under pytest (lines
appear in the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nonlocal_growth.data import builtin_priors, synthesize
from nonlocal_growth.inference import diagnostics, metropolis, posterior_predictive, run_chain
from nonlocal_growth.measures import SignedAtomList, flat_norm, tail_mass
from nonlocal_growth.model import DiscretizationConfig, ModelParams, initial_masses, kernel_L, particle_caps
from nonlocal_growth.solver import QuantileConfig, convergence_study, forward_radii, integrate, radius
from oracles import lattice_flat_norm, sphere_averaged_kernel

RESULTS: list[tuple[str, bool, str]] = []

# fitted L-5178Y maximum a posteriori parameters; sigma_o does not enter the forward model
L5178Y_MAP = ModelParams.from_natural(1.7264, 0.0806, 0.1, 0.2469)
# synthetic ground truth for the convergence and recovery experiments
THETA_STAR = ModelParams.from_natural(0.5, 0.05, 0.05, 0.4)


def record(name: str, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
    in_time = elapsed < budget
    ok = bool(ok and in_time)
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}; {elapsed:.1f}s (budget {budget:g}s)"
    RESULTS.append((name, ok, line))
    print(line)
    return ok


# ---- criteria -------------------------------------------------------------------------------


def criterion_1_kernel():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    n = 0
    while n < 10:
        sk = rng.uniform(0.02, 0.5)
        R = rng.uniform(0.05, 3.0) * sk
        r = rng.uniform(0.05, 3.0) * sk
        if abs(R - r) >= sk:
            continue  # only triples with partial overlap exercise the quadrature
        a = rng.uniform(0.2, 3.0)
        want = sphere_averaged_kernel(R, r, a, sk)
        worst = max(worst, abs(kernel_L(R, r, a, sk) - want) / want)
        n += 1
    core_err = far_err = 0.0
    for _ in range(200):
        sk, a = rng.uniform(0.02, 0.5), rng.uniform(0.2, 3.0)
        R = rng.uniform(0.01, 0.99) * sk
        r = rng.uniform(0.001, 1.0) * (sk - R)
        core = 3 * a / (4 * math.pi * sk**3)
        core_err = max(core_err, abs(kernel_L(R, r, a, sk) - core) / core)
        far_err = max(far_err, abs(kernel_L(R, R + sk * rng.uniform(1.0, 10.0), a, sk)))
    ok = worst < 1e-6 and core_err < 1e-12 and far_err < 1e-12
    return record("C1 kernel vs sphere quadrature", ok,
                  f"max rel err {worst:.2e}, core {core_err:.1e}, far field {far_err:.1e}",
                  time.perf_counter() - t0, 1.0)


def criterion_2_invariants():
    t0 = time.perf_counter()
    cfg = DiscretizationConfig(n_particles=200, r_max=6.0)
    traj = integrate(initial_masses(L5178Y_MAP, cfg), L5178Y_MAP, cfg, [20.0], record_steps=True)
    m = traj.masses
    cap = particle_caps(cfg)
    tv = m.sum(axis=1, keepdims=True)
    lower_ok = bool(np.all(m >= -1e-12 * tv))
    upper_ok = bool(np.all(m <= cap * (1 + 1e-9)))
    below = m[:-1] < cap
    growth = np.diff(m, axis=0)
    mono_ok = bool(np.all(growth[below] >= 0.0))
    return record("C2 scheme invariants", lower_ok and upper_ok and mono_ok,
                  f"{m.shape[0]} states, min {m.min():.2e}, max m/cap {np.max(m / cap):.12f}, "
                  f"min growth below cap {growth[below].min():.2e}",
                  time.perf_counter() - t0, 10.0)


def criterion_3_spatial():
    t0 = time.perf_counter()
    cfg = DiscretizationConfig(r_max=1.0)
    study = convergence_study(THETA_STAR, cfg, [100, 200, 400], np.linspace(0.0, 5.0, 6), reference=1600)
    ratios = study.ratios
    ok = bool(np.all((ratios >= 1.5) & (ratios <= 2.6)))
    return record("C3 spatial convergence", ok,
                  f"sup errors {np.array2string(study.sup_errors, precision=3)}, "
                  f"ratios {np.array2string(ratios, precision=3)}",
                  time.perf_counter() - t0, 120.0)


def criterion_4_temporal():
    t0 = time.perf_counter()
    q = QuantileConfig(regularize=True)
    obs = np.array([2.5, 5.0, 7.5, 10.0])

    def radii(dt):
        return forward_radii(L5178Y_MAP, DiscretizationConfig(n_particles=200, r_max=3.0, time_step=dt), obs, q)

    ref = radii(0.2 / 64)
    errs = np.array([np.abs(radii(dt) - ref) for dt in (0.2, 0.1, 0.05, 0.025)])
    orders = np.log2(errs[:-1] / errs[1:])
    ok = bool(np.all(orders >= 3.5))
    return record("C4 temporal convergence", ok,
                  f"observed orders per halving {np.array2string(orders.min(axis=1), precision=2)} (min over times)",
                  time.perf_counter() - t0, 60.0)


def criterion_5_flat_norm():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    h_inv = 64
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 7))
        steps = np.sort(rng.choice(4 * h_inv, size=n, replace=False))
        coeffs = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        got = flat_norm(SignedAtomList(steps / h_inv, coeffs))
        worst = max(worst, abs(got - lattice_flat_norm(steps, coeffs, h_inv)))
    return record("C5 flat norm vs brute force", worst < 1e-6, f"max abs diff {worst:.2e}",
                  time.perf_counter() - t0, 10.0)


def criterion_6_mh_gaussian():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    chain = metropolis(lambda x: -0.5 * float(x @ x), rng.standard_normal(4), 110_000, 10_000, rng)
    mean = chain.thetas.mean(axis=0)
    var = chain.thetas.var(axis=0)
    acc = chain.acceptance_rate
    ok = bool(np.all(np.abs(mean) < 0.05) and np.all((var >= 0.9) & (var <= 1.1)) and 0.18 <= acc <= 0.28)
    return record("C6 MH on standard normal", ok,
                  f"means {np.array2string(mean, precision=3)}, variances {np.array2string(var, precision=3)}, "
                  f"acceptance {acc:.3f}",
                  time.perf_counter() - t0, 30.0)


def criterion_7_prior_recovery():
    t0 = time.perf_counter()
    prior = builtin_priors("L-5178Y")
    chain = run_chain(None, prior, DiscretizationConfig(), iterations=220_000, burn_in=20_000, seed=707)
    loc_err = np.abs(chain.thetas.mean(axis=0) - np.array(prior.location))
    scale_err = np.abs(chain.thetas.std(axis=0) / np.array(prior.scale) - 1.0)
    ok = bool(np.all(loc_err < 0.05) and np.all(scale_err < 0.05))
    return record("C7 prior recovery", ok,
                  f"|location err| {np.array2string(loc_err, precision=3)}, "
                  f"rel scale err {np.array2string(scale_err, precision=3)}",
                  time.perf_counter() - t0, 60.0)


def criterion_8_synthetic_recovery():
    t0 = time.perf_counter()
    times = np.arange(1.0, 21.0)
    cfg = DiscretizationConfig(n_particles=100, r_max=2.025)
    data = synthesize(THETA_STAR, cfg, None, times, seed=1)
    chain = run_chain(data, builtin_priors("V-79"), cfg, iterations=60_000, burn_in=10_000, seed=1)
    lo, med, hi = np.quantile(chain.thetas, [0.025, 0.5, 0.975], axis=0)
    truth = THETA_STAR.as_array()
    rel = np.abs(np.exp(med - truth) - 1.0)
    covered = (lo <= truth) & (truth <= hi)
    pred = posterior_predictive(chain, data, cfg, None, 200, np.random.default_rng(8))
    curve_cov = float(np.mean((pred.low <= forward_radii(THETA_STAR, cfg, times)) &
                              (forward_radii(THETA_STAR, cfg, times) <= pred.high)))
    ok = bool(rel[0] < 0.2 and rel[3] < 0.2 and covered.all())
    ess = diagnostics(chain, 100).effective_sample_size
    return record("C8 synthetic recovery", ok,
                  f"median rel err alpha {rel[0]:.3f} sigma_i {rel[3]:.3f}; 95% covered {covered.tolist()}; "
                  f"medians {np.array2string(np.exp(med), precision=4)}; curve coverage {curve_cov:.2f}; "
                  f"ESS {', '.join(f'{v:.0f}' for v in ess.values())}",
                  time.perf_counter() - t0, 1800.0)


def criterion_9_forward_anchor():
    t0 = time.perf_counter()
    cfg = DiscretizationConfig(n_particles=200, r_max=6.0)
    times = np.arange(0.0, 31.0)
    traj = integrate(initial_masses(L5178Y_MAP, cfg), L5178Y_MAP, cfg, times)
    final = traj.obs_states()[-1]
    contained = tail_mass(final, 0.9 * cfg.r_max) <= 1e-6 * final.masses.sum()
    diam = 2.0 * traj.radii
    fit = np.polyfit(times, diam, 1)
    rms = float(np.sqrt(np.mean((diam - np.polyval(fit, times)) ** 2)) / diam.mean())
    d30 = float(diam[-1])
    ok = contained and rms < 0.05 and 3.2 <= d30 <= 4.8
    return record("C9 forward anchor", ok,
                  f"linear fit rel RMS {rms:.4f} (< 0.05), slope {fit[0]:.4f} mm/day, "
                  f"diameter at day 30 {d30:.3f} mm (target 4 +- 0.8)",
                  time.perf_counter() - t0, 60.0)


def criterion_10_regularized_quantile():
    t0 = time.perf_counter()
    cfg = DiscretizationConfig(n_particles=200, r_max=6.0)
    traj = integrate(initial_masses(L5178Y_MAP, cfg), L5178Y_MAP, cfg, [30.0], record_steps=True)
    raw = QuantileConfig()
    reg = QuantileConfig(regularize=True)
    gap = max(abs(radius(s, raw) - radius(s, reg)) for s in traj.states)
    return record("C10 regularized vs raw radius", gap < cfg.spacing,
                  f"max |difference| {gap:.5f} mm over {traj.masses.shape[0]} states, grid cell {cfg.spacing:.5f} mm",
                  time.perf_counter() - t0, 10.0)


CRITERIA = [
    criterion_1_kernel,
    criterion_2_invariants,
    criterion_3_spatial,
    criterion_4_temporal,
    criterion_5_flat_norm,
    criterion_6_mh_gaussian,
    criterion_7_prior_recovery,
    criterion_8_synthetic_recovery,
    criterion_9_forward_anchor,
    criterion_10_regularized_quantile,
]


@pytest.mark.parametrize("criterion", CRITERIA, ids=lambda f: f.__name__.split("_", 2)[1])
def test_acceptance(criterion):
    assert criterion(), RESULTS[-1][2]


if __name__ == "__main__":
    passed = sum(bool(c()) for c in CRITERIA)
    print(f"{passed}/{len(CRITERIA)} criteria passed")
    sys.exit(0 if passed == len(CRITERIA) else 1)

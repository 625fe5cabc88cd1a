"""Closed-form ingredients of the radial non-local proliferation model.

With ``p(R, t) = 4 pi R^2 n`` the radial density, the model reads

    dp/dt (R) = (4 pi R^2 - p(R)) * int_0^inf L(R, r) p(r) dr

where ``L`` is the ball kernel of radius ``sigma_k`` averaged over spheres.
Lengths are in mm, times in days.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .measures import DiscreteMeasure

__all__ = [
    "ModelParams",
    "DiscretizationConfig",
    "kernel_L",
    "kernel_matrix",
    "cartesian_kernel_K",
    "initial_density",
    "initial_mass_cdf",
    "initial_masses",
    "particle_grid",
    "particle_caps",
    "default_r_max",
    "front_speed",
]


_MAX_LOG = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class ModelParams:
    """Inference vector, stored as logs of (alpha, sigma_k, sigma_o, sigma_i)."""

    log_alpha: float
    log_sigma_k: float
    log_sigma_o: float
    log_sigma_i: float

    NAMES = ("log_alpha", "log_sigma_k", "log_sigma_o", "log_sigma_i")

    def __post_init__(self):
        for name in self.NAMES:
            value = float(getattr(self, name))
            # exp under/overflows outside roughly +-709
            if not -_MAX_LOG < value < _MAX_LOG:
                raise ValueError(f"{name}={value!r} does not map to a finite positive parameter")
            object.__setattr__(self, name, value)

    @classmethod
    def from_natural(cls, alpha, sigma_k, sigma_o, sigma_i) -> "ModelParams":
        return cls(math.log(alpha), math.log(sigma_k), math.log(sigma_o), math.log(sigma_i))

    @classmethod
    def from_array(cls, values) -> "ModelParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (4,):
            raise ValueError(f"expected 4 log-parameters, got shape {values.shape}")
        return cls(*values.tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.log_alpha, self.log_sigma_k, self.log_sigma_o, self.log_sigma_i])

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def sigma_k(self) -> float:
        return math.exp(self.log_sigma_k)

    @property
    def sigma_o(self) -> float:
        return math.exp(self.log_sigma_o)

    @property
    def sigma_i(self) -> float:
        return math.exp(self.log_sigma_i)


@dataclass(frozen=True)
class DiscretizationConfig:
    """Particle grid ``x_i = i r_max / N`` plus initial-profile shape and time step."""

    n_particles: int = 200
    r_max: float = 3.0
    q_exponent: int = 13
    sigma_tilde_ratio: float = 1.065
    time_step: float = 0.01

    def __post_init__(self):
        if int(self.n_particles) != self.n_particles or self.n_particles < 2:
            raise ValueError(f"n_particles must be an integer >= 2, got {self.n_particles!r}")
        if not self.r_max > 0.0:
            raise ValueError(f"r_max must be positive, got {self.r_max!r}")
        if int(self.q_exponent) != self.q_exponent or self.q_exponent < 1:
            raise ValueError(f"q_exponent must be a positive integer, got {self.q_exponent!r}")
        if not self.sigma_tilde_ratio > 0.0:
            raise ValueError(f"sigma_tilde_ratio must be positive, got {self.sigma_tilde_ratio!r}")
        if not self.time_step > 0.0:
            raise ValueError(f"time_step must be positive, got {self.time_step!r}")
        object.__setattr__(self, "n_particles", int(self.n_particles))
        object.__setattr__(self, "q_exponent", int(self.q_exponent))

    @property
    def spacing(self) -> float:
        return self.r_max / self.n_particles

    def with_(self, **changes) -> "DiscretizationConfig":
        return replace(self, **changes)


def default_r_max(observed_radii, factor: float = 3.0) -> float:
    """Truncation radius used when none is configured: a multiple of the largest radius."""
    return factor * float(np.max(observed_radii))


@functools.lru_cache(maxsize=None)
def _front_speed_factor() -> float:
    # moment generating function of the ball kernel projected on one axis (unit radius)
    def mgf(mu):
        return 3.0 * (mu * math.cosh(mu) - math.sinh(mu)) / mu**3

    res = optimize.minimize_scalar(lambda mu: mgf(mu) / mu, bounds=(1e-3, 50.0), method="bounded",
                                   options={"xatol": 1e-12})
    return float(res.fun)


def front_speed(alpha: float, sigma_k: float) -> float:
    """Speed (mm/day) of a planar front invading empty space, from the linearised far field.

    A large colony's radius grows at about this rate; used to size ``r_max``
    for forward runs and as an independent check on the solver.
    """
    return alpha * sigma_k * _front_speed_factor()


def kernel_L(R, r, alpha, sigma_k):
    """Sphere-averaged ball kernel ``L(R, r)`` (vectorised over ``R`` and ``r``).

    Zero once ``|R - r| >= sigma_k``; equal to ``3 alpha / (4 pi sigma_k^3)``
    while ``R + r <= sigma_k``.
    """
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(R <= 0.0) or np.any(r <= 0.0):
        raise ValueError("kernel_L is singular at the origin; R and r must be > 0")
    if not (alpha > 0.0 and sigma_k > 0.0):
        raise ValueError("alpha and sigma_k must be positive")
    s2 = sigma_k * sigma_k
    num = np.minimum((R + r) ** 2, s2) - np.minimum((R - r) ** 2, s2)
    out = (3.0 * alpha / (16.0 * math.pi * sigma_k**3)) * num / (R * r)
    return out if out.ndim else float(out)


def kernel_matrix(x: np.ndarray, alpha: float, sigma_k: float) -> np.ndarray:
    """Dense ``L(x_i, x_j)`` on the particle grid."""
    return kernel_L(x[:, None], x[None, :], alpha, sigma_k)


def cartesian_kernel_K(distance, sigma_k):
    """Normalised indicator of the ball of radius ``sigma_k`` in R^3."""
    distance = np.asarray(distance, dtype=float)
    out = np.where(distance <= sigma_k, 3.0 / (4.0 * math.pi * sigma_k**3), 0.0)
    return out if out.ndim else float(out)


def _sigma_tilde(sigma_i: float, cfg: DiscretizationConfig) -> float:
    return cfg.sigma_tilde_ratio * sigma_i


def initial_density(r, sigma_i: float, cfg: DiscretizationConfig):
    """``4 pi r^2 (1 - (r / st)^q)`` on ``[0, st]`` with ``st = ratio * sigma_i``."""
    r = np.asarray(r, dtype=float)
    st = _sigma_tilde(sigma_i, cfg)
    inside = (r >= 0.0) & (r <= st)
    rc = np.clip(r, 0.0, st)
    out = np.where(inside, 4.0 * math.pi * rc**2 * (1.0 - (rc / st) ** cfg.q_exponent), 0.0)
    return out if out.ndim else float(out)


def initial_mass_cdf(r, sigma_i: float, cfg: DiscretizationConfig):
    """Exact ``int_0^r p(s, 0) ds``; constant past the mollified edge."""
    st = _sigma_tilde(sigma_i, cfg)
    q = cfg.q_exponent
    rc = np.clip(np.asarray(r, dtype=float), 0.0, st)
    out = 4.0 * math.pi * (rc**3 / 3.0 - rc ** (q + 3) / ((q + 3) * st**q))
    return out if out.ndim else float(out)


def particle_grid(cfg: DiscretizationConfig) -> np.ndarray:
    return np.arange(1, cfg.n_particles + 1) * cfg.spacing


def particle_caps(cfg: DiscretizationConfig) -> np.ndarray:
    """Per-particle carrying capacity ``4 pi x_i^2 r_max / N``."""
    x = particle_grid(cfg)
    return 4.0 * math.pi * x**2 * cfg.spacing


def initial_masses(params: ModelParams, cfg: DiscretizationConfig) -> DiscreteMeasure:
    """Cell integrals of the initial profile, placed at the right cell ends."""
    st = _sigma_tilde(params.sigma_i, cfg)
    if st >= cfg.r_max:
        raise ValueError(
            f"initial colony edge {st:.6g} mm is not inside r_max={cfg.r_max:.6g} mm"
        )
    x = particle_grid(cfg)
    cdf = initial_mass_cdf(np.r_[0.0, x], params.sigma_i, cfg)
    m = np.diff(cdf)
    # roundoff can leave -0.0 or tiny negatives past the edge where cdf is flat
    np.maximum(m, 0.0, out=m)
    return DiscreteMeasure(x, m)

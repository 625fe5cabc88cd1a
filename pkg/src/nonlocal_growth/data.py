"""Spheroid growth datasets: CSV ingestion, synthetic generation and built-in priors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .inference import PriorSpec
from .model import DiscretizationConfig, ModelParams
from .solver import QuantileConfig, forward_radii

__all__ = [
    "CELL_LINES",
    "Dataset",
    "DatasetError",
    "load_dataset",
    "write_dataset",
    "parse_window",
    "synthesize",
    "builtin_priors",
    "builtin_sigma_tilde_ratio",
    "packaged_dataset",
]

HEADER = ("time_day", "value_mm")

# prior medians (alpha [1/day], sigma_k [mm], sigma_i [mm]) and initial-edge ratio per line
CELL_LINES = {
    "L-5178Y": {"alpha": 1.4, "sigma_k": 0.06, "sigma_i": 0.264, "sigma_tilde_ratio": 1.065},
    "V-79": {"alpha": 1.04, "sigma_k": 0.06, "sigma_i": 0.403, "sigma_tilde_ratio": 1.065},
    "B-16": {"alpha": 0.9, "sigma_k": 0.09, "sigma_i": 0.733, "sigma_tilde_ratio": 1.06},
}
SIGMA_O_MEDIAN = 1.0
PRIOR_SCALES = (1.0, 1.0, 5.0, 1.0)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Colony radii (mm) at strictly increasing times (days)."""

    cell_line: str
    times: np.ndarray
    radii: np.ndarray
    window: tuple[float, float] | None = None

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        r = np.array(self.radii, dtype=float).reshape(-1)
        if t.shape != r.shape:
            raise DatasetError(f"{t.size} times but {r.size} radii")
        if np.any(np.diff(t) <= 0.0):
            raise DatasetError("observation times must be strictly increasing")
        if t.size and t[0] < 0.0:
            raise DatasetError("observation times must be >= 0")
        if np.any(r <= 0.0) or not np.all(np.isfinite(r)):
            raise DatasetError("observed radii must be finite and positive")
        if self.window is not None:
            t0, t1 = self.window
            if not t0 <= t1:
                raise DatasetError(f"window start {t0} is after its end {t1}")
            if np.any((t < t0) | (t > t1)):
                raise DatasetError("observations outside the selected window")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "radii", r)

    def __len__(self) -> int:
        return self.times.size

    @property
    def observations(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.radii.tolist()))

    @property
    def diameters(self) -> np.ndarray:
        return 2.0 * self.radii


def parse_window(text: str | None) -> tuple[float, float] | None:
    """``"T0:T1"`` -> ``(T0, T1)``."""
    if text is None or text == "":
        return None
    try:
        a, b = text.split(":")
        window = (float(a), float(b))
    except ValueError:
        raise DatasetError(f"window must look like T0:T1, got {text!r}") from None
    if window[0] > window[1]:
        raise DatasetError(f"window start {window[0]} is after its end {window[1]}")
    return window


def load_dataset(path, unit: str = "diameter", window=None, cell_line: str = "custom") -> Dataset:
    """Read a ``time_day,value_mm`` CSV; ``#`` lines are comments.

    Diameters are halved to radii.  Rows outside ``window`` (inclusive) are
    dropped.
    """
    if unit not in ("diameter", "radius"):
        raise DatasetError(f"unit must be 'diameter' or 'radius', got {unit!r}")
    if isinstance(window, str):
        window = parse_window(window)
    path = Path(path)
    times, values = [], []
    header_seen = False
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            cells = [c.strip() for c in row]
            if not header_seen:
                if tuple(cells) != HEADER:
                    raise DatasetError(f"{path}:{lineno}: expected header {','.join(HEADER)}, got {row}")
                header_seen = True
                continue
            if len(cells) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 columns, got {len(cells)}")
            try:
                t, v = float(cells[0]), float(cells[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: cannot parse {row} as numbers") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            if v <= 0.0:
                raise DatasetError(f"{path}:{lineno}: value must be positive, got {v}")
            if times and t <= times[-1]:
                raise DatasetError(f"{path}:{lineno}: time {t} does not increase (previous {times[-1]})")
            times.append(t)
            values.append(v)
    if not header_seen:
        raise DatasetError(f"{path}: missing header {','.join(HEADER)}")
    t = np.asarray(times)
    r = np.asarray(values) / 2.0 if unit == "diameter" else np.asarray(values)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, r = t[keep], r[keep]
    return Dataset(cell_line=cell_line, times=t, radii=r, window=window)


def write_dataset(data: Dataset, path, unit: str = "radius", comment: str | None = None) -> Path:
    """Write ``data`` in the ingestion format with round-trip float precision."""
    if unit not in ("diameter", "radius"):
        raise DatasetError(f"unit must be 'diameter' or 'radius', got {unit!r}")
    path = Path(path)
    values = data.radii * 2.0 if unit == "diameter" else data.radii
    with path.open("w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(HEADER)
        for t, v in zip(data.times, values):
            w.writerow([repr(float(t)), repr(float(v))])
    return path


def synthesize(
    theta_true: ModelParams,
    cfg: DiscretizationConfig,
    qcfg: QuantileConfig | None,
    times,
    seed: int,
    cell_line: str = "synthetic",
) -> Dataset:
    """Noisy radii ``r(t_i) * Z_i`` with ``log Z_i ~ N(0, sigma_o^2)``."""
    t = np.asarray(times, dtype=float)
    if np.any(np.diff(t) <= 0.0):
        raise DatasetError("synthetic observation times must be strictly increasing")
    model = forward_radii(theta_true, cfg, t, qcfg)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, theta_true.sigma_o, size=t.size)
    return Dataset(cell_line=cell_line, times=t, radii=model * np.exp(noise))


def _lookup(cell_line: str) -> dict:
    try:
        return CELL_LINES[cell_line]
    except KeyError:
        known = ", ".join(CELL_LINES)
        raise KeyError(f"unknown cell line {cell_line!r} (known: {known}); supply a custom prior") from None


def builtin_priors(cell_line: str) -> PriorSpec:
    d = _lookup(cell_line)
    return PriorSpec.from_medians(d["alpha"], d["sigma_k"], SIGMA_O_MEDIAN, d["sigma_i"], PRIOR_SCALES)


def builtin_sigma_tilde_ratio(cell_line: str) -> float:
    return _lookup(cell_line)["sigma_tilde_ratio"]


def packaged_dataset(name: str = "synthetic_default") -> Path:
    """Path of a CSV shipped with the package (``synthetic_default`` or ``digitization_template``)."""
    path = Path(__file__).with_name("datasets") / f"{name}.csv"
    if not path.is_file():
        raise DatasetError(f"no packaged dataset named {name!r}")
    return path

"""Stability statistics over time-error series: RMS, the overlapping time
deviation (TDEV), and seeded synthetic noise for checking the estimators."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .rng import substream
from .timebase import S, Duration


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class StabilitySeries:
    tau0: Duration  # sampling interval, fs
    values: np.ndarray  # time error x_i, fs (float)

    def __post_init__(self):
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("values must be one-dimensional")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class TdevPoint:
    averaging_time: Duration
    tdev: float  # fs
    n_terms: int


@dataclass
class TdevCurve:
    points: list[TdevPoint] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)  # m values with N < 3m + 1

    def averaging_times_s(self) -> np.ndarray:
        return np.array([p.averaging_time / S for p in self.points])

    def values(self) -> np.ndarray:
        return np.array([p.tdev for p in self.points])

    def at(self, averaging_time: Duration) -> TdevPoint:
        for p in self.points:
            if p.averaging_time == averaging_time:
                return p
        raise KeyError(f"no TDEV point at {averaging_time} fs")


def _tdev_m(x: np.ndarray, m: int) -> tuple[float, int]:
    n = x.size
    terms = n - 3 * m + 1
    # inner sums over i = j .. j+m-1 of the second difference, via one cumsum
    d2 = x[2 * m:] - 2 * x[m:n - m] + x[:n - 2 * m]
    c = np.concatenate([[0.0], np.cumsum(d2)])
    inner = c[m:m + terms] - c[:terms]
    return math.sqrt(float(inner @ inner) / (6.0 * m * m * terms)), terms


def tdev(series: StabilitySeries, m_values: Iterable[int]) -> TdevCurve:
    """Overlapping TDEV at ``m * tau0`` for each m.

    ``m`` values lacking data (N < 3m + 1) are listed in ``curve.skipped``
    rather than dropped silently.
    """
    x = series.values
    n = x.size
    curve = TdevCurve()
    for m in sorted(set(int(m) for m in m_values)):
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        if n < 3 * m + 1:
            curve.skipped.append(m)
            continue
        val, terms = _tdev_m(x, m)
        curve.points.append(TdevPoint(m * series.tau0, val, terms))
    return curve


def rms(series: StabilitySeries) -> float:
    """Root mean square deviation about the mean."""
    if len(series) == 0:
        raise InsufficientDataError("rms of an empty series")
    v = series.values
    return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


def default_m_values(n: int, extra: Iterable[int] = ()) -> list[int]:
    """Powers of two up to N/4, plus any admissible ``extra`` points."""
    ms = []
    m = 1
    while m <= n // 4:
        ms.append(m)
        m *= 2
    ms += [int(e) for e in extra if e >= 1 and n >= 3 * e + 1]
    return sorted(set(ms))


def decade_m_values(tau0: Duration, n: int) -> list[int]:
    """Averaging times of 1, 10, 100, ... s that are whole multiples of tau0."""
    out = []
    t = S
    while t <= n * tau0:
        if t % tau0 == 0 and n >= 3 * (t // tau0) + 1:
            out.append(t // tau0)
        t *= 10
    return out


def longest_segment(values: Sequence[float | None]) -> np.ndarray:
    """Split at missing samples (None or NaN) and keep the longest run.

    Ties go to the earliest run.  Interpolating across gaps would bias the
    TDEV low, so gaps are never filled.
    """
    best: list[float] = []
    cur: list[float] = []
    for v in list(values) + [None]:
        if v is None or (isinstance(v, float) and math.isnan(v)):
            if len(cur) > len(best):
                best = cur
            cur = []
        else:
            cur.append(float(v))
    return np.array(best, dtype=float)


def loglog_slope(curve: TdevCurve, t_min: Duration | None = None, t_max: Duration | None = None) -> float:
    """Least-squares slope of log TDEV against log averaging time."""
    pts = [p for p in curve.points
           if (t_min is None or p.averaging_time >= t_min) and (t_max is None or p.averaging_time <= t_max)]
    pts = [p for p in pts if p.tdev > 0]
    if len(pts) < 2:
        raise InsufficientDataError("need two positive TDEV points for a slope")
    lx = np.log([p.averaging_time for p in pts])
    ly = np.log([p.tdev for p in pts])
    return float(np.polyfit(lx, ly, 1)[0])


def synthesize(kind: str, params: dict, n: int, seed: int, tau0: Duration = S) -> StabilitySeries:
    """Seeded synthetic time-error series.

    kinds and params (all in fs):
      white_pm     sigma
      random_walk  step            x_k = sum of k normal steps, x_0 = 0
      ramp         slope, offset   per sample
      diurnal      amplitude, period (in samples), phase (rad)
    """
    if n < 4:
        raise ValueError("n must be >= 4")
    rng = substream(seed, f"synthesize.{kind}")
    if kind == "white_pm":
        x = rng.normal(0.0, float(params.get("sigma", 1.0)), n)
    elif kind == "random_walk":
        steps = rng.normal(0.0, float(params.get("step", 1.0)), n - 1)
        x = np.concatenate([[0.0], np.cumsum(steps)])
    elif kind == "ramp":
        x = float(params.get("offset", 0.0)) + float(params.get("slope", 1.0)) * np.arange(n, dtype=float)
    elif kind == "diurnal":
        period = float(params.get("period", 86400.0))
        x = float(params.get("amplitude", 1.0)) * np.sin(2 * np.pi * np.arange(n) / period + float(params.get("phase", 0.0)))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return StabilitySeries(tau0, x)


def write_tdev_csv(path, curve: TdevCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["averaging_time_s", "tdev_fs", "n_terms"])
        for p in curve.points:
            w.writerow([repr(p.averaging_time / S), repr(float(p.tdev)), p.n_terms])


def read_tdev_csv(path) -> list[tuple[float, float, int]]:
    with open(path, newline="") as fh:
        return [(float(r["averaging_time_s"]), float(r["tdev_fs"]), int(r["n_terms"])) for r in csv.DictReader(fh)]

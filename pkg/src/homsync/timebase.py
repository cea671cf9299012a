"""Exact integer time in femtoseconds, and timestamp streams.

Every time value in the package is a plain Python ``int`` counting
femtoseconds.  Python integers never overflow, so a tag 10**6 s after the
epoch (10**21 fs) is as exact as one at 1 fs.  Bulk streams keep an integer
epoch plus int64 offsets, which bounds a single stream to ~2.5 h past its
epoch; longer records are handled as a sequence of windows.
"""
from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from numba import njit

TimeTag = int
Duration = int

FS = 1
PS = 1_000
NS = 1_000_000
US = 1_000_000_000
MS = 1_000_000_000_000
S = 1_000_000_000_000_000

_UNITS = {"fs": FS, "ps": PS, "ns": NS, "us": US, "µs": US, "ms": MS, "s": S}
_DURATION_RE = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([a-zµ]*)\s*$")

_INT64_MAX = np.iinfo(np.int64).max


class ClockId(enum.Enum):
    A = "A"
    B = "B"


def quantize(t, resolution: Duration) -> Duration:
    """Round ``t`` to the nearest multiple of ``resolution``; ties go toward zero.

    ``t`` may be an int, a float or a Fraction (all in fs).  The comparison
    against the half-step is done in exact rational arithmetic.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    q = Fraction(t) / resolution
    sign = -1 if q < 0 else 1
    q = abs(q)
    n = q.numerator // q.denominator
    if q - n > Fraction(1, 2):
        n += 1
    return sign * n * resolution


def parse_duration(value) -> Duration:
    """Parse ``"560 ps"``, ``"1 s"``, ``"3e3 fs"`` or a bare number of fs."""
    if isinstance(value, bool):
        raise ValueError(f"not a duration: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return quantize(value, FS)
    if not isinstance(value, str):
        raise ValueError(f"not a duration: {value!r}")
    m = _DURATION_RE.match(value)
    if not m:
        raise ValueError(f"not a duration: {value!r}")
    number, unit = m.groups()
    unit = unit or "fs"
    if unit not in _UNITS:
        raise ValueError(f"unknown time unit {unit!r} in {value!r}")
    return quantize(Fraction(number) * _UNITS[unit], FS)


def format_duration(d: Duration) -> str:
    for unit in ("s", "ms", "us", "ns", "ps"):
        if d and d % _UNITS[unit] == 0:
            return f"{d // _UNITS[unit]} {unit}"
    return f"{d} fs"


def to_seconds(d) -> float:
    return d / S


def to_ps(d) -> float:
    return d / PS


@dataclass(frozen=True, eq=False)
class TimestampSeries:
    """Sorted detector tags for one clock: ``epoch + offsets[k]`` fs."""

    clock_id: ClockId
    epoch: TimeTag = 0
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        if offsets.ndim != 1:
            raise ValueError("offsets must be one-dimensional")
        if offsets.size > 1 and np.any(np.diff(offsets) < 0):
            raise ValueError("timestamp series must be non-decreasing")
        offsets.flags.writeable = False
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "clock_id", ClockId(self.clock_id))

    @classmethod
    def from_tags(cls, clock_id, tags: Sequence[int]) -> "TimestampSeries":
        tags = [int(t) for t in tags]
        if not tags:
            return cls(clock_id)
        epoch = tags[0]
        span = tags[-1] - epoch
        if span > _INT64_MAX or span < 0 and -span > _INT64_MAX:
            raise OverflowError("tags span more than 2**63 fs; split the stream")
        return cls(clock_id, epoch, np.array([t - epoch for t in tags], dtype=np.int64))

    def __len__(self):
        return int(self.offsets.size)

    @property
    def tags(self) -> list[TimeTag]:
        return [self.epoch + int(o) for o in self.offsets]

    def rebase(self, epoch: TimeTag) -> "TimestampSeries":
        """Same tags expressed relative to another epoch."""
        delta = self.epoch - epoch
        if self.offsets.size:
            lo = delta + int(self.offsets[0])
            hi = delta + int(self.offsets[-1])
            if max(abs(lo), abs(hi)) > _INT64_MAX:
                raise OverflowError("rebased offsets do not fit in int64")
        return TimestampSeries(self.clock_id, epoch, self.offsets + np.int64(delta))

    def shift(self, d: Duration) -> "TimestampSeries":
        return TimestampSeries(self.clock_id, self.epoch + d, self.offsets)


def concat(parts: Iterable[TimestampSeries]) -> TimestampSeries:
    """Join consecutive series of one clock into a single stream."""
    parts = [p for p in parts]
    if not parts:
        raise ValueError("nothing to concatenate")
    clock = parts[0].clock_id
    if any(p.clock_id != clock for p in parts):
        raise ValueError("cannot concatenate series from different clocks")
    epoch = parts[0].epoch
    return TimestampSeries(clock, epoch, np.concatenate([p.rebase(epoch).offsets for p in parts]))


def window(series: TimestampSeries, start: TimeTag, length: Duration) -> TimestampSeries:
    """Tags ``t`` with ``start <= t < start + length``, re-expressed from ``start``."""
    if length < 0:
        raise ValueError("window length must be non-negative")
    lo = start - series.epoch
    hi = lo + length
    off = series.offsets
    i = int(np.searchsorted(off, _clamp(lo), side="left"))
    j = off.size if hi > _INT64_MAX else int(np.searchsorted(off, _clamp(hi), side="left"))
    picked = off[i:j]
    if length > _INT64_MAX:
        return TimestampSeries(series.clock_id, series.epoch, picked)
    # picked - lo lies in [0, length); wrapping int64 subtraction is exact there
    lo_wrapped = np.int64(((lo + 2**63) % 2**64) - 2**63)
    with np.errstate(over="ignore"):
        rebased = picked - lo_wrapped
    return TimestampSeries(series.clock_id, start, rebased)


def _clamp(x: int) -> int:
    return max(-_INT64_MAX, min(_INT64_MAX, x))


def write_timestamps_csv(path, *series: TimestampSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clock_id", "ticks_fs"])
        for s in series:
            cid = s.clock_id.value
            for t in s.tags:
                w.writerow([cid, t])


def read_timestamps_csv(path) -> dict[ClockId, TimestampSeries]:
    tags: dict[ClockId, list[int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["clock_id", "ticks_fs"]:
            raise ValueError(f"{path}: expected header clock_id,ticks_fs, got {reader.fieldnames}")
        for row in reader:
            tags.setdefault(ClockId(row["clock_id"]), []).append(int(row["ticks_fs"]))
    return {cid: TimestampSeries.from_tags(cid, sorted(t)) for cid, t in tags.items()}


@njit(cache=True)
def _quantize_kernel(x, res):
    out = np.empty_like(x)
    for k in range(x.size):
        v = x[k]
        r = v % res  # numba follows Python: 0 <= r < res
        q = v - r
        if 2 * r > res or (2 * r == res and v < 0):
            q += res
        out[k] = q
    return out


def quantize_array(x: np.ndarray, resolution: Duration) -> np.ndarray:
    """Vectorised :func:`quantize` for int64 arrays."""
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    x = np.ascontiguousarray(x, dtype=np.int64)
    if resolution == 1:
        return x.copy()
    return _quantize_kernel(x, np.int64(resolution))

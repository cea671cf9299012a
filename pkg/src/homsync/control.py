"""Dip lock: a full HOM scan to find the balance point, then the square
modulation dither loop that keeps the motorized delay line on the minimum."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .plant import EventBatch, PlantState, set_mdl
from .timebase import PS, S, Duration, TimeTag

HOLD, INCREASE, DECREASE = "hold", "increase", "decrease"


class NoDipError(RuntimeError):
    """The scan found no interference dip."""


class RelockRequired(RuntimeError):
    """The dither would push the MDL past an end stop; a rescan is needed."""


@dataclass(frozen=True)
class ControllerConfig:
    dither_depth: Duration = 400  # delta, fs
    step: Duration = 200  # Delta, fs
    hold_threshold: float = 15.0  # counts/s
    dwell: Duration = 1 * S
    scan_range: tuple[Duration, Duration] = (0, 560 * PS)
    scan_step: Duration = 500

    def __post_init__(self):
        if self.dither_depth <= 0 or self.step <= 0 or self.dwell <= 0:
            raise ValueError("dither depth, step and dwell must be positive")
        if self.hold_threshold < 0:
            raise ValueError("hold_threshold must be non-negative")
        if self.scan_step <= 0 or self.scan_range[0] > self.scan_range[1]:
            raise ValueError("bad scan range or step")


@dataclass
class DipScan:
    points: list[tuple[Duration, float]]
    minimum_setting: Duration


@dataclass
class LockEntry:
    time: TimeTag
    mdl_setting: Duration  # reference after this cycle's correction
    rc_minus: float
    rc_plus: float
    action: str
    residual: float  # simulation truth: imbalance at the reference, fs


@dataclass
class LockRecord:
    entries: list[LockEntry] = field(default_factory=list)
    scans: list[tuple[TimeTag, DipScan]] = field(default_factory=list)

    @property
    def residuals(self) -> list[float]:
        return [e.residual for e in self.entries]


BatchSink = Callable[[EventBatch], None]


def scan_dip(plant: PlantState, cfg: ControllerConfig, on_batch: BatchSink | None = None) -> DipScan:
    """Step the MDL through the scan range, recording the coincidence rate."""
    lo, hi = cfg.scan_range
    mlo, mhi = plant.mdl.range
    if lo < mlo or hi > mhi:
        raise ValueError("scan range exceeds the MDL travel")
    if cfg.scan_step < plant.mdl.resolution:
        raise ValueError("scan step is finer than the MDL resolution")
    dwell_s = cfg.dwell / S
    points = []
    setting = lo
    while setting <= hi:
        actual = set_mdl(plant, setting)
        batch = plant.advance(cfg.dwell, taps=on_batch is not None)
        if on_batch is not None:
            on_batch(batch)
        points.append((actual, batch.hom_counts / dwell_s))
        setting += cfg.scan_step
    rates = [r for _, r in points]
    top = max(rates)
    if top <= 0 or (top - min(rates)) / top < 0.1:
        raise NoDipError("no HOM dip within the scan range")
    # with many points, shot noise alone can reach 10% contrast; the deepest
    # point must also sit 5 Poisson sigma below the typical count
    med = float(np.median(rates)) * dwell_s
    if med - min(rates) * dwell_s < 5 * math.sqrt(max(med, 1.0)):
        raise NoDipError("scan contrast is consistent with shot noise alone")
    # ties go to the smallest setting, which min() gives on an ordered list
    best = min(points, key=lambda p: p[1])[0]
    set_mdl(plant, best)
    return DipScan(points, best)


def decide(rc_minus: float, rc_plus: float, threshold: float) -> str:
    """Dither decision; a difference exactly at the threshold holds."""
    if abs(rc_minus - rc_plus) <= threshold:
        return HOLD
    return DECREASE if rc_minus > rc_plus else INCREASE


@dataclass
class LockState:
    reference: Duration
    record: LockRecord = field(default_factory=LockRecord)


def dither_cycle(plant: PlantState, cfg: ControllerConfig, state: LockState,
                 on_batch: BatchSink | None = None) -> LockEntry:
    half = cfg.dither_depth // 2
    lo, hi = plant.mdl.range
    if state.reference - half < lo or state.reference + half > hi:
        raise RelockRequired(f"reference {state.reference} fs too close to an MDL end stop")
    dwell_s = cfg.dwell / S
    rates = []
    # the MDL is in the idler path: a longer MDL shortens the relative delay
    # tau = signal - idler, so Rc(-) (tau - delta/2) sits at reference + delta/2
    for setting in (state.reference + half, state.reference - half):
        set_mdl(plant, setting)
        batch = plant.advance(cfg.dwell, taps=on_batch is not None)
        if on_batch is not None:
            on_batch(batch)
        rates.append(batch.hom_counts / dwell_s)
    rc_minus, rc_plus = rates
    action = decide(rc_minus, rc_plus, cfg.hold_threshold)
    if action == DECREASE:
        state.reference -= cfg.step
    elif action == INCREASE:
        state.reference += cfg.step
    residual = plant.balance_setting() - state.reference
    entry = LockEntry(plant.now, state.reference, rc_minus, rc_plus, action, residual)
    state.record.entries.append(entry)
    return entry


class DipLock:
    """Scan once, then dither; rescans automatically at MDL end stops."""

    def __init__(self, plant: PlantState, cfg: ControllerConfig, on_batch: BatchSink | None = None):
        self.plant = plant
        self.cfg = cfg
        self.on_batch = on_batch
        self.state: LockState | None = None
        self.record = LockRecord()

    def acquire(self):
        scan = scan_dip(self.plant, self.cfg, self.on_batch)
        self.record.scans.append((self.plant.now, scan))
        if self.state is None:
            self.state = LockState(scan.minimum_setting, self.record)
        else:
            self.state.reference = scan.minimum_setting
        return scan

    def cycle(self) -> LockEntry | None:
        if self.state is None:
            self.acquire()
        try:
            return dither_cycle(self.plant, self.cfg, self.state, self.on_batch)
        except RelockRequired:
            self.acquire()
            return None

    @property
    def cycle_time(self) -> Duration:
        return 2 * self.cfg.dwell

    def run_until(self, t_end: TimeTag):
        while self.plant.now + self.cycle_time <= t_end:
            self.cycle()


def run_lock(plant: PlantState, cfg: ControllerConfig, duration: Duration,
             on_batch: BatchSink | None = None) -> LockRecord:
    if duration < cfg.dwell:
        raise ValueError("duration must cover at least one dwell")
    t_end = plant.now + duration
    lock = DipLock(plant, cfg, on_batch)
    lock.acquire()
    lock.run_until(t_end)
    return lock.record


def write_lock_csv(path, record: LockRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_fs", "mdl_fs", "rc_minus", "rc_plus", "action", "residual_fs"])
        for e in record.entries:
            w.writerow([e.time, e.mdl_setting, repr(float(e.rc_minus)), repr(float(e.rc_plus)), e.action,
                        repr(float(e.residual))])


def write_scan_csv(path, scan: DipScan) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mdl_fs", "coincidence_rate"])
        for setting, rate in scan.points:
            w.writerow([setting, repr(float(rate))])

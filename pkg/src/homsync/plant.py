"""Simulated optical plant: pulsed pair source, two drifting fiber channels,
the fixed and motorized delay lines, gated detectors and the TCSPC unit.

Path model.  The delay lines and fibers sit before the 90/10 taps, so the
same one-way delays feed both the HOM interferometer and the tap detectors::

    imbalance    = (ODL + fiber_a(t)) - (MDL + fiber_b(t))
    tap offset   = imbalance + tap_mismatch + clock_offset

Holding the imbalance at zero therefore leaves the D3/D4 offset equal to the
static part only.  Only detected events are generated (thinned Poisson), so
long runs stay cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.signal import lfilter

from .photonics import DEFAULT_COHERENCE_TIME, DEFAULT_VISIBILITY, HomDipModel, dip_envelope
from .rng import substream
from .timebase import PS, NS, US, S, ClockId, Duration, TimeTag, TimestampSeries, quantize, quantize_array

_INT64_MAX = np.iinfo(np.int64).max


class UsageError(RuntimeError):
    """An operation that the hardware does not support (e.g. moving a fixed line)."""


@dataclass
class SourceConfig:
    rep_rate: float = 75e6
    pair_rate: float = 3000.0
    singles_rate_a: float = 104_000.0
    singles_rate_b: float = 140_000.0
    tap_fraction: float = 0.1

    def __post_init__(self):
        rates = (self.rep_rate, self.pair_rate, self.singles_rate_a, self.singles_rate_b)
        if any(r < 0 for r in rates):
            raise ValueError("source rates must be non-negative")
        if self.pair_rate > min(self.singles_rate_a, self.singles_rate_b):
            raise ValueError("pair_rate cannot exceed either singles rate")
        if self.rep_rate <= 0 or self.pair_rate / self.rep_rate > 1e-2:
            raise ValueError("pair_rate must be a small fraction of rep_rate")
        if not 0 <= self.tap_fraction < 1:
            raise ValueError("tap_fraction must lie in [0, 1)")

    @property
    def pulse_period(self) -> Duration:
        return int(round(S / self.rep_rate))


@dataclass
class DelayLine:
    kind: str  # "fixed" or "motorized"
    range: tuple[Duration, Duration]
    resolution: Duration
    setting: Duration

    def __post_init__(self):
        if self.kind not in ("fixed", "motorized"):
            raise ValueError(f"unknown delay line kind {self.kind!r}")
        lo, hi = self.range
        if lo > hi or self.resolution <= 0:
            raise ValueError("bad delay line range or resolution")
        if not lo <= self.setting <= hi or self.setting % self.resolution:
            raise ValueError(f"setting {self.setting} fs is off range or off grid")

    def set(self, requested) -> Duration:
        if self.kind == "fixed":
            raise UsageError("a fixed delay line cannot be moved")
        lo, hi = self.range
        self.setting = min(max(quantize(requested, self.resolution), lo), hi)
        return self.setting


def fixed_odl(delay: Duration = 100 * PS) -> DelayLine:
    return DelayLine("fixed", (delay, delay), 1, delay)


def motorized_mdl(setting: Duration = 250 * PS) -> DelayLine:
    return DelayLine("motorized", (0, 560 * PS), 1, setting)


@dataclass
class TemperatureProcess:
    """Mean + diurnal sine + Ornstein-Uhlenbeck wander, a pure function of time.

    The OU part lives on a grid of ``sample_interval`` seconds (the spool's
    thermal inertia) and is linearly interpolated in between.  The grid is
    grown lazily but always from index 0 with the same generator, so the value
    at a given time never depends on query order.
    """

    mean: float = 295.0
    diurnal_amplitude: float = 0.0
    diurnal_period: float = 86400.0
    ou_sigma: float = 0.0
    ou_tau: float = 3600.0
    seed: int = 0
    stream: str = "temperature"
    sample_interval: float = 60.0
    _grid: np.ndarray = field(default=None, init=False, repr=False)
    _rng: np.random.Generator = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.ou_tau <= 0 or self.sample_interval <= 0 or self.diurnal_period <= 0:
            raise ValueError("ou_tau, sample_interval and diurnal_period must be positive")
        if self.ou_sigma < 0:
            raise ValueError("ou_sigma must be non-negative")

    def _ou_grid(self, upto: int) -> np.ndarray:
        if self._grid is None:
            self._rng = substream(self.seed, self.stream)
            self._grid = np.array([self.ou_sigma * self._rng.standard_normal()])
        if upto >= self._grid.size:
            n_new = max(upto + 1 - self._grid.size, 4096)
            a = math.exp(-self.sample_interval / self.ou_tau)
            b = self.ou_sigma * math.sqrt(1 - a * a)
            e = b * self._rng.standard_normal(n_new)
            new, _ = lfilter([1.0], [1.0, -a], e, zi=[a * self._grid[-1]])
            self._grid = np.concatenate([self._grid, new])
        return self._grid

    def at_seconds(self, t_s):
        t_s = np.maximum(np.asarray(t_s, dtype=float), 0.0)
        out = self.mean + self.diurnal_amplitude * np.sin(2 * np.pi * t_s / self.diurnal_period)
        if self.ou_sigma > 0:
            k = t_s / self.sample_interval
            grid = self._ou_grid(int(np.max(k)) + 1)
            out = out + np.interp(k, np.arange(grid.size), grid)
        return out


def temperature_at(proc: TemperatureProcess, t: TimeTag) -> float:
    return float(proc.at_seconds(t / S))


@dataclass
class FiberChannel:
    nominal_delay: Duration
    thermal_coefficient: float = 40 * PS  # fs per kelvin
    temperature: TemperatureProcess = field(default_factory=TemperatureProcess)
    ramp_rate: float = 0.0  # fs per second of linear drift, for tracking tests
    ramp_start: float = 0.0  # seconds

    def __post_init__(self):
        if self.nominal_delay < 0:
            raise ValueError("nominal_delay must be non-negative")

    def delay_seconds(self, t_s) -> np.ndarray:
        """Float fs delay at times given in seconds (vectorised)."""
        t_s = np.asarray(t_s, dtype=float)
        dt = self.temperature.at_seconds(t_s) - self.temperature.mean
        return self.nominal_delay + self.thermal_coefficient * dt + self.ramp_rate * np.maximum(t_s - self.ramp_start, 0.0)


def channel_delay(ch: FiberChannel, t: TimeTag) -> Duration:
    return quantize(float(ch.delay_seconds(t / S)), 1)


@dataclass
class DetectorConfig:
    efficiency: float = 0.20
    jitter_sigma: Duration = 120 * PS
    dead_time: Duration = 10 * US
    dark_rate: float = 1000.0
    gate_rate: float = 75e6

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if self.jitter_sigma < 0 or self.dead_time < 0 or self.dark_rate < 0 or self.gate_rate <= 0:
            raise ValueError("detector jitter, dead time, dark rate must be >= 0 and gate rate > 0")


# AR(1) instrument drift calibrated so that a 1 PPS self-test gives
# TDEV = 0.9 ps at 1000 s and ~0.3 ps at 16000 s
TCSPC_DRIFT_CORRELATION = 300.0
TCSPC_DRIFT_STEP = 130.5  # fs


@dataclass
class TcspcModel:
    """Start-stop timer with a slowly wandering systematic offset.

    ``drift_correlation`` is the AR(1) correlation length in samples; ``None``
    gives an unbounded random walk.
    """

    bin_width: Duration = 4 * PS
    drift_step: float = TCSPC_DRIFT_STEP
    drift_correlation: float | None = TCSPC_DRIFT_CORRELATION
    seed: int = 0
    state: float = 0.0
    _rng: np.random.Generator = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.drift_step < 0:
            raise ValueError("drift_step must be non-negative")
        if self.drift_correlation is not None and self.drift_correlation <= 0:
            raise ValueError("drift_correlation must be positive")

    @property
    def rng(self):
        if self._rng is None:
            self._rng = substream(self.seed, "tcspc")
        return self._rng

    def step(self):
        rho = 1.0 if self.drift_correlation is None else math.exp(-1.0 / self.drift_correlation)
        self.state = rho * self.state + self.drift_step * self.rng.standard_normal()


def tcspc_measure(model: TcspcModel, delta):
    """Measured value of an interval (int) or of an int64 array of stop times.

    All entries of one call share the current drift state; the drift then
    advances one step.
    """
    offset = int(round(model.state))
    if np.ndim(delta) == 0:
        out = quantize(int(delta) + offset, model.bin_width)
    else:
        out = quantize_array(np.asarray(delta, dtype=np.int64) + np.int64(offset), model.bin_width)
    model.step()
    return out


def calibrate_drift_step(target_tdev: float, m: int, correlation: float) -> float:
    """AR(1) step size giving ``target_tdev`` at ``m`` samples of averaging."""
    rho = math.exp(-1.0 / correlation)
    var = 1.0 / (1 - rho * rho)
    d = np.arange(-(m - 1), m)
    w = m - np.abs(d)

    def block_cov(lag):
        return var * float(np.sum(w * rho ** np.abs(lag + d)))

    v = 6 * block_cov(0) - 8 * block_cov(m) + 2 * block_cov(2 * m)
    return target_tdev / math.sqrt(v / (6 * m * m))


@njit(cache=True)
def _place(rel, p0, slope, jitter):
    out = np.empty(rel.size, dtype=np.int64)
    for k in range(rel.size):
        out[k] = rel[k] + np.int64(np.rint(p0 + slope * rel[k])) + np.int64(np.rint(jitter[k]))
    return out


@njit(cache=True)
def _dead_time_keep(t, last, dead):
    keep = np.zeros(t.size, dtype=np.bool_)
    gap = max(dead, 1)
    for k in range(t.size):
        if t[k] - last >= gap:
            keep[k] = True
            last = t[k]
    return keep


@dataclass
class EventBatch:
    start: TimeTag
    duration: Duration
    hom_counts: int
    d3: TimestampSeries | None = None
    d4: TimestampSeries | None = None


def default_detectors() -> dict[str, DetectorConfig]:
    return {name: DetectorConfig() for name in ("D1", "D2", "D3", "D4")}


@dataclass
class PlantState:
    source: SourceConfig
    channel_a: FiberChannel
    channel_b: FiberChannel
    odl: DelayLine = field(default_factory=fixed_odl)
    mdl: DelayLine = field(default_factory=motorized_mdl)
    detectors: dict[str, DetectorConfig] = field(default_factory=default_detectors)
    tcspc: TcspcModel = field(default_factory=TcspcModel)
    dip: HomDipModel = field(default_factory=lambda: HomDipModel(DEFAULT_VISIBILITY, DEFAULT_COHERENCE_TIME))
    seed: int = 0
    clock_offset: Duration = 0  # clock A reading minus clock B reading
    tap_mismatch: Duration = 0  # extra tap-fiber length on the A side
    shot_noise: bool = True
    now: TimeTag = 0
    _last_tag: dict = field(default_factory=dict, init=False, repr=False)
    _streams: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.odl.kind != "fixed" or self.mdl.kind != "motorized":
            raise ValueError("the ODL must be fixed and the MDL motorized")
        if set(self.detectors) != {"D1", "D2", "D3", "D4"}:
            raise ValueError("plant needs detectors D1..D4")

    def _rng(self, name):
        if name not in self._streams:
            self._streams[name] = substream(self.seed, name)
        return self._streams[name]

    def imbalance_seconds(self, t_s):
        """Signal-minus-idler path delay (float fs) at times in seconds."""
        return (self.odl.setting + self.channel_a.delay_seconds(t_s)) - (self.mdl.setting + self.channel_b.delay_seconds(t_s))

    def imbalance(self, t: TimeTag | None = None) -> float:
        t = self.now if t is None else t
        return float(self.imbalance_seconds(t / S))

    def balance_setting(self, t: TimeTag | None = None) -> float:
        """MDL setting (float fs) that would zero the imbalance at ``t``."""
        return self.mdl.setting + self.imbalance(t)

    def true_offset(self, t: TimeTag | None = None) -> float:
        """Noise-free D3-minus-D4 arrival offset at ``t`` (float fs)."""
        return self.imbalance(t) + self.tap_mismatch + self.clock_offset

    def expected_hom_rate(self, t: TimeTag | None = None) -> float:
        return self.source.pair_rate * dip_envelope(self.dip, self.imbalance(t))

    def advance(self, dt: Duration, taps: bool = True) -> EventBatch:
        if dt <= 0:
            raise ValueError("dt must be positive")
        start = self.now
        period = self.source.pulse_period
        k0 = -(-start // period)
        k1 = -(-(start + dt) // period)
        first = k0 * period - start  # first pulse relative to start
        t0_s = start / S
        dt_s = dt / S

        hom = self._hom_counts(k0, k1, period, first, t0_s, dt_s)
        batch = EventBatch(start, dt, hom)
        if taps:
            batch.d3, batch.d4 = self._tap_events(k0, k1, period, first, t0_s, dt_s)
        self.now = start + dt
        return batch

    def _slots(self, rng, n, k0, k1, period, first):
        if k1 <= k0 or n == 0:
            return np.zeros(0, dtype=np.int64)
        slots = rng.integers(0, k1 - k0, size=n)
        return np.sort(slots).astype(np.int64) * np.int64(period) + np.int64(first)

    def _hom_counts(self, k0, k1, period, first, t0_s, dt_s) -> int:
        mean = self.source.pair_rate * dt_s
        if not self.shot_noise:
            mids = t0_s + (np.arange(16) + 0.5) / 16 * dt_s
            return int(round(mean * float(np.mean(dip_envelope(self.dip, self.imbalance_seconds(mids))))))
        rng = self._rng("hom")
        n = int(rng.poisson(mean))
        rel = self._slots(rng, n, k0, k1, period, first)
        i0, i1 = self.imbalance_seconds(np.array([t0_s, t0_s + dt_s]))
        p = dip_envelope(self.dip, i0 + (i1 - i0) * (rel / (dt_s * S)))
        return int(np.count_nonzero(rng.random(n) < p))

    def _tap_events(self, k0, k1, period, first, t0_s, dt_s):
        src = self.source
        d1, d2, d3, d4 = (self.detectors[k] for k in ("D1", "D2", "D3", "D4"))
        f = src.tap_fraction
        eta_ref = max(d1.efficiency * d2.efficiency, 1e-12)
        # the quoted rates are at detector outputs; back out the photon flux
        pair_arrivals = src.pair_rate / eta_ref * f * f
        single_a = max(src.singles_rate_a * f / max(d1.efficiency, 1e-12) - pair_arrivals, 0.0)
        single_b = max(src.singles_rate_b * f / max(d2.efficiency, 1e-12) - pair_arrivals, 0.0)

        rng = self._rng("taps")
        n_pairs = int(rng.poisson(pair_arrivals * dt_s))
        pairs = self._slots(rng, n_pairs, k0, k1, period, first)
        hit3 = rng.random(n_pairs) < d3.efficiency
        hit4 = rng.random(n_pairs) < d4.efficiency
        sa = self._slots(rng, int(rng.poisson(single_a * d3.efficiency * dt_s)), k0, k1, period, first)
        sb = self._slots(rng, int(rng.poisson(single_b * d4.efficiency * dt_s)), k0, k1, period, first)

        out = []
        for name, det, emitted, clock, dark_stream in (
            ("D3", d3, np.concatenate([pairs[hit3], sa]), ClockId.A, "dark.d3"),
            ("D4", d4, np.concatenate([pairs[hit4], sb]), ClockId.B, "dark.d4"),
        ):
            drng = self._rng(dark_stream)
            gate = int(round(S / det.gate_rate))
            g0 = -(-(self.now) // gate)
            g1 = -(-(self.now + int(round(dt_s * S))) // gate)
            darks = self._slots(drng, int(drng.poisson(det.dark_rate * dt_s)), g0, g1, gate, g0 * gate - self.now)
            rel = np.concatenate([emitted, darks])
            ends = np.array([t0_s, t0_s + dt_s])
            if clock is ClockId.A:
                p0, p1 = self.odl.setting + self.channel_a.delay_seconds(ends) + self.tap_mismatch + self.clock_offset
            else:
                p0, p1 = self.mdl.setting + self.channel_b.delay_seconds(ends)
            # path delays move by fs per second; linear within a batch is exact enough
            jitter = rng.normal(0.0, det.jitter_sigma, rel.size) if det.jitter_sigma > 0 else np.zeros(rel.size)
            tags = _place(rel, float(p0), float(p1 - p0) / (dt_s * S), jitter)
            tags.sort()
            last = self._last_tag.get(name)
            last_rel = -(2**62) if last is None else max(last - self.now, -(2**62))
            keep = _dead_time_keep(tags, np.int64(last_rel), np.int64(det.dead_time))
            tags = tags[keep]
            if tags.size:
                self._last_tag[name] = self.now + int(tags[-1])
            out.append(TimestampSeries(clock, self.now, tags))
        return out[0], out[1]


def set_mdl(plant: PlantState, requested) -> Duration:
    return plant.mdl.set(requested)


def advance(plant: PlantState, dt: Duration, taps: bool = True) -> EventBatch:
    return plant.advance(dt, taps)


FIBER_DELAY_2KM = 9_780 * NS  # one-way group delay of a 2 km spool


def default_channels(seed: int, with_fiber: bool = True, time_compression: float = 8.0,
                     thermal_coefficient: float = 40 * PS, diurnal_a: float = 1.0, diurnal_b: float = 0.8,
                     ou_sigma: float = 0.1, ramp_rate: float = 0.0,
                     ramp_start: float = 0.0) -> tuple[FiberChannel, FiberChannel]:
    """Two spools in the same room: shared diurnal swing, independent wander.

    Channel B is 150 ps shorter so the balance point sits at MDL = 250 ps.
    Without fiber both channels are bare 150 ps patch-cord offsets.  A ramp,
    if any, lengthens channel A.
    """
    c = time_compression
    temp_a = TemperatureProcess(295.0, diurnal_a, 86400 / c, ou_sigma, 86400 / c, seed, "temperature.a", 60.0)
    temp_b = TemperatureProcess(295.0, diurnal_b, 86400 / c, ou_sigma, 86400 / c, seed, "temperature.b", 60.0)
    if with_fiber:
        return (FiberChannel(FIBER_DELAY_2KM, thermal_coefficient, temp_a, ramp_rate, ramp_start),
                FiberChannel(FIBER_DELAY_2KM - 150 * PS, thermal_coefficient, temp_b))
    # a short patch: two orders of magnitude less thermally sensitive
    k = thermal_coefficient / 100
    return FiberChannel(150 * PS, k, temp_a, ramp_rate, ramp_start), FiberChannel(0, k, temp_b)

"""Clock offset from D3/D4 arrival times: a binned cross-correlation of the
two tag streams, a Gaussian fit to its peak, and the windowed offset series."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .plant import PlantState, tcspc_measure
from .timebase import NS, PS, S, Duration, TimeTag, TimestampSeries, quantize_array


class NoPeakError(RuntimeError):
    pass


class FitNotConvergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorrelationConfig:
    bin_width: Duration = 4 * PS
    span: tuple[Duration, Duration] = (-5 * NS, 5 * NS)
    window: Duration = 1000 * S

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.span[1] <= self.span[0]:
            raise ValueError("span must be non-empty")
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def n_bins(self) -> int:
        # the upper edge is rounded up to a whole bin
        return -(-(self.span[1] - self.span[0]) // self.bin_width)

    @property
    def upper(self) -> Duration:
        return self.span[0] + self.n_bins * self.bin_width


@dataclass
class CorrelationHistogram:
    bin_edges: np.ndarray  # int64 fs, n_bins + 1
    counts: np.ndarray  # int64
    n_a: int
    n_b: int
    sums: np.ndarray | None = None  # int64 sum of the exact differences in each bin

    @property
    def bin_width(self) -> int:
        return int(self.bin_edges[1] - self.bin_edges[0])

    @property
    def centers(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2.0


@dataclass(frozen=True)
class OffsetEstimate:
    tau_hat: float  # fs
    sigma: float  # fs
    amplitude: float
    background: float
    fit_rms: float


@njit(cache=True)
def _correlate(a, b, lo, hi, bw, counts, sums):
    nb = b.size
    j0 = 0
    for i in range(a.size):
        ai = a[i]
        # b must satisfy lo <= ai - b < hi, i.e. ai - hi < b <= ai - lo
        while j0 < nb and ai - b[j0] >= hi:
            j0 += 1
        j = j0
        while j < nb and ai - b[j] >= lo:
            d = ai - b[j]
            k = (d - lo) // bw
            counts[k] += 1
            sums[k] += d
            j += 1


def _empty_histogram(cfg: CorrelationConfig, n_a=0, n_b=0) -> CorrelationHistogram:
    edges = cfg.span[0] + cfg.bin_width * np.arange(cfg.n_bins + 1, dtype=np.int64)
    return CorrelationHistogram(edges, np.zeros(cfg.n_bins, dtype=np.int64), n_a, n_b,
                                np.zeros(cfg.n_bins, dtype=np.int64))


def cross_correlate(a: TimestampSeries, b: TimestampSeries, cfg: CorrelationConfig) -> CorrelationHistogram:
    """Histogram of ``t_a - t_b`` over all pairs falling in ``cfg.span``.

    A two-pointer sweep over both sorted streams; cost is linear in the
    stream lengths plus the number of pairs in the span.
    """
    hist = _empty_histogram(cfg, len(a), len(b))
    if len(a) and len(b):
        b = b.rebase(a.epoch)
        _correlate(a.offsets, b.offsets, np.int64(cfg.span[0]), np.int64(cfg.upper), np.int64(cfg.bin_width),
                   hist.counts, hist.sums)
    return hist


class StreamingCorrelator:
    """Accumulates the same histogram as :func:`cross_correlate` chunk by chunk.

    Chunks are int64 tags relative to one fixed epoch, each chunk later than
    the previous for its own stream.  Only tags that can still pair with future
    chunks are carried over.
    """

    def __init__(self, cfg: CorrelationConfig):
        self.cfg = cfg
        self.hist = _empty_histogram(cfg)
        self._a_tail = np.zeros(0, dtype=np.int64)
        self._b_tail = np.zeros(0, dtype=np.int64)
        self._margin = max(abs(cfg.span[0]), abs(cfg.upper)) + 1

    def _run(self, a, b):
        if a.size and b.size:
            _correlate(a, b, np.int64(self.cfg.span[0]), np.int64(self.cfg.upper), np.int64(self.cfg.bin_width),
                       self.hist.counts, self.hist.sums)

    def add(self, a_new: np.ndarray, b_new: np.ndarray):
        b_all = np.concatenate([self._b_tail, b_new])
        self._run(a_new, b_all)
        self._run(self._a_tail, b_new)
        self.hist.n_a += a_new.size
        self.hist.n_b += b_new.size
        a_all = np.concatenate([self._a_tail, a_new])
        # future a tags are >= the last a seen, so older b tags below
        # last_a - margin can never pair again (and symmetrically for a)
        if a_all.size:
            b_all = b_all[b_all >= a_all[-1] - self._margin]
        if b_new.size or self._b_tail.size:
            last_b = b_new[-1] if b_new.size else self._b_tail[-1]
            a_all = a_all[a_all >= last_b - self._margin]
        self._a_tail, self._b_tail = a_all, b_all


def _gauss(x, amp, mu, sig, bg):
    return amp * np.exp(-0.5 * ((x - mu) / sig) ** 2) + bg


def fit_gaussian(hist: CorrelationHistogram, max_iter: int = 100, tol: float = 1e-6) -> OffsetEstimate:
    """Levenberg-Marquardt fit of ``amp * exp(-(t - tau)^2 / 2 sig^2) + bg``.

    Started from the tallest bin and the first two moments inside three
    FWHM of it.  A peak confined to fewer than three bins carries no shape
    information and is reported by its centroid with ``sig = bin/sqrt(12)``.
    """
    y = hist.counts.astype(float)
    if y.size == 0:
        raise NoPeakError("empty histogram")
    bw = hist.bin_width
    x = (hist.centers - hist.bin_edges[0]) / bw  # bin units for conditioning
    bg0 = float(np.median(y))
    k = int(np.argmax(y))
    ymax = y[k]
    if ymax <= bg0 or ymax < bg0 + 5 * math.sqrt(bg0):
        raise NoPeakError(f"tallest bin {ymax:g} is not 5 sigma above background {bg0:g}")

    half = bg0 + (ymax - bg0) / 2
    lo = k
    while lo > 0 and y[lo - 1] > half:
        lo -= 1
    hi = k
    while hi < y.size - 1 and y[hi + 1] > half:
        hi += 1
    fwhm = hi - lo + 1
    w0, w1 = max(0, k - 3 * fwhm), min(y.size, k + 3 * fwhm + 1)
    wx, wy = x[w0:w1], np.clip(y[w0:w1] - bg0, 0, None)
    mu0 = float(np.sum(wx * wy) / np.sum(wy))
    var0 = float(np.sum(wy * (wx - mu0) ** 2) / np.sum(wy))
    origin = float(hist.bin_edges[0])

    if np.count_nonzero(wy > 0) < 3:
        tau = origin + mu0 * bw
        if hist.sums is not None:
            # exact mean of the differences in the peak bins, background removed
            sel = slice(w0, w1)
            excess = float(np.sum(wy))
            tau = float(np.sum(hist.sums[sel]) - bg0 * np.sum(hist.centers[sel])) / excess
        return OffsetEstimate(tau, bw / math.sqrt(12), ymax - bg0, bg0, 0.0)

    p = np.array([ymax - bg0, mu0, max(math.sqrt(var0), 0.5), bg0])
    lam = 1e-3

    def residual(q):
        return _gauss(x, *q) - y

    r = residual(p)
    cost = float(r @ r)
    for _ in range(max_iter):
        amp, mu, sig, _bg = p
        e = np.exp(-0.5 * ((x - mu) / sig) ** 2)
        jac = np.column_stack([e, amp * e * (x - mu) / sig**2, amp * e * (x - mu) ** 2 / sig**3, np.ones_like(x)])
        jtj = jac.T @ jac
        g = jac.T @ r
        while True:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), -g)
            trial = p + step
            if trial[2] > 0:
                r_new = residual(trial)
                c_new = float(r_new @ r_new)
                if c_new <= cost:
                    break
            lam *= 10
            if lam > 1e12:
                raise FitNotConvergedError("Levenberg-Marquardt step could not reduce the residual")
        scale = np.array([abs(p[0]), p[2], p[2], abs(p[0]) + abs(p[3])])
        change = float(np.max(np.abs(step) / np.where(scale > 0, scale, 1.0)))
        p, r, cost = trial, r_new, c_new
        lam = max(lam / 10, 1e-12)
        if change < tol:
            break
    else:
        raise FitNotConvergedError(f"no convergence after {max_iter} iterations")

    amp, mu, sig, bg = p
    tau = origin + mu * bw
    if not hist.bin_edges[0] <= tau <= hist.bin_edges[-1]:
        raise FitNotConvergedError("fitted centre left the correlation span")
    rms = math.sqrt(cost / y.size) / abs(amp) if amp else float("inf")
    return OffsetEstimate(float(tau), float(abs(sig) * bw), float(amp), float(bg), float(rms))


@dataclass
class OffsetSeries:
    estimates: list[tuple[TimeTag, OffsetEstimate | None]] = field(default_factory=list)
    histograms: list[CorrelationHistogram] = field(default_factory=list)

    @property
    def valid(self) -> list[tuple[TimeTag, OffsetEstimate]]:
        return [(t, e) for t, e in self.estimates if e is not None]


def offset_series(plant: PlantState, controller, cfg: CorrelationConfig, n_estimates: int,
                  keep_histograms: bool = False) -> OffsetSeries:
    """One offset estimate per window of ``cfg.window`` of D3/D4 data.

    ``controller`` is a running :class:`~homsync.control.DipLock` or ``None``
    for free-running paths.  Stop-channel (D4) tags pass through the TCSPC
    model once per batch; a window whose fit fails is recorded as ``None``.
    """
    out = OffsetSeries()
    tcspc = plant.tcspc
    # both streams are quantized to the TCSPC grid, so every difference is a
    # multiple of its bin; shift the edges half a bin so those multiples fall
    # on bin centres rather than on edges (which would bias tau_hat by bin/2)
    q = tcspc.bin_width
    lo = cfg.span[0] - cfg.span[0] % q - q // 2
    cfg = CorrelationConfig(cfg.bin_width, (lo, cfg.span[1]), cfg.window)
    for _ in range(n_estimates):
        start = plant.now
        corr = StreamingCorrelator(cfg)

        def sink(batch, corr=corr, start=start):
            if batch.d3 is None:
                return
            a = batch.d3.rebase(start).offsets
            b = batch.d4.rebase(start).offsets
            corr.add(quantize_array(a, tcspc.bin_width), np.sort(tcspc_measure(tcspc, b)))

        t_end = start + cfg.window
        if controller is None:
            while plant.now < t_end:
                sink(plant.advance(min(S, t_end - plant.now)))
        else:
            controller.on_batch = sink
            try:
                controller.run_until(t_end)
            finally:
                controller.on_batch = None
            if plant.now < t_end:
                # window not a whole number of dither cycles: idle at the reference
                while plant.now < t_end:
                    sink(plant.advance(min(S, t_end - plant.now)))
        hist = corr.hist
        try:
            est = fit_gaussian(hist)
        except (NoPeakError, FitNotConvergedError):
            est = None
        out.estimates.append((start, est))
        if keep_histograms:
            out.histograms.append(hist)
    return out


def write_histogram_csv(path, hist: CorrelationHistogram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center_fs", "counts"])
        for c, n in zip(hist.centers, hist.counts):
            w.writerow([repr(float(c)), int(n)])


def write_offsets_csv(path, series: OffsetSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_fs", "tau_hat_fs", "sigma_fs", "fit_rms"])
        for t, e in series.estimates:
            if e is None:
                w.writerow([t, "", "", ""])
            else:
                w.writerow([t, repr(e.tau_hat), repr(e.sigma), repr(e.fit_rms)])

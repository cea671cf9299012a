"""End-to-end runs: build the plant from a RunConfig, execute a scenario and
write one self-contained output directory.

Headline numbers in the summary are read back from the CSVs just written, so
they can always be recomputed from the files alone.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_echo
from .control import DipLock, ControllerConfig, scan_dip, write_lock_csv, write_scan_csv
from .metrology import (StabilitySeries, decade_m_values, default_m_values, longest_segment, read_tdev_csv, rms,
                        tdev, write_tdev_csv)
from .photonics import HomDipModel
from .plant import (DelayLine, DetectorConfig, PlantState, SourceConfig, TcspcModel, default_channels, fixed_odl,
                    tcspc_measure)
from .sync import CorrelationConfig, offset_series, write_histogram_csv, write_offsets_csv
from .timebase import NS, S, quantize

SELFTEST_INTERVAL = 100 * NS  # cable delay between the two PPS inputs


@dataclass
class RunSummary:
    scenario: str
    seed: int
    version: str
    config: dict
    files: dict[str, dict] = field(default_factory=dict)
    headline: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "seed": self.seed, "version": self.version,
                           "headline": self.headline, "files": self.files, "config": self.config},
                          indent=2, sort_keys=False) + "\n"


def build_plant(cfg: RunConfig) -> PlantState:
    p = cfg.params
    ch = p["channel"]
    a, b = default_channels(cfg.seed, with_fiber=cfg.scenario != "locked_0km", time_compression=cfg.time_compression,
                            thermal_coefficient=float(ch["thermal_coefficient"]), diurnal_a=ch["diurnal_amplitude_a"],
                            diurnal_b=ch["diurnal_amplitude_b"], ou_sigma=ch["ou_sigma"], ramp_rate=ch["ramp_rate"],
                            ramp_start=ch["ramp_start"] / S)
    mdl = p["mdl"]
    det = p["detector"]
    return PlantState(
        source=SourceConfig(**p["source"]),
        channel_a=a,
        channel_b=b,
        odl=fixed_odl(p["odl"]["setting"]),
        mdl=DelayLine("motorized", mdl["range"], mdl["resolution"], quantize(mdl["setting"], mdl["resolution"])),
        detectors={name: DetectorConfig(**det) for name in ("D1", "D2", "D3", "D4")},
        tcspc=tcspc_model(cfg),
        dip=HomDipModel(p["dip"]["visibility"], p["dip"]["coherence_time"]),
        seed=cfg.seed,
        clock_offset=p["plant"]["clock_offset"],
        tap_mismatch=p["plant"]["tap_mismatch"],
        shot_noise=p["plant"]["shot_noise"],
    )


def tcspc_model(cfg: RunConfig) -> TcspcModel:
    t = cfg.params["tcspc"]
    return TcspcModel(t["bin_width"], t["drift_step"], t["drift_correlation"], seed=cfg.seed)


def controller_config(cfg: RunConfig) -> ControllerConfig:
    return ControllerConfig(**cfg.params["controller"])


def correlation_config(cfg: RunConfig) -> CorrelationConfig:
    return CorrelationConfig(**cfg.params["sync"])


def check_buildable(cfg: RunConfig) -> list[str]:
    """Constructor-level checks that the schema cannot express."""
    problems = []
    for what, fn in (("plant", build_plant), ("controller", controller_config), ("sync", correlation_config)):
        try:
            fn(cfg)
        except ValueError as exc:
            problems.append(f"{what}: {exc}")
    if cfg.scenario in ("locked_4km", "locked_0km", "free_running") and cfg.duration < cfg.params["sync"]["window"]:
        problems.append("duration: shorter than one sync.window")
    return problems


def _m_values(cfg: RunConfig, tau0: int, n: int, extra=()) -> list[int]:
    mv = cfg.params["metrology"]["m_values"]
    if mv != "auto":
        return list(mv)
    return default_m_values(n, list(decade_m_values(tau0, n)) + list(extra))


def _with_gaps(times, values, tau0) -> list:
    """Insert None wherever consecutive samples are not tau0 apart."""
    out = []
    for k, (t, v) in enumerate(zip(times, values)):
        if k and t - times[k - 1] != tau0:
            out.append(None)
        out.append(v)
    return out


def _run_locked(cfg: RunConfig, out: Path, files: list[str]):
    plant = build_plant(cfg)
    ccfg = controller_config(cfg)
    scfg = correlation_config(cfg)
    lock = DipLock(plant, ccfg)
    scan = lock.acquire()
    write_scan_csv(out / "dip_scan.csv", scan)
    series = offset_series(plant, lock, scfg, cfg.duration // scfg.window, keep_histograms=True)
    write_lock_csv(out / "lock.csv", lock.record)
    write_offsets_csv(out / "offsets.csv", series)
    write_histogram_csv(out / "histogram.csv", series.histograms[0])
    files += ["dip_scan.csv", "lock.csv", "offsets.csv", "histogram.csv"]
    off_curve = _offset_tdev(cfg, series, scfg, out, files)

    entries = lock.record.entries
    tau0 = lock.cycle_time
    resid = longest_segment(_with_gaps([e.time for e in entries], [e.residual for e in entries], tau0))
    extra = [p.averaging_time // tau0 for p in off_curve.points if p.averaging_time % tau0 == 0]
    curve = tdev(StabilitySeries(tau0, resid), _m_values(cfg, tau0, resid.size, extra))
    write_tdev_csv(out / "tdev_inloop.csv", curve)
    files.append("tdev_inloop.csv")


def _offset_tdev(cfg, series, scfg, out, files):
    vals = longest_segment([e.tau_hat if e is not None else None for _, e in series.estimates])
    curve = tdev(StabilitySeries(scfg.window, vals), _m_values(cfg, scfg.window, vals.size))
    write_tdev_csv(out / "tdev_offset.csv", curve)
    files.append("tdev_offset.csv")
    return curve


def _run_free(cfg: RunConfig, out: Path, files: list[str]):
    plant = build_plant(cfg)
    scfg = correlation_config(cfg)
    series = offset_series(plant, None, scfg, cfg.duration // scfg.window, keep_histograms=True)
    write_offsets_csv(out / "offsets.csv", series)
    write_histogram_csv(out / "histogram.csv", series.histograms[0])
    files += ["offsets.csv", "histogram.csv"]
    _offset_tdev(cfg, series, scfg, out, files)


def _run_selftest(cfg: RunConfig, out: Path, files: list[str]):
    model = tcspc_model(cfg)
    n = cfg.duration // S
    measured = np.array([tcspc_measure(model, SELFTEST_INTERVAL) for _ in range(n)], dtype=np.int64)
    with open(out / "selftest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "measured_fs"])
        for k, v in enumerate(measured):
            w.writerow([k, int(v)])
    x = (measured - SELFTEST_INTERVAL).astype(float)
    curve = tdev(StabilitySeries(S, x), _m_values(cfg, S, n))
    write_tdev_csv(out / "tdev_selftest.csv", curve)
    files += ["selftest.csv", "tdev_selftest.csv"]


def _run_dip_scan(cfg: RunConfig, out: Path, files: list[str]):
    plant = build_plant(cfg)
    scan = scan_dip(plant, controller_config(cfg))
    write_scan_csv(out / "dip_scan.csv", scan)
    files.append("dip_scan.csv")


_RUNNERS = {
    "locked_4km": _run_locked,
    "locked_0km": _run_locked,
    "free_running": _run_free,
    "tcspc_selftest": _run_selftest,
    "dip_scan": _run_dip_scan,
}


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _tdev_headline(path, prefix) -> dict:
    rows = read_tdev_csv(path)
    out = {}
    for t, v, _n in rows:
        if t >= 1 and t == 10 ** round(math.log10(t)):
            out[f"{prefix}_at_{t:g}s_fs"] = v
    if rows:
        out[f"{prefix}_longest_s"] = rows[-1][0]
        out[f"{prefix}_at_longest_fs"] = rows[-1][1]
    return out


def headline_from_files(out: Path, scenario: str) -> dict:
    """Headline numbers, recomputed from the output CSVs only."""
    out = Path(out)
    h: dict = {}
    if (out / "offsets.csv").exists():
        rows = _read_rows(out / "offsets.csv")
        vals = np.array([float(r["tau_hat_fs"]) for r in rows if r["tau_hat_fs"]])
        h["n_windows"] = len(rows)
        h["n_missing_windows"] = len(rows) - vals.size
        if vals.size:
            h["mean_offset_fs"] = float(np.mean(vals))
        if vals.size > 1:
            h["offset_stddev_fs"] = float(np.std(vals, ddof=1))
    if (out / "lock.csv").exists():
        rows = _read_rows(out / "lock.csv")
        res = np.array([float(r["residual_fs"]) for r in rows])
        h["n_dither_cycles"] = len(rows)
        if res.size:
            h["rms_inloop_fs"] = rms(StabilitySeries(1, res))
    if (out / "dip_scan.csv").exists():
        rows = _read_rows(out / "dip_scan.csv")
        rates = [float(r["coincidence_rate"]) for r in rows]
        k = int(np.argmin(rates))
        h["scan_minimum_mdl_fs"] = int(rows[k]["mdl_fs"])
        h["scan_visibility"] = (max(rates) - min(rates)) / max(rates) if max(rates) > 0 else 0.0
    for name, prefix in (("tdev_offset.csv", "tdev_offset"), ("tdev_inloop.csv", "tdev_inloop"),
                         ("tdev_selftest.csv", "tdev_selftest")):
        if (out / name).exists():
            h.update(_tdev_headline(out / name, prefix))
    return h


def _manifest(out: Path, names) -> dict:
    files = {}
    for name in names:
        data = (out / name).read_bytes()
        files[name] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
    return files


def run(cfg: RunConfig, output_dir=None) -> RunSummary:
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_echo(cfg))
    files = ["config.yaml"]
    _RUNNERS[cfg.scenario](cfg, out, files)
    summary = RunSummary(cfg.scenario, cfg.seed, __version__, cfg.echo(), _manifest(out, files),
                         headline_from_files(out, cfg.scenario))
    p = cfg.params["plant"]
    summary.headline["injected_offset_fs"] = p["clock_offset"] + p["tap_mismatch"]
    (out / "summary.json").write_text(summary.to_json())
    for name in files + ["summary.json"]:
        if (out / name).stat().st_size == 0:
            raise RuntimeError(f"output {name} is empty")
    return summary

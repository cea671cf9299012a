import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from homsync.control import (DECREASE, HOLD, INCREASE, ControllerConfig, DipLock, LockState, NoDipError,
                             RelockRequired, decide, dither_cycle, run_lock, scan_dip, write_lock_csv)
from homsync.photonics import HomDipModel
from homsync.plant import PlantState, SourceConfig, default_channels, set_mdl
from homsync.timebase import PS, S


def still_plant(seed=1, **kw):
    """Default plant with every drift switched off: the balance stays at 250 ps."""
    a, b = default_channels(seed, thermal_coefficient=0.0)
    return PlantState(SourceConfig(), a, b, seed=seed, **kw)


def ramp_plant(rate, seed=5, shot_noise=False):
    # balance near 100 ps so a 4000 s ramp of 400 ps stays inside the travel
    a, b = default_channels(seed, ou_sigma=0.0, diurnal_a=0.0, diurnal_b=0.0)
    b.nominal_delay += 150 * PS
    return PlantState(SourceConfig(), a, b, seed=seed, shot_noise=shot_noise), a


# decision rule

def test_decide_examples():
    assert decide(500, 480, 15) == DECREASE
    assert decide(480, 500, 15) == INCREASE
    assert decide(300, 310, 15) == HOLD
    assert decide(300, 300, 15) == HOLD


def test_decide_exact_threshold_holds():
    assert decide(315, 300, 15) == HOLD
    assert decide(300, 315, 15) == HOLD
    assert decide(315.5, 300, 15) == DECREASE


@given(st.floats(0, 1e5), st.floats(0, 1e5), st.floats(0, 1e3))
def test_decide_consistent_with_hold_band(a, b, thr):
    act = decide(a, b, thr)
    assert (act == HOLD) == (abs(a - b) <= thr)
    if act != HOLD:
        assert act == (DECREASE if a > b else INCREASE)
    # swapping the measurements mirrors the action
    assert decide(b, a, thr) == {HOLD: HOLD, INCREASE: DECREASE, DECREASE: INCREASE}[act]


@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0, 100))
def test_decide_monotone_in_rc_minus(a1, a2, b, thr):
    # raising Rc(-) can only move the action towards DECREASE
    order = {INCREASE: 0, HOLD: 1, DECREASE: 2}
    lo, hi = sorted((a1, a2))
    assert order[decide(lo, b, thr)] <= order[decide(hi, b, thr)]


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(dither_depth=0)
    with pytest.raises(ValueError):
        ControllerConfig(hold_threshold=-1)
    with pytest.raises(ValueError):
        ControllerConfig(scan_range=(10, 5))


# scan

def test_noiseless_scan_finds_balance():
    p = still_plant(shot_noise=False)
    scan = scan_dip(p, ControllerConfig())
    assert abs(scan.minimum_setting - 250 * PS) <= 1 * PS
    assert p.mdl.setting == scan.minimum_setting
    assert len(scan.points) == 560 * PS // 500 + 1


def test_scan_points_follow_envelope():
    p = still_plant(shot_noise=False)
    scan = scan_dip(p, ControllerConfig(scan_range=(240 * PS, 260 * PS)))
    for setting, rate in scan.points:
        assert rate == round(3000 * (1 - 0.68 * math.exp(-(((250 * PS - setting) / (3 * PS)) ** 2))))


def test_scan_without_interference_raises():
    p = still_plant(seed=3, dip=HomDipModel(0.0, 3 * PS))
    with pytest.raises(NoDipError):
        scan_dip(p, ControllerConfig())


def test_scan_dip_outside_range_raises():
    # balance at 250 ps, scanning 0-100 ps sees a flat line
    p = still_plant(seed=4)
    with pytest.raises(NoDipError):
        scan_dip(p, ControllerConfig(scan_range=(0, 100 * PS)))


def test_scan_rejects_range_beyond_travel():
    with pytest.raises(ValueError):
        scan_dip(still_plant(), ControllerConfig(scan_range=(0, 600 * PS)))


# dither loop

def test_dither_without_drift_holds_near_balance():
    p = still_plant(seed=2)
    rec = run_lock(p, ControllerConfig(scan_range=(230 * PS, 270 * PS)), 400 * S)
    r = np.array(rec.residuals)
    assert len(r) == (400 - 81) // 2  # 81 scan dwells, then 2 s cycles
    assert np.max(np.abs(r[5:])) <= 400 / 2 + 200


def test_noiseless_dither_at_balance_never_moves():
    p = still_plant(shot_noise=False)
    set_mdl(p, 250 * PS)
    state = LockState(250 * PS)
    for _ in range(20):
        e = dither_cycle(p, ControllerConfig(), state)
        assert e.action == HOLD and e.residual == 0


def test_noiseless_dither_walks_back_in_steps():
    p = still_plant(shot_noise=False)
    state = LockState(250 * PS + 1000)
    actions = [dither_cycle(p, ControllerConfig(), state).action for _ in range(8)]
    # 1000 fs off balance: the reference steps down by 200 fs per cycle until
    # the dither difference drops inside the hold band
    assert actions[0] == DECREASE
    assert HOLD in actions
    assert (state.reference - 250 * PS) % 200 == 0
    assert abs(state.reference - 250 * PS) <= 200


def test_reference_moves_in_whole_steps():
    p = still_plant(seed=8)
    cfg = ControllerConfig(scan_range=(240 * PS, 260 * PS))
    lock = DipLock(p, cfg)
    start = lock.acquire().minimum_setting
    lock.run_until(p.now + 200 * S)
    assert all((e.mdl_setting - start) % cfg.step == 0 for e in lock.record.entries)


def test_ramp_residual_bounded_noiseless():
    p, a = ramp_plant(100.0)  # 100 fs/s = 0.1 ps per 1 s dwell
    cfg = ControllerConfig(scan_range=(80 * PS, 120 * PS))
    lock = DipLock(p, cfg)
    lock.acquire()
    a.ramp_start = p.now / S
    lock.run_until(p.now + 4000 * S)
    r = np.abs(lock.record.residuals)
    assert len(r) == 2000
    assert np.max(r) <= 400 / 2 + 2 * 200


def test_end_stop_triggers_rescan():
    p = still_plant(seed=6)
    lock = DipLock(p, ControllerConfig(scan_range=(230 * PS, 270 * PS)))
    lock.acquire()
    lock.state.reference = 560 * PS - 100  # closer to the stop than delta/2
    with pytest.raises(RelockRequired):
        dither_cycle(p, lock.cfg, lock.state)
    assert lock.cycle() is None
    assert len(lock.record.scans) == 2
    assert abs(lock.state.reference - 250 * PS) <= 2 * PS


def test_lock_csv_columns(tmp_path):
    p = still_plant()
    rec = run_lock(p, ControllerConfig(scan_range=(245 * PS, 255 * PS)), 40 * S)
    path = tmp_path / "lock.csv"
    write_lock_csv(path, rec)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_fs,mdl_fs,rc_minus,rc_plus,action,residual_fs"
    assert len(lines) == 1 + len(rec.entries)

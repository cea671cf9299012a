import csv

import pytest
import yaml

from homsync import cli
from homsync.config import ConfigError, dump_echo, from_mapping, load
from homsync.photonics import HomDipModel, dip_envelope
from homsync.timebase import PS, S


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# configuration

def test_empty_config_names_missing_scenario(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load(write(tmp_path, ""))
    assert any("scenario" in p for p in exc.value.problems)


def test_minimal_config_resolves_every_default():
    cfg = from_mapping({"scenario": "locked_4km"})
    assert cfg.seed == 0 and cfg.duration == 4000 * S
    assert cfg.get("mdl.range") == (0, 560 * PS)
    assert cfg.get("plant.tap_mismatch") == -59_400
    assert from_mapping({"scenario": "locked_0km"}).get("plant.tap_mismatch") == 0


def test_mdl_range_accepted_and_echoed(tmp_path):
    p = write(tmp_path, "scenario: locked_4km\noverrides:\n  mdl.range: [0, 560 ps]\n")
    cfg = load(p)
    assert cfg.get("mdl.range") == (0, 560 * PS)
    echoed = yaml.safe_load(dump_echo(cfg))
    assert from_mapping(echoed).get("mdl.range") == (0, 560 * PS)


def test_nested_and_dotted_overrides_agree():
    a = from_mapping({"scenario": "free_running", "overrides": {"detector": {"dark_rate": 10}}})
    b = from_mapping({"scenario": "free_running", "overrides": {"detector.dark_rate": 10}})
    assert a.params == b.params


def test_out_of_range_efficiency_names_key_and_line(tmp_path):
    p = write(tmp_path, "scenario: locked_4km\noverrides:\n  detector:\n    efficiency: 1.5\n")
    with pytest.raises(ConfigError) as exc:
        load(p)
    (msg,) = exc.value.problems
    assert "detector.efficiency" in msg and ":4:" in msg and "(0, 1]" in msg


def test_every_problem_reported_at_once(tmp_path):
    text = "scenario: nope\nseed: -1\nbogus: 1\noverrides:\n  source.tap_fraction: 1.0\n  dip.colour: red\n"
    with pytest.raises(ConfigError) as exc:
        load(write(tmp_path, text))
    joined = "\n".join(exc.value.problems)
    for key in ("scenario", "seed", "bogus", "source.tap_fraction", "dip.colour"):
        assert key in joined
    assert len(exc.value.problems) == 5


def test_cross_checks():
    with pytest.raises(ConfigError) as exc:
        from_mapping({"scenario": "locked_4km", "overrides": {"controller.scan_range": ["0 ps", "600 ps"]}})
    assert "scan_range" in exc.value.problems[0]
    with pytest.raises(ConfigError):
        from_mapping({"scenario": "locked_4km", "overrides": {"sync.bin_width": "6 ps"}})


def test_yaml_syntax_error_has_line(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load(write(tmp_path, "scenario: locked_4km\noverrides: [\n"))
    assert "YAML" in exc.value.problems[0]


def test_echo_round_trip_is_stable():
    cfg = from_mapping({"scenario": "dip_scan", "seed": 7, "duration": "10 s",
                        "overrides": {"tcspc": {"drift_correlation": None}, "metrology.m_values": [1, 4]}})
    again = from_mapping(yaml.safe_load(dump_echo(cfg)))
    assert again.params == cfg.params and again.seed == 7 and again.duration == 10 * S


# command line

def test_validate_ok(tmp_path, capsys):
    p = write(tmp_path, "scenario: locked_4km\n")
    assert cli.main(["validate", "--config", str(p)]) == 0
    out = capsys.readouterr().out
    assert "ok" in out and "mdl:" in out


def test_exit_code_config_error(tmp_path, capsys):
    p = write(tmp_path, "scenario: locked_4km\noverrides: {detector.efficiency: 1.5}\n")
    assert cli.main(["run", "--config", str(p)]) == 3
    assert "detector.efficiency" in capsys.readouterr().err


def test_exit_code_usage():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2


def test_exit_code_missing_file(tmp_path):
    assert cli.main(["validate", "--config", str(tmp_path / "absent.yaml")]) == 5


def test_exit_code_simulation_error(tmp_path):
    # no interference: the scan cannot find a dip
    p = write(tmp_path, "scenario: dip_scan\noverrides: {dip.visibility: 0.0}\n")
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 4


def test_dip_curve_writes_both_curves(tmp_path):
    assert cli.main(["dip-curve", "--v", "0.68", "--tc", "3 ps", "--range=-15000:15000", "--step", "500",
                     "--out", str(tmp_path)]) == 0
    m = HomDipModel(0.68, 3 * PS)
    for name in ("dip_envelope.csv", "dip_quadrature.csv"):
        with open(tmp_path / name) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 61
        for r in rows:
            assert abs(float(r["relative_coincidence"]) - dip_envelope(m, int(r["delay_fs"]))) <= 1e-3
    with open(tmp_path / "dip_envelope.csv") as fh:
        row = next(r for r in csv.DictReader(fh) if r["delay_fs"] == "0")
    assert float(row["relative_coincidence"]) == pytest.approx(0.32, abs=1e-12)


def test_dip_curve_bad_range(tmp_path):
    assert cli.main(["dip-curve", "--v", "0.5", "--tc", "3000", "--range", "10:5", "--step", "1",
                     "--out", str(tmp_path)]) == 3
    with pytest.raises(SystemExit):
        cli.main(["dip-curve", "--v", "0.5", "--tc", "3000", "--range", "abc", "--step", "1"])


def test_batch_runs_each_config(tmp_path, capsys):
    cdir = tmp_path / "configs"
    cdir.mkdir()
    (cdir / "one.yaml").write_text("scenario: dip_scan\nseed: 1\noverrides: {controller.scan_range: [220 ps, 280 ps]}\n")
    (cdir / "two.yaml").write_text("scenario: dip_scan\nseed: 2\noverrides: {controller.scan_range: [220 ps, 280 ps]}\n")
    (cdir / "bad.yaml").write_text("scenario: dip_scan\noverrides: {detector.efficiency: 2}\n")
    out = tmp_path / "out"
    code = cli.main(["batch", "--configs", str(cdir), "--jobs", "2", "--out", str(out)])
    assert code == 3  # worst per-config result
    assert (out / "one" / "summary.json").exists() and (out / "two" / "summary.json").exists()
    assert not (out / "bad").exists()
    text = capsys.readouterr().out
    assert "FAILED" in text and text.count("ok ") == 2

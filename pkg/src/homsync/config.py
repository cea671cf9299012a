"""Run configuration: YAML file -> validated, fully resolved parameter tree.

Every parameter has a default; a config file only names the scenario and
whatever it overrides.  Validation collects every problem before reporting,
each tagged with its dotted key and, where known, the file line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .timebase import NS, PS, S, US, format_duration, parse_duration

SCENARIOS = ("locked_4km", "locked_0km", "free_running", "tcspc_selftest", "dip_scan")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


@dataclass(frozen=True)
class Param:
    kind: str  # float, int, bool, duration, duration_pair, m_values, optional_float
    default: Any
    check: Callable[[Any], bool] | None = None
    bound: str = ""  # human-readable range for diagnostics
    doc: str = ""


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _frac(x):
    return 0 < x <= 1


def _unit(x):
    return 0 <= x <= 1


# tap mismatch and fiber presence depend on the scenario; see scenario_defaults
SCHEMA: dict[str, dict[str, Param]] = {
    "source": {
        "rep_rate": Param("float", 75e6, _pos, "> 0", "pump repetition rate, Hz"),
        "pair_rate": Param("float", 3000.0, _pos, "> 0", "HOM-arm detected coincidences, 1/s"),
        "singles_rate_a": Param("float", 104000.0, _nonneg, ">= 0", "signal singles at D1, 1/s"),
        "singles_rate_b": Param("float", 140000.0, _nonneg, ">= 0", "idler singles at D2, 1/s"),
        "tap_fraction": Param("float", 0.1, lambda x: 0 < x < 1, "(0, 1)", "fraction split to D3/D4"),
    },
    "dip": {
        "visibility": Param("float", 0.68, _unit, "[0, 1]"),
        "coherence_time": Param("duration", 3 * PS, _pos, "> 0"),
    },
    "odl": {
        "setting": Param("duration", 100 * PS, _nonneg, ">= 0"),
    },
    "mdl": {
        "range": Param("duration_pair", (0, 560 * PS), lambda r: 0 <= r[0] < r[1], "0 <= lo < hi"),
        "resolution": Param("duration", 1, _pos, "> 0"),
        "setting": Param("duration", 250 * PS, _nonneg, ">= 0", "initial / free-running setting"),
    },
    "detector": {
        "efficiency": Param("float", 0.2, _frac, "(0, 1]"),
        "jitter_sigma": Param("duration", 120 * PS, _nonneg, ">= 0"),
        "dead_time": Param("duration", 10 * US, _nonneg, ">= 0"),
        "dark_rate": Param("float", 1000.0, _nonneg, ">= 0"),
        "gate_rate": Param("float", 75e6, _pos, "> 0"),
    },
    "channel": {
        "thermal_coefficient": Param("duration", 40 * PS, _nonneg, ">= 0", "delay change per kelvin of a 2 km spool"),
        "diurnal_amplitude_a": Param("float", 1.0, _nonneg, ">= 0", "K"),
        "diurnal_amplitude_b": Param("float", 0.8, _nonneg, ">= 0", "K"),
        "ou_sigma": Param("float", 0.1, _nonneg, ">= 0", "K"),
        "ramp_rate": Param("float", 0.0, math.isfinite, "finite", "fs per s on channel A"),
        "ramp_start": Param("duration", 0, _nonneg, ">= 0", "time the ramp starts"),
    },
    "plant": {
        "clock_offset": Param("duration", 927_500, None, "", "clock A minus clock B"),
        "tap_mismatch": Param("duration", None, None, "", "extra A-side tap delay; scenario default"),
        "shot_noise": Param("bool", True),
    },
    "tcspc": {
        "bin_width": Param("duration", 4 * PS, _pos, "> 0"),
        "drift_step": Param("float", 130.5, _nonneg, ">= 0", "fs per sample"),
        "drift_correlation": Param("optional_float", 300.0, lambda x: x is None or x > 0, "> 0 or null",
                                   "AR(1) correlation in samples; null for a pure random walk"),
    },
    "controller": {
        "dither_depth": Param("duration", 400, _pos, "> 0"),
        "step": Param("duration", 200, _pos, "> 0"),
        "hold_threshold": Param("float", 15.0, _nonneg, ">= 0", "counts/s"),
        "dwell": Param("duration", S, _pos, "> 0"),
        "scan_range": Param("duration_pair", (200 * PS, 300 * PS), lambda r: 0 <= r[0] <= r[1], "0 <= lo <= hi"),
        "scan_step": Param("duration", 500, _pos, "> 0"),
    },
    "sync": {
        "bin_width": Param("duration", 4 * PS, _pos, "> 0"),
        "span": Param("duration_pair", (-5 * NS, 5 * NS), lambda r: r[0] < r[1], "lo < hi"),
        "window": Param("duration", 1000 * S, _pos, "> 0"),
    },
    "metrology": {
        "m_values": Param("m_values", "auto", None, "'auto' or list of integers >= 1"),
    },
}

TOP_LEVEL = {
    "scenario": Param("str", None),
    "seed": Param("int", 0, lambda x: 0 <= x < 2**64, "[0, 2^64)"),
    "duration": Param("duration", 4000 * S, _pos, "> 0"),
    "time_compression": Param("float", 8.0, _pos, "> 0"),
    "output_dir": Param("str", "out"),
    "overrides": None,
}


def scenario_defaults(scenario: str) -> dict[str, dict[str, Any]]:
    """Parameters whose default depends on the scenario."""
    if scenario == "locked_0km":
        return {"plant": {"tap_mismatch": 0}}
    if scenario == "dip_scan":
        return {"plant": {"tap_mismatch": -59_400}, "controller": {"scan_range": (0, 560 * PS)}}
    return {"plant": {"tap_mismatch": -59_400}}


@dataclass
class RunConfig:
    scenario: str
    seed: int = 0
    duration: int = 4000 * S
    time_compression: float = 8.0
    output_dir: str = "out"
    params: dict[str, dict[str, Any]] = field(default_factory=dict)

    def get(self, dotted: str):
        section, key = dotted.split(".")
        return self.params[section][key]

    def echo(self) -> dict:
        """Plain-data view of every resolved parameter (output_dir excluded)."""
        out = {"scenario": self.scenario, "seed": self.seed, "duration": format_duration(self.duration),
               "time_compression": self.time_compression, "overrides": {}}
        for section, params in SCHEMA.items():
            out["overrides"][section] = {k: _render(params[k].kind, self.params[section][k]) for k in params}
        return out


def _render(kind, value):
    if kind == "duration":
        return format_duration(value)
    if kind == "duration_pair":
        return [format_duration(v) for v in value]
    return value


def _coerce(kind: str, raw):
    if kind == "float":
        if isinstance(raw, str):
            # YAML 1.1 reads 3e3 (no dot) as a string
            try:
                return float(raw)
            except ValueError:
                raise ValueError(f"expected a number, got {raw!r}") from None
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ValueError(f"expected a number, got {raw!r}")
        return float(raw)
    if kind == "optional_float":
        return None if raw is None else _coerce("float", raw)
    if kind == "int":
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ValueError(f"expected an integer, got {raw!r}")
        return raw
    if kind == "bool":
        if not isinstance(raw, bool):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw
    if kind == "str":
        if not isinstance(raw, str):
            raise ValueError(f"expected a string, got {raw!r}")
        return raw
    if kind == "duration":
        return parse_duration(raw)
    if kind == "duration_pair":
        if not isinstance(raw, (list, tuple)) or len(raw) != 2:
            raise ValueError(f"expected [lo, hi], got {raw!r}")
        return (parse_duration(raw[0]), parse_duration(raw[1]))
    if kind == "m_values":
        if raw == "auto":
            return "auto"
        if not isinstance(raw, list) or not raw or not all(isinstance(m, int) and not isinstance(m, bool) and m >= 1
                                                           for m in raw):
            raise ValueError(f"expected 'auto' or a list of integers >= 1, got {raw!r}")
        return sorted(set(raw))
    raise AssertionError(kind)


def _key_lines(node, prefix="", out=None) -> dict[str, int]:
    """Dotted key -> 1-based line, from a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            out[key] = k.start_mark.line + 1
            _key_lines(v, key + ".", out)
    return out


def _flatten_overrides(tree, prefix="overrides.") -> dict[str, Any]:
    """Accept both nested sections and dotted keys (``mdl.range: ...``)."""
    flat = {}
    for k, v in tree.items():
        k = str(k)
        if isinstance(v, dict):
            for kk, vv in _flatten_overrides(v, "").items():
                flat[f"{k}.{kk}"] = vv
        else:
            flat[k] = v
    return flat


def from_mapping(data, lines: dict[str, int] | None = None, source: str = "<config>") -> RunConfig:
    lines = lines or {}
    problems: list[str] = []

    def where(key):
        line = lines.get(key)
        return f"{source}:{line}: {key}" if line else f"{source}: {key}"

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"{source}: top level must be a mapping, got {type(data).__name__}"])

    top = {}
    for key in data:
        if key not in TOP_LEVEL:
            problems.append(f"{where(str(key))}: unknown key (expected one of {', '.join(TOP_LEVEL)})")
    if "scenario" not in data:
        problems.append(f"{source}: missing required key `scenario` (one of {', '.join(SCENARIOS)})")
    for key, spec in TOP_LEVEL.items():
        if spec is None or key not in data:
            continue
        try:
            val = _coerce(spec.kind, data[key])
            if spec.check is not None and not spec.check(val):
                raise ValueError(f"{data[key]!r} out of range {spec.bound}")
            top[key] = val
        except ValueError as exc:
            problems.append(f"{where(key)}: {exc}")
    scenario = top.get("scenario")
    if scenario is not None and scenario not in SCENARIOS:
        problems.append(f"{where('scenario')}: unknown scenario {scenario!r} (one of {', '.join(SCENARIOS)})")
        scenario = None

    params = {section: {k: p.default for k, p in spec.items()} for section, spec in SCHEMA.items()}
    if scenario is not None:
        for section, vals in scenario_defaults(scenario).items():
            params[section].update(vals)

    raw_over = data.get("overrides") or {}
    if not isinstance(raw_over, dict):
        problems.append(f"{where('overrides')}: must be a mapping")
        raw_over = {}
    for dotted, raw in _flatten_overrides(raw_over).items():
        line_key = "overrides." + dotted  # same for nested and dotted spellings
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in SCHEMA or parts[1] not in SCHEMA[parts[0]]:
            hint = ""
            if parts[0] in SCHEMA:
                hint = f" (known in {parts[0]}: {', '.join(SCHEMA[parts[0]])})"
            else:
                hint = f" (sections: {', '.join(SCHEMA)})"
            problems.append(f"{where(line_key)}: unknown override key{hint}")
            continue
        spec = SCHEMA[parts[0]][parts[1]]
        try:
            val = _coerce(spec.kind, raw)
            if spec.check is not None and not spec.check(val):
                raise ValueError(f"{raw!r} out of range {spec.bound}")
            params[parts[0]][parts[1]] = val
        except ValueError as exc:
            problems.append(f"{where(line_key)}: {exc}")

    if not problems:
        problems += _cross_checks(params)
    if problems:
        raise ConfigError(problems)
    kw = {k: v for k, v in top.items() if k != "scenario"}
    return RunConfig(scenario=scenario, params=params, **kw)


def _cross_checks(params) -> list[str]:
    out = []
    lo, hi = params["mdl"]["range"]
    slo, shi = params["controller"]["scan_range"]
    if slo < lo or shi > hi:
        out.append("controller.scan_range: must lie inside mdl.range")
    if params["controller"]["scan_step"] < params["mdl"]["resolution"]:
        out.append("controller.scan_step: finer than mdl.resolution")
    if not lo <= params["mdl"]["setting"] <= hi:
        out.append("mdl.setting: outside mdl.range")
    if params["sync"]["window"] % params["controller"]["dwell"]:
        out.append("sync.window: must be a whole number of controller dwells")
    if params["sync"]["window"] % S:
        out.append("sync.window: must be a whole number of seconds")
    if params["sync"]["bin_width"] % params["tcspc"]["bin_width"]:
        out.append("sync.bin_width: must be a multiple of tcspc.bin_width")
    return out


def load(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError([f"{path}{line}: YAML parse error: {getattr(exc, 'problem', exc)}"]) from exc
    lines = _key_lines(node) if node is not None else {}
    return from_mapping(data, lines, str(path))


def dump_echo(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.echo(), sort_keys=False, default_flow_style=None)

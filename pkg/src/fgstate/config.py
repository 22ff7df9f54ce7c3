"""Run configuration: INI files (``[section]`` plus ``key = value``) with setup presets.

Every key has a typed default. ``[run] setup`` selects a preset that
overrides the defaults, the file overrides the preset, and command-line
flags override the file.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _strlist(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _floatlist(text: str) -> tuple:
    return tuple(float(s) for s in _strlist(text))


def _optfloat(text: str) -> float | None:
    t = text.strip().lower()
    if t in ("", "none"):
        return None
    return float(t)


def _yaw(text: str):
    t = text.strip().lower()
    return "truth" if t == "truth" else float(t)


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "setup": (int, "1"),
        "seed": (int, "0"),
        "log": (str, ""),
        "output_dir": (str, "results"),
        "run_ekf": (_bool, "true"),
    },
    "trajectory": {
        "kind": (str, "figure_eight"),
        "vehicle": (str, "quadricycle"),
        "speed": (float, "5.0"),
        "duration": (float, "120.0"),
        "size": (float, "40.0"),
        "width": (float, "30.0"),
    },
    "sensors": {
        "gnss": (_strlist, "front, rear"),
        "lidars": (_strlist, "front"),
        "encoders": (_bool, "true"),
    },
    "noise": {
        "gyro_noise_density": (float, "1e-3"),
        "accel_noise_density": (float, "1e-2"),
        "gyro_bias_walk": (float, "1e-5"),
        "accel_bias_walk": (float, "1e-4"),
        "gnss_sigma": (float, "0.02"),
        "encoder_speed_sigma": (float, "0.02"),
        "encoder_steer_sigma": (float, "0.002"),
        "lidar_range_sigma": (float, "0.01"),
    },
    "scenario": {
        "gnss_cep": (float, "0.0"),
        "outage_start": (_optfloat, "none"),
        "outage_end": (_optfloat, "none"),
        "fg_disabled": (_strlist, ""),
        "ekf_disabled": (_strlist, ""),
    },
    "estimator": {
        "window_length": (float, "1.0"),
        "solve_every_n_imu": (int, "10"),
        "gate_threshold": (float, "25.0"),
        "use_attitude": (_bool, "true"),
        "initial_yaw": (_yaw, "truth"),
        "gyro_noise_density": (float, "1e-3"),
        "accel_noise_density": (float, "1e-2"),
        "gyro_bias_walk": (float, "1e-5"),
        "accel_bias_walk": (float, "1e-4"),
        "prior_position_sigma": (float, "1.0"),
        "prior_yaw_sigma": (float, "0.1"),
        "prior_velocity_sigma": (float, "1.0"),
        "prior_gyro_bias_sigma": (float, "0.01"),
        "prior_accel_bias_sigma": (float, "0.2"),
    },
    "lidar": {
        "voxel_size": (float, "0.5"),
        "initial_corr_dist": (float, "1.0"),
    },
    "ekf": {
        "q": (_floatlist, "1e-4, 1e-4, 1e-5, 1e-2, 1e-8"),
        "initial_yaw_sigma": (float, "0.2"),
    },
    "sweep": {
        "window_lengths": (_floatlist, "0.5, 1.0, 2.0"),
    },
}

PRESETS: dict[int, dict[str, dict[str, str]]] = {
    # quadricycle, dual RTK antennas, lidar, encoders
    1: {},
    # quadricycle, front antenna only with CEP 2 m noise, lidar and IMU in the graph
    2: {
        "scenario": {"gnss_cep": "2.0", "fg_disabled": "gnss_rear, encoder", "ekf_disabled": "gnss_rear"},
        "estimator": {"use_attitude": "false"},
    },
    # shuttle, centre antenna, two lidars, GNSS lost from 60 s to the end
    3: {
        "trajectory": {"kind": "block", "vehicle": "shuttle", "speed": "3.0", "duration": "90.0"},
        "sensors": {"gnss": "center", "lidars": "front, rear", "encoders": "false"},
        "scenario": {"outage_start": "60.0", "outage_end": "inf"},
        "run": {"run_ekf": "false"},
        "estimator": {"use_attitude": "false"},
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def with_overrides(self, overrides: dict) -> RunConfig:
        return load_config(None, overrides, base=self)

    def to_ini(self) -> str:
        """Canonical text form; reloading it gives the same configuration."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_text(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


def _text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_text(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def _parse(section: str, key: str, text: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        return parser(str(text))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Merge default, preset, file and ``overrides`` ({(section, key): text})."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            for key, text in cp.items(section):
                _parse(section, key, text)
                raw.setdefault(section, {})[key] = text
    overrides = overrides or {}
    for (section, key), text in overrides.items():
        _parse(section, key, text)

    def lookup(section: str, key: str, preset: dict) -> str:
        if (section, key) in overrides:
            return overrides[(section, key)]
        if key in raw.get(section, {}):
            return raw[section][key]
        if base is not None:
            return _text(base.values[section][key])
        if key in preset.get(section, {}):
            return preset[section][key]
        return SCHEMA[section][key][1]

    setup = _parse("run", "setup", lookup("run", "setup", {}))
    if setup not in PRESETS:
        raise ConfigError(f"unknown setup {setup}; expected one of {sorted(PRESETS)}")
    preset = PRESETS[setup]
    values = {
        section: {key: _parse(section, key, lookup(section, key, preset)) for key in keys}
        for section, keys in SCHEMA.items()
    }
    _validate(values)
    return RunConfig(values)


def _validate(v: dict) -> None:
    if not v["trajectory"]["duration"] > 0:
        raise ConfigError("[trajectory] duration must be positive")
    if not v["estimator"]["window_length"] > 0:
        raise ConfigError("[estimator] window_length must be positive")
    if len(v["ekf"]["q"]) != 5:
        raise ConfigError("[ekf] q needs five values")
    a, b = v["scenario"]["outage_start"], v["scenario"]["outage_end"]
    if (a is None) != (b is None):
        raise ConfigError("[scenario] outage_start and outage_end go together")
    if a is not None and not b > a:
        raise ConfigError("[scenario] outage_end must follow outage_start")
    if not v["sweep"]["window_lengths"]:
        raise ConfigError("[sweep] window_lengths is empty")

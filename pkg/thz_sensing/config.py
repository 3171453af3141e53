import json
import os
from typing import Any, Dict, Tuple

import attrs

from . import geometry, sage, tracking

CONFIG: Dict[str, Any] = {}

DEFAULTS: Dict[str, Any] = {
    "workers": 1,
    "log_level": "INFO",
    "window": "rect",
    "guard_delay_ns": 70.0,
}


def read_configuration_file(
    config_path: str, config: Dict[str, Any] = CONFIG
) -> Dict[str, Any]:
    if not config:
        # Default config
        config.update(DEFAULTS)
        config_path = os.path.expanduser(config_path)
        try:
            with open(config_path) as fin:
                config.update(json.load(fin))
        except FileNotFoundError:
            pass
        except Exception:
            raise ValueError(f"failed to parse {config_path!r} file")
    return config


def get_config(
    key: str,
    config_path: str = "~/.thz-sensing.json",
    config: Dict[str, Any] = CONFIG,
) -> Any:
    return (
        os.getenv(f"THZ_SENSING_{key.upper()}")
        or read_configuration_file(config_path, config)[key]
    )


def _check_keys(section: str, data: Dict[str, Any], cls: type) -> None:
    known = {field.name for field in attrs.fields(cls)}
    for key in data:
        if key not in known:
            raise ValueError(f"unknown key {key!r} in {section!r} section")


def load_run_config(
    config_path: str,
) -> Tuple[geometry.SounderConfig, sage.SageConfig, tracking.TrackerConfig]:
    config_path = os.path.expanduser(config_path)
    with open(config_path) as fin:
        try:
            data = json.load(fin)
        except json.JSONDecodeError:
            raise ValueError(f"failed to parse {config_path!r} file")
    return run_config_from_json(data)


def run_config_from_json(
    data: Dict[str, Any],
) -> Tuple[geometry.SounderConfig, sage.SageConfig, tracking.TrackerConfig]:
    for section in data:
        if section not in ("sounder", "sage", "tracker"):
            raise ValueError(f"unknown key {section!r} in run configuration")
    sounder_data = dict(data.get("sounder", {}))
    antenna_data = sounder_data.pop("antenna", {})
    _check_keys("sounder", sounder_data, geometry.SounderConfig)
    _check_keys("antenna", antenna_data, geometry.AntennaPattern)
    _check_keys("sage", data.get("sage", {}), sage.SageConfig)
    _check_keys("tracker", data.get("tracker", {}), tracking.TrackerConfig)
    sounder = geometry.SounderConfig(
        antenna=geometry.AntennaPattern(**antenna_data), **sounder_data
    )
    return (
        sounder,
        sage.SageConfig(**data.get("sage", {})),
        tracking.TrackerConfig(**data.get("tracker", {})),
    )

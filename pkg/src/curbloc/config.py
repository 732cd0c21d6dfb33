"""YAML configuration covering every tunable knob with its default.

The file mirrors the internal config dataclasses section by section;
unknown keys fail loudly so a typo cannot silently fall back to a
default.  Angular quantities in the file are degrees, internal storage
is radians where the math needs it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import yaml

from .ndt import NdtConfig
from .pipeline import GraphConfig
from .simulate import NoiseSpec
from .splines import FitConfig
from .tracker import TrackerConfig

__all__ = ["Config", "load_config", "default_config", "write_default_config"]


@dataclass(frozen=True)
class Config:
    fit: FitConfig
    tracker: TrackerConfig  # carries the registration (NDT) config inside
    graph: GraphConfig
    noise: NoiseSpec
    speed: float = 8.0
    frame_rate: float = 10.0
    sensor_range: float = 30.0


def default_config() -> Config:
    return Config(fit=FitConfig(), tracker=TrackerConfig(), graph=GraphConfig(),
                  noise=NoiseSpec())


def _section(data: dict, name: str) -> dict:
    sec = data.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _build(cls, section: dict, context: str, **extra):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ValueError(f"unknown {context} keys: {sorted(unknown)}")
    return cls(**section, **extra)


def _mixed_sigma(sigmas, key: str) -> np.ndarray:
    s = np.asarray(sigmas, dtype=float)
    if s.shape != (6,):
        raise ValueError(f"{key} needs 6 entries (m, m, m, deg, deg, deg)")
    s = s.copy()
    s[3:] = np.deg2rad(s[3:])
    return s


def _sigma_to_covariance(sigmas) -> np.ndarray:
    return np.diag(_mixed_sigma(sigmas, "constraint_sigma") ** 2)


def load_config(path=None) -> Config:
    """Defaults overlaid with the YAML file at ``path`` (None for defaults)."""
    if path is None:
        return default_config()
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    known = {"parameterization", "registration", "tracker", "graph", "simulation"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    fit = _build(FitConfig, _section(data, "parameterization"), "parameterization")
    ndt = _build(NdtConfig, _section(data, "registration"), "registration")

    tracker_sec = _section(data, "tracker")
    extra = {"ndt": ndt}
    if "constraint_sigma" in tracker_sec:
        extra["constraint_covariance"] = _sigma_to_covariance(
            tracker_sec.pop("constraint_sigma"))
    for key in ("sigma_floor", "sigma_cap"):
        if key in tracker_sec:
            extra[key] = _mixed_sigma(tracker_sec.pop(key), key)
    tracker = _build(TrackerConfig, tracker_sec, "tracker", **extra)

    graph_sec = _section(data, "graph")
    if "odom_sigma_per_m" in graph_sec:
        sig = np.asarray(graph_sec.pop("odom_sigma_per_m"), dtype=float)
        if sig.shape != (6,):
            raise ValueError("odom_sigma_per_m needs 6 entries (m, m, m, deg, deg, deg)")
        graph = _build(GraphConfig, graph_sec, "graph", odom_sigma_per_m=sig)
    else:
        graph = _build(GraphConfig, graph_sec, "graph")

    sim_sec = _section(data, "simulation")
    drive = {k: sim_sec.pop(k) for k in ("speed", "frame_rate", "sensor_range")
             if k in sim_sec}
    noise = _build(NoiseSpec, sim_sec, "simulation")
    return Config(fit=fit, tracker=tracker, graph=graph, noise=noise, **drive)


def _sigma_out(arr) -> list[float]:
    s = np.asarray(arr, dtype=float).copy()
    s[3:] = np.degrees(s[3:])
    return [round(float(v), 9) for v in s]


def _config_dict(cfg: Config) -> dict:
    tracker_fields = {f.name for f in dataclasses.fields(TrackerConfig)} \
        - {"ndt", "constraint_covariance", "sigma_floor", "sigma_cap"}
    sigma = np.sqrt(np.diag(cfg.tracker.constraint_covariance))
    return {
        "parameterization": dataclasses.asdict(cfg.fit),
        "registration": dataclasses.asdict(cfg.tracker.ndt),
        "tracker": {
            **{k: getattr(cfg.tracker, k) for k in sorted(tracker_fields)},
            "constraint_sigma": _sigma_out(sigma),
            "sigma_floor": _sigma_out(cfg.tracker.sigma_floor),
            "sigma_cap": _sigma_out(cfg.tracker.sigma_cap),
        },
        "graph": {
            "window": cfg.graph.window,
            "odom_sigma_per_m": [round(float(v), 9) for v in cfg.graph.odom_sigma_per_m],
            "min_step_for_covariance": cfg.graph.min_step_for_covariance,
        },
        "simulation": {
            **dataclasses.asdict(cfg.noise),
            "speed": cfg.speed,
            "frame_rate": cfg.frame_rate,
            "sensor_range": cfg.sensor_range,
        },
    }


def write_default_config(path) -> None:
    """Emit a config file holding every knob at its default value."""
    with open(path, "w") as fh:
        yaml.safe_dump(_config_dict(default_config()), fh, sort_keys=False)

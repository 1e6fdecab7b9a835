"""INI-style configuration files with strict keys.

Schema (every section and key is optional; anything else is an error)::

    [profile]      fields of harness.Profile (training/identification scale, MPPI knobs)
    [train]        fields of neural.TrainConfig
    [scenario]     duration, dt, friction_schedule, wind_mean, wind_gust,
                   wind_period, a_w, x0
    [experiment]   benchmark, method, episodes, seed, a_w, out, cache

``friction_schedule`` is written ``0:0.9, 5:0.3`` (time:mu pairs) and ``x0``
as a comma-separated vector.
"""

from __future__ import annotations

import configparser
import dataclasses

from .harness import ExperimentConfig, Profile
from .neural import TrainConfig

__all__ = ["ConfigError", "load_config", "SCHEMA"]

SCENARIO_KEYS = ("duration", "dt", "friction_schedule", "wind_mean", "wind_gust", "wind_period",
                 "a_w", "x0")
EXPERIMENT_KEYS = ("benchmark", "method", "episodes", "seed", "a_w", "out", "cache")


class ConfigError(ValueError):
    pass


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


SCHEMA = {
    "profile": tuple(_fields(Profile)),
    "train": tuple(_fields(TrainConfig)),
    "scenario": SCENARIO_KEYS,
    "experiment": EXPERIMENT_KEYS,
}


def _vector(text):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _schedule(text):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        t, mu = item.split(":")
        out.append((float(t), float(mu)))
    return tuple(out)


def _coerce(default, text, where):
    try:
        if isinstance(default, bool):
            v = text.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if default is None or isinstance(default, str):
            return text.strip() or None
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc
    raise ConfigError(f"{where}: unsupported type")


def load_config(path):
    """Parse ``path`` into ``{"profile": Profile, "train": TrainConfig, ...}``.

    Sections absent from the file come back as their defaults; ``scenario``
    is a dict of overrides for :class:`plants.Scenario` and ``sections``
    names the sections the file actually contained.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    with open(path) as fh:
        cp.read_file(fh)
    out = {"profile": Profile(), "train": TrainConfig(), "scenario": {},
           "experiment": ExperimentConfig(), "sections": tuple(cp.sections())}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}] (allowed: {', '.join(SCHEMA)})")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
    for sec, cls in (("profile", Profile), ("train", TrainConfig)):
        if cp.has_section(sec):
            base = out[sec]
            kw = {k: _coerce(getattr(base, k), v, f"[{sec}] {k}") for k, v in cp[sec].items()}
            out[sec] = dataclasses.replace(base, **kw)
    if cp.has_section("scenario"):
        sc = {}
        for k, v in cp["scenario"].items():
            try:
                if k == "friction_schedule":
                    sc[k] = _schedule(v)
                elif k == "x0":
                    sc[k] = _vector(v)
                else:
                    sc[k] = float(v)
            except ValueError as exc:
                raise ConfigError(f"[scenario] {k}: cannot parse {v!r}") from exc
        out["scenario"] = sc
    if cp.has_section("experiment"):
        kw = {}
        base = ExperimentConfig()
        for k, v in cp["experiment"].items():
            kw[k] = _coerce(getattr(base, k), v, f"[experiment] {k}")
        try:
            out["experiment"] = ExperimentConfig(profile=out["profile"], **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        out["experiment"] = ExperimentConfig(profile=out["profile"])
    return out

"""Key-value configuration files.

The file is parsed as TOML.  Keys may sit at the top level or inside the
sections ``[sim]``, ``[tls]``, ``[detector]`` and ``[run]``; top-level keys
are routed to whichever settings object owns a field of that name
(``iteration_period`` belongs to both the TLS and detector settings and is
applied to both).  Precedence: command-line flags > file > defaults.
See ``docs/config_grammar.md``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .detector import DetectorParams
from .simulator import SimConfig
from .tls import TlsConfig

SECTIONS = {"sim": SimConfig, "tls": TlsConfig, "detector": DetectorParams}
RUN_KEYS = {"n_runs": int, "workers": int, "layout": str, "window": int, "r_threshold": float,
            "bin_width": float, "area_mm2": float, "n_null_seeds": int}


class ConfigError(ValueError):
    pass


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass
class EffectiveConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    tls: TlsConfig = field(default_factory=TlsConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    run: dict = field(default_factory=dict)
    source: str | None = None

    def to_dict(self) -> dict:
        return {"sim": self.sim.to_dict(), "tls": self.tls.to_dict(),
                "detector": self.detector.to_dict(), "run": dict(self.run), "source": self.source}

    @classmethod
    def from_dict(cls, data: dict) -> "EffectiveConfig":
        return cls(SimConfig.from_dict(data.get("sim", {})), TlsConfig.from_dict(data.get("tls", {})),
                   DetectorParams.from_dict(data.get("detector", {})), dict(data.get("run", {})),
                   data.get("source"))


def split_keys(data: dict) -> dict[str, dict]:
    """Sort a parsed file into per-section dictionaries, rejecting unknown keys."""
    out: dict[str, dict] = {"sim": {}, "tls": {}, "detector": {}, "run": {}}
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in out:
                raise ConfigError(f"unknown section [{key}]")
            valid = RUN_KEYS.keys() if key == "run" else _field_names(SECTIONS[key])
            bad = set(value) - set(valid)
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            out[key].update(value)
            continue
        owners = [name for name, cls in SECTIONS.items() if key in _field_names(cls)]
        if key in RUN_KEYS:
            owners.append("run")
        if not owners:
            raise ConfigError(f"unknown key {key!r}")
        for name in owners:
            out[name][key] = value
    return out


def build(sections: dict[str, dict], source: str | None = None) -> EffectiveConfig:
    sim = dict(sections.get("sim", {}))
    det = dict(sections.get("detector", {}))
    # keep the 25 ms template when only the repetition period changes
    if "rep_period" in sim and "sample_period" not in det:
        det["sample_period"] = sim["rep_period"]
        det.setdefault("template_half_width", max(1, int(round(25e-3 / sim["rep_period"]))))
    try:
        return EffectiveConfig(SimConfig.from_dict(sim), TlsConfig.from_dict(sections.get("tls", {})),
                               DetectorParams.from_dict(det), dict(sections.get("run", {})), source)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path=None, overrides: dict | None = None) -> EffectiveConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (flat or sectioned)."""
    sections: dict[str, dict] = {"sim": {}, "tls": {}, "detector": {}, "run": {}}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                parsed = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for k, v in split_keys(parsed).items():
            sections[k].update(v)
    if overrides:
        for k, v in split_keys({k: v for k, v in overrides.items() if v is not None}).items():
            sections[k].update(v)
    return build(sections, str(Path(path)) if path is not None else None)

"""
Pipeline configuration and the flat ``key = value`` config file format.

Recognised keys (defaults in parentheses)::

    l_max (50)              n_sectors (20)          n_rings (60)
    intensity_scale (1.0)   ground_mode (none)      ground_z (-1.5)
    calibration (unset; path to a distance/gain curve file)
    eps_geometry (0.9)      eps_intensity (0.92)    exclusion_window (50)
    n_temporal (5)          xi (1.8)
    icp_max_iter (30)       icp_tol (1e-4)          icp_max_rms (0.5)
    icp_max_corr_dist (2.0) icp_max_points (4000)
    loop_dist (4.0)

``l_max`` feeds both the range filter and the polar grid.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .descriptor import DescriptorConfig
from .errors import ConfigError
from .ingest import CalibrationCurve, IngestConfig
from .retrieval import RetrievalConfig
from .verify import VerifyConfig


@dataclass(frozen=True)
class EvalConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    loop_dist: float = 4.0

    def __post_init__(self):
        if not self.loop_dist > 0:
            raise ValueError("loop_dist must be positive")
        if self.ingest.l_max != self.descriptor.l_max:
            raise ValueError("ingest and descriptor l_max differ")

    @property
    def exclusion_window(self) -> int:
        return self.retrieval.exclusion_window


_SECTIONS = {"ingest": IngestConfig, "descriptor": DescriptorConfig, "retrieval": RetrievalConfig, "verify": VerifyConfig}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def config_from_mapping(values: dict, base_dir: str | os.PathLike = ".") -> EvalConfig:
    """Build an EvalConfig from string key/value pairs."""
    values = dict(values)
    kwargs = {name: {} for name in _SECTIONS}
    top = {}
    if "calibration" in values:
        curve_path = Path(base_dir) / values.pop("calibration")
        kwargs["ingest"]["calibration"] = CalibrationCurve.from_file(curve_path)
    defaults = EvalConfig()
    for key, raw in values.items():
        targets = [s for s, cls in _SECTIONS.items() if key in {f.name for f in dataclasses.fields(cls)}]
        if key == "loop_dist":
            top[key] = float(raw)
            continue
        if not targets:
            raise ConfigError(f"unknown config key {key!r}")
        for section in targets:
            like = getattr(getattr(defaults, section), key)
            try:
                kwargs[section][key] = _coerce(raw, like)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
    try:
        return EvalConfig(
            ingest=IngestConfig(**kwargs["ingest"]),
            descriptor=DescriptorConfig(**kwargs["descriptor"]),
            retrieval=RetrievalConfig(**kwargs["retrieval"]),
            verify=VerifyConfig(**kwargs["verify"]),
            **top,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | os.PathLike | None) -> EvalConfig:
    if path is None:
        return EvalConfig()
    path = Path(path)
    return config_from_mapping(parse_config_text(path.read_text(), str(path)), path.parent)


def dump_config(cfg: EvalConfig) -> str:
    """Render ``cfg`` in the flat file format (calibration curves are not serialised)."""
    lines = []
    seen = set()
    for section in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            if f.name in seen or f.name == "calibration":
                continue
            seen.add(f.name)
            lines.append(f"{f.name} = {getattr(getattr(cfg, section), f.name)}")
    lines.append(f"loop_dist = {cfg.loop_dist}")
    return "\n".join(lines) + "\n"

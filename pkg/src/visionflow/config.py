"""Run configuration: defaults, JSON loading, flag overrides, validation.

Precedence is flags over file over defaults. Validation happens at
construction time; invalid combinations are rejected with the violated
constraint named. All randomness downstream flows from the single root seed
via named streams.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .assembly import AssemblyConfig, MergeMethod
from .boxes import BoxPipelineConfig
from .encoders import EncoderConfig
from .fusion import FusionConfig, FusionStrategy
from .roi import RoiConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    boxes: BoxPipelineConfig = field(default_factory=BoxPipelineConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tags: str = "synthetic"  # synthetic | coco80 | file:PATH
    video_frames: int = 8

    def __post_init__(self):
        # the root seed is the single entropy source; the encoder section follows it
        if self.encoder.seed != self.seed:
            object.__setattr__(self, "encoder", dataclasses.replace(self.encoder, seed=self.seed))
        if self.fusion.channels_low != self.encoder.channels_low:
            raise ConfigError(
                f"fusion.channels_low {self.fusion.channels_low} != encoder.channels_low {self.encoder.channels_low}"
            )
        if self.fusion.channels_high != self.encoder.channels_high:
            raise ConfigError(
                f"fusion.channels_high {self.fusion.channels_high} != encoder.channels_high {self.encoder.channels_high}"
            )
        if self.boxes.max_boxes < 0:
            raise ConfigError(f"boxes.max_boxes must be nonnegative, got {self.boxes.max_boxes}")
        if self.video_frames <= 0:
            raise ConfigError(f"video_frames must be positive, got {self.video_frames}")

    @property
    def object_channels(self) -> int:
        return sum(self.encoder.stage_channels)

    def to_dict(self) -> dict:
        def unpack(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: unpack(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (FusionStrategy, MergeMethod)):
                return obj.value
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return unpack(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config section {path!r}")
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs:
            value = kwargs[f.name]
            if f.name == "strategy":
                value = FusionStrategy(value)
            elif f.name == "merge":
                value = MergeMethod(value)
            elif f.name in ("stage_channels", "bins"):
                value = tuple(value)
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path!r}: {exc}") from exc


_SECTIONS = {
    "encoder": EncoderConfig,
    "fusion": FusionConfig,
    "boxes": BoxPipelineConfig,
    "roi": RoiConfig,
    "assembly": AssemblyConfig,
    "train": TrainConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    # the root seed propagates into the encoder section unless given there
    seed = int(data.pop("seed", 0))
    kwargs["seed"] = seed
    for name, cls in _SECTIONS.items():
        section = dict(data.pop(name, {}))
        if name == "encoder":
            section.setdefault("seed", seed)
        kwargs[name] = _build_section(cls, section, name)
    for scalar in ("tags", "video_frames"):
        if scalar in data:
            kwargs[scalar] = data.pop(scalar)
    if data:
        raise ConfigError(f"unknown top-level config key(s): {sorted(data)}")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _merge_section_wise(base: dict, extra: dict) -> dict:
    """Two-level merge: section dicts update key by key, scalars replace."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = value
    return out


def load_config(path: str | None = None, overrides: dict | None = None,
                base: dict | None = None) -> RunConfig:
    """Merge defaults, a base dict, an optional JSON file, and overrides.

    Precedence rises left to right. Overrides use dotted keys
    ("boxes.max_boxes") or the top-level names.
    """
    data: dict = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (base or {}).items()}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            file_data = json.load(fh)
        if not isinstance(file_data, dict):
            raise ConfigError(f"config file {path!r} must hold a JSON object")
        data = _merge_section_wise(data, file_data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, leaf = key.split(".", 1)
            data.setdefault(section, {})
            if not isinstance(data[section], dict):
                raise ConfigError(f"cannot override scalar config key {section!r} with {key!r}")
            data[section][leaf] = value
        else:
            data[key] = value
    return config_from_dict(data)

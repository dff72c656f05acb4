"""Run configuration: a flat key/value file whose keys are the TrainConfig fields."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .fields import EncodingSpec
from .render import ViewConfig


class ConfigError(ValueError):
    pass


def localization_prompt(mesh_object: str, edit_object: str) -> str:
    """Coarse localization prompt, e.g. ``a cow with sunglasses``."""
    article = "an" if mesh_object[:1].lower() in "aeiou" else "a"
    return f"{article} {mesh_object} with {edit_object}"


@dataclass
class TrainConfig:
    # schedule
    warmup_iters: int = 1000
    joint_iters: int = 10000
    # resolutions
    texture_resolution: int = 512
    render_resolution: int = 512
    # view sampling (degrees / scene units)
    elevation_lo: float = 0.0
    elevation_hi: float = 60.0
    azimuth_lo: float = 0.0
    azimuth_hi: float = 360.0
    radius_lo: float = 1.0
    radius_hi: float = 1.5
    fov: float = 45.0
    # conditioning
    prompt: str = ""
    mesh_object: str = ""
    edit_object: str = ""
    reference_image: str = ""
    image_weight: float = 1.0
    mask_threshold: float = 0.5
    # optimization
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loc_loss_weight_joint: float = 1.0
    bn_momentum: float = 0.1
    failure_budget: int = 50
    seed: int = 0
    # ablations
    no_warmup: bool = False
    no_ca_mask: bool = False
    no_loc_loss: bool = False
    # guidance
    backend: str = "toy"
    external_backend: str = ""
    schedule_T: int = 1000
    beta_lo: float = 1e-4
    beta_hi: float = 0.02
    t_min: int = 20
    t_max: int = 980
    weight_fn: str = "constant"
    toy_loc_target: str = ""
    # fields
    hidden_width: int = 256
    num_frequencies: int = 6
    frequency_scale: float = 1.0
    encoding_mode: str = "axis"
    # appearance
    base_gray: float = 0.5
    base_texture: str = ""
    background: float = 0.8
    shade_base: bool = True
    # output
    checkpoint_every: int = 0
    export_16bit: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.warmup_iters < 0 or self.joint_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.texture_resolution < 1 or self.render_resolution < 1:
            raise ConfigError("resolutions must be >= 1")
        if self.backend not in ("toy", "external"):
            raise ConfigError(f"backend must be 'toy' or 'external', got {self.backend!r}")
        if self.backend == "external" and not self.external_backend:
            raise ConfigError("external backend selected but external_backend is empty")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if not 0 < self.mask_threshold < 1:
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if not 1 <= self.t_min <= self.t_max <= self.schedule_T:
            raise ConfigError("timestep range must satisfy 1 <= t_min <= t_max <= schedule_T")
        if self.failure_budget < 1:
            raise ConfigError("failure_budget must be >= 1")
        try:
            self.view_config()
            self.encoding_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def view_config(self) -> ViewConfig:
        return ViewConfig(
            (self.elevation_lo, self.elevation_hi),
            (self.azimuth_lo, self.azimuth_hi),
            (self.radius_lo, self.radius_hi),
            self.fov,
        )

    def encoding_spec(self) -> EncodingSpec:
        return EncodingSpec(self.num_frequencies, self.frequency_scale, self.seed, self.encoding_mode)

    def text_prompt(self) -> str:
        if self.prompt:
            return self.prompt
        if self.mesh_object and self.edit_object:
            return localization_prompt(self.mesh_object, self.edit_object)
        raise ConfigError("set prompt, or both mesh_object and edit_object")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, value in data.items():
            default = known[key].default
            if isinstance(value, (dict, list)):
                raise ConfigError(f"config must be flat; {key!r} is nested")
            try:
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise TypeError
                    values[key] = value
                elif isinstance(default, int):
                    if isinstance(value, bool) or int(value) != value:
                        raise TypeError
                    values[key] = int(value)
                elif isinstance(default, float):
                    values[key] = float(value)
                else:
                    values[key] = "" if value is None else str(value)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must be a key/value mapping")
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

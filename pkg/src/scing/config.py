"""Run configuration: dataclass sections read from an INI-style key/value file.

Values are Python literals (``64``, ``0.5``, ``"svip"``, ``[30, 50]``, ``true``).
Unknown sections or keys are rejected so typos do not pass silently.
"""

import ast
import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field

from .errors import ConfigError

FUSIONS = ("none", "metanet", "svip")


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    embed_dim: int = 32
    text_depth: int = 2
    text_heads: int = 4
    init_temperature: float = 0.07

    @property
    def image_size(self):
        return (self.image_height, self.image_width)


@dataclass
class PromptConfig:
    n_tokens: int = 4
    n_fused: int = 2

    def validate(self):
        if not 1 <= self.n_fused < self.n_tokens:
            raise ConfigError(f"prompts: need 1 <= n_fused < n_tokens, got {self.n_fused}, {self.n_tokens}")


@dataclass
class SvipConfig:
    fusion: str = "svip"
    hidden_dim: int = 0
    init_std: float = 0.0
    # How stage 2 obtains image-independent class embeddings: "raw" prompts
    # with the condition path off, or "mean_fused" over the train images.
    class_text: str = "raw"

    def validate(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"svip.fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.class_text not in ("raw", "mean_fused"):
            raise ConfigError(f"svip.class_text must be 'raw' or 'mean_fused', got {self.class_text!r}")


@dataclass
class PerturbConfig:
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.33)
    erase_ratio: tuple = (0.3, 3.3)
    crop_prob: float = 0.5
    crop_scale: tuple = (0.8, 1.0)
    occlude_prob: float = 0.5
    occlude_area: tuple = (0.2, 0.5)
    feature_dropout: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ("flip_prob", "erase_prob", "crop_prob", "occlude_prob", "feature_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"perturb.{name} must lie in [0, 1], got {v}")
        for name in ("erase_area", "crop_scale", "occlude_area"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError(f"perturb.{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        lo, hi = self.erase_ratio
        if not 0.0 < lo <= hi:
            raise ConfigError(f"perturb.erase_ratio must satisfy 0 < lo <= hi, got {(lo, hi)}")


@dataclass
class LossConfig:
    consistency_weight: float = 1.0
    triplet_weight: float = 1.0
    margin: float = 0.2
    triplet_orientation: str = "corrected"
    negative_mining: str = "corrected"
    # 0 means "use 1/tau frozen from stage 1".
    ce_scale: float = 0.0

    def validate(self):
        if self.consistency_weight < 0 or self.triplet_weight < 0 or self.margin < 0:
            raise ConfigError("losses: weights and margin must be non-negative")
        for name in ("triplet_orientation", "negative_mining"):
            if getattr(self, name) not in ("corrected", "as_printed"):
                raise ConfigError(f"losses.{name} must be 'corrected' or 'as_printed'")


@dataclass
class OptimConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage1_lr: float = 1e-3
    stage2_lr: float = 3e-4
    weight_decay: float = 5e-4
    betas: tuple = (0.9, 0.999)
    milestones: tuple = (30, 50)
    reference_epochs: int = 120
    lr_decay: float = 0.1
    # Without pretrained weights a frozen image tower gives stage 1 nothing to align to.
    stage1_train_image: bool = True

    def validate(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("optim: epochs must be >= 1")
        if min(self.stage1_lr, self.stage2_lr) <= 0 or self.weight_decay < 0:
            raise ConfigError("optim: learning rates must be positive")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError(f"optim.milestones must be strictly increasing, got {self.milestones}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("optim.lr_decay must lie in (0, 1]")


@dataclass
class DataConfig:
    root: str = "data"
    n_identities: int = 70
    n_eval_identities: int = 20
    n_cameras: int = 2
    images_per_id_per_cam: int = 12
    occluded_fraction: float = 0.4
    ids_per_batch: int = 16
    images_per_id: int = 4
    seed: int = 0

    @property
    def batch_size(self):
        return self.ids_per_batch * self.images_per_id

    def validate(self):
        if self.n_identities < 2:
            raise ConfigError("data.n_identities must be >= 2")
        if not 1 <= self.n_eval_identities < self.n_identities:
            raise ConfigError("data.n_eval_identities must leave at least one train identity")
        if not 0.0 <= self.occluded_fraction <= 1.0:
            raise ConfigError("data.occluded_fraction must lie in [0, 1]")
        if self.ids_per_batch < 1 or self.images_per_id < 1:
            raise ConfigError("data: batch spec must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dtype: str = "float32"
    save_every_epoch: bool = True
    exclude_same_camera: bool = True


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    svip: SvipConfig = field(default_factory=SvipConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate()
        if self.model.embed_dim % self.model.text_heads:
            raise ConfigError("model.embed_dim must be divisible by model.text_heads")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **sections):
        """Return a copy with ``section={key: value}`` overrides applied."""
        data = self.to_dict()
        for name, updates in sections.items():
            if name not in data:
                raise ConfigError(f"unknown config section {name!r}")
            for key in updates:
                if key not in data[name]:
                    raise ConfigError(f"unknown key {name}.{key}")
            data[name].update(updates)
        return from_dict(data)


def _coerce(section_cls, key, value):
    default = {f.name: f for f in dataclasses.fields(section_cls)}[key].default
    if isinstance(default, tuple):
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(data: dict) -> Config:
    sections = {}
    for f in dataclasses.fields(Config):
        cls = f.default_factory
        raw = dict(data.get(f.name, {}))
        known = {x.name for x in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown key(s) in [{f.name}]: {sorted(unknown)}")
        sections[f.name] = cls(**{k: _coerce(cls, k, v) for k, v in raw.items()})
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    return Config(**sections).validate()


def _parse_value(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def loads(text: str, source: str = "<string>") -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    data = {}
    for section in parser.sections():
        data[section] = {k: _parse_value(v) for k, v in parser.items(section)}
    return from_dict(data)


def load(path) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, source=str(path))


def dumps(config: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, section in config.to_dict().items():
        parser[name] = {k: _format_value(v) for k, v in section.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return json.dumps(list(v))
    return repr(v)


def full_scale_preset() -> Config:
    """Full-scale geometry and schedule (256x128 input, 16x16 patches, 120 epochs, lr 5e-5)."""
    return Config().replace(
        model={"image_height": 256, "image_width": 128, "patch_size": 16},
        optim={"stage1_epochs": 120, "stage2_epochs": 120, "stage1_lr": 5e-5, "stage2_lr": 5e-5},
    )

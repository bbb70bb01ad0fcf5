from __future__ import annotations

import math
from enum import Enum, StrEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from dpvger.env import ConfigurationError, expand_env_vars

DEFAULT_TASK_PAIRS: List[Tuple[int, int]] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
NUM_CLASSES = 10


class MethodKind(str, Enum):
    VGER = "vger"
    DP_VGER_PUBLIC = "dp-vger-public"
    DP_VGER_NOPUBLIC = "dp-vger-nopublic"
    CORESET_ONLY = "coreset-only"
    VCL = "vcl"
    PLAIN_SGD = "plain-sgd"

    @property
    def is_vger(self) -> bool:
        return self in (
            MethodKind.VGER,
            MethodKind.DP_VGER_PUBLIC,
            MethodKind.DP_VGER_NOPUBLIC,
        )

    @property
    def uses_dp(self) -> bool:
        return self in (MethodKind.DP_VGER_PUBLIC, MethodKind.DP_VGER_NOPUBLIC)

    @property
    def uses_public(self) -> bool:
        return self in (MethodKind.DP_VGER_PUBLIC, MethodKind.CORESET_ONLY)


# (epsilon, delta) per class GAN when the config leaves the budget unset
DEFAULT_BUDGETS: Dict[MethodKind, Tuple[float, float]] = {
    MethodKind.DP_VGER_PUBLIC: (1.0, 1e-8),
    MethodKind.DP_VGER_NOPUBLIC: (5.0, 1e-4),
}


class ClippingMode(StrEnum):
    GLOBAL = "global"
    PER_LAYER = "per_layer"


class TaskConfig(BaseModel):
    data_dir: Optional[str] = Field(
        default=None,
        description=(
            "Directory holding the MNIST IDX files (raw or .gz). "
            "Supports ${ENV_VAR} interpolation."
        ),
    )
    scale_factor: int = Field(
        default=2, ge=1, le=28, description="Average-pooling factor (2 gives 14x14)"
    )
    per_class_cap: Optional[int] = Field(
        default=2000,
        ge=1,
        description="Maximum training rows kept per class; none keeps every row",
    )
    public_fraction: float = Field(
        default=0.01,
        ge=0.0,
        lt=1.0,
        description="Share of each task's training rows treated as public data",
    )
    task_pairs: List[Tuple[int, int]] = Field(
        default_factory=lambda: list(DEFAULT_TASK_PAIRS),
        min_length=1,
        description="Ordered digit pairs, one binary task per pair",
    )

    @field_validator("data_dir")
    @classmethod
    def expand_data_dir(cls, value: Optional[str]) -> Optional[str]:
        return expand_env_vars(value) if value else value

    @model_validator(mode="after")
    def validate_pairs(self) -> "TaskConfig":
        seen: set[int] = set()
        for pair in self.task_pairs:
            if pair[0] == pair[1]:
                raise ValueError(f"task pair {pair} repeats a digit")
            for digit in pair:
                if not 0 <= digit < NUM_CLASSES:
                    raise ValueError(f"task pair {pair} has digit outside 0-9")
                if digit in seen:
                    raise ValueError(f"digit {digit} appears in more than one task pair")
                seen.add(digit)
        return self


class BnnConfig(BaseModel):
    hidden_widths: List[int] = Field(
        default_factory=lambda: [100, 100],
        min_length=1,
        description="Hidden layer widths of the classifier",
    )
    epochs: int = Field(default=5, ge=1, description="Epochs per task")
    batch_size: int = Field(default=64, ge=1, description="Mini-batch size")
    learning_rate: float = Field(default=1e-3, ge=0.0, description="Adam step size")
    train_samples: int = Field(
        default=1, ge=1, description="Weight samples per training step"
    )
    eval_samples: int = Field(
        default=20, ge=1, description="Weight samples averaged at prediction time"
    )
    prior_std: float = Field(
        default=1.0, gt=0.0, description="Std of the shared N(0, s^2) weight prior"
    )
    init_sigma: float = Field(
        default=0.05, gt=0.0, description="Initial posterior std, softplus(rho)"
    )
    init_mu_std: float = Field(
        default=0.1, gt=0.0, description="Std of the Gaussian posterior-mean init"
    )

    @field_validator("hidden_widths")
    @classmethod
    def positive_widths(cls, widths: List[int]) -> List[int]:
        if any(width < 1 for width in widths):
            raise ValueError("hidden widths must be positive")
        return widths


class GanConfig(BaseModel):
    """Per-class GAN; the generator's output layer is always a sigmoid."""

    latent_dim: int = Field(default=32, ge=1, description="Generator noise width")
    generator_widths: List[int] = Field(
        default_factory=lambda: [128], description="Generator hidden widths"
    )
    discriminator_widths: List[int] = Field(
        default_factory=lambda: [64], description="Discriminator hidden widths"
    )
    learning_rate: float = Field(default=1e-3, ge=0.0, description="Adam step size")
    batch_size: int = Field(default=64, ge=1, description="Real rows per D step")
    epochs: int = Field(default=20, ge=1, description="Passes over the private data")
    public_epochs: int = Field(
        default=20, ge=0, description="Pretraining passes over public data"
    )

    @field_validator("generator_widths", "discriminator_widths")
    @classmethod
    def positive_widths(cls, widths: List[int]) -> List[int]:
        if any(width < 1 for width in widths):
            raise ValueError("layer widths must be positive")
        return widths


class DpConfig(BaseModel):
    clip_norm: float = Field(
        default=1.0, gt=0.0, description="Per-example l2 clip norm C (inf disables)"
    )
    noise_multiplier: Optional[float] = Field(
        default=None,
        ge=0.0,
        description="Noise std over C; none calibrates it to the target budget",
    )
    sampling_fraction: Optional[float] = Field(
        default=None,
        gt=0.0,
        le=1.0,
        description="Accounting rate q; none derives batch size / private rows",
    )
    target_epsilon: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Per class-GAN epsilon; none records without enforcing",
    )
    target_delta: Optional[float] = Field(
        default=None, gt=0.0, lt=1.0, description="Per class-GAN delta"
    )
    clipping_mode: ClippingMode = Field(
        default=ClippingMode.GLOBAL,
        description="'global' clips each example's full gradient; 'per_layer' "
        "clips each layer to C/sqrt(L)",
    )

    @property
    def delta(self) -> float:
        return self.target_delta if self.target_delta is not None else 1e-8


class ExperimentConfig(BaseModel):
    method: MethodKind = Field(..., description="Continual learning method")
    seed: int = Field(default=0, ge=0, description="Root seed of the run")
    out_dir: str = Field(
        default="runs/default",
        description="Output directory; supports ${ENV_VAR} interpolation",
    )
    max_gan_workers: int = Field(
        default=1, ge=1, description="Concurrent per-class GAN trainings"
    )
    tasks: TaskConfig = Field(default_factory=TaskConfig)
    bnn: BnnConfig = Field(default_factory=BnnConfig)
    gan: GanConfig = Field(default_factory=GanConfig)
    dp: DpConfig = Field(default_factory=DpConfig)

    @field_validator("out_dir")
    @classmethod
    def expand_out_dir(cls, value: str) -> str:
        return expand_env_vars(value)

    @model_validator(mode="after")
    def apply_method_budget(self) -> "ExperimentConfig":
        if self.method.uses_dp:
            default_eps, default_delta = DEFAULT_BUDGETS[self.method]
            updates: Dict[str, Any] = {}
            if self.dp.target_epsilon is None:
                updates["target_epsilon"] = default_eps
            if self.dp.target_delta is None:
                updates["target_delta"] = default_delta
            if updates:
                self.dp = self.dp.model_copy(update=updates)
        return self

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "ExperimentConfig":
        return ExperimentConfig.model_validate(data)

    @staticmethod
    def from_text(text: str, source: str = "<config>") -> "ExperimentConfig":
        data = parse_config_lines(text, source=source)
        try:
            return ExperimentConfig.from_dict(data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid config {source}: {e}") from e

    @staticmethod
    def from_file(file_path: str | Path) -> "ExperimentConfig":
        path = Path(file_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"Error loading config from {path}: {e}") from e
        return ExperimentConfig.from_text(text, source=str(path))

    def to_lines(self) -> List[str]:
        """Render the validated config in the flat ``key = value`` file format."""
        lines = [
            f"method = {self.method.value}",
            f"seed = {self.seed}",
            f"out_dir = {self.out_dir}",
            f"max_gan_workers = {self.max_gan_workers}",
        ]
        for name in TaskConfig.model_fields:
            lines.append(f"{name} = {_render_value(getattr(self.tasks, name))}")
        for section in _SECTIONS:
            model = getattr(self, section)
            for name in type(model).model_fields:
                lines.append(f"{section}.{name} = {_render_value(getattr(model, name))}")
        return lines


_TOP_LEVEL_KEYS = ("method", "seed", "out_dir", "max_gan_workers")
_SECTIONS = ("bnn", "gan", "dp")
_LIST_FIELDS = {
    "task_pairs",
    "bnn.hidden_widths",
    "gan.generator_widths",
    "gan.discriminator_widths",
}
_SECTION_MODELS: Dict[str, type[BaseModel]] = {
    "bnn": BnnConfig,
    "gan": GanConfig,
    "dp": DpConfig,
}


def _render_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, list):
        return ",".join(
            f"{item[0]}-{item[1]}" if isinstance(item, tuple) else str(item)
            for item in value
        )
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def _parse_list(key: str, raw: str) -> List[Any]:
    items = [item.strip() for item in raw.split(",") if item.strip()]
    if key == "task_pairs":
        pairs = []
        for item in items:
            left, sep, right = item.partition("-")
            if not sep:
                raise ValueError(f"task pair {item!r} must look like 'a-b'")
            pairs.append((int(left), int(right)))
        return pairs
    return [int(item) for item in items]


def parse_config_lines(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse flat ``key = value`` lines into the nested ExperimentConfig layout."""
    data: Dict[str, Any] = {"tasks": {}, "bnn": {}, "gan": {}, "dp": {}}
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw_value = line.partition("=")
        key = key.strip()
        value_text = raw_value.strip()
        if not sep or not key:
            raise ConfigurationError(
                f"{source}:{lineno}: expected 'key = value', got {raw_line.strip()!r}"
            )
        if key in seen:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)

        value: Any = None if value_text.lower() == "none" else value_text
        if value is not None and key in _LIST_FIELDS:
            try:
                value = _parse_list(key, value_text)
            except ValueError as e:
                raise ConfigurationError(f"{source}:{lineno}: {key}: {e}") from e

        if key in _TOP_LEVEL_KEYS:
            data[key] = value
        elif key in TaskConfig.model_fields:
            data["tasks"][key] = value
        else:
            section, dot, field_name = key.partition(".")
            model = _SECTION_MODELS.get(section)
            if not dot or model is None or field_name not in model.model_fields:
                raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
            data[section][field_name] = value
    return data

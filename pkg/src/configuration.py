import json
import math
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

from keboola.component.exceptions import UserException
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

PRESETS_DIR = Path(__file__).resolve().parent.parent / "component_config" / "presets"

DEFAULT_SURGERY_TYPES = [
    "cardiac",
    "orthopedic",
    "general",
    "neurosurgery",
    "laparoscopic cholecystectomy",
    "thoracic",
    "urologic",
    "gynecologic",
    "vascular",
    "spine",
]


class ConfigValidationError(UserException):
    """Raised before any side effect when the pipeline configuration is invalid.

    ``violations`` holds every problem found, so one run reports all of them.
    """

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("Invalid configuration:\n" + "\n".join(f" - {v}" for v in violations))


class Ablation(StrEnum):
    FULL = "full"
    NO_TEXT = "no_text"
    NO_VOCAB_EXT = "no_vocab_ext"
    NO_AUGMENTATION = "no_augmentation"
    NO_PRETRAIN = "no_pretrain"


class Stage(StrEnum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class DeclineStyle(StrEnum):
    GRADUAL = "gradual"
    RAPID = "rapid"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


def _check_range(name: str, bounds: tuple[float, float]) -> None:
    if bounds[0] > bounds[1]:
        raise ValueError(f"{name} lower bound {bounds[0]} exceeds upper bound {bounds[1]}")


class SynthConfig(_Section):
    n_patients: int = Field(default=200, ge=1)
    surgery_types: list[str] = Field(default_factory=lambda: list(DEFAULT_SURGERY_TYPES), min_length=1)
    sampling_interval_s: float = Field(default=10.0, gt=0)
    duration_s: tuple[float, float] = (3600.0, 5400.0)
    baseline_map: tuple[float, float] = (75.0, 95.0)
    ioh_rate: float = Field(default=1.0, ge=0)
    decline_styles: list[DeclineStyle] = Field(
        default_factory=lambda: [DeclineStyle.GRADUAL, DeclineStyle.RAPID], min_length=1
    )
    episode_duration_s: tuple[float, float] = (60.0, 180.0)
    gradual_precursor_s: tuple[float, float] = (300.0, 600.0)
    rapid_precursor_s: tuple[float, float] = (60.0, 120.0)
    recovery_s: tuple[float, float] = (60.0, 120.0)
    age_range: tuple[int, int] = (18, 90)
    noise_sd: float = Field(default=1.5, ge=0)
    drift_sd: float = Field(default=0.5, ge=0)
    missing_frac: float = Field(default=0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _validate_ranges(self) -> "SynthConfig":
        for name in (
            "duration_s",
            "baseline_map",
            "episode_duration_s",
            "gradual_precursor_s",
            "rapid_precursor_s",
            "recovery_s",
            "age_range",
        ):
            _check_range(name, getattr(self, name))
        if self.episode_duration_s[0] < 60:
            raise ValueError("episode_duration_s must start at 60 s or more (one-minute IOH rule)")
        if self.baseline_map[0] < 70 or self.baseline_map[1] >= 300:
            raise ValueError("baseline_map must lie within [70, 300) mmHg")
        if self.age_range[0] < 0 or self.age_range[1] > 130:
            raise ValueError("age_range must lie within [0, 130]")
        if len(set(self.surgery_types)) != len(self.surgery_types) or any(not s.strip() for s in self.surgery_types):
            raise ValueError("surgery_types must be unique non-empty strings")
        episodes = math.ceil(self.ioh_rate)
        if episodes:
            longest_precursor = max(self.gradual_precursor_s[1], self.rapid_precursor_s[1])
            needed = longest_precursor + self.episode_duration_s[1] + self.recovery_s[1] + 4 * self.sampling_interval_s
            if self.duration_s[0] / episodes < needed:
                raise ValueError(
                    f"duration_s minimum {self.duration_s[0]} s cannot hold {episodes} planted episode(s); "
                    f"each needs {needed:.0f} s"
                )
        return self


class QualityConfig(_Section):
    min_duration_s: float = Field(default=1000.0, ge=0)
    max_missing_frac: float = Field(default=0.20, ge=0, le=1)


class ExternalSourceConfig(_Section):
    endpoint: str = "https://api.vitaldb.net"
    track_name: str = "Solar8000/ART_MBP"
    cache_dir: str | None = None
    timeout_s: float = Field(default=30.0, gt=0)


class SplitConfig(_Section):
    ratios: tuple[int, int, int] = (3, 1, 1)
    group_exclusive: bool = False
    min_group_size: int = Field(default=5, ge=1)

    @field_validator("ratios")
    @classmethod
    def _positive_ratios(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(r < 0 for r in value) or sum(value) == 0:
            raise ValueError("ratios must be non-negative with a positive sum")
        return value


class DatasetConfig(_Section):
    source: Literal["synth", "external", "local"] = "synth"
    synth: SynthConfig = Field(default_factory=SynthConfig)
    quality: QualityConfig = Field(default_factory=QualityConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    external: ExternalSourceConfig = Field(default_factory=ExternalSourceConfig)
    # ingest inputs: static attributes (JSONL) and, for source=local, one raw CSV per patient
    static_path: str | None = None
    raw_dir: str | None = None


class WindowPolicy(_Section):
    history_len: int = Field(default=90, gt=0)
    horizon: int = Field(default=30, gt=0)
    stride_normal: int = Field(default=20, gt=0)
    stride_ioh: int = Field(default=1, gt=0)
    warning_window_s: float = Field(default=120.0, gt=0)
    event_window_s: float = Field(default=60.0, gt=0)
    sampling_interval_s: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def _windows_fit_horizon(self) -> "WindowPolicy":
        horizon_s = self.horizon * self.sampling_interval_s
        if self.warning_window_s + self.event_window_s > horizon_s + 1e-9:
            raise ValueError(
                f"warning_window_s + event_window_s ({self.warning_window_s + self.event_window_s} s) "
                f"exceeds the horizon ({horizon_s} s)"
            )
        return self

    @property
    def warning_samples(self) -> int:
        return math.ceil(self.warning_window_s / self.sampling_interval_s - 1e-9)

    @property
    def event_samples(self) -> int:
        return math.ceil(self.event_window_s / self.sampling_interval_s - 1e-9)


class DescriptionClientConfig(_Section):
    enabled: bool = False
    endpoint: str = ""
    api_key: str | None = Field(alias="#api_key", default=None)
    model: str = "gpt-4o"
    timeout_s: float = Field(default=30.0, gt=0)
    fallback: bool = True
    max_workers: int = Field(default=4, ge=1)


class PcdgConfig(_Section):
    rules_path: str | None = None
    max_tokens: int = Field(default=64, ge=1)
    extend_vocabulary: bool = True
    external_client: DescriptionClientConfig = Field(default_factory=DescriptionClientConfig)


class MtrdaConfig(_Section):
    augment: bool = True
    scales: list[int] = Field(default_factory=lambda: [5, 25, 75], min_length=1)
    steps: int = Field(default=50, ge=1)
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=0.5, gt=0, lt=1)
    schedule: Literal["cosine", "linear"] = "cosine"
    augment_count: int = Field(default=5, ge=0)
    width: int = Field(default=128, ge=1)
    blocks: int = Field(default=3, ge=1)
    epochs: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    positives_only: bool = True
    single_shot: bool = False
    standardize: bool = False
    condition_on_trend: bool = False

    @field_validator("scales")
    @classmethod
    def _odd_increasing(cls, value: list[int]) -> list[int]:
        if any(w < 1 or w % 2 == 0 for w in value):
            raise ValueError(f"scales must be odd and >= 1, got {value}")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"scales must be strictly increasing, got {value}")
        return value

    @model_validator(mode="after")
    def _beta_order(self) -> "MtrdaConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class ModelConfig(_Section):
    patch_len: int = Field(default=6, ge=1)
    d_model: int = Field(default=128, ge=1)
    n_layers: int = Field(default=2, ge=0)
    n_heads: int = Field(default=4, ge=1)
    max_text_tokens: int = Field(default=64, ge=1)
    mask_penalty: float = Field(default=1e4, gt=0)
    mask_ratio: float = Field(default=0.2, ge=0, lt=1)
    history_len: int | None = Field(default=None, gt=0)
    horizon: int | None = Field(default=None, gt=0)
    use_text: bool = True

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.history_len is not None and self.history_len % self.patch_len:
            raise ValueError(f"history_len {self.history_len} is not divisible by patch_len {self.patch_len}")
        return self

    @property
    def history_patches(self) -> int:
        return self.history_len // self.patch_len

    @property
    def window_patches(self) -> int:
        return math.ceil((self.history_len + self.horizon) / self.patch_len)

    @property
    def max_seq_len(self) -> int:
        return (self.max_text_tokens if self.use_text else 0) + self.window_patches


class StageSettings(_Section):
    learning_rate: float = Field(default=1e-4, gt=0)
    decay_factor: float = Field(default=0.75, gt=0, le=1)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=10, ge=1)
    patience: int = Field(default=10, ge=1)


class TrainConfig(_Section):
    """Flat settings for one training stage, as consumed by the trainer."""

    stage: Stage
    learning_rate: float = Field(default=1e-4, gt=0)
    decay_factor: float = Field(default=0.75, gt=0, le=1)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=10, ge=1)
    patience: int = Field(default=10, ge=1)
    rho: float = Field(default=10.0, ge=0)
    seed: int = 42
    ablation: Ablation = Ablation.FULL
    strict_ioh_mask: bool = False


class TrainSection(_Section):
    rho: float = Field(default=10.0, ge=0)
    ablation: Ablation = Ablation.FULL
    skip_pretrain: bool = False
    strict_ioh_mask: bool = Field(
        default=False,
        description=(
            "Mask every target sample below 65 mmHg instead of only those inside a detected episode. "
            "The mask is computed by `prepare` and stored with each instance, so it drives both the "
            "fine-tuning loss and the evaluation metrics; rerun `prepare` after changing it."
        ),
    )
    pretrain: StageSettings = Field(default_factory=lambda: StageSettings(batch_size=4, epochs=10))
    finetune: StageSettings = Field(default_factory=lambda: StageSettings(batch_size=8, epochs=15))


class EvalConfig(_Section):
    out_dir: str = "report"
    overlay_count: int = Field(default=6, ge=0)
    bench_repetitions: int = Field(default=100, ge=1)
    bench_warmup: int = Field(default=5, ge=0)


class PipelineConfig(_Section):
    preset: str | None = None
    seed: int = 42
    artifacts_dir: str | None = None
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    window: WindowPolicy = Field(default_factory=WindowPolicy)
    pcdg: PcdgConfig = Field(default_factory=PcdgConfig)
    mtrda: MtrdaConfig = Field(default_factory=MtrdaConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _cross_field(self) -> "PipelineConfig":
        violations = []
        window, model = self.window, self.model
        for name, expected in (("history_len", window.history_len), ("horizon", window.horizon)):
            current = getattr(model, name)
            if current is None:
                setattr(model, name, expected)
            elif current != expected:
                violations.append(f"model.{name} ({current}) differs from window.{name} ({expected})")
        if window.history_len % model.patch_len:
            violations.append(
                f"window.history_len ({window.history_len}) is not divisible by model.patch_len ({model.patch_len})"
            )
        if self.pcdg.max_tokens != model.max_text_tokens:
            violations.append(
                f"pcdg.max_tokens ({self.pcdg.max_tokens}) differs from model.max_text_tokens ({model.max_text_tokens})"
            )
        if max(self.mtrda.scales) > 2 * window.history_len - 1:
            violations.append(
                f"largest mtrda scale {max(self.mtrda.scales)} exceeds 2*history_len-1 ({2 * window.history_len - 1})"
            )
        if self.dataset.source == "synth" and self.dataset.synth.sampling_interval_s != window.sampling_interval_s:
            violations.append(
                f"dataset.synth.sampling_interval_s ({self.dataset.synth.sampling_interval_s}) differs from "
                f"window.sampling_interval_s ({window.sampling_interval_s})"
            )
        if self.dataset.source != "synth" and not self.dataset.static_path:
            violations.append(f"dataset.static_path is required for source '{self.dataset.source}'")
        if self.dataset.source == "local" and not self.dataset.raw_dir:
            violations.append("dataset.raw_dir is required for source 'local'")
        if self.pcdg.external_client.enabled and not self.pcdg.external_client.endpoint:
            violations.append("pcdg.external_client.endpoint is required when the client is enabled")
        if violations:
            raise ValueError("; ".join(violations))
        return self

    def stage_config(self, stage: Stage) -> TrainConfig:
        settings = self.train.pretrain if stage == Stage.PRETRAIN else self.train.finetune
        return TrainConfig(
            stage=stage,
            rho=self.train.rho,
            seed=self.seed,
            ablation=self.train.ablation,
            strict_ioh_mask=self.train.strict_ioh_mask,
            **settings.model_dump(),
        )

    def fingerprint_payload(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True, exclude={"artifacts_dir"})


def deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_preset(name: str) -> dict[str, Any]:
    path = PRESETS_DIR / f"{name}.json"
    if not path.exists():
        available = sorted(p.stem for p in PRESETS_DIR.glob("*.json"))
        raise ConfigValidationError([f"preset '{name}' not found; available: {', '.join(available)}"])
    with path.open(encoding="utf-8") as fh:
        return json.load(fh)


def parse_override(assignment: str) -> dict[str, Any]:
    """Turn ``a.b.c=value`` into ``{"a": {"b": {"c": value}}}``; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigValidationError([f"override '{assignment}' is not of the form key.path=value"])
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    for key in reversed(path.strip().split(".")):
        value = {key: value}
    return value


def _format_error(error: dict[str, Any]) -> str:
    location = ".".join(str(part) for part in error.get("loc", ())) or "config"
    message = error.get("msg", "invalid value")
    if message.startswith("Value error, "):
        message = message[len("Value error, ") :]
    return f"{location}: {message}"


def load_pipeline_config(parameters: dict[str, Any], overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Merge preset < parameters < overrides and validate, collecting every violation."""
    merged = deep_merge(parameters or {}, overrides or {})
    preset = merged.get("preset")
    if preset:
        merged = deep_merge(load_preset(preset), merged)
    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as exc:
        violations = []
        for error in exc.errors():
            formatted = _format_error(error)
            # cross-field violations arrive joined in one message
            if not error.get("loc") and "; " in formatted:
                violations.extend(f"config: {part}" for part in formatted.removeprefix("config: ").split("; "))
            else:
                violations.append(formatted)
        raise ConfigValidationError(violations) from exc

# app/core/config.py
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError
from app.models.schemas import (
    MetricPolarity,
    OptimizerKind,
    SamplingMode,
    TemplateName,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


class Settings(BaseSettings):
    """Process-wide defaults, overridable through VRD_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="VRD_", env_file=".env", extra="ignore")

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False

    # Reproducibility
    DEFAULT_SEED: int = 7

    # Model widths
    HIDDEN_DIM: int = 64  # H
    TEXT_DIM: int = 32  # D_t
    MASK_DIM: int = 64  # D_k
    VRK_INPUT_DIM: int = 32
    VRK_HIDDEN_DIM: int = 64

    # Bundled resources
    DATA_DIR: Path = DATA_DIR
    LEXICON_FILE: str = "lexicon.tsv"
    VOCABULARY_FILE: str = "vocabulary.json"

    @property
    def lexicon_path(self) -> Path:
        return self.DATA_DIR / self.LEXICON_FILE

    @property
    def vocabulary_path(self) -> Path:
        return self.DATA_DIR / self.VOCABULARY_FILE

    def benchmark_path(self, name: str) -> Path:
        return self.DATA_DIR / "benchmarks" / f"{name}.txt"


def get_settings() -> Settings:
    """Get settings based on environment."""
    return Settings()


# Global settings instance
settings = get_settings()


class ReconstructionConfig(BaseModel):
    """Masked relation reconstruction on knowledge graph edges."""

    epochs: int = Field(300, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    batch_size: int = Field(16, ge=1)
    seed: int = settings.DEFAULT_SEED
    sampling: SamplingMode = SamplingMode.COUNT_WEIGHTED
    input_dim: int = Field(settings.VRK_INPUT_DIM, ge=1)
    hidden_dim: int = Field(settings.VRK_HIDDEN_DIM, ge=1)
    mask_dim: int = Field(settings.MASK_DIM, ge=1)


class EpisodeConfig(BaseModel):
    """N-way K-shot support sampling."""

    benchmark: str = "50way"
    relations: Optional[List[str]] = None
    shots: int = Field(5, ge=1)
    negative_ratio: float = Field(1.0, ge=0)
    seed: int = settings.DEFAULT_SEED

    @model_validator(mode="after")
    def custom_needs_relations(self) -> "EpisodeConfig":
        if self.benchmark == "custom" and not self.relations:
            raise ValueError("custom benchmark requires a relation list")
        return self


class TrainConfig(BaseModel):
    epochs: int = Field(200, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    batch_size: int = Field(32, ge=1)
    seed: int = settings.DEFAULT_SEED
    hidden_dim: int = Field(settings.HIDDEN_DIM, ge=1)
    template: TemplateName = TemplateName.TRIPLET
    metric_polarity: MetricPolarity = MetricPolarity.SIMILARITY

    # Knowledge switches (ablations)
    use_textual: bool = True
    use_vrk: bool = True

    # Recorded choices for what the method leaves open
    train_context_encoder: bool = True
    freeze_vrk: bool = True

    # Initial gain of the cosine scores inside the fusion head
    fusion_metric_scale: float = Field(5.0, gt=0)


class SyntheticSpec(BaseModel):
    """Desk-scale compositional benchmark description."""

    num_classes: int = Field(12, ge=2)
    num_relations: int = Field(10, ge=1)
    num_groups: int = Field(4, ge=1)
    feature_dim: int = Field(16, ge=1)
    noise: float = Field(0.1, ge=0)
    rule_table: Optional[List[List[int]]] = None
    holdout_fraction: float = Field(0.3, ge=0, lt=1)
    seed: int = settings.DEFAULT_SEED

    train_images: int = Field(200, ge=1)
    test_images: int = Field(100, ge=1)
    objects_per_image: int = Field(4, ge=2)
    relations_per_image: int = Field(2, ge=1)

    # Caption knowledge corpus
    captions_per_pair: int = Field(3, ge=0)
    caption_coverage: float = Field(1.0, ge=0, le=1)
    caption_noise: float = Field(0.0, ge=0, le=1)
    # extra vocabulary classes that only ever appear in captions, with arbitrary relations
    distractor_classes: int = Field(0, ge=0)

    # Word vectors
    word_dim: int = Field(settings.TEXT_DIM, ge=1)
    word_noise: float = Field(0.3, ge=0)

    @model_validator(mode="after")
    def relations_fit_image(self) -> "SyntheticSpec":
        if self.num_groups > self.num_classes:
            raise ValueError("more class groups than classes")
        if 2 * self.relations_per_image > self.objects_per_image:
            raise ValueError("each labeled relation needs its own two objects")
        if self.objects_per_image > self.num_classes:
            raise ValueError("images hold distinct classes; objects_per_image exceeds num_classes")
        return self


M = TypeVar("M", bound=BaseModel)


def build_config(model: Type[M], **values: Any) -> M:
    """Validate a run configuration, mapping validation failures to ConfigurationError."""
    try:
        return model(**values)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model.__name__}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigurationError(f"invalid {model.__name__}: {problems}") from exc


def read_key_value_file(path: Path) -> Dict[str, str]:
    """Read a flat key=value file; blank lines and '#' comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{number}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(raw: str) -> Any:
    if raw.startswith("[") or raw.startswith("{"):
        # list-valued keys (relations, rule_table) are written as JSON
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"bad JSON value {raw!r}: {exc.msg}") from None
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def split_config_file(path: Path, *models: Type[BaseModel]) -> List[Dict[str, Any]]:
    """Values of a key=value file, one dict per model; a key may feed several models."""
    values = {key: _coerce(raw) for key, raw in read_key_value_file(path).items()}
    known = set().union(*(m.model_fields for m in models))
    unknown = sorted(set(values) - known)
    if unknown:
        names = "/".join(m.__name__ for m in models)
        raise ConfigurationError(f"{path}: unknown {names} keys: {', '.join(unknown)}")
    return [{k: v for k, v in values.items() if k in m.model_fields} for m in models]


def load_key_value_config(path: Path, model: Type[M], **overrides: Any) -> M:
    (values,) = split_config_file(path, model)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(model, **values)

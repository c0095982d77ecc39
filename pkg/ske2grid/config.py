"""Process settings (environment / .env) and run configuration documents (TOML)."""

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.logging import RichHandler

from .errors import ConfigError
from .training import TrainConfig
from .transform import GIT_MODES, GREEDY_ORDERS, GridSize, TransformOptions

PACKAGE_DIR = Path(__file__).parent

# Rich console for user-facing output (tables, panels, progress bars)
console = Console()


class Settings(BaseSettings):
    """Process-level knobs loaded from environment variables or a .env file.

    Configuration priority (highest to lowest):
    1. CLI flags (--out-dir, --threads, --dtype)
    2. Environment variables (SKE2GRID_OUT_DIR, etc.)
    3. .env file
    4. Defaults
    """

    log_level: str = Field(default="INFO", description="Logging level (DEBUG, INFO, WARNING, ERROR)")
    out_dir: str = Field(default="runs", description="Directory for checkpoints, metrics and reports")
    threads: int = Field(
        default=1, ge=1, le=64, description="Worker threads for evaluation and ablation arms (1-64)"
    )
    dtype: Literal["f32", "f64"] = Field(default="f32", description="Training dtype")
    templates_dir: str = Field(
        default="templates", description="Directory containing the Jinja2 layout templates"
    )

    model_config = SettingsConfigDict(
        env_prefix="SKE2GRID_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @property
    def templates_path(self) -> Path:
        path = Path(self.templates_dir)
        return path if path.is_absolute() else PACKAGE_DIR / path


def setup_logging(level: str = "INFO") -> None:
    """Route every ``ske2grid.*`` logger through a Rich handler."""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, markup=True)],
        force=True,
    )


# --- run configuration -----------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    path: Optional[Path] = Field(default=None, description="Existing dataset file (skips generation)")
    graph: str = "chain17"
    n_classes: int = Field(default=5, ge=2)
    n_per_class: int = Field(default=100, ge=2)
    frames: int = Field(default=32, ge=8)
    preset: Literal["clean", "moderate", "hard"] = "moderate"
    noise: Optional[float] = Field(default=None, ge=0.0, description="Overrides the preset's σ")


class GraphSection(_Section):
    self_loops: bool = True
    normalize: bool = False


class GridSection(_Section):
    stages: List[str] = Field(default_factory=lambda: ["5x5"])
    stage_epochs: Optional[List[int]] = None
    lambda_init_high: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _parse_grids(self) -> "GridSection":
        if not self.stages:
            raise ValueError("at least one grid size is required")
        for text in self.stages:
            GridSize.parse(text)
        return self

    @property
    def grids(self) -> List[GridSize]:
        return [GridSize.parse(text) for text in self.stages]


class ModelSection(_Section):
    preset: Literal["default", "small"] = "small"
    kind: Literal["ske2grid", "gcn-baseline", "gcn-grid"] = "ske2grid"
    spatial_kernel: int = Field(default=3, ge=1)
    temporal_kernel: int = Field(default=9, ge=1)


class AblationSection(_Section):
    git_mode: Literal["bijective", "surjective", "unconstrained"] = "bijective"
    use_upt: bool = True
    use_adjacency: bool = True
    pls: bool = True
    greedy: Literal["global", "row"] = "global"
    learn_transforms: bool = True
    transforms_from: Optional[Path] = None
    arms: List[str] = Field(
        default_factory=lambda: ["gcn-baseline", "git-only", "git+upt", "git+upt+pls"]
    )
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    def transform_options(self, lambda_init_high: Optional[float] = None) -> TransformOptions:
        return TransformOptions(
            git_mode=self.git_mode,
            use_upt=self.use_upt,
            use_adjacency=self.use_adjacency,
            greedy=self.greedy,
            lambda_init_high=lambda_init_high,
        )


class RunConfig(_Section):
    """One run, declaratively. Top-level ``seed``/``dtype`` override the train section."""

    seed: int = 0
    dtype: Literal["f32", "f64"] = "f32"
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    graph: GraphSection = Field(default_factory=GraphSection)
    grid: GridSection = Field(default_factory=GridSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig.desk)
    ablation: AblationSection = Field(default_factory=AblationSection)

    @field_validator("train", mode="before")
    @classmethod
    def _desk_defaults(cls, value: Any) -> Any:
        # a partial [train] table fills the gaps from the desk settings
        if isinstance(value, Mapping):
            return {**TrainConfig.desk().model_dump(), **value}
        return value

    @model_validator(mode="after")
    def _sync_train(self) -> "RunConfig":
        if self.train.seed != self.seed or self.train.dtype != self.dtype:
            self.train = self.train.model_copy(update={"seed": self.seed, "dtype": self.dtype})
        return self

    def config_hash(self) -> str:
        """First 16 hex digits of SHA-256 over the canonical JSON of the resolved config."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def transform_options(self) -> TransformOptions:
        return self.ablation.transform_options(self.grid.lambda_init_high)

    def write_resolved(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.json"
        document = {"config_hash": self.config_hash(), "config": self.model_dump(mode="json")}
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
        return path


def _set_dotted(document: Dict[str, Any], dotted: str, value: Any) -> None:
    node = document
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override inside a non-table value", dotted)
    node[leaf] = value


def format_validation_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "config"
    return ConfigError(first["msg"], key)


def _merge(base: Dict[str, Any], top: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in top.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    defaults: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Parse a TOML document (or defaults), apply dotted-key overrides, validate.

    Precedence: ``overrides`` (CLI flags) > the document > ``defaults`` (environment).
    """
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "--config")
        try:
            document = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path} is not valid TOML: {exc}", "--config") from exc
    base: Dict[str, Any] = {}
    for dotted, value in (defaults or {}).items():
        if value is not None:
            _set_dotted(base, dotted, value)
    document = _merge(base, document)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(document, dotted, value)
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise format_validation_error(exc) from exc


__all__ = [
    "GIT_MODES",
    "GREEDY_ORDERS",
    "RunConfig",
    "Settings",
    "console",
    "load_run_config",
    "setup_logging",
]

"""Configuration module for the MTLAM toy pipeline."""
import hashlib
import json
import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Dict, List, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from losses import LossWeights
from temporal import TemporalStackConfig, require_alignment
from toytask import ToyTaskConfig

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

KEY_DELIMITER = '__'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
CONSOLE_FORMAT = '%(levelname)s - %(message)s'


class ConfigError(ValueError):
    """Raised when an experiment configuration cannot be loaded or is invalid."""
    pass


class Settings(BaseSettings):
    """Runtime settings read from MTLAM_* environment variables."""
    model_config = SettingsConfigDict(env_prefix='MTLAM_', env_file='.env', extra='ignore')

    threads: int = Field(default=1, ge=1, description="Parallel ablation runs")
    log_level: str = Field(default="INFO")
    log_file: str = Field(default="logs/mtlam.log", description="Empty string disables the file handler")
    default_config: str = Field(default="configs/default.env")


def _split_ints(v):
    if isinstance(v, str):
        return [int(part) for part in v.split(',') if part.strip()]
    if v is None:
        return []
    return v


class DataConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    n_samples: int = Field(default=2400, ge=3)
    split_seed: int = 0
    val_fraction: float = Field(default=0.15, gt=0, lt=1)
    test_fraction: float = Field(default=0.15, gt=0, lt=1)


class MemoryConfig(BaseModel):
    """Shared (h, N, alpha) for every enabled memory bank."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    heads: int = Field(default=4, ge=1)
    slots: int = Field(default=32, ge=2)
    alpha: float = Field(default=8.0, gt=0)


class OptimizerConfig(BaseModel):
    """Momentum or Adam descent with cosine annealing; schedule_steps 0 means the whole run.

    For Adam, ``momentum`` is the first-moment decay and ``beta2`` the second.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['momentum', 'adam'] = 'adam'
    lr_max: float = Field(default=3e-3, ge=0)
    lr_min: float = Field(default=1e-5, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    schedule_steps: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def min_below_max(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) exceeds lr_max ({self.lr_max})")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    input_dim: int = Field(default=32, ge=1)
    dim: int = Field(default=64, ge=1)
    num_classes: int = Field(default=20, ge=2)
    visual: TemporalStackConfig = Field(default_factory=TemporalStackConfig.default)
    audio: TemporalStackConfig = Field(default_factory=TemporalStackConfig.default)
    levels: List[int] = Field(default_factory=lambda: [1, 2, 3])
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0

    @field_validator('levels', mode='before')
    @classmethod
    def parse_levels(cls, v):
        return sorted(set(_split_ints(v)))

    @model_validator(mode='after')
    def check_shapes(self):
        for name, stack in (('visual', self.visual), ('audio', self.audio)):
            if stack.width != self.dim:
                raise ValueError(f"{name} stack width {stack.width} does not match dim {self.dim}")
        top = self.visual.n_layers
        bad = [level for level in self.levels if not 1 <= level < top]
        if bad:
            raise ValueError(f"levels {bad} outside 1..{top - 1}; the last layer carries no memory")
        return self

    def with_levels(self, levels) -> 'ModelConfig':
        data = self.model_dump()
        data['levels'] = list(levels)
        return ModelConfig.model_validate(data)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    task: ToyTaskConfig = Field(default_factory=ToyTaskConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    output_dir: str = "outputs"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    @field_validator('seeds', mode='before')
    @classmethod
    def parse_seeds(cls, v):
        return _split_ints(v)

    @model_validator(mode='after')
    def sections_agree(self):
        if self.model.input_dim != self.task.feature_dim:
            raise ValueError(f"model.input_dim {self.model.input_dim} != task.feature_dim {self.task.feature_dim}")
        if self.model.num_classes != self.task.vocab_size:
            raise ValueError(f"model.num_classes {self.model.num_classes} != task.vocab_size {self.task.vocab_size}")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        return self

    def with_levels(self, levels) -> 'ExperimentConfig':
        data = self.model_dump()
        data['model']['levels'] = list(levels)
        return ExperimentConfig.model_validate(data)


def nest_keys(flat: Dict[str, Optional[str]]) -> Dict:
    """{'MODEL__MEMORY__HEADS': '4'} -> {'model': {'memory': {'heads': '4'}}}."""
    tree: Dict = {}
    for key, value in flat.items():
        parts = key.lower().split(KEY_DELIMITER)
        node = tree
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Key {key} nests under a scalar value")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Key {key} collides with a section of the same name")
        node[parts[-1]] = '' if value is None else value
    return tree


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = KEY_DELIMITER.join(str(part) for part in item['loc']).upper() or '<root>'
        lines.append(f"{location}: {item['msg']}")
    return '; '.join(lines)


def parse_experiment_config(tree: Dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e
    require_alignment(cfg.model.visual, cfg.model.audio)
    return cfg


def load_experiment_config(path: str, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Read a dotenv-style key-value file into an ExperimentConfig."""
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    flat = dict(dotenv_values(path))
    flat.update(overrides or {})
    cfg = parse_experiment_config(nest_keys(flat))
    logger.info(f"Loaded config {path} (model hash {config_hash(cfg.model).hex()[:12]})")
    return cfg


def config_hash(model_cfg: ModelConfig) -> bytes:
    """SHA-256 of the canonical JSON dump; 32 raw bytes."""
    canonical = json.dumps(model_cfg.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).digest()


def setup_logging(settings: Optional[Settings] = None, verbose: bool = False):
    """Configure logging with file and console handlers; safe to call repeatedly."""
    root = logging.getLogger()
    log_level = 'DEBUG' if verbose else (settings.log_level if settings else 'INFO').upper()
    root.setLevel(getattr(logging, log_level, logging.INFO))

    for handler in [h for h in root.handlers if getattr(h, '_mtlam', False)]:
        root.removeHandler(handler)
        handler.close()

    handlers = []
    log_file = settings.log_file if settings else ''
    if log_file:
        directory = os.path.dirname(log_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        fh = RotatingFileHandler(log_file, maxBytes=10485760, backupCount=5)
        fh.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(fh)
    ch = logging.StreamHandler()
    ch.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    handlers.append(ch)

    for handler in handlers:
        handler._mtlam = True
        root.addHandler(handler)


"""Run configuration.

A configuration file is a flat list of ``section.key = value`` lines; ``#`` starts a comment. Values are read as
JSON when they parse (numbers, booleans, lists, quoted strings) and as bare strings otherwise::

    model.architecture = coattention
    model.mlp_dims = [128, 64, 2]
    optim.lr_main = 1e-4
    data.data_dir = data/synthetic
"""
import json
import os
import re
from logging import getLogger
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ValidationError, root_validator, validator

from pcefusion.crystal_graph import (
    DEFAULT_CUTOFF,
    DEFAULT_D_MAX,
    DEFAULT_D_MIN,
    DEFAULT_MAX_NEIGHBORS,
    DEFAULT_NUM_CENTERS,
    DEFAULT_WIDTH,
)
from pcefusion.errors import ConfigError
from pcefusion.model import ModelConfig
from pcefusion.synthetic import SyntheticSpec

logger = getLogger(__name__)

CANONICAL_SEEDS = (17, 42, 271)

DEVICES_FILE = "devices.jsonl"
STRUCTURES_FILE = "structures.jsonl"
GROUND_TRUTH_FILE = "ground_truth.csv"
SPLIT_FILE = "split.json"
VOCAB_FILE = "vocab.txt"
CHECKPOINT_FILE = "checkpoint.npz"
TRAINING_LOG_FILE = "training_log.json"
METRICS_FILE = "metrics.json"
PREDICTIONS_FILE = "predictions.csv"
CALIBRATION_FILE = "calibration.csv"
COMPARISON_FILE = "comparison.json"

_comment_pat = re.compile(r"(^|\s)#.*$")


class OptimConfig(BaseModel):
    lr_main: float = 1e-4
    lr_text_multiplier: float = 1.0
    weight_decay: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    class Config:
        extra = "forbid"

    @validator("lr_main", "lr_text_multiplier", "eps")
    def check_positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v


class ScheduleConfig(BaseModel):
    warmup_epochs: int = 10
    total_epochs: int = 200
    patience: int = 30

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def check_epochs(cls, values):
        if not 0 <= values["warmup_epochs"] < values["total_epochs"]:
            raise ValueError("warmup_epochs must be nonnegative and smaller than total_epochs")
        if values["patience"] < 1:
            raise ValueError("patience must be at least 1")
        return values


class DataConfig(BaseModel):
    """Where data lives, how it is split and batched, and how crystal graphs are built."""

    data_dir: str = "data"
    batch_size: int = 16
    split_policy: Literal["random_80_10_10", "group_by_materials"] = "random_80_10_10"
    split_seed: int = 42
    min_count: int = 1
    prefetch: int = 2
    cutoff: float = DEFAULT_CUTOFF
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS
    d_min: float = DEFAULT_D_MIN
    d_max: float = DEFAULT_D_MAX
    num_centers: int = DEFAULT_NUM_CENTERS
    width: float = DEFAULT_WIDTH

    class Config:
        extra = "forbid"

    @validator("batch_size", "min_count", "max_neighbors", "num_centers")
    def check_positive(cls, v):
        if v < 1:
            raise ValueError("must be positive")
        return v

    @property
    def graph_params(self) -> Dict[str, Any]:
        return dict(
            cutoff=self.cutoff,
            max_neighbors=self.max_neighbors,
            d_min=self.d_min,
            d_max=self.d_max,
            num_centers=self.num_centers,
            width=self.width,
        )

    def path(self, name: str) -> str:
        return os.path.join(self.data_dir, name)


class RunSettings(BaseModel):
    """Seeds, the output directory, and the architectures compared by the ``compare`` command."""

    seed: int = 42
    out_dir: str = "runs/default"
    seeds: List[int] = list(CANONICAL_SEEDS)
    compare: List[Literal["coattention", "concat_mlp", "text_mlp", "mse"]] = ["coattention", "concat_mlp", "text_mlp"]

    class Config:
        extra = "forbid"

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)


class RunConfig(BaseModel):
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    data: DataConfig = DataConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    run: RunSettings = RunSettings()

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def check_edge_width(cls, values):
        if values["model"].d_edge != values["data"].num_centers:
            raise ValueError("model.d_edge must equal data.num_centers")
        return values


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Dict[str, Any]]:
    """Parse ``section.key = value`` lines into nested dictionaries.

    Raises:
        ConfigError: On a line that is not a dotted assignment.
    """
    sections: Dict[str, Dict[str, Any]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = _comment_pat.sub("", line).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"{source}:{line_no}: expected 'section.key = value', got {line!r}")
        sections.setdefault(section, {})[name] = parse_value(value)
    return sections


def build_config(sections: Dict[str, Dict[str, Any]]) -> RunConfig:
    """Validate nested settings into a :class:`RunConfig`, naming the offending dotted key on failure."""
    try:
        return RunConfig(**sections)
    except ValidationError as e:
        messages = []
        for error in e.errors():
            loc = ".".join(str(x) for x in error["loc"] if x != "__root__")
            messages.append(f"{loc or 'config'}: {error['msg']}")
        raise ConfigError("invalid configuration: " + "; ".join(messages))
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}")


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a configuration file (or start from defaults) and apply dotted-key overrides.

    Args:
        path: A configuration file, or None for the defaults.
        overrides: A mapping such as ``{"run.seed": 17}``; None values are ignored.
    """
    sections: Dict[str, Dict[str, Any]] = {}
    if path:
        try:
            with open(path) as f:
                sections = parse_config_text(f.read(), path)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        sections.setdefault(section, {})[name] = value
    config = build_config(sections)
    logger.debug(f"Loaded configuration from {path or 'defaults'}.")
    return config


def dump_config(config: RunConfig) -> str:
    """Render ``config`` in the file format read by :func:`load_config`."""
    lines = []
    for section, values in config.dict().items():
        for key, value in values.items():
            lines.append(f"{section}.{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"

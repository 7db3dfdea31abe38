"""
Configuration for featling: defaults, secrets and the run config file.

Defaults: gpt-3.5 at temperature 0.5, 20 trials x 10 rules,
Adam lr 0.01 for up to 200 epochs.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

load_dotenv(dotenv_path='.secrets/featling.env')

logger = logging.getLogger(__name__)

API_KEY_ENV = 'FEATLING_API_KEY'
BASE_URL_ENV = 'FEATLING_BASE_URL'
DEFAULT_BASE_URL = 'https://api.openai.com/v1'
MODEL_NAME = 'gpt-3.5-turbo-0613'

# LLM sampling
TEMPERATURE = 0.5
TOP_P = 1.0
MAX_TOKENS = 2000
MAX_CONCURRENT_REQUESTS = 4

# Ensemble
NUM_TRIALS = 20
NUM_RULES = 10
PROMPT_BUDGET_TOKENS = 3000
MAX_BAGGED_EXAMPLES = 16
RETRY_PER_TRIAL = 1
WORKERS = 4

# Linear model training
LEARNING_RATE = 0.01
MAX_EPOCHS = 200

# Evaluation protocol
TEST_FRACTION = 0.2
SHOTS = 4
REPEATS = 3
WEIGHT_THRESHOLD = 0.1  # inspect weights

ABLATIONS = ('no_tuning', 'no_ensemble', 'no_description', 'no_reasoning')
MISSING_ALIASES = {
    'zero': 'fill_zero',
    'half': 'fill_half',
    'impute': 'impute',
    'fill_zero': 'fill_zero',
    'fill_half': 'fill_half',
}

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


def setup_logging(verbose: bool = False) -> None:
    """Configure the root logger once."""
    logging.basicConfig(
        format=LOG_FORMAT,
        level=logging.DEBUG if verbose else logging.INFO
    )


def get_api_key() -> Optional[str]:
    return os.getenv(API_KEY_ENV)


def get_base_url() -> str:
    return os.getenv(BASE_URL_ENV) or DEFAULT_BASE_URL


@dataclass
class DataSettings:
    data_path: Optional[str] = None
    metadata_path: Optional[str] = None
    synthetic: Optional[str] = None  # solution_mix | sequence_type
    n: int = 300
    seed: int = 0
    strict: bool = False


@dataclass
class LLMSettings:
    kind: str = 'http'  # http | replay | scripted
    model_name: str = MODEL_NAME
    base_url: Optional[str] = None
    temperature: float = TEMPERATURE
    top_p: float = TOP_P
    max_tokens: int = MAX_TOKENS
    max_concurrency: int = MAX_CONCURRENT_REQUESTS
    transcripts_dir: Optional[str] = None
    replay_mode: str = 'strict'  # strict | record
    record_with: str = 'http'  # inner client used in record mode
    script: Optional[str] = None  # scripted oracle name


@dataclass
class EnsembleSettings:
    trials: int = NUM_TRIALS
    rules: int = NUM_RULES
    prompt_budget_tokens: int = PROMPT_BUDGET_TOKENS
    max_bagged_examples: int = MAX_BAGGED_EXAMPLES
    retry_per_trial: int = RETRY_PER_TRIAL
    seed: int = 0
    workers: int = WORKERS
    shuffle_examples: bool = True
    bagging: bool = True


@dataclass
class TrainSettings:
    learning_rate: float = LEARNING_RATE
    epochs: int = MAX_EPOCHS
    folds: Optional[int] = None  # None: 2 or 4 chosen from the shot count


@dataclass
class EvalSettings:
    shots: int = SHOTS
    repeats: int = REPEATS
    ablations: List[str] = field(default_factory=list)
    missing: str = 'fill_zero'
    test_fraction: float = TEST_FRACTION
    record_timing: bool = True


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    llm: LLMSettings = field(default_factory=LLMSettings)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: str = 'output'
    dataset_name: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        if self.data.synthetic:
            return self.data.synthetic
        if self.data.data_path:
            return Path(self.data.data_path).stem
        return 'dataset'


def _build(cls, raw: Dict[str, Any], where: str):
    """Build a (nested) settings dataclass from a dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"'{where}' must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"Unknown config keys in '{where}': {', '.join(unknown)}")

    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def normalize_ablation(name: str) -> str:
    key = name.strip().lower().replace('-', '_')
    if key not in ABLATIONS:
        raise ConfigError(f"Unknown ablation '{name}' (expected one of: {', '.join(ABLATIONS)})")
    return key


def normalize_missing(name: str) -> str:
    key = name.strip().lower().replace('-', '_')
    if key not in MISSING_ALIASES:
        raise ConfigError(f"Unknown missing strategy '{name}' (expected zero, half or impute)")
    return MISSING_ALIASES[key]


def validate(config: RunConfig) -> RunConfig:
    """Check ranges and normalize enum-like strings in place."""
    config.eval.ablations = sorted({normalize_ablation(a) for a in config.eval.ablations})
    config.eval.missing = normalize_missing(config.eval.missing)

    if config.llm.kind not in ('http', 'replay', 'scripted'):
        raise ConfigError(f"Unknown llm kind '{config.llm.kind}'")
    if config.llm.replay_mode not in ('strict', 'record'):
        raise ConfigError(f"Unknown replay mode '{config.llm.replay_mode}'")
    if not 0.0 <= config.llm.temperature:
        raise ConfigError("llm.temperature must be >= 0")
    if not 0.0 < config.llm.top_p <= 1.0:
        raise ConfigError("llm.top_p must be in (0, 1]")
    if config.ensemble.trials < 1 or config.ensemble.rules < 1:
        raise ConfigError("ensemble.trials and ensemble.rules must be positive")
    if config.ensemble.workers < 1:
        raise ConfigError("ensemble.workers must be positive")
    if config.train.epochs < 1 or config.train.learning_rate <= 0:
        raise ConfigError("train.epochs and train.learning_rate must be positive")
    if config.train.folds is not None and config.train.folds not in (2, 4):
        raise ConfigError("train.folds must be 2 or 4")
    if not 0.0 < config.eval.test_fraction < 1.0:
        raise ConfigError("eval.test_fraction must be in (0, 1)")
    if config.eval.repeats < 1:
        raise ConfigError("eval.repeats must be positive")

    has_files = bool(config.data.data_path and config.data.metadata_path)
    if not has_files and not config.data.synthetic:
        raise ConfigError("Config needs data.data_path + data.metadata_path or data.synthetic")
    return config


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a RunConfig from a JSON file and apply flat CLI overrides.

    Args:
        path: JSON config path (None: defaults only)
        overrides: dict of flat overrides (shots, trials, seed, ablations, missing, llm, output, repeats,
            data, metadata, synthetic)

    Returns:
        Validated RunConfig
    """
    raw: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file '{path}' not found")
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error reading config file {path}: {e}")

    config = _build(RunConfig, raw, 'config')

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == 'shots':
            config.eval.shots = value
        elif key == 'trials':
            config.ensemble.trials = value
        elif key == 'seed':
            config.ensemble.seed = value
        elif key == 'ablations':
            if value:
                config.eval.ablations = list(config.eval.ablations) + list(value)
        elif key == 'missing':
            config.eval.missing = value
        elif key == 'llm':
            config.llm.kind = value
        elif key == 'output':
            config.output_dir = value
        elif key == 'repeats':
            config.eval.repeats = value
        elif key == 'data':
            config.data.data_path = value
        elif key == 'metadata':
            config.data.metadata_path = value
        elif key == 'synthetic':
            config.data.synthetic = value
        else:
            raise ConfigError(f"Unknown override '{key}'")

    return validate(config)

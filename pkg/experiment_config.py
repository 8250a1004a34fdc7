# experiment_config.py
"""
Configuration management for corpus generation, training and decoding.

A nested defaults dict is merged with an optional JSON file, then with
environment and command-line overrides. Typed views (`CorpusConfig`,
`ModelConfig`, `TrainConfig`, `DecodeConfig`) are derived from the resolved
dict; the resolved dict itself is echoed into every run manifest.
"""

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

from modules.errors import ConfigError

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "DJTD_SEED"

VARIANT_NAMES = ("las", "las-jatd", "deliberation", "delib-jatd-partial", "delib-jatd-full")

# ========================================
# DEFAULTS
# ========================================

DEFAULT_SETTINGS: Dict[str, Dict[str, Any]] = {
    "corpus": {
        "num_common": 16,
        "num_rare": 6,
        "feature_dim": 8,
        "min_length": 2,
        "max_length": 6,
        "unpaired_min_length": None,  # None = same as paired
        "unpaired_max_length": None,
        "train_size": 2222,           # 2000 paired + 222 unpaired
        "paired_fraction": 0.9,
        "test_size": 200,
        "dev_size": 50,
        "noise_sigma": 0.1,
        "speaker_sigma": 0.05,
        "tts_offset_norm": 0.5,
        "heldout_offset_norm": 0.5,
        "rare_density": 0.5,
        "rare_min_count": 20,
        "paired_rare_once_fraction": 0.5,
        "grammar_seed": 7,
        "grammar_concentration": 0.3,
    },
    "model": {
        "variant": "delib-jatd-full",
        "encoder_layers": 2,
        "encoder_hidden": 32,
        "encoder_proj": 16,
        "time_reduction_after": 1,
        "time_reduction_factor": 2,
        "pred_embed_dim": 8,
        "pred_layers": 1,
        "pred_hidden": 32,
        "pred_proj": 16,
        "joint_dim": 16,
        "hyp_embed_dim": 8,
        "hyp_hidden": 16,
        "hyp_proj": 8,
        "hyp_length": 12,
        "attention_dim": 16,
        "num_heads": 2,
        "dec_embed_dim": 8,
        "dec_hidden": 32,
        "dec_proj": 16,
        "max_label_length": 32,
        "init_scale": 0.1,
    },
    "training": {
        "pretrain_steps": 3000,
        "steps": 1500,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "clip_norm": 5.0,
        "lambda_train": 0.1,
        "freeze_first_pass": True,
        "training_data": "mixed",
        "checkpoint_every": 250,
        "first_beam": 2,
        "top_k": 1,
    },
    "decoding": {
        "first_beam": 2,
        "second_beam": 4,
        "top_k": 1,
        "lambda_inference": 0.025,
        "lambda_grid": [0.01, 0.025, 0.05],
        "max_symbols_per_frame": 3,
        "max_output_length": 12,
    },
    "runtime": {
        "seed": 1234,
        "threads": 1,
    },
}


def _merge_configs(default: dict, loaded: dict) -> dict:
    """Recursively merge configurations."""
    merged = copy.deepcopy(default)
    for key, value in loaded.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _merge_configs(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


# ========================================
# TYPED VIEWS
# ========================================

class _SectionView:
    SECTION = ""

    @classmethod
    def from_dict(cls, values: Dict[str, Any]):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown keys in '{cls.SECTION}' section: {unknown}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CorpusConfig(_SectionView):
    SECTION = "corpus"
    num_common: int = 16
    num_rare: int = 6
    feature_dim: int = 8
    min_length: int = 2
    max_length: int = 6
    unpaired_min_length: Optional[int] = None
    unpaired_max_length: Optional[int] = None
    train_size: int = 2222
    paired_fraction: float = 0.9
    test_size: int = 200
    dev_size: int = 50
    noise_sigma: float = 0.1
    speaker_sigma: float = 0.05
    tts_offset_norm: float = 0.5
    heldout_offset_norm: float = 0.5
    rare_density: float = 0.5
    rare_min_count: int = 20
    paired_rare_once_fraction: float = 0.5
    grammar_seed: int = 7
    grammar_concentration: float = 0.3


@dataclass(frozen=True)
class ModelConfig(_SectionView):
    SECTION = "model"
    variant: str = "delib-jatd-full"
    encoder_layers: int = 2
    encoder_hidden: int = 32
    encoder_proj: int = 16
    time_reduction_after: int = 1
    time_reduction_factor: int = 2
    pred_embed_dim: int = 8
    pred_layers: int = 1
    pred_hidden: int = 32
    pred_proj: int = 16
    joint_dim: int = 16
    hyp_embed_dim: int = 8
    hyp_hidden: int = 16
    hyp_proj: int = 8
    hyp_length: int = 12
    attention_dim: int = 16
    num_heads: int = 2
    dec_embed_dim: int = 8
    dec_hidden: int = 32
    dec_proj: int = 16
    max_label_length: int = 32
    init_scale: float = 0.1


@dataclass(frozen=True)
class TrainConfig(_SectionView):
    SECTION = "training"
    pretrain_steps: int = 3000
    steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 5.0
    lambda_train: float = 0.1
    freeze_first_pass: bool = True
    training_data: str = "mixed"
    checkpoint_every: int = 250
    first_beam: int = 2
    top_k: int = 1


@dataclass(frozen=True)
class DecodeConfig(_SectionView):
    SECTION = "decoding"
    first_beam: int = 2
    second_beam: int = 4
    top_k: int = 1
    lambda_inference: float = 0.025
    lambda_grid: Tuple[float, ...] = (0.01, 0.025, 0.05)
    max_symbols_per_frame: int = 3
    max_output_length: int = 12

    @classmethod
    def from_dict(cls, values: Dict[str, Any]):
        values = dict(values)
        if "lambda_grid" in values:
            values["lambda_grid"] = tuple(float(v) for v in values["lambda_grid"])
        return super().from_dict(values)

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["lambda_grid"] = list(self.lambda_grid)
        return values


# ========================================
# CONFIGURATION MANAGER
# ========================================

class ExperimentConfig:
    """Resolved experiment configuration with dot-notation access."""

    DEFAULT_SETTINGS = DEFAULT_SETTINGS

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config_file = config_file
        self.settings = self.load_config()
        if os.environ.get(SEED_ENV_VAR):
            try:
                self.set("runtime.seed", int(os.environ[SEED_ENV_VAR]))
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {os.environ[SEED_ENV_VAR]!r}") from None
        for key_path, value in (overrides or {}).items():
            if value is not None:
                self.set(key_path, value)

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from file, merged over the defaults."""
        if self.config_file is None:
            return copy.deepcopy(self.DEFAULT_SETTINGS)
        if not os.path.exists(self.config_file):
            raise ConfigError(f"config file not found: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {self.config_file}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {self.config_file} must hold a JSON object")
        unknown = sorted(set(loaded) - set(self.DEFAULT_SETTINGS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        return _merge_configs(self.DEFAULT_SETTINGS, loaded)

    def save_config(self, path: str) -> bool:
        """Write the fully resolved configuration."""
        try:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.settings, f, indent=2, sort_keys=True)
            return True
        except OSError as e:
            logger.error(f"Error saving config: {e}")
            return False

    def get(self, key_path: str, default=None):
        """Get configuration value using dot notation."""
        value = self.settings
        for key in key_path.split("."):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value):
        """Set configuration value using dot notation."""
        keys = key_path.split(".")
        section = self.settings
        for key in keys[:-1]:
            section = section.setdefault(key, {})
        section[keys[-1]] = value

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.settings)

    def derive(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with dot-path overrides applied."""
        derived = copy.copy(self)
        derived.settings = self.to_dict()
        for key_path, value in overrides.items():
            derived.set(key_path, value)
        return derived

    # ---------- typed views ----------

    @property
    def corpus(self) -> CorpusConfig:
        return CorpusConfig.from_dict(self.settings["corpus"])

    @property
    def model(self) -> ModelConfig:
        return ModelConfig.from_dict(self.settings["model"])

    @property
    def training(self) -> TrainConfig:
        return TrainConfig.from_dict(self.settings["training"])

    @property
    def decoding(self) -> DecodeConfig:
        return DecodeConfig.from_dict(self.settings["decoding"])

    @property
    def seed(self) -> int:
        return int(self.settings["runtime"]["seed"])

    @property
    def threads(self) -> int:
        return max(1, int(self.settings["runtime"]["threads"]))

    def validate(self) -> List[str]:
        from utils.data_validators import ConfigValidator
        _, errors = ConfigValidator.validate_experiment(self)
        return errors

"""
Data validation utilities
"""

from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from experiment_config import ExperimentConfig


class ConfigValidator:
    """Validates a resolved experiment configuration."""

    POSITIVE_MODEL_KEYS = (
        "encoder_layers", "encoder_hidden", "encoder_proj", "time_reduction_factor", "pred_embed_dim",
        "pred_layers", "pred_hidden", "pred_proj", "joint_dim", "hyp_embed_dim", "hyp_hidden", "hyp_proj",
        "hyp_length", "attention_dim", "num_heads", "dec_embed_dim", "dec_hidden", "dec_proj",
        "max_label_length",
    )

    @staticmethod
    def _in_unit_interval(value) -> bool:
        return isinstance(value, (int, float)) and 0.0 <= value <= 1.0

    @classmethod
    def validate_model(cls, model: Dict) -> Tuple[bool, List[str]]:
        from modules.deliberation import ModelVariant
        errors = []
        for key in cls.POSITIVE_MODEL_KEYS:
            value = model.get(key)
            if not isinstance(value, int) or value <= 0:
                errors.append(f"model.{key} must be a positive integer, got {value!r}")
        if model.get("variant") not in [v.value for v in ModelVariant]:
            errors.append(f"model.variant {model.get('variant')!r} is not a known variant")
        heads, dim = model.get("num_heads"), model.get("attention_dim")
        if isinstance(heads, int) and isinstance(dim, int) and heads > 0 and dim % heads:
            errors.append(f"model.num_heads={heads} must divide model.attention_dim={dim}")
        after = model.get("time_reduction_after")
        if not isinstance(after, int) or after < 0:
            errors.append(f"model.time_reduction_after must be >= 0, got {after!r}")
        return len(errors) == 0, errors

    @classmethod
    def validate_corpus(cls, corpus: Dict) -> Tuple[bool, List[str]]:
        errors = []
        if not isinstance(corpus.get("num_common"), int) or corpus["num_common"] < 1:
            errors.append("corpus.num_common must be at least 1")
        if not isinstance(corpus.get("num_rare"), int) or corpus["num_rare"] < 0:
            errors.append("corpus.num_rare must be >= 0")
        if not isinstance(corpus.get("feature_dim"), int) or corpus["feature_dim"] < 1:
            errors.append("corpus.feature_dim must be positive")
        low, high = corpus.get("min_length"), corpus.get("max_length")
        if not (isinstance(low, int) and isinstance(high, int) and 1 <= low <= high):
            errors.append(f"corpus lengths must satisfy 1 <= min_length <= max_length, got {low}, {high}")
        for key in ("paired_fraction", "rare_density", "paired_rare_once_fraction"):
            if not cls._in_unit_interval(corpus.get(key)):
                errors.append(f"corpus.{key} must lie in [0, 1]")
        for key in ("noise_sigma", "speaker_sigma", "tts_offset_norm", "heldout_offset_norm"):
            value = corpus.get(key)
            if not isinstance(value, (int, float)) or value < 0:
                errors.append(f"corpus.{key} must be >= 0")
        for key in ("train_size", "test_size", "dev_size"):
            value = corpus.get(key)
            if not isinstance(value, int) or value < 1:
                errors.append(f"corpus.{key} must be a positive integer")
        return len(errors) == 0, errors

    @classmethod
    def validate_training(cls, training: Dict) -> Tuple[bool, List[str]]:
        errors = []
        if not cls._in_unit_interval(training.get("lambda_train")):
            errors.append(f"training.lambda_train must lie in [0, 1], got {training.get('lambda_train')!r}")
        if training.get("training_data") not in ("paired", "mixed"):
            errors.append("training.training_data must be 'paired' or 'mixed'")
        for key in ("batch_size", "first_beam", "top_k"):
            value = training.get(key)
            if not isinstance(value, int) or value < 1:
                errors.append(f"training.{key} must be >= 1")
        for key in ("pretrain_steps", "steps", "checkpoint_every"):
            value = training.get(key)
            if not isinstance(value, int) or value < 0:
                errors.append(f"training.{key} must be >= 0")
        if not isinstance(training.get("learning_rate"), (int, float)) or training["learning_rate"] <= 0:
            errors.append("training.learning_rate must be positive")
        return len(errors) == 0, errors

    @classmethod
    def validate_decoding(cls, decoding: Dict) -> Tuple[bool, List[str]]:
        errors = []
        for key in ("first_beam", "second_beam", "top_k", "max_output_length"):
            value = decoding.get(key)
            if not isinstance(value, int) or value < 1:
                errors.append(f"decoding.{key} must be >= 1")
        if not isinstance(decoding.get("max_symbols_per_frame"), int) or decoding["max_symbols_per_frame"] < 0:
            errors.append("decoding.max_symbols_per_frame must be >= 0")
        if not cls._in_unit_interval(decoding.get("lambda_inference")):
            errors.append("decoding.lambda_inference must lie in [0, 1]")
        grid = decoding.get("lambda_grid") or []
        if not grid:
            errors.append("decoding.lambda_grid must not be empty")
        errors.extend(f"decoding.lambda_grid value {v!r} outside [0, 1]"
                      for v in grid if not cls._in_unit_interval(v))
        return len(errors) == 0, errors

    @classmethod
    def validate_experiment(cls, config: "ExperimentConfig") -> Tuple[bool, List[str]]:
        """Validate every section of a resolved configuration."""
        errors = []
        for section, check in (("corpus", cls.validate_corpus), ("model", cls.validate_model),
                               ("training", cls.validate_training), ("decoding", cls.validate_decoding)):
            _, section_errors = check(config.get(section, {}))
            errors.extend(section_errors)
        threads = config.get("runtime.threads")
        if not isinstance(threads, int) or threads < 1:
            errors.append("runtime.threads must be >= 1")
        return len(errors) == 0, errors


class ExampleValidator:
    """Validates corpus examples before training or decoding."""

    @staticmethod
    def validate_example(example, vocab_size: int, feature_dim: int, blank_id: int = 0) -> Tuple[bool, List[str]]:
        errors = []
        if not example.transcript:
            errors.append("empty transcript")
        if any(not 0 <= t < vocab_size for t in example.transcript):
            errors.append("transcript token outside vocabulary")
        if blank_id in example.transcript:
            errors.append("transcript contains the blank id")
        features = example.features
        if features is None:
            errors.append("missing features")
        elif features.ndim != 2 or features.shape[1] != feature_dim or features.shape[0] < 1:
            errors.append(f"features have shape {features.shape}, expected (T>=1, {feature_dim})")
        elif not np.all(np.isfinite(features)):
            errors.append("features contain non-finite values")
        return len(errors) == 0, errors

    @staticmethod
    def validate_split(examples: Sequence, vocab_size: int, feature_dim: int) -> Tuple[bool, List[str]]:
        errors = []
        for example in examples:
            ok, example_errors = ExampleValidator.validate_example(example, vocab_size, feature_dim)
            if not ok:
                errors.extend(f"{example.utt_id}: {e}" for e in example_errors)
        return len(errors) == 0, errors

"""
Two-stage training driver.

Stage 1 pretrains the first-pass RNN-T on paired audio (or on the mixed pool
for the mixed RNN-T baseline). Stage 2 trains the second pass of the
selected variant with gated updates per example kind. Batches are drawn from
a generator seeded by (global seed, stage, step), so a run resumed from a
checkpoint replays exactly the batches the uninterrupted run would have seen.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from experiment_config import ExperimentConfig, ModelConfig, TrainConfig
from utils.auto_save_manager import CheckpointAutoSaver
from utils.data_exporters import DataExporter

from .autodiff import AdamOptimizer, ExampleKind, GradMask, add, apply_update, backward, mul, Tensor
from .checkpoint import (FORMAT_VERSION, load_optimizer, load_param_groups, save_optimizer,
                         save_param_groups)
from .deliberation import DeliberationModel, HypCache, train_step
from .errors import CheckpointError, CorpusError
from .toy_corpus import Corpus, Example

logger = logging.getLogger(__name__)

STAGE_PRETRAIN = "pretrain"
STAGE_SECOND_PASS = "second_pass"
STAGE_DONE = "done"
_STAGE_CODES = {STAGE_PRETRAIN: 1, STAGE_SECOND_PASS: 2}
_STAGE_ORDER = {STAGE_PRETRAIN: 1, STAGE_SECOND_PASS: 2, STAGE_DONE: 3}

MODEL_FILE = "model.djtd"
MODEL_META_FILE = "model.json"
METRICS_FILE = "metrics.jsonl"
LOG_EVERY = 50


@dataclass
class TrainerState:
    stage: str = STAGE_PRETRAIN
    step: int = 0
    seed: int = 0
    variant: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainerState":
        return cls(values["stage"], int(values["step"]), int(values["seed"]), values["variant"])


# ========================================
# MODEL FILES
# ========================================

def model_metadata(model: DeliberationModel) -> Dict:
    return {
        "format_version": FORMAT_VERSION,
        "variant": model.variant.value,
        "vocab_size": model.vocab_size,
        "feature_dim": model.feature_dim,
        "seed": model.seed,
        "blank_id": model.blank_id,
        "eos_id": model.eos_id,
        "model": model.cfg.to_dict(),
    }


def save_model(model: DeliberationModel, ckpt_dir: str) -> str:
    os.makedirs(ckpt_dir, exist_ok=True)
    path = os.path.join(ckpt_dir, MODEL_FILE)
    save_param_groups(path, model.param_groups())
    with open(os.path.join(ckpt_dir, MODEL_META_FILE), "w", encoding="utf-8") as f:
        json.dump(model_metadata(model), f, indent=2, sort_keys=True)
    return path


def load_model(ckpt_dir: str, variant: Optional[str] = None) -> DeliberationModel:
    """Rebuild a model from its sidecar and load its weights.

    With `variant`, a different second pass is built on top of the stored
    first pass; only the groups both models share are loaded.
    """
    meta_path = os.path.join(ckpt_dir, MODEL_META_FILE)
    if not os.path.exists(meta_path):
        raise CheckpointError(f"no {MODEL_META_FILE} in {ckpt_dir}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {meta.get('format_version')} != {FORMAT_VERSION}")
    cfg = ModelConfig.from_dict(meta["model"])
    if variant is not None:
        cfg = replace(cfg, variant=variant)
    model = DeliberationModel(cfg, meta["vocab_size"], meta["feature_dim"], meta["seed"],
                              meta["blank_id"], meta["eos_id"])
    groups = model.param_groups() if variant is None else model.rnnt.param_groups()
    load_param_groups(os.path.join(ckpt_dir, MODEL_FILE), groups, strict=True)
    return model


def copy_first_pass(source: DeliberationModel, target: DeliberationModel):
    for src, dst in zip(source.rnnt.param_groups(), target.rnnt.param_groups()):
        for p_src, p_dst in zip(src.params, dst.params):
            p_dst.data = p_src.data.copy()


# ========================================
# TRAINER
# ========================================

class Trainer:
    """Runs both training stages for one variant with checkpointing and resume."""

    def __init__(self, config: ExperimentConfig, corpus: Corpus, out_dir: Optional[str] = None,
                 variant: Optional[str] = None, training_data: Optional[str] = None,
                 model: Optional[DeliberationModel] = None):
        self.config = config
        self.corpus = corpus
        self.out_dir = out_dir
        self.seed = config.seed
        self.training: TrainConfig = config.training
        if training_data is not None:
            self.training = replace(self.training, training_data=training_data)
        model_cfg = config.model if variant is None else replace(config.model, variant=variant)
        self.model = model or DeliberationModel(model_cfg, corpus.vocab.size, corpus.cfg.feature_dim,
                                                self.seed, corpus.vocab.blank_id, corpus.vocab.eos_id)
        self.state = TrainerState(seed=self.seed, variant=self.model.variant.value)
        self.optimizer = self._new_optimizer()
        self.hyp_cache: HypCache = {}
        self.max_symbols = config.decoding.max_symbols_per_frame
        self.saver = CheckpointAutoSaver(out_dir, self.training.checkpoint_every) if out_dir else None
        self.metrics_path = os.path.join(out_dir, METRICS_FILE) if out_dir else None

    def _new_optimizer(self) -> AdamOptimizer:
        t = self.training
        return AdamOptimizer(t.learning_rate, t.beta1, t.beta2, t.eps, t.clip_norm)

    # ---------- data ----------

    def training_pool(self, data: Optional[str] = None) -> List[Example]:
        data = data or self.training.training_data
        pool = list(self.corpus.splits.get("paired", []))
        if data == "mixed":
            unpaired = self.corpus.splits.get("unpaired", [])
            if not unpaired:
                raise CorpusError("mixed training needs an unpaired split in the corpus")
            pool += unpaired
        elif data != "paired":
            raise CorpusError(f"unknown training data selection {data!r}")
        if not pool:
            raise CorpusError("training pool is empty")
        return pool

    def sample_batch(self, pool: List[Example], stage: str, step: int) -> List[Example]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _STAGE_CODES[stage], step]))
        size = min(self.training.batch_size, len(pool))
        return [pool[i] for i in rng.choice(len(pool), size=size, replace=False)]

    # ---------- stage 1 ----------

    def pretrain_step(self, batch: List[Example]) -> Dict:
        rnnt = self.model.rnnt
        total = None
        for example in batch:
            loss = rnnt.loss(rnnt.encode(example.features), example.transcript)
            total = loss if total is None else add(total, loss)
        mean_loss = mul(total, Tensor(1.0 / len(batch)))
        grads = backward(mean_loss)
        update = apply_update(rnnt.param_groups(), grads, GradMask.for_kind(ExampleKind.PAIRED), self.optimizer)
        kinds = [e.kind for e in batch]
        return {"loss": mean_loss.item(), "num_paired": kinds.count(ExampleKind.PAIRED),
                "num_unpaired": kinds.count(ExampleKind.UNPAIRED), "grad_norm": update["grad_norm"]}

    def pretrain(self, data: str = "paired", steps: Optional[int] = None):
        steps = self.training.pretrain_steps if steps is None else steps
        pool = self.training_pool(data)
        logger.info(f"Pretraining first pass for {steps} steps on {len(pool)} {data} examples")
        while self.state.step < steps:
            metrics = self.pretrain_step(self.sample_batch(pool, STAGE_PRETRAIN, self.state.step))
            self._after_step(metrics)
        self._advance_stage(STAGE_SECOND_PASS)

    # ---------- stage 2 ----------

    def train_second_pass(self, steps: Optional[int] = None):
        t = self.training
        steps = t.steps if steps is None else steps
        pool = self.training_pool()
        cache = self.hyp_cache if t.freeze_first_pass else None
        logger.info(f"Training {self.model.variant.value} second pass for {steps} steps "
                    f"on {len(pool)} {t.training_data} examples")
        while self.state.step < steps:
            batch = self.sample_batch(pool, STAGE_SECOND_PASS, self.state.step)
            metrics = train_step(self.model, batch, self.optimizer, t.lambda_train, t.freeze_first_pass,
                                 cache, t.first_beam, t.top_k, self.max_symbols)
            self._after_step(metrics.to_dict())
        self._advance_stage(STAGE_DONE)

    # ---------- bookkeeping ----------

    def _after_step(self, metrics: Dict):
        self.state.step += 1
        record = dict(metrics, stage=self.state.stage, step=self.state.step)
        if self.metrics_path:
            DataExporter.append_jsonl(record, self.metrics_path)
        if self.state.step % LOG_EVERY == 0:
            logger.info(f"[{self.state.stage}] step {self.state.step} loss {metrics['loss']:.4f}")
        if self.saver and self.saver.due(self.state.step):
            self.checkpoint()

    def _advance_stage(self, stage: str):
        self.state.stage = stage
        self.state.step = 0
        self.optimizer = self._new_optimizer()
        if self.saver:
            self.checkpoint()

    def checkpoint(self) -> bool:
        groups = self.model.param_groups()
        ok = self.saver.save(lambda path: save_param_groups(path, groups),
                             lambda path: save_optimizer(path, self.optimizer, groups),
                             self.state.to_dict())
        with open(os.path.join(self.out_dir, MODEL_META_FILE), "w", encoding="utf-8") as f:
            json.dump(model_metadata(self.model), f, indent=2, sort_keys=True)
        return ok

    def resume(self) -> bool:
        """Restore weights, optimizer slots and position from the last checkpoint."""
        latest = self.saver.latest() if self.saver else None
        if latest is None:
            return False
        state = TrainerState.from_dict(latest)
        if state.variant != self.model.variant.value or state.seed != self.seed:
            raise CheckpointError(f"checkpoint in {self.out_dir} belongs to {state.variant}/seed {state.seed}")
        load_param_groups(self.saver.model_file, self.model.param_groups(), strict=True)
        load_optimizer(self.saver.optimizer_file, self.optimizer)
        self.state = state
        self._truncate_metrics(state)
        logger.info(f"Resumed at {state.stage} step {state.step}")
        return True

    def _truncate_metrics(self, state: TrainerState):
        """Drop metric lines written after the checkpoint being resumed; the replay rewrites them."""
        if not (self.metrics_path and os.path.exists(self.metrics_path)):
            return
        position = (_STAGE_ORDER[state.stage], state.step)
        records = DataExporter.read_jsonl(self.metrics_path)
        kept = [r for r in records if (_STAGE_ORDER[r["stage"]], r["step"]) <= position]
        if len(kept) != len(records):
            logger.info(f"Discarding {len(records) - len(kept)} metric lines past the checkpoint")
            DataExporter.export_jsonl(kept, self.metrics_path)

    def init_first_pass(self, ckpt_dir: str):
        """Load a trained first pass and skip stage 1."""
        source = load_model(ckpt_dir)
        copy_first_pass(source, self.model)
        self.state = TrainerState(STAGE_SECOND_PASS, 0, self.seed, self.model.variant.value)
        logger.info(f"First pass initialized from {ckpt_dir}")

    def run(self, init_from: Optional[str] = None, pretrain_data: str = "paired",
            second_pass: bool = True) -> DeliberationModel:
        if not self.resume() and init_from:
            self.init_first_pass(init_from)
        if self.state.stage == STAGE_PRETRAIN:
            self.pretrain(pretrain_data)
        if self.state.stage == STAGE_SECOND_PASS and second_pass:
            self.train_second_pass()
        if self.out_dir:
            save_model(self.model, self.out_dir)
        return self.model

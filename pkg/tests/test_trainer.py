"""Two-stage training, checkpoints and resume."""

import numpy as np
import pytest

import modules.trainer as trainer_module
from experiment_config import CorpusConfig, ExperimentConfig
from modules.errors import CheckpointError, CorpusError
from modules.toy_corpus import build_corpus
from modules.trainer import (METRICS_FILE, MODEL_FILE, MODEL_META_FILE, STAGE_DONE, STAGE_SECOND_PASS, Trainer,
                             load_model, save_model)
from modules.verify import tiny_model_config
from utils.auto_save_manager import OPTIMIZER_FILE
from utils.data_exporters import DataExporter

CORPUS = CorpusConfig(num_common=3, num_rare=2, feature_dim=3, min_length=1, max_length=3, train_size=20,
                      paired_fraction=0.5, test_size=4, dev_size=2, rare_min_count=3)


def tiny_config(variant="delib-jatd-full", **training):
    overrides = {f"model.{k}": v for k, v in tiny_model_config(variant).to_dict().items()}
    overrides.update({"training.pretrain_steps": 2, "training.steps": 3, "training.batch_size": 3,
                      "training.checkpoint_every": 1, "runtime.seed": 5})
    overrides.update({f"training.{k}": v for k, v in training.items()})
    return ExperimentConfig(None, overrides)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(CORPUS, seed=2)


def weights(model):
    return [p.data.copy() for g in model.param_groups() for p in g.params]


def test_batches_are_a_function_of_seed_stage_and_step(corpus):
    a, b = Trainer(tiny_config(), corpus), Trainer(tiny_config(), corpus)
    pool = a.training_pool()
    assert [e.utt_id for e in a.sample_batch(pool, STAGE_SECOND_PASS, 4)] == \
        [e.utt_id for e in b.sample_batch(pool, STAGE_SECOND_PASS, 4)]
    assert len(pool) == 20


def test_paired_pool_excludes_unpaired(corpus):
    pool = Trainer(tiny_config(training_data="paired"), corpus).training_pool()
    assert len(pool) == 10 and all(e.utt_id.startswith("paired") for e in pool)
    with pytest.raises(CorpusError):
        Trainer(tiny_config(), corpus).training_pool("everything")


def test_full_run_writes_model_and_metrics(tmp_path, corpus):
    trainer = Trainer(tiny_config(), corpus, str(tmp_path))
    model = trainer.run()
    assert trainer.state.stage == STAGE_DONE
    assert (tmp_path / MODEL_FILE).exists() and (tmp_path / MODEL_META_FILE).exists()
    lines = DataExporter.read_jsonl(str(tmp_path / METRICS_FILE))
    assert [(r["stage"], r["step"]) for r in lines] == [("pretrain", 1), ("pretrain", 2), ("second_pass", 1),
                                                       ("second_pass", 2), ("second_pass", 3)]
    assert all(r["lm_term"] is not None for r in lines if r["stage"] == "second_pass")
    loaded = load_model(str(tmp_path))
    assert loaded.variant is model.variant
    assert all(np.array_equal(a, b) for a, b in zip(weights(model), weights(loaded)))


def test_second_pass_leaves_first_pass_untouched(corpus):
    trainer = Trainer(tiny_config(), corpus)
    trainer.pretrain()
    first = [p.data.copy() for g in trainer.model.rnnt.param_groups() for p in g.params]
    trainer.train_second_pass()
    after = [p.data.copy() for g in trainer.model.rnnt.param_groups() for p in g.params]
    assert all(np.array_equal(a, b) for a, b in zip(first, after))
    assert trainer.hyp_cache


def test_resume_reproduces_uninterrupted_run(tmp_path, corpus, monkeypatch):
    reference = Trainer(tiny_config(), corpus, str(tmp_path / "straight")).run()

    calls = {"n": 0}
    real_step = trainer_module.train_step

    def interrupted(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise KeyboardInterrupt
        return real_step(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "train_step", interrupted)
    with pytest.raises(KeyboardInterrupt):
        Trainer(tiny_config(), corpus, str(tmp_path / "resumed")).run()
    monkeypatch.setattr(trainer_module, "train_step", real_step)

    resumed_trainer = Trainer(tiny_config(), corpus, str(tmp_path / "resumed"))
    assert resumed_trainer.resume()
    assert (resumed_trainer.state.stage, resumed_trainer.state.step) == (STAGE_SECOND_PASS, 2)
    resumed = resumed_trainer.run()
    assert all(np.array_equal(a, b) for a, b in zip(weights(reference), weights(resumed)))


def test_independent_runs_write_identical_checkpoints(tmp_path, corpus):
    Trainer(tiny_config(), corpus, str(tmp_path / "a")).run()
    Trainer(tiny_config(), corpus, str(tmp_path / "b")).run()
    for name in (MODEL_FILE, OPTIMIZER_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_discards_metrics_past_the_checkpoint(tmp_path, corpus, monkeypatch):
    config = tiny_config(steps=4, checkpoint_every=2)
    calls = {"n": 0}
    real_step = trainer_module.train_step

    def interrupted(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 4:
            raise KeyboardInterrupt
        return real_step(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "train_step", interrupted)
    with pytest.raises(KeyboardInterrupt):
        Trainer(config, corpus, str(tmp_path)).run()
    monkeypatch.setattr(trainer_module, "train_step", real_step)
    metrics = str(tmp_path / METRICS_FILE)
    assert DataExporter.read_jsonl(metrics)[-1]["step"] == 3

    Trainer(config, corpus, str(tmp_path)).run()
    lines = DataExporter.read_jsonl(metrics)
    assert [(r["stage"], r["step"]) for r in lines] == [("pretrain", 1), ("pretrain", 2), ("second_pass", 1),
                                                       ("second_pass", 2), ("second_pass", 3),
                                                       ("second_pass", 4)]


def test_resume_rejects_other_variant(tmp_path, corpus):
    Trainer(tiny_config(), corpus, str(tmp_path)).run()
    with pytest.raises(CheckpointError):
        Trainer(tiny_config("delib-jatd-partial"), corpus, str(tmp_path)).run()


def test_init_from_skips_pretraining(tmp_path, corpus):
    source = Trainer(tiny_config(), corpus, str(tmp_path / "base"))
    source.pretrain()
    save_model(source.model, str(tmp_path / "base"))
    trainer = Trainer(tiny_config("deliberation"), corpus, str(tmp_path / "delib"))
    trainer.init_first_pass(str(tmp_path / "base"))
    assert trainer.state.stage == STAGE_SECOND_PASS
    for a, b in zip(source.model.rnnt.param_groups(), trainer.model.rnnt.param_groups()):
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params, b.params))


def test_load_model_with_other_variant_keeps_first_pass(tmp_path, corpus):
    trainer = Trainer(tiny_config(), corpus)
    trainer.pretrain()
    save_model(trainer.model, str(tmp_path))
    las = load_model(str(tmp_path), variant="las")
    assert las.variant.value == "las"
    for a, b in zip(trainer.model.rnnt.param_groups(), las.rnnt.param_groups()):
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params, b.params))


def test_load_model_requires_sidecar(tmp_path):
    with pytest.raises(CheckpointError):
        load_model(str(tmp_path))

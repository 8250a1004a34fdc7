"""Synthetic corpus generation and persistence."""

import numpy as np
import pytest

from experiment_config import CorpusConfig, ExperimentConfig
from modules.autodiff import ExampleKind
from modules.errors import CorpusError
from modules.toy_corpus import (CorpusBuilder, Voice, Vocab, build_codebooks, build_corpus, load_corpus,
                                save_corpus, signature_length, synthesize)

SMALL = CorpusConfig(num_common=6, num_rare=3, feature_dim=4, train_size=60, paired_fraction=0.5,
                     test_size=10, dev_size=5, rare_min_count=5)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(SMALL, seed=11)


def test_vocab_layout():
    vocab = Vocab.build(3, 2)
    assert vocab.size == 7
    assert vocab.common == (2, 3, 4) and vocab.rare == (5, 6)
    assert vocab.render([0, 1, 2, 5]) == "<b> </s> c00 r00"
    with pytest.raises(CorpusError):
        Vocab.build(0, 2)


def test_generation_is_deterministic(corpus):
    again = build_corpus(SMALL, seed=11)
    for split, examples in corpus.splits.items():
        for a, b in zip(examples, again.splits[split]):
            assert a.utt_id == b.utt_id and a.transcript == b.transcript
            assert np.array_equal(a.features, b.features)


def test_threads_do_not_change_output(corpus):
    threaded = build_corpus(SMALL, seed=11, threads=3)
    for a, b in zip(corpus.splits["unpaired"], threaded.splits["unpaired"]):
        assert np.array_equal(a.features, b.features)


def test_split_sizes(corpus):
    assert corpus.counts() == {"paired": 30, "unpaired": 30, "vs_like": 10, "dev": 5,
                               "rare_tts": 10, "rare_spoken": 10}


def test_rare_tokens_scarce_in_paired_and_frequent_in_unpaired(corpus):
    paired = [t for e in corpus.splits["paired"] for t in e.transcript]
    unpaired = [t for e in corpus.splits["unpaired"] for t in e.transcript]
    for token in corpus.vocab.rare:
        assert paired.count(token) <= 1
        assert unpaired.count(token) >= SMALL.rare_min_count


def test_test_transcripts_unseen_in_training(corpus):
    training = {e.transcript for s in ("paired", "unpaired") for e in corpus.splits[s]}
    for split in ("vs_like", "rare_tts", "rare_spoken", "dev"):
        assert not training & {e.transcript for e in corpus.splits[split]}


def test_rare_sets_share_text_but_not_voice(corpus):
    tts, spoken = corpus.splits["rare_tts"], corpus.splits["rare_spoken"]
    assert [e.transcript for e in tts] == [e.transcript for e in spoken]
    assert all(e.voice is Voice.HELD_OUT and e.kind is ExampleKind.UNPAIRED for e in tts)
    assert all(e.voice is Voice.REAL and e.kind is ExampleKind.PAIRED for e in spoken)
    assert all(any(corpus.vocab.is_rare(t) for t in e.transcript) for e in tts)


def test_frame_count_follows_signatures(corpus):
    for example in corpus.splits["paired"][:5]:
        assert example.num_frames == sum(signature_length(t) for t in example.transcript)
        assert example.features.shape[1] == SMALL.feature_dim


def test_voices_differ_by_offset():
    vocab = Vocab.build(3, 1)
    books = build_codebooks(vocab, CorpusConfig(num_common=3, num_rare=1, feature_dim=4, noise_sigma=0.0,
                                                speaker_sigma=0.0))
    real = synthesize((2, 3), books[Voice.REAL], seed=0)
    tts = synthesize((2, 3), books[Voice.TTS], seed=0)
    assert np.allclose(tts - real, books[Voice.TTS].offset)
    assert np.linalg.norm(books[Voice.TTS].offset) == pytest.approx(0.5)
    assert abs(books[Voice.TTS].offset.dot(books[Voice.HELD_OUT].offset)) < 1e-9


def test_synthesize_rejects_unknown_tokens():
    vocab = Vocab.build(3, 1)
    books = build_codebooks(vocab, CorpusConfig(num_common=3, num_rare=1))
    with pytest.raises(CorpusError):
        synthesize((0, 2), books[Voice.REAL], seed=0)


def test_infeasible_rare_count_raises():
    with pytest.raises(CorpusError):
        build_corpus(CorpusConfig(num_common=4, num_rare=3, train_size=10, paired_fraction=0.5,
                                  rare_min_count=50, test_size=2, dev_size=1), seed=0)


def test_saved_corpus_loads_back(tmp_path, corpus):
    save_corpus(corpus, str(tmp_path), text_dump=True)
    assert (tmp_path / "paired.txt").read_text().startswith("paired-00000\t")
    loaded = load_corpus(str(tmp_path), SMALL, 11)
    assert loaded.counts() == corpus.counts()
    original, restored = corpus.splits["rare_tts"][3], loaded.splits["rare_tts"][3]
    assert restored.transcript == original.transcript
    assert restored.voice is Voice.HELD_OUT
    assert np.array_equal(restored.features, original.features)


def test_load_requires_paired_split(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(str(tmp_path), SMALL, 0)


def test_default_config_reaches_every_rare_token():
    cfg = ExperimentConfig(None, {}).corpus
    builder = CorpusBuilder(cfg, seed=1)
    paired, unpaired = builder.training_transcripts()
    assert (len(paired), len(unpaired)) == (2000, 222)
    for token in builder.vocab.rare:
        assert sum(t.count(token) for t in unpaired) >= cfg.rare_min_count
    rare_test = [builder.rare_transcript("rare_tts", i) for i in range(cfg.test_size)]
    assert {t for transcript in rare_test for t in transcript} >= set(builder.vocab.rare)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 1234])
def test_default_config_builds(seed):
    cfg = ExperimentConfig(None, {}).corpus
    corpus = build_corpus(cfg, seed=seed)
    assert corpus.counts() == {"paired": 2000, "unpaired": 222, "vs_like": 200, "dev": 50,
                               "rare_tts": 200, "rare_spoken": 200}

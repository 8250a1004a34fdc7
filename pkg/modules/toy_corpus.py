"""
Deterministic synthetic corpus standing in for real speech.

Tokens are abstract wordpieces split into a common and a rare set. Each
token has a fixed "signature" of 2-4 feature frames; an utterance's
features are its tokens' signatures concatenated, shifted by a voice offset
and a per-utterance speaker draw, plus Gaussian noise. Three voices exist:
the real voice, a TTS voice (real signatures plus a fixed offset) used for
the unpaired training text, and a held-out voice for the TTS test set.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from experiment_config import CorpusConfig
from utils.data_exporters import DataExporter
from utils.data_validators import ExampleValidator
from utils.task_pool import TaskPool

from .autodiff import ExampleKind
from .checkpoint import Record, read_records, write_records
from .errors import CorpusError

logger = logging.getLogger(__name__)

Transcript = Tuple[int, ...]

TRAIN_SPLITS = ("paired", "unpaired")
TEST_SPLITS = ("vs_like", "rare_tts", "rare_spoken")
ALL_SPLITS = TRAIN_SPLITS + TEST_SPLITS + ("dev",)

# Seed-stream codes; every split draws from its own stream.
_SPLIT_CODES = {"paired": 1, "unpaired": 2, "vs_like": 3, "rare_tts": 4, "rare_spoken": 5, "dev": 6}
_SIGNATURE_STREAM = 101
_OFFSET_STREAM = 102
_GRAMMAR_STREAM = 103
_MAX_RESAMPLES = 200


class Voice(Enum):
    REAL = "real"
    TTS = "tts"
    HELD_OUT = "held_out"


# ========================================
# VOCABULARY
# ========================================

@dataclass(frozen=True)
class Vocab:
    """Token ids: blank, eos, then the common set, then the rare set."""
    common: Tuple[int, ...]
    rare: Tuple[int, ...]
    blank_id: int = 0
    eos_id: int = 1

    @classmethod
    def build(cls, num_common: int, num_rare: int) -> "Vocab":
        if num_common < 1 or num_rare < 0:
            raise CorpusError(f"infeasible vocab split: {num_common} common / {num_rare} rare")
        common = tuple(range(2, 2 + num_common))
        rare = tuple(range(2 + num_common, 2 + num_common + num_rare))
        return cls(common, rare)

    @property
    def size(self) -> int:
        return 2 + len(self.common) + len(self.rare)

    @property
    def tokens(self) -> Tuple[int, ...]:
        return tuple(range(self.size))

    @property
    def content(self) -> Tuple[int, ...]:
        return self.common + self.rare

    def is_rare(self, token: int) -> bool:
        return token in self.rare

    def name(self, token: int) -> str:
        if token == self.blank_id:
            return "<b>"
        if token == self.eos_id:
            return "</s>"
        if token in self.common:
            return f"c{token - self.common[0]:02d}"
        if token in self.rare:
            return f"r{token - self.rare[0]:02d}"
        return f"<unk:{token}>"

    def render(self, tokens: Iterable[int]) -> str:
        return " ".join(self.name(t) for t in tokens)


# ========================================
# VOICES
# ========================================

@dataclass
class Codebook:
    kind: Voice
    signatures: Dict[int, np.ndarray]
    offset: np.ndarray
    noise_sigma: float = 0.1
    speaker_sigma: float = 0.05

    @property
    def feature_dim(self) -> int:
        return int(self.offset.shape[0])


def signature_length(token: int) -> int:
    return 2 + token % 3


def build_codebooks(vocab: Vocab, cfg: CorpusConfig) -> Dict[Voice, Codebook]:
    """Real, TTS and held-out voices sharing one set of token signatures."""
    dim = cfg.feature_dim
    signatures = {}
    for token in vocab.content:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.grammar_seed, _SIGNATURE_STREAM, token]))
        signatures[token] = rng.normal(0.0, 1.0, size=(signature_length(token), dim))

    rng = np.random.default_rng(np.random.SeedSequence([cfg.grammar_seed, _OFFSET_STREAM]))
    tts_direction = rng.normal(size=dim)
    tts_direction /= np.linalg.norm(tts_direction)
    held_direction = rng.normal(size=dim)
    held_direction -= held_direction.dot(tts_direction) * tts_direction
    norm = np.linalg.norm(held_direction)
    held_direction = held_direction / norm if norm > 0 else -tts_direction

    def make(kind: Voice, offset: np.ndarray) -> Codebook:
        return Codebook(kind, signatures, offset, cfg.noise_sigma, cfg.speaker_sigma)

    return {
        Voice.REAL: make(Voice.REAL, np.zeros(dim)),
        Voice.TTS: make(Voice.TTS, cfg.tts_offset_norm * tts_direction),
        Voice.HELD_OUT: make(Voice.HELD_OUT, cfg.heldout_offset_norm * held_direction),
    }


def synthesize(transcript: Sequence[int], codebook: Codebook, seed: int) -> np.ndarray:
    """Render a transcript as T×D frames; T is the sum of signature lengths."""
    unknown = [t for t in transcript if t not in codebook.signatures]
    if unknown:
        raise CorpusError(f"cannot synthesize unknown tokens {unknown}")
    rng = np.random.default_rng(seed)
    dim = codebook.feature_dim
    if not transcript:
        return np.zeros((0, dim))
    frames = np.concatenate([codebook.signatures[t] for t in transcript], axis=0) + codebook.offset
    frames = frames + rng.normal(0.0, codebook.speaker_sigma, size=dim)
    if codebook.noise_sigma > 0:
        frames = frames + rng.normal(0.0, codebook.noise_sigma, size=frames.shape)
    return frames


# ========================================
# EXAMPLES
# ========================================

@dataclass
class Example:
    utt_id: str
    transcript: Transcript
    kind: ExampleKind
    features: Optional[np.ndarray] = None
    voice: Voice = Voice.REAL

    @property
    def num_frames(self) -> int:
        return 0 if self.features is None else int(self.features.shape[0])


def example_seed(global_seed: int, split: str, index: int, attempt: int = 0) -> int:
    sequence = np.random.SeedSequence([global_seed, _SPLIT_CODES[split], index, attempt])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


class Grammar:
    """Seeded bigram chain over content tokens, shared by every split."""

    def __init__(self, vocab: Vocab, cfg: CorpusConfig):
        self.vocab = vocab
        rng = np.random.default_rng(np.random.SeedSequence([cfg.grammar_seed, _GRAMMAR_STREAM]))
        size = vocab.size
        # Row `eos` is the sentence-start distribution.
        self.transitions = rng.dirichlet(np.full(size, cfg.grammar_concentration), size=size)

    def sample(self, rng: np.random.Generator, pools: Sequence[Sequence[int]]) -> Transcript:
        previous = self.vocab.eos_id
        tokens = []
        for pool in pools:
            weights = self.transitions[previous, list(pool)] + 1e-12
            token = int(pool[rng.choice(len(pool), p=weights / weights.sum())])
            tokens.append(token)
            previous = token
        return tuple(tokens)


class CorpusBuilder:
    """Generates the training and test splits as a pure function of (config, seed)."""

    def __init__(self, cfg: CorpusConfig, seed: int, threads: int = 1):
        self.cfg = cfg
        self.seed = seed
        self.vocab = Vocab.build(cfg.num_common, cfg.num_rare)
        self.codebooks = build_codebooks(self.vocab, cfg)
        self.grammar = Grammar(self.vocab, cfg)
        self.pool = TaskPool(max_workers=threads)

    # ---------- sizes ----------

    @property
    def num_paired(self) -> int:
        return int(round(self.cfg.train_size * self.cfg.paired_fraction))

    @property
    def num_unpaired(self) -> int:
        return self.cfg.train_size - self.num_paired

    # ---------- transcripts ----------

    def _length(self, rng: np.random.Generator, rare_heavy: bool) -> int:
        low, high = self.cfg.min_length, self.cfg.max_length
        if rare_heavy:
            low = self.cfg.unpaired_min_length or low
            high = self.cfg.unpaired_max_length or high
        return int(rng.integers(low, high + 1))

    def common_transcript(self, split: str, index: int, attempt: int = 0) -> Transcript:
        rng = np.random.default_rng(example_seed(self.seed, split, index, attempt))
        length = self._length(rng, rare_heavy=False)
        return self.grammar.sample(rng, [self.vocab.common] * length)

    def rare_transcript(self, split: str, index: int, attempt: int = 0) -> Transcript:
        """At least `rare_density` of the positions carry rare tokens, assigned round-robin."""
        rng = np.random.default_rng(example_seed(self.seed, split, index, attempt))
        length = self._length(rng, rare_heavy=True)
        if not self.vocab.rare:
            return self.grammar.sample(rng, [self.vocab.common] * length)
        num_rare = max(1, math.ceil(length * self.cfg.rare_density))
        positions = sorted(int(p) for p in rng.choice(length, size=min(num_rare, length), replace=False))
        pools = [self.vocab.common] * length
        for slot, position in enumerate(positions):
            # Rotation starts at the example index so every rare token is reached.
            pools[position] = (self.vocab.rare[(index + slot + attempt) % len(self.vocab.rare)],)
        return self.grammar.sample(rng, pools)

    def training_transcripts(self) -> Tuple[List[Transcript], List[Transcript]]:
        paired = [self.common_transcript("paired", i) for i in range(self.num_paired)]
        # Rare words seen "once or not at all" in paired data.
        exposed = self.vocab.rare[:int(round(len(self.vocab.rare) * self.cfg.paired_rare_once_fraction))]
        for n, token in enumerate(exposed):
            if not paired:
                break
            target = (n * 97 + 13) % len(paired)
            tokens = list(paired[target])
            tokens[0] = token
            paired[target] = tuple(tokens)
        unpaired = [self.rare_transcript("unpaired", i) for i in range(self.num_unpaired)]
        self._check_rare_coverage(paired, unpaired)
        return paired, unpaired

    def _check_rare_coverage(self, paired: List[Transcript], unpaired: List[Transcript]):
        for token in self.vocab.rare:
            in_paired = sum(t.count(token) for t in paired)
            if in_paired > 1:
                raise CorpusError(f"rare token {self.vocab.name(token)} appears {in_paired} times in paired data")
            in_unpaired = sum(t.count(token) for t in unpaired)
            if in_unpaired < self.cfg.rare_min_count:
                raise CorpusError(f"infeasible split: rare token {self.vocab.name(token)} appears "
                                  f"{in_unpaired} < {self.cfg.rare_min_count} times in unpaired text")

    def _unseen_transcript(self, make, split: str, index: int, seen: Set[Transcript]) -> Transcript:
        for attempt in range(_MAX_RESAMPLES):
            transcript = make(split, index, attempt)
            if transcript not in seen:
                return transcript
        raise CorpusError(f"could not draw an unseen transcript for {split}[{index}]")

    # ---------- features ----------

    def _render(self, split: str, transcripts: List[Transcript], kind: ExampleKind, voice: Voice) -> List[Example]:
        codebook = self.codebooks[voice]

        def render(item):
            index, transcript = item
            features = synthesize(transcript, codebook, example_seed(self.seed, split, index))
            return Example(f"{split}-{index:05d}", transcript, kind, features, voice)

        return self.pool.map(render, list(enumerate(transcripts)))

    def build_training_set(self) -> Tuple[List[Example], List[Example]]:
        paired_text, unpaired_text = self.training_transcripts()
        paired = self._render("paired", paired_text, ExampleKind.PAIRED, Voice.REAL)
        unpaired = self._render("unpaired", unpaired_text, ExampleKind.UNPAIRED, Voice.TTS)
        logger.info(f"Built training set: {len(paired)} paired, {len(unpaired)} unpaired")
        return paired, unpaired

    def build_test_sets(self, training: Optional[Iterable[Transcript]] = None) -> Dict[str, List[Example]]:
        if training is None:
            paired_text, unpaired_text = self.training_transcripts()
            training = paired_text + unpaired_text
        seen = set(training)
        size, dev_size = self.cfg.test_size, self.cfg.dev_size
        vs_text = [self._unseen_transcript(self.common_transcript, "vs_like", i, seen) for i in range(size)]
        dev_text = [self._unseen_transcript(self.common_transcript, "dev", i, seen) for i in range(dev_size)]
        rare_text = [self._unseen_transcript(self.rare_transcript, "rare_tts", i, seen) for i in range(size)]
        return {
            "vs_like": self._render("vs_like", vs_text, ExampleKind.PAIRED, Voice.REAL),
            "dev": self._render("dev", dev_text, ExampleKind.PAIRED, Voice.REAL),
            "rare_tts": self._render("rare_tts", rare_text, ExampleKind.UNPAIRED, Voice.HELD_OUT),
            "rare_spoken": self._render("rare_spoken", rare_text, ExampleKind.PAIRED, Voice.REAL),
        }


def build_training_set(cfg: CorpusConfig, seed: int, threads: int = 1) -> Tuple[List[Example], List[Example]]:
    return CorpusBuilder(cfg, seed, threads).build_training_set()


def build_test_sets(cfg: CorpusConfig, seed: int, threads: int = 1) -> Dict[str, List[Example]]:
    return CorpusBuilder(cfg, seed, threads).build_test_sets()


# ========================================
# CORPUS ON DISK
# ========================================

@dataclass
class Corpus:
    cfg: CorpusConfig
    seed: int
    vocab: Vocab
    splits: Dict[str, List[Example]] = field(default_factory=dict)

    @property
    def codebooks(self) -> Dict[Voice, Codebook]:
        return build_codebooks(self.vocab, self.cfg)

    def counts(self) -> Dict[str, int]:
        return {name: len(examples) for name, examples in self.splits.items()}


def build_corpus(cfg: CorpusConfig, seed: int, threads: int = 1) -> Corpus:
    builder = CorpusBuilder(cfg, seed, threads)
    paired, unpaired = builder.build_training_set()
    splits = {"paired": paired, "unpaired": unpaired}
    splits.update(builder.build_test_sets([e.transcript for e in paired + unpaired]))
    return Corpus(cfg, seed, builder.vocab, splits)


def save_corpus(corpus: Corpus, out_dir: str, text_dump: bool = False) -> List[str]:
    """Write one tensor-record file per split (and optional transcript dumps)."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for split, examples in corpus.splits.items():
        records = [Record(e.utt_id, e.kind.value,
                          [e.features if e.features is not None else np.zeros((0, corpus.cfg.feature_dim)),
                           np.asarray(e.transcript, dtype=np.float64)])
                   for e in examples]
        path = os.path.join(out_dir, f"{split}.djtd")
        write_records(path, records)
        written.append(path)
        if text_dump:
            text_path = os.path.join(out_dir, f"{split}.txt")
            DataExporter.export_text_lines((f"{e.utt_id}\t{corpus.vocab.render(e.transcript)}" for e in examples),
                                           text_path)
            written.append(text_path)
    return written


def load_corpus(corpus_dir: str, cfg: CorpusConfig, seed: int,
                voices: Optional[Dict[str, str]] = None) -> Corpus:
    vocab = Vocab.build(cfg.num_common, cfg.num_rare)
    voices = voices or SPLIT_VOICES
    splits = {}
    for split in ALL_SPLITS:
        path = os.path.join(corpus_dir, f"{split}.djtd")
        if not os.path.exists(path):
            continue
        examples = []
        for record in read_records(path):
            features, transcript = record.tensors
            examples.append(Example(record.name, tuple(int(t) for t in transcript),
                                    ExampleKind(record.code), features,
                                    Voice(voices.get(split, Voice.REAL.value))))
        ok, errors = ExampleValidator.validate_split(examples, vocab.size, cfg.feature_dim)
        if not ok:
            raise CorpusError(f"invalid examples in {path}: " + "; ".join(errors[:5]))
        splits[split] = examples
    if "paired" not in splits:
        raise CorpusError(f"no paired split under {corpus_dir}")
    return Corpus(cfg, seed, vocab, splits)


SPLIT_VOICES = {"paired": Voice.REAL.value, "unpaired": Voice.TTS.value, "vs_like": Voice.REAL.value,
                "dev": Voice.REAL.value, "rare_tts": Voice.HELD_OUT.value, "rare_spoken": Voice.REAL.value}

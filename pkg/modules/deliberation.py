"""
Second pass: hypothesis encoding, dual attention, learnable fixed context
vectors, acoustic and fixed-context (LM) branches, their log-domain
interpolation, the teacher-forced training loss and the gated train step.

Variants:
    las                 acoustic attention only
    las-jatd            las + fixed encoder context c_e^l for the LM branch
    deliberation        acoustic + hypothesis attention
    delib-jatd-partial  LM branch swaps c_e^a for c_e^l, keeps c_b^a
    delib-jatd-full     LM branch uses c_e^l and c_b^l, never reads audio
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from experiment_config import ModelConfig

from .autodiff import (ExampleKind, Gate, GradMask, ParamGroup, Tensor, add, apply_update,
                       backward, concat, init_zeros, log_softmax, mul, no_grad, sum_)
from .errors import CorpusError, DecodeError, VariantError
from .layers import (AttentionMemory, Embedding, Linear, LstmLayer, LstmState,
                     MultiHeadAttention, bilstm_forward)
from .rnnt import EncoderOutput, FirstPassResult, Hypothesis, RnntModel
from .toy_corpus import Example

logger = logging.getLogger(__name__)

ACOUSTIC = "acoustic"
LM = "lm"


class ModelVariant(Enum):
    LAS = "las"
    LAS_JATD = "las-jatd"
    DELIBERATION = "deliberation"
    DELIB_JATD_PARTIAL = "delib-jatd-partial"
    DELIB_JATD_FULL = "delib-jatd-full"

    @classmethod
    def from_name(cls, name: Union[str, "ModelVariant"]) -> "ModelVariant":
        if isinstance(name, ModelVariant):
            return name
        try:
            return cls(name)
        except ValueError:
            raise VariantError(f"unknown variant {name!r}; expected one of {[v.value for v in cls]}") from None

    @property
    def uses_hypotheses(self) -> bool:
        return self in (ModelVariant.DELIBERATION, ModelVariant.DELIB_JATD_PARTIAL, ModelVariant.DELIB_JATD_FULL)

    @property
    def is_jatd(self) -> bool:
        return self in (ModelVariant.LAS_JATD, ModelVariant.DELIB_JATD_PARTIAL, ModelVariant.DELIB_JATD_FULL)

    @property
    def has_fixed_hyp_context(self) -> bool:
        return self is ModelVariant.DELIB_JATD_FULL


# ========================================
# HYPOTHESIS ENCODER
# ========================================

@dataclass
class HypothesisEncoding:
    padded_tokens: List[Tuple[int, ...]]
    encoded: Tensor
    truncated: bool = False

    @property
    def length(self) -> int:
        return self.encoded.shape[0]


class HypothesisEncoder:
    """Embedding + bidirectional LSTM over EOS-padded first-pass hypotheses."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, eos_id: int, rng: np.random.Generator):
        self.eos_id = eos_id
        self.hyp_length = cfg.hyp_length
        self.embedding = Embedding(vocab_size, cfg.hyp_embed_dim, rng, cfg.init_scale)
        self.forward_lstm = LstmLayer(cfg.hyp_embed_dim, cfg.hyp_hidden, rng, cfg.hyp_proj, cfg.init_scale)
        self.backward_lstm = LstmLayer(cfg.hyp_embed_dim, cfg.hyp_hidden, rng, cfg.hyp_proj, cfg.init_scale)
        self.output_dim = 2 * self.forward_lstm.output_dim

    def params(self) -> List[Tensor]:
        return self.embedding.params() + self.forward_lstm.params() + self.backward_lstm.params()

    def pad(self, tokens: Sequence[int]) -> Tuple[Tuple[int, ...], bool]:
        tokens = tuple(tokens)
        if len(tokens) > self.hyp_length:
            return tokens[:self.hyp_length], True
        return tokens + (self.eos_id,) * (self.hyp_length - len(tokens)), False

    def __call__(self, hyps: Union[FirstPassResult, Sequence[Hypothesis]], top_k: int = 1) -> HypothesisEncoding:
        """Encode the top_k hypotheses independently; blocks are stacked along time (k·L rows)."""
        ranked = list(hyps.hyps if isinstance(hyps, FirstPassResult) else hyps)
        if not ranked:
            raise DecodeError("cannot encode an empty hypothesis list")
        if top_k < 1:
            raise DecodeError(f"top_k must be >= 1, got {top_k}")
        padded, encoded, truncated = [], [], False
        for hyp in ranked[:top_k]:
            tokens, cut = self.pad(hyp.tokens)
            if cut:
                logger.debug(f"Hypothesis of length {len(hyp.tokens)} truncated to {self.hyp_length}")
            truncated = truncated or cut
            rows = self.embedding(tokens)
            padded.append(tokens)
            encoded.append(bilstm_forward(self.forward_lstm, self.backward_lstm, rows))
        return HypothesisEncoding(padded, concat(encoded, axis=0), truncated)


# ========================================
# SECOND-PASS DECODER
# ========================================

@dataclass
class SecondPassSources:
    """Per-utterance attention memories, projected once."""
    enc_memory: AttentionMemory
    hyp_memory: Optional[AttentionMemory] = None
    hyp_encoding: Optional[HypothesisEncoding] = None


@dataclass
class DecoderState:
    variant: ModelVariant
    branch: str
    lstm: LstmState
    inputs: Tuple[int, ...] = ()
    log_probs: Optional[Tensor] = None


class SecondPass:
    """Attention decoder shared by the acoustic and LM branches."""

    def __init__(self, cfg: ModelConfig, variant: ModelVariant, vocab_size: int, encoder_dim: int,
                 eos_id: int, rng: np.random.Generator):
        self.variant = variant
        self.vocab_size = vocab_size
        self.eos_id = eos_id
        self.hyp_encoder = HypothesisEncoder(cfg, vocab_size, eos_id, rng) if variant.uses_hypotheses else None
        self.encoder_attention = MultiHeadAttention(cfg.dec_proj, encoder_dim, cfg.attention_dim,
                                                    cfg.num_heads, rng, cfg.init_scale)
        self.hyp_attention = (MultiHeadAttention(cfg.dec_proj, self.hyp_encoder.output_dim, cfg.attention_dim,
                                                 cfg.num_heads, rng, cfg.init_scale)
                              if variant.uses_hypotheses else None)
        num_contexts = 2 if variant.uses_hypotheses else 1
        context_dim = num_contexts * cfg.attention_dim
        self.embedding = Embedding(vocab_size, cfg.dec_embed_dim, rng, cfg.init_scale)
        self.lstm = LstmLayer(cfg.dec_embed_dim + context_dim, cfg.dec_hidden, rng, cfg.dec_proj, cfg.init_scale)
        self.output = Linear(self.lstm.output_dim + context_dim, vocab_size, rng, True, cfg.init_scale)
        # zero-initialized, created last so they draw nothing from rng
        self.fixed_context_e = init_zeros((1, cfg.attention_dim)) if variant.is_jatd else None
        self.fixed_context_b = init_zeros((1, cfg.attention_dim)) if variant.has_fixed_hyp_context else None

    def param_groups(self) -> List[ParamGroup]:
        groups = []
        if self.hyp_encoder is not None:
            groups.append(ParamGroup("hyp_encoder", Gate.HYPOTHESIS_ENCODER, self.hyp_encoder.params()))
        groups.append(ParamGroup("encoder_attention", Gate.ENCODER_ATTENTION, self.encoder_attention.params()))
        if self.hyp_attention is not None:
            groups.append(ParamGroup("hyp_attention", Gate.HYPOTHESIS_ATTENTION, self.hyp_attention.params()))
        if self.fixed_context_e is not None:
            groups.append(ParamGroup("fixed_context_e", Gate.FIXED_CONTEXT_E, [self.fixed_context_e]))
        if self.fixed_context_b is not None:
            groups.append(ParamGroup("fixed_context_b", Gate.FIXED_CONTEXT_B, [self.fixed_context_b]))
        decoder = self.embedding.params() + self.lstm.params() + self.output.params()
        groups.append(ParamGroup("second_pass_decoder", Gate.SECOND_PASS_DECODER, decoder))
        return groups

    def prepare(self, enc: EncoderOutput, hyp_encoding: Optional[HypothesisEncoding] = None) -> SecondPassSources:
        enc_memory = self.encoder_attention.project_memory(enc.frames, enc.frames)
        hyp_memory = None
        if self.variant.uses_hypotheses:
            if hyp_encoding is None:
                raise VariantError(f"variant {self.variant.value} needs first-pass hypotheses")
            hyp_memory = self.hyp_attention.project_memory(hyp_encoding.encoded, hyp_encoding.encoded)
        return SecondPassSources(enc_memory, hyp_memory, hyp_encoding)

    def initial_state(self, branch: str) -> DecoderState:
        return DecoderState(self.variant, branch, self.lstm.initial_state())

    def contexts(self, branch: str, sources: SecondPassSources, query: Tensor) -> List[Tensor]:
        variant = self.variant
        if branch == ACOUSTIC:
            contexts = [self.encoder_attention.attend(query, sources.enc_memory)[0]]
            if variant.uses_hypotheses:
                contexts.append(self.hyp_attention.attend(query, sources.hyp_memory)[0])
            return contexts
        if branch != LM or not variant.is_jatd:
            raise VariantError(f"variant {variant.value} has no {branch!r} branch")
        contexts = [self.fixed_context_e]
        if variant is ModelVariant.DELIB_JATD_PARTIAL:
            contexts.append(self.hyp_attention.attend(query, sources.hyp_memory)[0])
        elif variant is ModelVariant.DELIB_JATD_FULL:
            contexts.append(self.fixed_context_b)
        return contexts

    def _feed(self, branch: str, sources: SecondPassSources, token: int,
              lstm_state: LstmState) -> Tuple[Tensor, LstmState]:
        contexts = self.contexts(branch, sources, lstm_state[0])
        x = concat([self.embedding([token])] + contexts, axis=1)
        h, lstm_state = self.lstm.step(x, lstm_state)
        logits = self.output(concat([h] + contexts, axis=1))
        return log_softmax(logits, axis=-1), lstm_state

    def step(self, branch: str, sources: SecondPassSources, prev_tokens: Sequence[int],
             state: Optional[DecoderState] = None) -> Tuple[Tensor, DecoderState]:
        """log p(y_u | ..., y_{u-1:1}) as a 1×V row, plus the advanced state.

        The state remembers which inputs it has consumed; only the missing
        suffix of [eos] + prev_tokens is fed.
        """
        state = state or self.initial_state(branch)
        if state.variant is not self.variant or state.branch != branch:
            raise VariantError(f"state for {state.variant.value}/{state.branch} passed to "
                               f"{self.variant.value}/{branch}")
        inputs = (self.eos_id,) + tuple(prev_tokens)
        consumed = len(state.inputs)
        if inputs[:consumed] != state.inputs:
            raise DecodeError("decoder state does not match the token prefix")
        log_probs, lstm_state = state.log_probs, state.lstm
        for token in inputs[consumed:]:
            log_probs, lstm_state = self._feed(branch, sources, token, lstm_state)
        return log_probs, DecoderState(self.variant, branch, lstm_state, inputs, log_probs)


# ========================================
# FULL MODEL
# ========================================

class DeliberationModel:
    """First-pass RNN-T plus the second pass of the selected variant."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, feature_dim: int, seed: int,
                 blank_id: int = 0, eos_id: int = 1):
        self.cfg = cfg
        self.variant = ModelVariant.from_name(cfg.variant)
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.seed = seed
        self.blank_id = blank_id
        self.eos_id = eos_id
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.rnnt = RnntModel(cfg, vocab_size, feature_dim, rng, blank_id)
        self.second = SecondPass(cfg, self.variant, vocab_size, self.rnnt.encoder.output_dim, eos_id, rng)

    def param_groups(self) -> List[ParamGroup]:
        return self.rnnt.param_groups() + self.second.param_groups()

    def second_pass_groups(self, freeze_first_pass: bool = True) -> List[ParamGroup]:
        """Groups a second-pass step may touch; the encoder joins only when unfrozen."""
        encoder = [g for g in self.rnnt.param_groups() if g.gate is Gate.ENCODER_STACK]
        return ([] if freeze_first_pass else encoder) + self.second.param_groups()

    def num_params(self) -> int:
        return sum(p.data.size for g in self.param_groups() for p in g.params)

    def first_pass(self, features, beam: int = 2, max_symbols: int = 3,
                   max_output_length: Optional[int] = None) -> FirstPassResult:
        with no_grad():
            enc = self.rnnt.encode(features)
            return self.rnnt.decode(enc, beam, max_symbols, max_output_length)

    def encode_hypotheses(self, hyps: Union[FirstPassResult, Sequence[Hypothesis]],
                          top_k: int = 1) -> HypothesisEncoding:
        if self.second.hyp_encoder is None:
            raise VariantError(f"variant {self.variant.value} does not attend to hypotheses")
        return self.second.hyp_encoder(hyps, top_k)

    def prepare(self, features, hyps: Optional[FirstPassResult] = None, top_k: int = 1,
                enc: Optional[EncoderOutput] = None) -> SecondPassSources:
        enc = enc or self.rnnt.encode(features)
        hyp_encoding = self.encode_hypotheses(hyps, top_k) if self.variant.uses_hypotheses else None
        return self.second.prepare(enc, hyp_encoding)

    def step_acoustic(self, sources: SecondPassSources, prev_tokens: Sequence[int],
                      state: Optional[DecoderState] = None) -> Tuple[Tensor, DecoderState]:
        return self.second.step(ACOUSTIC, sources, prev_tokens, state)

    def step_lm(self, sources: SecondPassSources, prev_tokens: Sequence[int],
                state: Optional[DecoderState] = None) -> Tuple[Tensor, DecoderState]:
        if not self.variant.is_jatd:
            raise VariantError(f"variant {self.variant.value} has no fixed-context branch")
        return self.second.step(LM, sources, prev_tokens, state)


def encode_hypotheses(model: DeliberationModel, hyps, top_k: int = 1) -> HypothesisEncoding:
    return model.encode_hypotheses(hyps, top_k)


def step_acoustic(model: DeliberationModel, sources: SecondPassSources, prev_tokens: Sequence[int],
                  state: Optional[DecoderState] = None) -> Tuple[Tensor, DecoderState]:
    return model.step_acoustic(sources, prev_tokens, state)


def step_lm(model: DeliberationModel, sources: SecondPassSources, prev_tokens: Sequence[int],
            state: Optional[DecoderState] = None) -> Tuple[Tensor, DecoderState]:
    return model.step_lm(sources, prev_tokens, state)


def _check_lambda(lam: float):
    if not 0.0 <= lam <= 1.0:
        raise DecodeError(f"lambda must lie in [0, 1], got {lam}")


def interpolate(acoustic_logp, lm_logp, lam: float):
    """λ·acoustic + (1−λ)·lm elementwise; works on Tensors (taped) and arrays."""
    _check_lambda(lam)
    if np.shape(getattr(acoustic_logp, "data", acoustic_logp)) != np.shape(getattr(lm_logp, "data", lm_logp)):
        raise DecodeError("acoustic and LM log-prob vectors differ in length")
    if lam == 1.0:
        return acoustic_logp
    if lam == 0.0:
        return lm_logp
    if isinstance(acoustic_logp, Tensor):
        return add(mul(acoustic_logp, Tensor(lam)), mul(lm_logp, Tensor(1.0 - lam)))
    return lam * np.asarray(acoustic_logp) + (1.0 - lam) * np.asarray(lm_logp)


# ========================================
# TRAINING LOSS
# ========================================

@dataclass
class SecondPassLoss:
    loss: Tensor
    acoustic_term: float
    lm_term: Optional[float]
    num_examples: int
    num_tokens: int

    @property
    def value(self) -> float:
        return self.loss.item()


HypCache = Dict[str, FirstPassResult]


def first_pass_hyps(model: DeliberationModel, example: Example, first_beam: int = 2, max_symbols: int = 3,
                    cache: Optional[HypCache] = None) -> Optional[FirstPassResult]:
    if not model.variant.uses_hypotheses:
        return None
    if cache is not None and example.utt_id in cache:
        return cache[example.utt_id]
    hyps = model.first_pass(example.features, first_beam, max_symbols)
    if not hyps.hyps:
        hyps = FirstPassResult([Hypothesis((), 0.0)])
    if cache is not None:
        cache[example.utt_id] = hyps
    return hyps


def _target_row_sum(rows: Tensor, targets: Sequence[int]) -> Tensor:
    onehot = np.zeros(rows.shape)
    onehot[np.arange(len(targets)), list(targets)] = 1.0
    return sum_(mul(rows, Tensor(onehot)))


def example_loss(model: DeliberationModel, example: Example, lambda_train: float,
                 hyps: Optional[FirstPassResult] = None, top_k: int = 1) -> Tuple[Tensor, float, Optional[float], int]:
    """Per-token mean cross-entropy of the interpolated log-probs for one utterance."""
    if example.features is None:
        raise CorpusError(f"example {example.utt_id} has no features")
    variant = model.variant
    lam = lambda_train if variant.is_jatd else 1.0
    _check_lambda(lam)
    sources = model.prepare(example.features, hyps, top_k)
    targets = list(example.transcript) + [model.eos_id]
    acoustic_rows, lm_rows = [], []
    acoustic_state = lm_state = None
    for u in range(len(targets)):
        prefix = targets[:u]
        row, acoustic_state = model.step_acoustic(sources, prefix, acoustic_state)
        acoustic_rows.append(row)
        if variant.is_jatd:
            row, lm_state = model.step_lm(sources, prefix, lm_state)
            lm_rows.append(row)
    scale = Tensor(-1.0 / len(targets))
    acoustic = concat(acoustic_rows, axis=0)
    acoustic_nll = mul(_target_row_sum(acoustic, targets), scale)
    if not variant.is_jatd:
        return acoustic_nll, acoustic_nll.item(), None, len(targets)
    lm = concat(lm_rows, axis=0)
    lm_term = -_target_row_sum(lm, targets).item() / len(targets)
    combined = mul(_target_row_sum(interpolate(acoustic, lm, lam), targets), scale)
    return combined, acoustic_nll.item(), lm_term, len(targets)


def second_pass_loss(model: DeliberationModel, batch: Sequence[Example], lambda_train: float = 0.1,
                     hyp_cache: Optional[HypCache] = None, first_beam: int = 2, top_k: int = 1,
                     max_symbols: int = 3) -> SecondPassLoss:
    """Batch mean of per-example losses; identical in form for paired and unpaired examples."""
    if not batch:
        raise CorpusError("empty training batch")
    total, acoustic, lm, tokens = None, 0.0, 0.0, 0
    for example in batch:
        hyps = first_pass_hyps(model, example, first_beam, max_symbols, hyp_cache)
        loss, a_term, l_term, n = example_loss(model, example, lambda_train, hyps, top_k)
        total = loss if total is None else add(total, loss)
        acoustic += a_term
        lm += l_term or 0.0
        tokens += n
    count = len(batch)
    return SecondPassLoss(mul(total, Tensor(1.0 / count)), acoustic / count,
                          lm / count if model.variant.is_jatd else None, count, tokens)


# ========================================
# GATED TRAIN STEP
# ========================================

def build_grad_mask(kind: ExampleKind, variant: ModelVariant, freeze_first_pass: bool = True) -> GradMask:
    """Mask for one example kind; non-JATD variants treat every example as paired."""
    extra = {Gate.FIRST_PASS}
    if freeze_first_pass:
        extra.add(Gate.ENCODER_STACK)
    if not variant.is_jatd:
        kind = ExampleKind.PAIRED
    return GradMask.for_kind(kind, extra)


@dataclass
class StepMetrics:
    loss: float = 0.0
    acoustic_term: float = 0.0
    lm_term: Optional[float] = None
    num_paired: int = 0
    num_unpaired: int = 0
    grad_norm: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {"loss": self.loss, "acoustic_term": self.acoustic_term, "lm_term": self.lm_term,
                "num_paired": self.num_paired, "num_unpaired": self.num_unpaired, "grad_norm": dict(self.grad_norm)}


def train_step(model: DeliberationModel, batch: Sequence[Example], optimizer, lambda_train: float = 0.1,
               freeze_first_pass: bool = True, hyp_cache: Optional[HypCache] = None,
               first_beam: int = 2, top_k: int = 1, max_symbols: int = 3) -> StepMetrics:
    """Split by example kind; each sub-batch gets its own backward and masked update.

    The paired sub-batch goes first. Losses are reported as the
    example-weighted mean across both sub-batches.
    """
    groups = model.second_pass_groups(freeze_first_pass)
    metrics = StepMetrics()
    sub_batches = [(kind, [ex for ex in batch if ex.kind is kind])
                   for kind in (ExampleKind.PAIRED, ExampleKind.UNPAIRED)]
    lm_sum = 0.0
    for kind, examples in sub_batches:
        if not examples:
            continue
        result = second_pass_loss(model, examples, lambda_train, hyp_cache, first_beam, top_k, max_symbols)
        grads = backward(result.loss)
        mask = build_grad_mask(kind, model.variant, freeze_first_pass)
        update = apply_update(groups, grads, mask, optimizer)
        n = len(examples)
        metrics.loss += result.value * n
        metrics.acoustic_term += result.acoustic_term * n
        lm_sum += (result.lm_term or 0.0) * n
        metrics.grad_norm[kind.name.lower()] = update["grad_norm"]
        if kind is ExampleKind.PAIRED:
            metrics.num_paired = n
        else:
            metrics.num_unpaired = n
    total = metrics.num_paired + metrics.num_unpaired
    if total:
        metrics.loss /= total
        metrics.acoustic_term /= total
        if model.variant.is_jatd:
            metrics.lm_term = lm_sum / total
    return metrics

"""
Streaming first pass: shared encoder, prediction network, joint network,
transducer loss with exact alpha-beta gradients, and greedy / beam decoding.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from experiment_config import ModelConfig

from .autodiff import (Gate, ParamGroup, Tensor, add, init_uniform, log_softmax, matmul,
                       no_grad, record, reshape, slice_, tanh)
from .errors import DecodeError, LabelError, ShapeError
from .layers import Embedding, LstmLayer, LstmState, TimeReduction, lstm_forward, time_reduce

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    score: float


@dataclass
class EncoderOutput:
    frames: Tensor

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FirstPassResult:
    hyps: List[Hypothesis] = field(default_factory=list)

    @property
    def best(self) -> Hypothesis:
        return self.hyps[0]


# ========================================
# LATTICE FORWARD-BACKWARD
# ========================================

@dataclass
class RnntLattice:
    """Per-(t, u) output log-distributions with forward/backward log-probabilities."""
    log_probs: np.ndarray
    labels: Tuple[int, ...]
    blank_id: int
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def total_from_alpha(self) -> float:
        T, U = self.alpha.shape[0] - 1, self.alpha.shape[1] - 1
        return float(self.alpha[T, U] + self.log_probs[T, U, self.blank_id])

    @property
    def total_from_beta(self) -> float:
        return float(self.beta[0, 0])


def compute_lattice(log_probs: np.ndarray, labels: Sequence[int], blank_id: int = 0) -> RnntLattice:
    """Run the alpha and beta recursions over a T×(U+1)×V log-prob lattice."""
    T, U1, _ = log_probs.shape
    labels = tuple(int(y) for y in labels)
    if U1 != len(labels) + 1:
        raise ShapeError("rnnt_lattice", [log_probs.shape, (len(labels),)], "lattice needs U+1 label positions")
    blank = log_probs[:, :, blank_id]
    emit = np.full((T, U1), -np.inf)
    if labels:
        emit[:, :-1] = log_probs[:, np.arange(U1 - 1), labels]

    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            from_time = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            from_label = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(from_time, from_label)

    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U1 - 1] = blank[T - 1, U1 - 1]
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            if t == T - 1 and u == U1 - 1:
                continue
            to_time = beta[t + 1, u] + blank[t, u] if t < T - 1 else -np.inf
            to_label = beta[t, u + 1] + emit[t, u] if u < U1 - 1 else -np.inf
            beta[t, u] = np.logaddexp(to_time, to_label)
    return RnntLattice(log_probs, labels, blank_id, alpha, beta)


def transducer_loss(log_probs: Tensor, labels: Sequence[int], blank_id: int = 0) -> Tensor:
    """Negative log-likelihood summed over all monotone alignments.

    The gradient with respect to the lattice log-probs comes straight from
    the alpha-beta occupancies.
    """
    lattice = compute_lattice(log_probs.data, labels, blank_id)
    total = lattice.total_from_beta
    T, U1, _ = log_probs.shape
    alpha, beta, lp = lattice.alpha, lattice.beta, lattice.log_probs

    def _backward(g):
        grad = np.zeros_like(lp)
        next_beta = np.full((T, U1), -np.inf)
        next_beta[:-1, :] = beta[1:, :]
        next_beta[T - 1, U1 - 1] = 0.0
        grad[:, :, blank_id] = -np.exp(alpha + lp[:, :, blank_id] + next_beta - total)
        for u, label in enumerate(lattice.labels):
            grad[:, u, label] -= np.exp(alpha[:, u] + lp[:, u, label] + beta[:, u + 1] - total)
        return (g * grad,)

    return record(np.array(-total), (log_probs,), "rnnt_loss", _backward)


# ========================================
# NETWORKS
# ========================================

class SharedEncoder:
    """Stacked LSTMs with frame-stacking time reduction after `time_reduction_after` layers."""

    def __init__(self, cfg: ModelConfig, feature_dim: int, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.reduction = TimeReduction(cfg.time_reduction_factor)
        self.reduce_after = min(cfg.time_reduction_after, cfg.encoder_layers)
        self.layers: List[LstmLayer] = []
        in_dim = feature_dim
        for index in range(cfg.encoder_layers):
            if index == self.reduce_after:
                in_dim *= self.reduction.factor
            layer = LstmLayer(in_dim, cfg.encoder_hidden, rng, cfg.encoder_proj, cfg.init_scale)
            self.layers.append(layer)
            in_dim = layer.output_dim
        self.output_dim = in_dim * (self.reduction.factor if self.reduce_after == cfg.encoder_layers else 1)

    def params(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, features) -> EncoderOutput:
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.data.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ShapeError("encode", [x.shape, (x.shape[0] if x.data.ndim else 0, self.feature_dim)],
                             "feature dim mismatch")
        if x.shape[0] < 1:
            raise ShapeError("encode", [x.shape], "need at least one frame")
        for index, layer in enumerate(self.layers):
            if index == self.reduce_after:
                x = time_reduce(self.reduction, x)
            x, _ = lstm_forward(layer, x)
        if self.reduce_after == len(self.layers):
            x = time_reduce(self.reduction, x)
        return EncoderOutput(x)


class PredictionNetwork:
    """Label-history LSTM; the blank id doubles as the start symbol."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, blank_id: int, rng: np.random.Generator):
        self.blank_id = blank_id
        self.embedding = Embedding(vocab_size, cfg.pred_embed_dim, rng, cfg.init_scale)
        self.layers: List[LstmLayer] = []
        in_dim = cfg.pred_embed_dim
        for _ in range(cfg.pred_layers):
            layer = LstmLayer(in_dim, cfg.pred_hidden, rng, cfg.pred_proj, cfg.init_scale)
            self.layers.append(layer)
            in_dim = layer.output_dim
        self.output_dim = in_dim

    def params(self) -> List[Tensor]:
        return self.embedding.params() + [p for layer in self.layers for p in layer.params()]

    def __call__(self, labels: Sequence[int]) -> Tensor:
        """Teacher-forced outputs for positions 0..U; (U+1)×P."""
        x = self.embedding([self.blank_id] + list(labels))
        for layer in self.layers:
            x, _ = lstm_forward(layer, x)
        return x

    def initial_state(self) -> List[LstmState]:
        return [layer.initial_state() for layer in self.layers]

    def step(self, token: int, state: List[LstmState]) -> Tuple[Tensor, List[LstmState]]:
        x = self.embedding([token])
        new_state = []
        for layer, layer_state in zip(self.layers, state):
            x, s = layer.step(x, layer_state)
            new_state.append(s)
        return x, new_state


class JointNetwork:
    def __init__(self, cfg: ModelConfig, encoder_dim: int, pred_dim: int, vocab_size: int,
                 rng: np.random.Generator):
        self.w_enc = init_uniform(rng, (encoder_dim, cfg.joint_dim), cfg.init_scale)
        self.w_pred = init_uniform(rng, (pred_dim, cfg.joint_dim), cfg.init_scale)
        self.bias = init_uniform(rng, (cfg.joint_dim,), cfg.init_scale)
        self.w_out = init_uniform(rng, (cfg.joint_dim, vocab_size), cfg.init_scale)
        self.b_out = init_uniform(rng, (vocab_size,), cfg.init_scale)

    def params(self) -> List[Tensor]:
        return [self.w_enc, self.w_pred, self.bias, self.w_out, self.b_out]

    def lattice(self, enc_frames: Tensor, pred_out: Tensor) -> Tensor:
        """T×(U+1)×V log-probs for every (frame, label-position) pair."""
        T, U1 = enc_frames.shape[0], pred_out.shape[0]
        enc_proj = reshape(matmul(enc_frames, self.w_enc), (T, 1, -1))
        pred_proj = reshape(matmul(pred_out, self.w_pred), (1, U1, -1))
        hidden = tanh(add(add(enc_proj, pred_proj), self.bias))
        return log_softmax(add(matmul(hidden, self.w_out), self.b_out), axis=-1)

    def step(self, enc_proj_row: Tensor, pred_out: Tensor) -> np.ndarray:
        hidden = tanh(add(add(enc_proj_row, matmul(pred_out, self.w_pred)), self.bias))
        return log_softmax(add(matmul(hidden, self.w_out), self.b_out), axis=-1).data[0]


# ========================================
# MODEL
# ========================================

class RnntModel:
    """Encoder + prediction + joint network."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, feature_dim: int,
                 rng: np.random.Generator, blank_id: int = 0):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.blank_id = blank_id
        self.max_label_length = cfg.max_label_length
        self.encoder = SharedEncoder(cfg, feature_dim, rng)
        self.prediction = PredictionNetwork(cfg, vocab_size, blank_id, rng)
        self.joint = JointNetwork(cfg, self.encoder.output_dim, self.prediction.output_dim, vocab_size, rng)

    def param_groups(self) -> List[ParamGroup]:
        return [
            ParamGroup("encoder", Gate.ENCODER_STACK, self.encoder.params()),
            ParamGroup("first_pass", Gate.FIRST_PASS, self.prediction.params() + self.joint.params()),
        ]

    def encode(self, features) -> EncoderOutput:
        return self.encoder(features)

    def _check_labels(self, labels: Sequence[int]):
        if len(labels) > self.max_label_length:
            raise LabelError(f"{len(labels)} labels exceed max_label_length={self.max_label_length}")
        if self.blank_id in labels:
            raise LabelError("labels must not contain the blank id")
        if any(not 0 <= y < self.vocab_size for y in labels):
            raise LabelError(f"label outside vocabulary of size {self.vocab_size}")

    def lattice_log_probs(self, enc: EncoderOutput, labels: Sequence[int]) -> Tensor:
        self._check_labels(labels)
        return self.joint.lattice(enc.frames, self.prediction(labels))

    def loss(self, enc: EncoderOutput, labels: Sequence[int]) -> Tensor:
        return transducer_loss(self.lattice_log_probs(enc, labels), labels, self.blank_id)

    # ---------- decoding ----------

    def greedy_decode(self, enc: EncoderOutput, max_symbols: int = 3,
                      max_output_length: Optional[int] = None) -> Hypothesis:
        """Argmax rollout emitting at most `max_symbols` labels per frame."""
        max_len = self.max_label_length if max_output_length is None else max_output_length
        with no_grad():
            enc_proj = matmul(enc.frames, self.joint.w_enc)
            pred_out, state = self.prediction.step(self.blank_id, self.prediction.initial_state())
            tokens, score = [], 0.0
            for t in range(enc.num_frames):
                row = slice_(enc_proj, (slice(t, t + 1), slice(None)))
                for n in range(max_symbols + 1):
                    log_probs = self.joint.step(row, pred_out)
                    if n == max_symbols or len(tokens) >= max_len:
                        token = self.blank_id
                    else:
                        token = int(np.argmax(log_probs))
                    score += float(log_probs[token])
                    if token == self.blank_id:
                        break
                    tokens.append(token)
                    pred_out, state = self.prediction.step(token, state)
        return Hypothesis(tuple(tokens), score)

    def _search(self, enc_proj: Tensor, width: int, max_symbols: int, max_len: int,
                cache: Dict[Tuple[int, ...], Tuple[Tensor, List[LstmState]]]) -> Dict[Tuple[int, ...], float]:
        """Frame-synchronous Viterbi beam search; returns finished prefixes → best-alignment score."""

        def joint_step(row: Tensor, tokens: Tuple[int, ...]) -> np.ndarray:
            if tokens not in cache:
                parent_out, parent_state = cache[tokens[:-1]]
                cache[tokens] = self.prediction.step(tokens[-1], parent_state)
            return self.joint.step(row, cache[tokens][0])

        beam: Dict[Tuple[int, ...], float] = {(): 0.0}
        for t in range(enc_proj.shape[0]):
            row = slice_(enc_proj, (slice(t, t + 1), slice(None)))
            finished: Dict[Tuple[int, ...], float] = {}
            active = dict(beam)
            for n in range(max_symbols + 1):
                if not active:
                    break
                extended: Dict[Tuple[int, ...], float] = {}
                for tokens, score in active.items():
                    log_probs = joint_step(row, tokens)
                    _keep_max(finished, tokens, score + float(log_probs[self.blank_id]))
                    if n < max_symbols and len(tokens) < max_len:
                        for k in range(self.vocab_size):
                            if k != self.blank_id:
                                _keep_max(extended, tokens + (k,), score + float(log_probs[k]))
                pool = ([(s, tokens, 0) for tokens, s in finished.items()]
                        + [(s, tokens, 1) for tokens, s in extended.items()])
                pool.sort(key=lambda item: (-item[0], item[1], item[2]))
                kept = pool[:width]
                finished = {tokens: s for s, tokens, flag in kept if flag == 0}
                active = {tokens: s for s, tokens, flag in kept if flag == 1}
            beam = finished
        return beam

    def decode(self, enc: EncoderOutput, beam: int = 1, max_symbols: int = 3,
               max_output_length: Optional[int] = None) -> FirstPassResult:
        """n-best label sequences ranked by best-alignment log-probability.

        Widths 1..beam are searched and merged, so a wider beam never loses
        a hypothesis found by a narrower one; beam=1 is the greedy rollout.
        """
        if beam < 1:
            raise DecodeError(f"beam must be >= 1, got {beam}")
        max_len = self.max_label_length if max_output_length is None else max_output_length
        with no_grad():
            enc_proj = matmul(enc.frames, self.joint.w_enc)
            cache = {(): self.prediction.step(self.blank_id, self.prediction.initial_state())}
            merged: Dict[Tuple[int, ...], float] = {}
            for width in range(1, beam + 1):
                for tokens, score in self._search(enc_proj, width, max_symbols, max_len, cache).items():
                    _keep_max(merged, tokens, score)
        ranked = sorted(merged.items(), key=lambda item: (-item[1], item[0]))[:beam]
        return FirstPassResult([Hypothesis(tokens, score) for tokens, score in ranked])


def _keep_max(table: Dict[Tuple[int, ...], float], key: Tuple[int, ...], score: float):
    if key not in table or score > table[key]:
        table[key] = score


def encode(model: RnntModel, features) -> EncoderOutput:
    return model.encode(features)


def rnnt_loss(model: RnntModel, enc: EncoderOutput, labels: Sequence[int]) -> Tensor:
    return model.loss(enc, labels)


def rnnt_decode(model: RnntModel, enc: EncoderOutput, beam: int = 1, max_symbols: int = 3,
                max_output_length: Optional[int] = None) -> FirstPassResult:
    return model.decode(enc, beam, max_symbols, max_output_length)

"""
Neural building blocks on top of the autodiff tape: projections, embeddings,
LSTM layers with optional output projection, bidirectional wrapping, frame
stacking time reduction and multi-head attention.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (Tensor, add, concat, embed_lookup, init_uniform, matmul, mul,
                       reshape, sigmoid, slice_, softmax, tanh, transpose)
from .errors import ShapeError

LstmState = Tuple[Tensor, Tensor]


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, init_scale: float = 0.1):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = init_uniform(rng, (in_dim, out_dim), init_scale)
        self.bias = init_uniform(rng, (out_dim,), init_scale) if bias else None

    def params(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class Embedding:
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator, init_scale: float = 0.1):
        self.table = init_uniform(rng, (num_embeddings, dim), init_scale)

    def params(self) -> List[Tensor]:
        return [self.table]

    def __call__(self, ids: Sequence[int]) -> Tensor:
        return embed_lookup(self.table, ids)


# ========================================
# LSTM
# ========================================

class LstmLayer:
    """Unidirectional LSTM with an optional linear projection of the output.

    Gates are laid out [input, forget, cell, output] along the 4H axis.
    The recurrent input is the projected output when a projection exists.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator,
                 projection_dim: Optional[int] = None, init_scale: float = 0.1):
        if min(input_dim, hidden_dim) <= 0 or (projection_dim is not None and projection_dim <= 0):
            raise ShapeError("lstm", [(input_dim, hidden_dim, projection_dim or 0)], "dims must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.projection_dim = projection_dim
        self.output_dim = projection_dim or hidden_dim
        self.w_input = init_uniform(rng, (input_dim, 4 * hidden_dim), init_scale)
        self.w_recurrent = init_uniform(rng, (self.output_dim, 4 * hidden_dim), init_scale)
        self.bias = init_uniform(rng, (4 * hidden_dim,), init_scale)
        self.w_projection = (init_uniform(rng, (hidden_dim, projection_dim), init_scale)
                             if projection_dim else None)

    def params(self) -> List[Tensor]:
        params = [self.w_input, self.w_recurrent, self.bias]
        return params + ([self.w_projection] if self.w_projection is not None else [])

    def initial_state(self) -> LstmState:
        return Tensor(np.zeros((1, self.output_dim))), Tensor(np.zeros((1, self.hidden_dim)))

    def _cell(self, gates_in: Tensor, state: LstmState) -> Tuple[Tensor, LstmState]:
        h_prev, c_prev = state
        gates = add(add(gates_in, matmul(h_prev, self.w_recurrent)), self.bias)
        size = self.hidden_dim
        i = sigmoid(slice_(gates, (slice(None), slice(0, size))))
        f = sigmoid(slice_(gates, (slice(None), slice(size, 2 * size))))
        g = tanh(slice_(gates, (slice(None), slice(2 * size, 3 * size))))
        o = sigmoid(slice_(gates, (slice(None), slice(3 * size, 4 * size))))
        c = add(mul(f, c_prev), mul(i, g))
        m = mul(o, tanh(c))
        h = matmul(m, self.w_projection) if self.w_projection is not None else m
        return h, (h, c)

    def step(self, x: Tensor, state: Optional[LstmState] = None) -> Tuple[Tensor, LstmState]:
        """Advance one frame; `x` is 1×input_dim."""
        if x.shape != (1, self.input_dim):
            raise ShapeError("lstm_step", [x.shape, (1, self.input_dim)])
        return self._cell(matmul(x, self.w_input), state or self.initial_state())


def lstm_forward(layer: LstmLayer, seq: Tensor,
                 init_state: Optional[LstmState] = None) -> Tuple[Tensor, LstmState]:
    """Run `layer` over a T×D sequence; returns the T×P outputs and final state."""
    if seq.data.ndim != 2 or seq.shape[1] != layer.input_dim:
        raise ShapeError("lstm_forward", [seq.shape, (seq.shape[0] if seq.data.ndim else 0, layer.input_dim)])
    state = init_state or layer.initial_state()
    if seq.shape[0] == 0:
        return Tensor(np.zeros((0, layer.output_dim))), state
    projected = matmul(seq, layer.w_input)
    outputs = []
    for t in range(seq.shape[0]):
        out, state = layer._cell(slice_(projected, (slice(t, t + 1), slice(None))), state)
        outputs.append(out)
    return concat(outputs, axis=0), state


def reverse_time(seq: Tensor) -> Tensor:
    return slice_(seq, np.arange(seq.shape[0] - 1, -1, -1))


def bilstm_forward(fwd: LstmLayer, bwd: LstmLayer, seq: Tensor) -> Tensor:
    """Concatenate a forward pass with the time-reversed pass of `bwd`; T×(P_f+P_b)."""
    if fwd.input_dim != bwd.input_dim:
        raise ShapeError("bilstm_forward", [(fwd.input_dim,), (bwd.input_dim,)], "layers disagree on input_dim")
    forward_out, _ = lstm_forward(fwd, seq)
    backward_out, _ = lstm_forward(bwd, reverse_time(seq))
    return concat([forward_out, reverse_time(backward_out)], axis=1)


# ========================================
# TIME REDUCTION
# ========================================

@dataclass(frozen=True)
class TimeReduction:
    factor: int = 2

    def output_length(self, length: int) -> int:
        return -(-length // self.factor)


def time_reduce(tr: TimeReduction, seq: Tensor) -> Tensor:
    """Stack each run of `factor` frames into one; T×D → ceil(T/f)×(f·D).

    A trailing partial run is zero-padded on the right.
    """
    if seq.data.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError("time_reduce", [seq.shape], "need at least one frame")
    length, dim = seq.shape
    pad = (-length) % tr.factor
    if pad:
        seq = concat([seq, Tensor(np.zeros((pad, dim)))], axis=0)
    return reshape(seq, (tr.output_length(length), tr.factor * dim))


# ========================================
# MULTI-HEAD ATTENTION
# ========================================

@dataclass
class AttentionMemory:
    """Keys and values already projected into the attention space."""
    keys: Tensor
    values: Tensor

    @property
    def length(self) -> int:
        return self.keys.shape[0]


class MultiHeadAttention:
    """Scaled dot-product attention split across `num_heads` heads."""

    def __init__(self, query_dim: int, key_dim: int, model_dim: int, num_heads: int,
                 rng: np.random.Generator, init_scale: float = 0.1):
        if num_heads <= 0 or model_dim % num_heads:
            raise ShapeError("attention", [(model_dim,), (num_heads,)], "num_heads must divide model_dim")
        self.query_dim = query_dim
        self.key_dim = key_dim
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.w_query = init_uniform(rng, (query_dim, model_dim), init_scale)
        self.w_key = init_uniform(rng, (key_dim, model_dim), init_scale)
        self.w_value = init_uniform(rng, (key_dim, model_dim), init_scale)
        self.w_output = init_uniform(rng, (model_dim, model_dim), init_scale)

    def params(self) -> List[Tensor]:
        return [self.w_query, self.w_key, self.w_value, self.w_output]

    def project_memory(self, keys: Tensor, values: Tensor) -> AttentionMemory:
        if keys.data.ndim != 2 or keys.shape[0] == 0:
            raise ShapeError("mha_attend", [keys.shape], "empty attention source")
        if keys.shape[0] != values.shape[0]:
            raise ShapeError("mha_attend", [keys.shape, values.shape], "keys and values differ in length")
        return AttentionMemory(matmul(keys, self.w_key), matmul(values, self.w_value))

    def attend(self, query: Tensor, memory: AttentionMemory) -> Tuple[Tensor, List[np.ndarray]]:
        """Context (1×model_dim) for a 1×query_dim query, plus per-head weights."""
        if query.shape != (1, self.query_dim):
            raise ShapeError("mha_attend", [query.shape, (1, self.query_dim)])
        q = matmul(query, self.w_query)
        scale = Tensor(1.0 / math.sqrt(self.head_dim))
        heads, weights = [], []
        for h in range(self.num_heads):
            cols = (slice(None), slice(h * self.head_dim, (h + 1) * self.head_dim))
            scores = mul(matmul(slice_(q, cols), transpose(slice_(memory.keys, cols))), scale)
            attn = softmax(scores, axis=-1)
            weights.append(attn.data[0].copy())
            heads.append(matmul(attn, slice_(memory.values, cols)))
        return matmul(concat(heads, axis=1), self.w_output), weights


def mha_attend(attn: MultiHeadAttention, query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    return attn.attend(query, attn.project_memory(keys, values))[0]

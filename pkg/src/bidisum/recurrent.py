"""LSTM cell, directional sequence runners and embedding lookup.

All tensors carry a leading batch axis: an input step is ``[B, D]`` and a
state is a pair of ``[B, H]`` tensors. A single sequence is simply ``B == 1``.

Gate blocks are packed in the order (input, forget, cell, output) along the
first axis of both weight matrices and the bias, so ``input_weights`` is
``[4H, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    reshape,
    sigmoid,
    slice_,
    tanh,
    transpose,
)

Direction = Literal["forward", "backward"]
GATE_ORDER = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    input_weights: Tensor  # [4H, D]
    recurrent_weights: Tensor  # [4H, H]
    bias: Tensor  # [4H]

    def __post_init__(self):
        four_h, d = self.input_weights.shape
        if four_h % 4 or four_h == 0 or d == 0:
            raise ValueError(f"input_weights must be [4H, D], got {self.input_weights.shape}")
        h = four_h // 4
        if self.recurrent_weights.shape != (four_h, h):
            raise ValueError(
                f"recurrent_weights {self.recurrent_weights.shape} inconsistent with "
                f"input_weights {self.input_weights.shape}"
            )
        if self.bias.shape != (four_h,):
            raise ValueError(f"bias {self.bias.shape} inconsistent with hidden size {h}")

    @property
    def hidden_dim(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "input_weights": self.input_weights,
            "recurrent_weights": self.recurrent_weights,
            "bias": self.bias,
        }


@dataclass
class LstmState:
    h: Tensor  # [B, H]
    c: Tensor  # [B, H]


@dataclass
class PreparedLstm:
    """Transposed weights, built once per forward pass and reused per step."""

    wx: Tensor  # [D, 4H]
    wh: Tensor  # [H, 4H]
    bias: Tensor
    hidden_dim: int
    input_dim: int


def prepare(params: LstmParams | PreparedLstm) -> PreparedLstm:
    if isinstance(params, PreparedLstm):
        return params
    return PreparedLstm(
        transpose(params.input_weights),
        transpose(params.recurrent_weights),
        params.bias,
        params.hidden_dim,
        params.input_dim,
    )


def init_lstm(rng: np.random.Generator, input_dim: int, hidden_dim: int,
              scale: float = 0.1, forget_bias: float = 1.0) -> LstmParams:
    h = hidden_dim
    bias = np.zeros(4 * h)
    bias[h:2 * h] = forget_bias
    return LstmParams(
        Tensor(rng.uniform(-scale, scale, (4 * h, input_dim)), requires_grad=True),
        Tensor(rng.uniform(-scale, scale, (4 * h, h)), requires_grad=True),
        Tensor(bias, requires_grad=True),
    )


def zero_state(batch: int, hidden_dim: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden_dim))), Tensor(np.zeros((batch, hidden_dim))))


def lstm_step(x: Tensor, state: LstmState, params: LstmParams | PreparedLstm) -> LstmState:
    p = prepare(params)
    H = p.hidden_dim
    if x.shape[-1] != p.input_dim:
        raise ValueError(f"LSTM input width {x.shape[-1]} != expected {p.input_dim}")
    if state.h.shape[-1] != H or state.c.shape[-1] != H:
        raise ValueError(f"LSTM state width {state.h.shape[-1]} != hidden size {H}")
    z = add(add(matmul(x, p.wx), matmul(state.h, p.wh)), p.bias)
    i = sigmoid(slice_(z, (Ellipsis, slice(0, H))))
    f = sigmoid(slice_(z, (Ellipsis, slice(H, 2 * H))))
    g = tanh(slice_(z, (Ellipsis, slice(2 * H, 3 * H))))
    o = sigmoid(slice_(z, (Ellipsis, slice(3 * H, 4 * H))))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def _carry(new: Tensor, old: Tensor, keep_new: Tensor, keep_old: Tensor) -> Tensor:
    return add(mul(new, keep_new), mul(old, keep_old))


def run_sequence(inputs, init: LstmState, params: LstmParams | PreparedLstm,
                 direction: Direction = "forward",
                 mask: np.ndarray | None = None) -> tuple[list[LstmState], LstmState]:
    """Run the cell over ``inputs`` left-to-right or right-to-left.

    ``inputs`` is a list of ``[B, D]`` tensors or one ``[B, T, D]`` tensor.
    ``states[i]`` always belongs to input position ``i``; ``final`` is the
    last state visited. With a ``[B, T]`` 0/1 ``mask``, masked positions carry
    the previous state through unchanged (used for right-padded batches).
    """
    if isinstance(inputs, Tensor):
        steps = [slice_(inputs, (slice(None), t)) for t in range(inputs.shape[1])]
    else:
        steps = list(inputs)
    if not steps:
        raise ValueError("run_sequence needs at least one input")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    p = prepare(params)
    order = range(len(steps)) if direction == "forward" else range(len(steps) - 1, -1, -1)
    if mask is not None and np.all(mask == 1):
        mask = None
    states: list[LstmState | None] = [None] * len(steps)
    state = init
    for t in order:
        new = lstm_step(steps[t], state, p)
        if mask is not None:
            m = Tensor(mask[:, t:t + 1].astype(np.float64))
            keep = Tensor(1.0 - m.data)
            new = LstmState(_carry(new.h, state.h, m, keep), _carry(new.c, state.c, m, keep))
        states[t] = new
        state = new
    return states, state


def embed(token_ids, table: Tensor) -> Tensor:
    """Look up rows of ``table``; output shape is ``ids.shape + (E,)``."""
    return gather_rows(table, token_ids)


def stack_hidden(states: Sequence[LstmState]) -> Tensor:
    """``[B, T, H]`` tensor of the hidden vectors of ``states``."""
    B, H = states[0].h.shape
    return concat([reshape(s.h, (B, 1, H)) for s in states], axis=1)


__all__ = [
    "Direction",
    "GATE_ORDER",
    "LstmParams",
    "LstmState",
    "PreparedLstm",
    "prepare",
    "init_lstm",
    "zero_state",
    "lstm_step",
    "run_sequence",
    "embed",
    "stack_hidden",
]

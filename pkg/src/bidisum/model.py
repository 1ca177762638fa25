"""Bidirectional attentional encoder-decoder.

A bidirectional LSTM encoder reads the (optionally reversed) source. Two
attentional LSTM decoders share the encoder memory: the forward decoder
generates left-to-right starting from the backward encoder's final state,
the backward decoder generates right-to-left starting from the forward
encoder's final state.

Every function works on a batch axis; single-sequence helpers wrap ``B == 1``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from typing import Literal, Sequence

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    log_softmax,
    matmul,
    mul,
    reshape,
    slice_,
    softmax,
    sum_,
    tanh,
    transpose,
)
from .recurrent import (
    LstmParams,
    LstmState,
    PreparedLstm,
    embed,
    init_lstm,
    lstm_step,
    prepare,
    run_sequence,
    stack_hidden,
    zero_state,
)

PAD, UNK, START, STOP = 0, 1, 2, 3
NUM_SPECIAL = 4
SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>")

Direction = Literal["forward", "backward"]
DIRECTIONS: tuple[Direction, Direction] = ("forward", "backward")

# energies at padded source positions; exp() of this underflows to exactly 0
_MASKED_ENERGY = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 50000
    embedding_dim: int = 128
    hidden_dim: int = 256
    attention_dim: int | None = None  # None means 2 * hidden_dim
    reverse_source: bool = True
    max_source_len: int = 400
    max_target_len: int = 100
    share_attention: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "embedding_dim", "hidden_dim", "max_source_len", "max_target_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.attention_dim is not None and self.attention_dim <= 0:
            raise ValueError("attention_dim must be positive")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError(f"vocab_size must exceed the {NUM_SPECIAL} reserved tokens")

    @property
    def attn_dim(self) -> int:
        return self.attention_dim if self.attention_dim is not None else 2 * self.hidden_dim

    @property
    def decoder_input_dim(self) -> int:
        return self.embedding_dim + 2 * self.hidden_dim

    @property
    def readout_dim(self) -> int:
        return 3 * self.hidden_dim + self.embedding_dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in ("reverse_source", "share_attention"):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif f.name == "attention_dim":
                v = None if v in (None, "", "None", "none") else int(v)
            else:
                v = int(v)
            kwargs[f.name] = v
        return cls(**kwargs)


@dataclass
class AttentionParams:
    w_dec: Tensor  # [A, H]
    w_enc: Tensor  # [A, 2H]
    v: Tensor  # [A]
    bias: Tensor  # [A]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_dec": self.w_dec, "w_enc": self.w_enc, "v": self.v, "bias": self.bias}


@dataclass
class OutputParams:
    weights: Tensor  # [V, H + 2H + E]
    bias: Tensor  # [V]

    def tensors(self) -> dict[str, Tensor]:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class ModelParams:
    embedding: Tensor  # [V, E], shared by encoder and both decoders
    enc_fwd: LstmParams
    enc_bwd: LstmParams
    dec_fwd: LstmParams
    dec_bwd: LstmParams
    attn_fwd: AttentionParams
    attn_bwd: AttentionParams
    out_fwd: OutputParams
    out_bwd: OutputParams

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every learnable tensor once, in a fixed order."""
        out = [("embedding", self.embedding)]
        for name in ("enc_fwd", "enc_bwd", "dec_fwd", "dec_bwd", "attn_fwd", "attn_bwd",
                     "out_fwd", "out_bwd"):
            group = getattr(self, name)
            if name == "attn_bwd" and group is self.attn_fwd:
                continue
            out.extend((f"{name}.{k}", t) for k, t in group.tensors().items())
        return out

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)

    def lstm(self, role: str, direction: Direction) -> LstmParams:
        return getattr(self, f"{role}_{'fwd' if direction == 'forward' else 'bwd'}")

    def attention(self, direction: Direction) -> AttentionParams:
        return self.attn_fwd if direction == "forward" else self.attn_bwd

    def output(self, direction: Direction) -> OutputParams:
        return self.out_fwd if direction == "forward" else self.out_bwd

    def check_shapes(self, config: ModelConfig) -> None:
        for name, shape in expected_shapes(config).items():
            t = dict(self.named_tensors()).get(name)
            if t is None:
                raise ValueError(f"missing parameter {name}")
            if t.shape != shape:
                raise ValueError(f"parameter {name} has shape {t.shape}, config expects {shape}")
            t.check_finite()


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, E, H, A = config.vocab_size, config.embedding_dim, config.hidden_dim, config.attn_dim
    shapes = {"embedding": (V, E)}
    for name, d in (("enc_fwd", E), ("enc_bwd", E),
                    ("dec_fwd", config.decoder_input_dim), ("dec_bwd", config.decoder_input_dim)):
        shapes[f"{name}.input_weights"] = (4 * H, d)
        shapes[f"{name}.recurrent_weights"] = (4 * H, H)
        shapes[f"{name}.bias"] = (4 * H,)
    for name in ("attn_fwd",) if config.share_attention else ("attn_fwd", "attn_bwd"):
        shapes[f"{name}.w_dec"] = (A, H)
        shapes[f"{name}.w_enc"] = (A, 2 * H)
        shapes[f"{name}.v"] = (A,)
        shapes[f"{name}.bias"] = (A,)
    for name in ("out_fwd", "out_bwd"):
        shapes[f"{name}.weights"] = (V, config.readout_dim)
        shapes[f"{name}.bias"] = (V,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    V, E, H, A = config.vocab_size, config.embedding_dim, config.hidden_dim, config.attn_dim
    lstm = lambda d: 4 * H * d + 4 * H * H + 4 * H  # noqa: E731
    attention = A * H + A * 2 * H + 2 * A
    output = V * config.readout_dim + V
    n_attn = 1 if config.share_attention else 2
    return (V * E + 2 * lstm(E) + 2 * lstm(config.decoder_input_dim)
            + n_attn * attention + 2 * output)


def init_params(config: ModelConfig, seed: int = 0, scale: float = 0.1,
                forget_bias: float = 1.0) -> ModelParams:
    """Uniform(-scale, scale) weights, zero biases except the forget gates."""
    rng = np.random.default_rng(seed)
    V, E, H, A = config.vocab_size, config.embedding_dim, config.hidden_dim, config.attn_dim
    u = lambda *shape: Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)  # noqa: E731
    zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)  # noqa: E731
    embedding = u(V, E)
    enc_fwd = init_lstm(rng, E, H, scale, forget_bias)
    enc_bwd = init_lstm(rng, E, H, scale, forget_bias)
    dec_fwd = init_lstm(rng, config.decoder_input_dim, H, scale, forget_bias)
    dec_bwd = init_lstm(rng, config.decoder_input_dim, H, scale, forget_bias)
    attn_fwd = AttentionParams(u(A, H), u(A, 2 * H), u(A), zeros(A))
    attn_bwd = attn_fwd if config.share_attention else AttentionParams(u(A, H), u(A, 2 * H), u(A), zeros(A))
    out_fwd = OutputParams(u(V, config.readout_dim), zeros(V))
    out_bwd = OutputParams(u(V, config.readout_dim), zeros(V))
    params = ModelParams(embedding, enc_fwd, enc_bwd, dec_fwd, dec_bwd,
                         attn_fwd, attn_bwd, out_fwd, out_bwd)
    for name, t in params.named_tensors():
        t.name = name
    return params


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    fwd_states: list[LstmState]
    bwd_states: list[LstmState]
    memory: Tensor  # [B, T, 2H], position j = concat(fwd h_j, bwd h_j)
    final_fwd: LstmState
    final_bwd: LstmState
    mask: np.ndarray | None = None  # [B, T] 0/1, None when unpadded
    _keys: dict = field(default_factory=dict, repr=False)

    @property
    def length(self) -> int:
        return self.memory.shape[1]

    def attention_keys(self, attn: AttentionParams) -> Tensor:
        """``W_enc @ memory[j]`` for every position; cached per parameter set."""
        key = id(attn)
        if key not in self._keys:
            self._keys[key] = (attn, matmul(self.memory, transpose(attn.w_enc)))
        return self._keys[key][1]


def _as_id_matrix(token_ids) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    return ids, np.full(ids.shape[0], ids.shape[1])


def encode_batch(src: np.ndarray, lengths: Sequence[int], params: ModelParams,
                 config: ModelConfig) -> EncoderOutput:
    """Encode a right-padded ``[B, T]`` id matrix."""
    src = np.asarray(src, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if src.ndim != 2 or src.shape[1] == 0 or np.any(lengths < 1):
        raise ValueError("encode needs at least one source token per example")
    if np.any(lengths > config.max_source_len):
        raise ValueError(f"source longer than max_source_len={config.max_source_len}")
    B, T = src.shape
    if config.reverse_source:
        src = src.copy()
        for b, n in enumerate(lengths):
            src[b, :n] = src[b, :n][::-1]
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    x = embed(src, params.embedding)
    H = config.hidden_dim
    fwd_states, final_fwd = run_sequence(x, zero_state(B, H), params.enc_fwd, "forward", mask)
    bwd_states, final_bwd = run_sequence(x, zero_state(B, H), params.enc_bwd, "backward", mask)
    memory = concat([stack_hidden(fwd_states), stack_hidden(bwd_states)], axis=2)
    return EncoderOutput(fwd_states, bwd_states, memory, final_fwd, final_bwd,
                         None if np.all(mask == 1) else mask)


def encode(token_ids: Sequence[int], params: ModelParams, config: ModelConfig) -> EncoderOutput:
    ids, lengths = _as_id_matrix(token_ids)
    if ids.shape[1] == 0:
        raise ValueError("encode needs at least one source token")
    return encode_batch(ids, lengths, params, config)


def init_decoders(enc: EncoderOutput) -> tuple[LstmState, LstmState]:
    """Cross-initialisation: (forward decoder start, backward decoder start)."""
    return enc.final_bwd, enc.final_fwd


# ---------------------------------------------------------------------------
# attention and decoder step
# ---------------------------------------------------------------------------


def attend(dec_state: LstmState, enc: EncoderOutput, attn: AttentionParams,
           w_dec_t: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Additive attention over the encoder memory.

    The decoder batch may be larger than the encoder batch when the encoder
    batch is 1 (beam hypotheses share one source). Returns ``(alpha, context)``
    with shapes ``[B, T]`` and ``[B, 2H]``.
    """
    h = dec_state.h
    A = attn.v.shape[0]
    if h.shape[-1] != attn.w_dec.shape[1]:
        raise ValueError(f"decoder state width {h.shape[-1]} != attention input {attn.w_dec.shape[1]}")
    keys = enc.attention_keys(attn)  # [Be, T, A]
    if w_dec_t is None:
        w_dec_t = transpose(attn.w_dec)
    B, T = h.shape[0], enc.length
    query = reshape(add(matmul(h, w_dec_t), attn.bias), (B, 1, A))
    hidden = tanh(add(keys, query))  # [B, T, A]
    energies = reshape(matmul(hidden, reshape(attn.v, (A, 1))), (B, T))
    if enc.mask is not None:
        energies = add(energies, Tensor((1.0 - enc.mask) * _MASKED_ENERGY))
    alpha = softmax(energies)
    context = sum_(mul(reshape(alpha, (B, T, 1)), enc.memory), axis=1)
    return alpha, context


@dataclass
class PreparedDecoder:
    direction: Direction
    lstm: PreparedLstm
    attn: AttentionParams
    w_dec_t: Tensor
    w_out_t: Tensor
    b_out: Tensor
    embedding: Tensor


def prepare_decoder(params: ModelParams, direction: Direction) -> PreparedDecoder:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    attn = params.attention(direction)
    out = params.output(direction)
    return PreparedDecoder(direction, prepare(params.lstm("dec", direction)), attn,
                           transpose(attn.w_dec), transpose(out.weights), out.bias,
                           params.embedding)


@dataclass
class DecoderStepOutput:
    log_dist: Tensor  # [B, V]
    new_state: LstmState
    alpha: Tensor  # [B, T]
    context: Tensor  # [B, 2H]


def _step(dec: PreparedDecoder, y_emb: Tensor, state: LstmState, prev_context: Tensor,
          enc: EncoderOutput) -> DecoderStepOutput:
    new_state = lstm_step(concat([y_emb, prev_context], axis=-1), state, dec.lstm)
    alpha, context = attend(new_state, enc, dec.attn, dec.w_dec_t)
    readout = concat([new_state.h, context, y_emb], axis=-1)
    logits = add(matmul(readout, dec.w_out_t), dec.b_out)
    return DecoderStepOutput(log_softmax(logits), new_state, alpha, context)


def decoder_step(direction: Direction | PreparedDecoder, y_ctx, state: LstmState,
                 prev_context: Tensor, enc: EncoderOutput,
                 params: ModelParams | None = None) -> DecoderStepOutput:
    """One decoder transition conditioned on the neighbouring token ``y_ctx``.

    ``y_ctx`` is the previous token for the forward decoder and the next token
    for the backward decoder (an int or one id per batch row).
    """
    dec = direction if isinstance(direction, PreparedDecoder) else prepare_decoder(params, direction)
    ids = np.atleast_1d(np.asarray(y_ctx, dtype=np.int64))
    return _step(dec, embed(ids, dec.embedding), state, prev_context, enc)


def initial_context(batch: int, config: ModelConfig) -> Tensor:
    return Tensor(np.zeros((batch, 2 * config.hidden_dim)))


# ---------------------------------------------------------------------------
# teacher-forced scoring
# ---------------------------------------------------------------------------


def decoder_io(targets: Sequence[Sequence[int]], direction: Direction) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Context ids, predicted ids and mask for teacher forcing.

    Each sequence of length ``L`` yields ``L + 1`` predictions: its tokens in
    generation order followed by the closing sentinel (STOP going forward,
    START going backward). Rows are right-padded.
    """
    if not targets or any(len(t) == 0 for t in targets):
        raise ValueError("target sequences must be non-empty")
    opener, closer = (START, STOP) if direction == "forward" else (STOP, START)
    S = max(len(t) for t in targets) + 1
    ctx = np.full((len(targets), S), PAD, dtype=np.int64)
    gold = np.full((len(targets), S), PAD, dtype=np.int64)
    mask = np.zeros((len(targets), S))
    for b, seq in enumerate(targets):
        seq = list(seq) if direction == "forward" else list(seq)[::-1]
        n = len(seq)
        ctx[b, 0] = opener
        ctx[b, 1:n + 1] = seq
        gold[b, :n] = seq
        gold[b, n] = closer
        mask[b, :n + 1] = 1.0
    return ctx, gold, mask


def teacher_forced_dists(enc: EncoderOutput, targets: Sequence[Sequence[int]],
                         params: ModelParams, config: ModelConfig,
                         direction: Direction) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Teacher-forced log-distributions ``[B, S, V]`` in generation order, with the
    gold ids ``[B, S]`` and the prediction mask."""
    ctx, gold, mask = decoder_io(targets, direction)
    if np.any(gold >= config.vocab_size) or np.any(gold < 0):
        bad = gold[(gold >= config.vocab_size) | (gold < 0)][0]
        raise IndexError(f"token id {int(bad)} out of range for vocabulary of {config.vocab_size}")
    if ctx.shape[1] - 1 > config.max_target_len:
        raise ValueError(f"target longer than max_target_len={config.max_target_len}")
    B, S = ctx.shape
    dec = prepare_decoder(params, direction)
    fwd_init, bwd_init = init_decoders(enc)
    state = fwd_init if direction == "forward" else bwd_init
    context = initial_context(B, config)
    embedded = embed(ctx, dec.embedding)  # [B, S, E]
    V = config.vocab_size
    steps = []
    for s in range(S):
        out = _step(dec, slice_(embedded, (slice(None), s)), state, context, enc)
        state, context = out.new_state, out.context
        steps.append(reshape(out.log_dist, (B, 1, V)))
    return concat(steps, axis=1), gold, mask


def directional_logprobs(enc: EncoderOutput, targets: Sequence[Sequence[int]],
                         params: ModelParams, config: ModelConfig,
                         direction: Direction) -> tuple[Tensor, np.ndarray]:
    """Log-probabilities of the reference predictions, ``[B, S]`` in generation order.

    Padded positions hold garbage; multiply by the returned mask before use.
    """
    dists, gold, mask = teacher_forced_dists(enc, targets, params, config, direction)
    onehot = np.zeros(dists.shape)
    np.put_along_axis(onehot, gold[:, :, None], 1.0, axis=2)
    picked = sum_(mul(dists, Tensor(onehot)), axis=2)
    return picked, mask


def sequence_logprob(direction: Direction, target_tokens: Sequence[int], x: Sequence[int],
                     params: ModelParams, config: ModelConfig,
                     include_end: bool = True) -> tuple[float, list[float]]:
    """Teacher-forced log-probability of ``target_tokens`` given source ``x``.

    ``per_token[i]`` scores target position ``i`` in natural order. With
    ``include_end`` the closing-sentinel term is appended as a final entry.
    ``total`` is the exactly rounded sum of ``per_token``.
    """
    target = list(target_tokens)
    if not target:
        raise ValueError("target must be non-empty")
    enc = encode(x, params, config)
    picked, _ = directional_logprobs(enc, [target], params, config, direction)
    values = picked.data[0].tolist()
    n = len(target)
    per_token = values[:n] if direction == "forward" else values[:n][::-1]
    if include_end:
        per_token.append(values[n])
    return math.fsum(per_token), per_token


def joint_logprob(target: Sequence[int], x: Sequence[int], params: ModelParams,
                  config: ModelConfig, include_end: bool = True) -> float:
    fwd, _ = sequence_logprob("forward", target, x, params, config, include_end)
    bwd, _ = sequence_logprob("backward", target, x, params, config, include_end)
    return fwd + bwd


__all__ = [
    "PAD", "UNK", "START", "STOP", "NUM_SPECIAL", "SPECIAL_TOKENS", "DIRECTIONS",
    "ModelConfig", "AttentionParams", "OutputParams", "ModelParams", "EncoderOutput",
    "DecoderStepOutput", "PreparedDecoder",
    "expected_shapes", "count_parameters", "init_params",
    "encode", "encode_batch", "init_decoders", "attend", "prepare_decoder",
    "decoder_step", "initial_context", "decoder_io", "teacher_forced_dists", "directional_logprobs",
    "sequence_logprob", "joint_logprob",
]

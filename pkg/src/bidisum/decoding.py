"""Beam search in either direction, bidirectional beam search, and a brute-force oracle.

Scoring conventions shared by every search here:

* A finished sequence ``y_1..y_L`` is scored in one direction by the sum of
  its token log-probabilities plus the log-probability of the closing
  sentinel (STOP going forward, START going backward).
* Length normalisation divides that sum by ``L``; sentinels are not counted.
* The joint objective is ``gamma * fwd / L + (1 - gamma) * bwd / L``.
* Empty outputs are not allowed and a hypothesis that reaches ``max_steps``
  tokens must close on the next step.

Bidirectional beam search runs a backward beam search first, then a forward
beam search whose per-step ranking adds a backward estimate for each
candidate token ``v`` at position ``t``: the backward model's log-probability
of ``v`` given a retained backward beam's suffix after ``t``, plus that
suffix's own log-probabilities, averaged over the tokens covered. The best
beam per token is taken, so a step costs ``|B||V|`` for the forward
expansion plus ``|B||V|`` for the backward lookup, on top of the ``|B||V|``
spent in the backward search. Completed forward hypotheses are scored
exactly under the joint objective by running the backward decoder over them.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import (
    NUM_SPECIAL,
    PAD,
    START,
    STOP,
    UNK,
    Direction,
    EncoderOutput,
    ModelConfig,
    ModelParams,
    decoder_step,
    directional_logprobs,
    encode,
    init_decoders,
    initial_context,
    prepare_decoder,
)
from .numerics import Tensor, row_stable
from .recurrent import LstmState


class SearchBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    gamma: float = 0.7
    max_steps: int = 100
    length_normalize: bool = True
    forbid_unk: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class Hypothesis:
    tokens: list[int]  # natural left-to-right order, sentinels excluded
    per_token_logp: list[float]  # aligned with tokens
    cum_logp: float  # sum of per_token_logp plus end_logp
    state: LstmState | None
    context: Tensor | None
    finished: bool = False
    end_logp: float = 0.0
    score: float = -math.inf  # ranking score (normalised when configured)
    log_dists: list[np.ndarray] = field(default_factory=list, repr=False)  # generation order
    extras: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    def extend(self, direction: Direction, token: int, logp: float, state: LstmState,
               context: Tensor, log_dist: np.ndarray | None = None) -> "Hypothesis":
        if self.finished:
            raise ValueError("finished hypotheses cannot be extended")
        if direction == "forward":
            tokens, per_token = self.tokens + [token], self.per_token_logp + [logp]
        else:
            tokens, per_token = [token] + self.tokens, [logp] + self.per_token_logp
        dists = self.log_dists + [log_dist] if log_dist is not None else self.log_dists
        return Hypothesis(tokens, per_token, self.cum_logp + logp, state, context,
                          log_dists=dists)

    def finish(self, end_logp: float) -> "Hypothesis":
        if self.finished:
            raise ValueError("hypothesis is already finished")
        total = math.fsum(self.per_token_logp + [end_logp])
        return Hypothesis(list(self.tokens), list(self.per_token_logp), total, self.state,
                          self.context, True, end_logp, log_dists=self.log_dists)

    def normalized(self) -> float:
        return self.cum_logp / len(self.tokens) if self.tokens else self.cum_logp


@dataclass
class SearchStats:
    expansions: dict[int, int] = field(default_factory=dict)  # step -> candidate scores computed

    def add(self, step: int, n: int) -> None:
        self.expansions[step] = self.expansions.get(step, 0) + n


def _sentinels(direction: Direction) -> tuple[int, int]:
    return (START, STOP) if direction == "forward" else (STOP, START)


def _allowed_tokens(vocab_size: int, direction: Direction, forbid_unk: bool) -> np.ndarray:
    allowed = np.ones(vocab_size, dtype=bool)
    allowed[PAD] = False
    allowed[_sentinels(direction)[0]] = False
    if forbid_unk:
        allowed[UNK] = False
    return allowed


def generation_alphabet(vocab_size: int, forbid_unk: bool = False) -> list[int]:
    """Tokens a decoder may emit besides its closing sentinel."""
    return ([] if forbid_unk else [UNK]) + list(range(NUM_SPECIAL, vocab_size))


def _stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))


def _select(scores: np.ndarray, cum: np.ndarray, live: list[Hypothesis], direction: Direction,
            slots: int) -> list[tuple[int, int]]:
    """Top ``slots`` (row, token) pairs; ties go to higher raw log-prob, then
    the lexicographically smaller resulting sequence."""
    flat = scores.reshape(-1)
    finite = np.flatnonzero(np.isfinite(flat))
    if finite.size > slots:
        kth = np.partition(flat[finite], finite.size - slots)[finite.size - slots]
        finite = finite[flat[finite] >= kth]
    V = scores.shape[1]

    def key(idx):
        i, v = divmod(int(idx), V)
        seq = live[i].tokens + [v] if direction == "forward" else [v] + live[i].tokens
        return (-flat[idx], -cum[i, v], seq)

    return [divmod(int(idx), V) for idx in sorted(finite, key=key)[:slots]]


StepScorer = Callable[[int, list, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _plain_step_scores(t, live, cum, logp, allowed) -> np.ndarray:
    return np.where(allowed[None, :], cum / t, -np.inf)


def _run_beam(direction: Direction, enc: EncoderOutput, params: ModelParams, config: ModelConfig,
              beam: BeamConfig, step_scores: StepScorer = _plain_step_scores,
              final_score: Callable[[Hypothesis], float] | None = None,
              stats: SearchStats | None = None, keep_dists: bool = False) -> list[Hypothesis]:
    dec = prepare_decoder(params, direction)
    opener, closer = _sentinels(direction)
    fwd_init, bwd_init = init_decoders(enc)
    init = fwd_init if direction == "forward" else bwd_init
    live = [Hypothesis([], [], 0.0, init, initial_context(1, config))]
    finished: list[Hypothesis] = []
    base_allowed = _allowed_tokens(config.vocab_size, direction, beam.forbid_unk)
    if final_score is None:
        final_score = (lambda h: h.normalized()) if beam.length_normalize else (lambda h: h.cum_logp)

    for t in range(1, beam.max_steps + 2):
        if not live:
            break
        ctx_ids = [(h.tokens[-1] if direction == "forward" else h.tokens[0]) if h.tokens else opener
                   for h in live]
        state = LstmState(_stack_rows([h.state.h for h in live]), _stack_rows([h.state.c for h in live]))
        out = decoder_step(dec, ctx_ids, state, _stack_rows([h.context for h in live]), enc)
        logp = out.log_dist.data
        cum = np.array([h.cum_logp for h in live])[:, None] + logp
        allowed = base_allowed.copy()
        if t == 1:
            allowed[closer] = False
        if t == beam.max_steps + 1:
            allowed[:] = False
            allowed[closer] = True
        if stats is not None:
            stats.add(t, logp.size)
        scores = step_scores(t, live, cum, logp, allowed)
        next_live = []
        for i, v in _select(scores, cum, live, direction, beam.beam_size):
            h = live[i]
            if v == closer:
                done = h.finish(float(logp[i, v]))
                done.extras = dict(h.extras)
                done.score = final_score(done)
                finished.append(done)
            else:
                row = slice(i, i + 1)
                next_live.append(h.extend(
                    direction, v, float(logp[i, v]),
                    LstmState(Tensor(out.new_state.h.data[row]), Tensor(out.new_state.c.data[row])),
                    Tensor(out.context.data[row]),
                    logp[i] if keep_dists else None))
        live = next_live
    finished.sort(key=lambda h: (-h.score, -h.cum_logp, h.tokens))
    return finished[:beam.beam_size]


@row_stable()
def beam_search(direction: Direction, x: Sequence[int], params: ModelParams, config: ModelConfig,
                beam: BeamConfig = BeamConfig(), stats: SearchStats | None = None) -> list[Hypothesis]:
    """Up to ``beam_size`` finished hypotheses, best first.

    Backward search starts from STOP, grows hypotheses to the left and closes
    on START; tokens are stored in natural order either way.
    """
    enc = encode(x, params, config)
    return _run_beam(direction, enc, params, config, beam, stats=stats)


@row_stable()
def greedy_decode(x: Sequence[int], params: ModelParams, config: ModelConfig,
                  max_steps: int = 100, direction: Direction = "forward",
                  forbid_unk: bool = False) -> list[int]:
    """Arg-max chain: emit the most likely token until the closing sentinel."""
    enc = encode(x, params, config)
    dec = prepare_decoder(params, direction)
    opener, closer = _sentinels(direction)
    fwd_init, bwd_init = init_decoders(enc)
    state = fwd_init if direction == "forward" else bwd_init
    context = initial_context(1, config)
    allowed = _allowed_tokens(config.vocab_size, direction, forbid_unk)
    tokens: list[int] = []
    prev = opener
    for t in range(1, max_steps + 2):
        out = decoder_step(dec, prev, state, context, enc)
        mask = allowed.copy()
        if t == 1:
            mask[closer] = False
        if t == max_steps + 1:
            mask[:] = False
            mask[closer] = True
        v = int(np.argmax(np.where(mask, out.log_dist.data[0], -np.inf)))
        if v == closer:
            break
        tokens.append(v)
        prev, state, context = v, out.new_state, out.context
    return tokens if direction == "forward" else tokens[::-1]


# ---------------------------------------------------------------------------
# bidirectional beam search
# ---------------------------------------------------------------------------


def suffix_sums(per_token_logp: Sequence[float]) -> list[float]:
    """``out[p] = sum(per_token_logp[p-1:])`` for 1-based ``p``; ``out[L+1] = 0``."""
    L = len(per_token_logp)
    return [0.0] + [math.fsum(per_token_logp[p - 1:]) for p in range(1, L + 1)] + [0.0]


def bbs_joint_score(prefix: Hypothesis, suffix_scores: Sequence[float], t: int, gamma: float,
                    backward_len: int) -> float:
    """Joint score of a forward prefix paired with a backward beam's suffix after ``t``.

    ``suffix_scores`` comes from :func:`suffix_sums` over a backward beam of
    ``backward_len`` tokens. The result is ``gamma`` times the prefix's
    per-token average plus ``1 - gamma`` times the average over the suffix
    positions ``t+1..backward_len``; a side with no tokens contributes zero.
    """
    fwd = prefix.cum_logp / len(prefix.tokens) if prefix.tokens else 0.0
    suffix_len = backward_len - t
    bwd = suffix_scores[t + 1] / suffix_len if suffix_len > 0 else 0.0
    return gamma * fwd + (1.0 - gamma) * bwd


def joint_objective(fwd_logp: float, bwd_logp: float, length: int, gamma: float) -> float:
    return gamma * (fwd_logp / length) + (1.0 - gamma) * (bwd_logp / length)


class BackwardTable:
    """Per-position backward estimates derived from a fixed set of backward beams.

    ``estimate(t)`` returns, for every token ``v``, the best over beams ``b``
    with ``len(b) >= t`` of ``(log p_bwd(v at t | b[t+1:]) + sum(b[t+1:])) /
    (len(b) - t + 1)``, and which beam achieved it.
    """

    def __init__(self, beams: Sequence[Hypothesis], vocab_size: int):
        self.beams = list(beams)
        self.vocab_size = vocab_size
        self._suffix = [suffix_sums(b.per_token_logp) for b in self.beams]
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def covering(self, t: int) -> int:
        return sum(1 for b in self.beams if len(b) >= t)

    def estimate(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if t not in self._cache:
            best = np.full(self.vocab_size, -np.inf)
            which = np.full(self.vocab_size, -1)
            for idx, (b, suf) in enumerate(zip(self.beams, self._suffix)):
                L = len(b)
                if L < t:
                    continue
                dist = b.log_dists[L - t]  # generated at backward step L - t + 1
                cand = (dist + suf[t + 1]) / (L - t + 1)
                better = cand > best
                best = np.where(better, cand, best)
                which = np.where(better, idx, which)
            if np.all(which < 0):
                best[:] = 0.0
            self._cache[t] = (best, which)
        return self._cache[t]


def _backward_totals(enc: EncoderOutput, seqs: Sequence[Sequence[int]], params: ModelParams,
                     config: ModelConfig) -> list[float]:
    """Exact backward log-probability (tokens plus closing START) of each sequence."""
    picked, mask = directional_logprobs(enc, seqs, params, config, "backward")
    rows = picked.data
    return [math.fsum(rows[b, : len(s) + 1].tolist()) for b, s in enumerate(seqs)]


def _supporting_beam(table: BackwardTable, tokens: Sequence[int]) -> int | None:
    """Backward beam that supplied the estimate at the most positions of ``tokens``."""
    votes = Counter()
    for t, v in enumerate(tokens, start=1):
        idx = int(table.estimate(t)[1][v])
        if idx >= 0:
            votes[idx] += 1
    if not votes:
        return None
    return min(votes, key=lambda i: (-votes[i], i))


@dataclass
class BBSResult:
    best: Hypothesis
    finished: list[Hypothesis]
    backward_beams: list[Hypothesis]
    expansions: dict[int, int]  # output position -> candidate scores computed across all phases
    rescored: int  # completed prefixes scored exactly by the backward decoder

    @property
    def backward_beam_used(self) -> Hypothesis | None:
        idx = self.best.extras.get("backward_beam")
        return None if idx is None else self.backward_beams[idx]


@row_stable()
def bbs_decode(x: Sequence[int], params: ModelParams, config: ModelConfig,
               beam: BeamConfig = BeamConfig()) -> BBSResult:
    """Bidirectional beam search; see the module docstring for the scoring."""
    enc = encode(x, params, config)
    gamma = beam.gamma
    bwd_stats, fwd_stats = SearchStats(), SearchStats()
    backward = _run_beam("backward", enc, params, config, beam, stats=bwd_stats, keep_dists=True)
    table = BackwardTable(backward, config.vocab_size)
    pivot_evals: dict[int, int] = {}
    rescored = 0

    def step_scores(t, live, cum, logp, allowed):
        nonlocal rescored
        est, which = table.estimate(t)
        pivot_evals[t] = table.covering(t) * config.vocab_size
        scores = gamma * (cum / t) + (1.0 - gamma) * est[None, :]
        if allowed[STOP]:
            prefixes = [h.tokens for h in live]
            bwd = _backward_totals(enc, prefixes, params, config)
            rescored += len(prefixes)
            n = t - 1
            scores[:, STOP] = gamma * (cum[:, STOP] / t) + (1.0 - gamma) * (np.array(bwd) / n)
            for h, b in zip(live, bwd):
                h.extras["bwd_total"] = b
        return np.where(allowed[None, :], scores, -np.inf)

    def final_score(h: Hypothesis) -> float:
        h.extras["fwd_total"] = h.cum_logp
        return joint_objective(h.cum_logp, h.extras["bwd_total"], len(h), gamma)

    finished = _run_beam("forward", enc, params, config, beam, step_scores, final_score,
                         stats=fwd_stats)
    for h in finished:
        h.extras["backward_beam"] = _supporting_beam(table, h.tokens)
    positions = sorted(set(fwd_stats.expansions) | set(bwd_stats.expansions) | set(pivot_evals))
    expansions = {t: fwd_stats.expansions.get(t, 0) + bwd_stats.expansions.get(t, 0)
                  + pivot_evals.get(t, 0) for t in positions}
    return BBSResult(finished[0], finished, backward, expansions, rescored)


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    best: tuple[int, ...]
    best_score: float
    table: dict[tuple[int, ...], tuple[float, float, float]]  # seq -> (joint, fwd, bwd)


def enumerate_sequences(alphabet: Sequence[int], max_len: int):
    for L in range(1, max_len + 1):
        yield from itertools.product(alphabet, repeat=L)


@row_stable()
def exhaustive_oracle(x: Sequence[int], params: ModelParams, config: ModelConfig, gamma: float,
                      max_len: int, forbid_unk: bool = False, budget: int = 10 ** 7) -> OracleResult:
    """Score every output of length 1..max_len under the joint objective."""
    alphabet = generation_alphabet(config.vocab_size, forbid_unk)
    need = len(alphabet) ** max_len
    if need > budget:
        raise SearchBudgetError(
            f"exhaustive search needs {len(alphabet)}^{max_len} = {need} sequences; budget is {budget}")
    enc = encode(x, params, config)
    table = {}
    for L in range(1, max_len + 1):
        seqs = [list(s) for s in itertools.product(alphabet, repeat=L)]
        for chunk in range(0, len(seqs), 256):
            part = seqs[chunk:chunk + 256]
            totals = {}
            for direction in ("forward", "backward"):
                picked, _ = directional_logprobs(enc, part, params, config, direction)
                totals[direction] = [math.fsum(picked.data[b, : L + 1].tolist()) for b in range(len(part))]
            for b, s in enumerate(part):
                fwd, bwd = totals["forward"][b], totals["backward"][b]
                table[tuple(s)] = (joint_objective(fwd, bwd, L, gamma), fwd, bwd)
    best = min(table, key=lambda s: (-table[s][0], -(table[s][1] + table[s][2]), list(s)))
    return OracleResult(best, table[best][0], table)


__all__ = [
    "BeamConfig", "Hypothesis", "SearchStats", "BBSResult", "OracleResult", "BackwardTable",
    "SearchBudgetError", "beam_search", "greedy_decode", "bbs_decode", "bbs_joint_score",
    "joint_objective", "suffix_sums", "exhaustive_oracle", "enumerate_sequences",
    "generation_alphabet",
]

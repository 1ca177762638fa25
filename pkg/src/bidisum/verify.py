"""Self-checks run by ``bidisum check`` and the acceptance suite.

Each check returns a :class:`CheckResult`; none of them need data files.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Example, collate
from .decoding import BeamConfig, bbs_decode, beam_search, exhaustive_oracle, generation_alphabet
from .model import (
    NUM_SPECIAL,
    ModelConfig,
    ModelParams,
    attend,
    decoder_step,
    encode,
    init_decoders,
    init_params,
    initial_context,
)
from .numerics import Tape
from .training import batch_loss

GRAD_CONFIG = ModelConfig(vocab_size=12, embedding_dim=8, hidden_dim=10,
                          max_source_len=5, max_target_len=4)
TOY_CONFIG = ModelConfig(vocab_size=6, embedding_dim=4, hidden_dim=5,
                         max_source_len=6, max_target_len=6)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def random_batch(config: ModelConfig, n: int, rng: np.random.Generator,
                 src_len: tuple[int, int] | None = None,
                 tgt_len: tuple[int, int] | None = None) -> list[Example]:
    """Random examples over the non-reserved ids with lengths up to the config caps."""
    s_lo, s_hi = src_len or (1, config.max_source_len)
    t_lo, t_hi = tgt_len or (1, config.max_target_len)
    out = []
    for _ in range(n):
        src = rng.integers(NUM_SPECIAL, config.vocab_size, size=int(rng.integers(s_lo, s_hi + 1)))
        tgt = rng.integers(NUM_SPECIAL, config.vocab_size, size=int(rng.integers(t_lo, t_hi + 1)))
        out.append(Example(src.tolist(), tgt.tolist()))
    return out


def random_toy(seed: int, config: ModelConfig = TOY_CONFIG, scale: float = 1.5,
               source_len: int = 4) -> tuple[ModelParams, list[int]]:
    """A random model whose distributions are far from uniform, plus a random source."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed, scale=scale)
    x = rng.integers(NUM_SPECIAL - 3, config.vocab_size, size=source_len).tolist()  # UNK allowed
    return params, x


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def gradient_errors(config: ModelConfig = GRAD_CONFIG, seed: int = 0, gamma: float = 0.7,
                    h: float = 1e-5, batch_size: int = 3, max_entries: int | None = None,
                    scale: float = 0.5) -> dict[str, float]:
    """Per-tensor relative error between autodiff and central differences.

    The error of a tensor is ``max|a - n| / max(max|a|, max|n|)``. With
    ``max_entries`` only that many randomly chosen entries per tensor are
    perturbed. Parameters are drawn at ``scale`` so that no tensor's gradient
    is so small that finite-difference rounding dominates.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed, scale=scale)
    batch = collate(random_batch(config, batch_size, rng))
    with Tape() as tape:
        loss, _, _ = batch_loss(batch, params, config, gamma)
    tape.backward(loss)
    errors = {}
    for name, t in params.named_tensors():
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(batch, params, config, gamma)[0].item()
            flat[i] = orig - h
            down = batch_loss(batch, params, config, gamma)[0].item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[idx]
        denom = max(np.abs(a).max(), np.abs(numeric).max(), 1e-300)
        errors[name] = float(np.abs(a - numeric).max() / denom)
    return errors


def check_gradients(max_entries: int | None = 16, tol: float = 1e-4) -> CheckResult:
    t0 = time.perf_counter()
    errors = gradient_errors(max_entries=max_entries)
    worst = max(errors, key=errors.get)
    ok = errors[worst] < tol
    return CheckResult("gradient check", ok, f"worst {worst} rel err {errors[worst]:.2e} (< {tol:g})",
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# distributions and cross-initialisation
# ---------------------------------------------------------------------------


def distribution_violation(seed: int, config: ModelConfig = TOY_CONFIG) -> float:
    """Largest deviation of any token or attention distribution from a valid one."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed, scale=float(rng.uniform(0.05, 3.0)))
    x = rng.integers(0, config.vocab_size, size=int(rng.integers(1, config.max_source_len + 1))).tolist()
    enc = encode(x, params, config)
    worst = 0.0
    fwd, bwd = init_decoders(enc)
    for direction, state in (("forward", fwd), ("backward", bwd)):
        context = initial_context(1, config)
        prev = int(rng.integers(0, config.vocab_size))
        for _ in range(3):
            out = decoder_step(direction, prev, state, context, enc, params)
            for dist in (np.exp(out.log_dist.data), out.alpha.data):
                worst = max(worst, abs(math.fsum(dist.reshape(-1).tolist()) - 1.0), -float(dist.min()))
            state, context = out.new_state, out.context
            prev = int(rng.integers(0, config.vocab_size))
        alpha, _ = attend(state, enc, params.attention(direction))
        worst = max(worst, abs(math.fsum(alpha.data.reshape(-1).tolist()) - 1.0), -float(alpha.data.min()))
    return worst


def check_distributions(n: int = 200, tol: float = 1e-9) -> CheckResult:
    t0 = time.perf_counter()
    worst = max(distribution_violation(seed) for seed in range(n))
    return CheckResult("distribution validity", worst <= tol,
                       f"{n} draws, worst deviation {worst:.1e} (<= {tol:g})", time.perf_counter() - t0)


def cross_init_mismatches(n: int = 100, config: ModelConfig = TOY_CONFIG) -> int:
    bad = 0
    for seed in range(n):
        params, x = random_toy(seed, config, scale=0.5)
        enc = encode(x, params, config)
        fwd, bwd = init_decoders(enc)
        pairs = ((fwd, enc.final_bwd), (bwd, enc.final_fwd))
        if not all(np.array_equal(a.h.data, b.h.data) and np.array_equal(a.c.data, b.c.data)
                   for a, b in pairs):
            bad += 1
    return bad


def check_cross_init(n: int = 100) -> CheckResult:
    t0 = time.perf_counter()
    bad = cross_init_mismatches(n)
    return CheckResult("cross-initialisation", bad == 0, f"{n - bad}/{n} inputs bit-equal",
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def unpruned_beam_size(config: ModelConfig, max_steps: int, forbid_unk: bool = False) -> int:
    """A beam wide enough that nothing is ever pruned."""
    a = len(generation_alphabet(config.vocab_size, forbid_unk))
    return sum(a ** L for L in range(1, max_steps + 1)) + 1


def bbs_oracle_case(seed: int, gamma: float = 0.7, max_steps: int = 4,
                    config: ModelConfig = TOY_CONFIG) -> tuple[bool, float, tuple, list]:
    """``(same argmax, |score difference|, oracle tokens, bbs tokens)`` for one toy model."""
    params, x = random_toy(seed, config)
    oracle = exhaustive_oracle(x, params, config, gamma, max_steps)
    beam = BeamConfig(beam_size=unpruned_beam_size(config, max_steps), gamma=gamma, max_steps=max_steps)
    result = bbs_decode(x, params, config, beam)
    got = tuple(result.best.tokens)
    return got == oracle.best, abs(result.best.score - oracle.best_score), oracle.best, list(got)


def check_bbs_oracle(n: int = 10, gamma: float = 0.7) -> CheckResult:
    t0 = time.perf_counter()
    cases = [bbs_oracle_case(seed, gamma) for seed in range(n)]
    agree = sum(c[0] for c in cases)
    gap = max(c[1] for c in cases)
    return CheckResult("BBS vs exhaustive oracle", agree == n and gap < 1e-9,
                       f"{agree}/{n} argmax agree, max score gap {gap:.1e}", time.perf_counter() - t0)


def collapse_mismatches(n: int = 100, k: int = 4, max_steps: int = 6,
                        config: ModelConfig = TOY_CONFIG) -> int:
    bad = 0
    for seed in range(n):
        params, x = random_toy(seed, config)
        beam = BeamConfig(beam_size=k, gamma=1.0, max_steps=max_steps)
        if bbs_decode(x, params, config, beam).best.tokens != beam_search("forward", x, params, config, beam)[0].tokens:
            bad += 1
    return bad


def check_collapse(n: int = 20) -> CheckResult:
    t0 = time.perf_counter()
    bad = collapse_mismatches(n)
    return CheckResult("gamma=1 collapse to forward beam", bad == 0, f"{n - bad}/{n} identical",
                       time.perf_counter() - t0)


def loss_identity_gap(seed: int = 0, gammas=(0.0, 0.3, 0.5, 0.7, 1.0),
                      config: ModelConfig = GRAD_CONFIG) -> float:
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed, scale=0.5)
    batch = collate(random_batch(config, 4, rng))
    worst = 0.0
    for g in gammas:
        loss, lf, lb = batch_loss(batch, params, config, g)
        expect = g * lf.item() + (1.0 - g) * lb.item()
        worst = max(worst, abs(loss.item() - expect) / max(abs(expect), 1e-300))
    return worst


def check_loss_identity() -> CheckResult:
    t0 = time.perf_counter()
    gap = loss_identity_gap()
    ok = gap <= 4 * np.finfo(float).eps
    return CheckResult("loss identity", ok, f"max relative gap {gap:.1e}", time.perf_counter() - t0)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "distributions": check_distributions,
    "cross-init": check_cross_init,
    "loss-identity": check_loss_identity,
    "bbs-oracle": check_bbs_oracle,
    "collapse": check_collapse,
}


def run_checks(names=None, out=print) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        res = CHECKS[name]()
        out(res.line())
        results.append(res)
    return results

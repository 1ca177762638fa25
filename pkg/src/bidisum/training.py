"""Joint forward/backward loss, Adagrad, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import Batch, Example, make_batches
from .model import (DIRECTIONS, Direction, ModelConfig, ModelParams, directional_logprobs, encode_batch,
                    init_params, teacher_forced_dists)
from .numerics import NumericalError, Tape, Tensor, add, clip_global_norm, mean, mul, sum_

LOG_HEADER = "step\tsplit\tloss\tl_fwd\tl_bwd\tgrad_norm\n"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.7
    learning_rate: float = 0.15
    initial_accumulator: float = 0.1
    max_grad_norm: float = 2.0
    batch_size: int = 32
    eval_every_steps: int = 200
    patience_evals: int = 5
    max_steps: int = 100_000
    max_epochs: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.learning_rate <= 0 or self.initial_accumulator <= 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate, initial_accumulator and max_grad_norm must be positive")
        if self.batch_size < 1 or self.eval_every_steps < 1 or self.max_steps < 1:
            raise ValueError("batch_size, eval_every_steps and max_steps must be >= 1")
        if self.patience_evals < 0:
            raise ValueError("patience_evals must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                if f.name == "max_epochs":
                    v = None if v in (None, "", "None", "none") else int(v)
                elif f.type in ("float",):
                    v = float(v)
                else:
                    v = int(v)
                kwargs[f.name] = v
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _directional_loss(enc, targets, params, config, direction) -> Tensor:
    picked, mask = directional_logprobs(enc, targets, params, config, direction)
    per_example = sum_(mul(picked, Tensor(mask)), axis=1)
    # per-sequence average over its own predictions (tokens + closing sentinel)
    inv_len = Tensor(1.0 / mask.sum(axis=1))
    return mul(mean(mul(per_example, inv_len)), -1.0)


def batch_loss(batch: Batch, params: ModelParams, config: ModelConfig,
               gamma: float = 0.7) -> tuple[Tensor, Tensor, Tensor]:
    """``(gamma * l_fwd + (1 - gamma) * l_bwd, l_fwd, l_bwd)`` for one batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if np.any(batch.tgt_lengths < 1):
        raise ValueError("batch contains an example with no target tokens")
    enc = encode_batch(batch.src, batch.src_lengths, params, config)
    l_fwd, l_bwd = (_directional_loss(enc, batch.targets, params, config, d) for d in DIRECTIONS)
    loss = add(mul(l_fwd, gamma), mul(l_bwd, 1.0 - gamma))
    return loss, l_fwd, l_bwd


# ---------------------------------------------------------------------------
# Adagrad
# ---------------------------------------------------------------------------


@dataclass
class AdagradState:
    accumulators: dict[str, np.ndarray]

    @classmethod
    def create(cls, params: ModelParams, initial_accumulator: float = 0.1) -> "AdagradState":
        return cls({name: np.full(t.shape, initial_accumulator) for name, t in params.named_tensors()})


def adagrad_step(params, grads: dict[str, np.ndarray], state: AdagradState, lr: float) -> None:
    """In place: ``acc += g**2``; ``theta -= lr * g / sqrt(acc)``.

    ``params`` is a :class:`ModelParams` or a name -> Tensor mapping. The
    update is validated in full before any parameter is touched.
    """
    named = dict(params.named_tensors()) if isinstance(params, ModelParams) else dict(params)
    updates = {}
    for name, t in named.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {t.shape}")
        acc = state.accumulators[name] + g * g
        new = t.data - lr * g / np.sqrt(acc)
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite Adagrad update for parameter {name!r}")
        updates[name] = (acc, new)
    for name, (acc, new) in updates.items():
        state.accumulators[name] = acc
        named[name].data = new


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class LogRecord:
    step: int
    split: str
    loss: float
    l_fwd: float
    l_bwd: float
    grad_norm: float = math.nan
    clipped_norm: float = math.nan

    def line(self) -> str:
        return f"{self.step}\t{self.split}\t{self.loss!r}\t{self.l_fwd!r}\t{self.l_bwd!r}\t{self.grad_norm!r}\n"


@dataclass
class TrainResult:
    params: ModelParams  # best by validation loss
    best_step: int
    best_val_loss: float
    stop_reason: str
    log: list[LogRecord] = field(default_factory=list)

    @property
    def evals(self) -> list[LogRecord]:
        return [r for r in self.log if r.split == "val"]


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, result: TrainResult):
        super().__init__(message)
        self.result = result


def evaluate_loss(examples: Sequence[Example], params: ModelParams, config: ModelConfig,
                  gamma: float, batch_size: int = 64) -> tuple[float, float, float]:
    """Example-weighted mean of (loss, l_fwd, l_bwd) without recording a tape."""
    totals = np.zeros(3)
    for batch in make_batches(examples, batch_size, seed=None,
                              max_source_len=config.max_source_len,
                              max_target_len=config.max_target_len):
        loss, lf, lb = batch_loss(batch, params, config, gamma)
        totals += len(batch) * np.array([loss.item(), lf.item(), lb.item()])
    return tuple((totals / len(examples)).tolist())


def token_accuracy(examples: Sequence[Example], params: ModelParams, config: ModelConfig,
                   direction: Direction = "forward", batch_size: int = 64) -> float:
    """Fraction of target tokens where the teacher-forced arg-max equals the reference.

    The closing sentinel prediction is not counted.
    """
    hits = total = 0
    for batch in make_batches(examples, batch_size, seed=None,
                              max_source_len=config.max_source_len,
                              max_target_len=config.max_target_len):
        enc = encode_batch(batch.src, batch.src_lengths, params, config)
        dists, gold, _ = teacher_forced_dists(enc, batch.targets, params, config, direction)
        pred = dists.data.argmax(axis=2)
        for b, L in enumerate(batch.tgt_lengths):
            # generation order: the first L predictions are tokens, the last is the sentinel
            hits += int(np.sum(pred[b, :L] == gold[b, :L]))
            total += int(L)
    return hits / total


def train(model_config: ModelConfig, train_config: TrainConfig, train_data: Sequence[Example],
          val_data: Sequence[Example], out_dir=None, params: ModelParams | None = None,
          on_record=None) -> TrainResult:
    """Adagrad on the joint loss with clipping, periodic validation and early stopping.

    With ``out_dir`` the best parameters go to ``best.ckpt`` whenever
    validation improves and the log is streamed to ``train.log``.
    """
    if not train_data or not val_data:
        raise ValueError("training and validation data must be non-empty")
    tc = train_config
    params = params if params is not None else init_params(model_config, seed=tc.seed)
    named = params.named_tensors()
    state = AdagradState.create(params, tc.initial_accumulator)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train.log", "w", encoding="utf-8")
        log_file.write(LOG_HEADER)

    result = TrainResult(params.clone(), 0, math.inf, "max_steps")

    def emit(rec: LogRecord) -> None:
        result.log.append(rec)
        if log_file:
            log_file.write(rec.line())
        if on_record:
            on_record(rec)

    def run_eval(step: int) -> bool:
        loss, lf, lb = evaluate_loss(val_data, params, model_config, tc.gamma, max(tc.batch_size, 64))
        emit(LogRecord(step, "val", loss, lf, lb))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite validation loss at step {step}", result)
        if loss < result.best_val_loss:
            result.best_val_loss, result.best_step = loss, step
            result.params = params.clone()
            if out is not None:
                save_checkpoint(out / "best.ckpt", params, model_config)
            return True
        return False

    step, bad_evals, last_eval = 0, 0, -1
    try:
        epoch = 0
        done = False
        while not done:
            if tc.max_epochs is not None and epoch >= tc.max_epochs:
                result.stop_reason = "max_epochs"
                break
            for batch in make_batches(train_data, tc.batch_size, seed=tc.seed + epoch,
                                      max_source_len=model_config.max_source_len,
                                      max_target_len=model_config.max_target_len):
                try:
                    with Tape() as tape:
                        loss, lf, lb = batch_loss(batch, params, model_config, tc.gamma)
                    if not math.isfinite(loss.item()):
                        raise NumericalError("non-finite training loss")
                    tape.backward(loss)
                    grads = {name: t.grad for name, t in named}
                    clipped, norm = clip_global_norm(grads, tc.max_grad_norm)
                    adagrad_step(params, clipped, state, tc.learning_rate)
                except NumericalError as exc:
                    raise TrainingDiverged(f"training diverged at step {step + 1}: {exc}", result) from exc
                clipped_norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in clipped.values()))
                step += 1
                emit(LogRecord(step, "train", loss.item(), lf.item(), lb.item(), norm, clipped_norm))
                if step % tc.eval_every_steps == 0:
                    last_eval = step
                    bad_evals = 0 if run_eval(step) else bad_evals + 1
                    if bad_evals > tc.patience_evals:
                        result.stop_reason = "early_stopping"
                        done = True
                        break
                if step >= tc.max_steps:
                    result.stop_reason = "max_steps"
                    done = True
                    break
            epoch += 1
        if last_eval != step:
            run_eval(step)
    finally:
        if log_file:
            log_file.close()
    return result


__all__ = [
    "TrainConfig", "AdagradState", "LogRecord", "TrainResult", "TrainingDiverged",
    "batch_loss", "adagrad_step", "evaluate_loss", "token_accuracy", "train", "LOG_HEADER",
]

"""Adam training loop and the progressive stacking schedules.

Three growth schedules sit on top of :func:`train`:

* ``run_cl``: continual learning. Train to convergence on the first data
  snapshot, then repeatedly double depth and train on the next, larger one.
* ``run_ts``: train-from-scratch acceleration. Train the shallow model for a
  fixed share of the budget, double depth, continue on the same data.
* ``run_tf``: transfer. Keep embedding and blocks, attach a fresh softmax for a
  new target vocabulary and fine-tune everything.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import SessionDataset, TransferDataset
from .evaluation import Metrics, evaluate
from .model import ModelConfig, ModelParams, init_model, sequence_loss
from .stacking import StackPlan, apply_plan

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("plain", "cl", "ts", "tf")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    max_iterations: int = 20000
    eval_every: int = 100
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    finetune_learning_rate: float | None = None  # used after the first stacking step

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_iterations", "eval_every",
                     "patience", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")


@dataclass
class TrainRecord:
    iteration: int
    train_loss: float
    mrr5: float
    hr5: float
    ndcg5: float
    wall_ms: int

    def format(self) -> str:
        return (f"iter={self.iteration} loss={self.train_loss:.6f} mrr5={self.mrr5:.6f} "
                f"hr5={self.hr5:.6f} ndcg5={self.ndcg5:.6f} wall_ms={self.wall_ms}")

    @classmethod
    def parse(cls, line: str) -> "TrainRecord":
        f = dict(tok.split("=", 1) for tok in line.split())
        return cls(int(f["iter"]), float(f["loss"]), float(f["mrr5"]), float(f["hr5"]),
                   float(f["ndcg5"]), int(f["wall_ms"]))


# --- adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        named = params.named_tensors()
        return cls(0, {k: np.zeros_like(t) for k, t in named.items()},
                   {k: np.zeros_like(t) for k, t in named.items()})


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState,
              config: TrainConfig, lr: float | None = None):
    """Bias-corrected Adam update of every tensor; returns ``(new_params, new_state)``."""
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    g_named = grads.named_tensors()
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.named_tensors().items():
        g = g_named[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name} at step {step}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + config.eps)
        new_p[name] = (p - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return params.with_tensors(new_p), AdamState(step, new_m, new_v)


# --- batches --------------------------------------------------------------------

def make_batch(data, rows: np.ndarray):
    """``(inputs, targets, mask)`` for next-item training on the selected rows.

    Session data supervise every non-padding next item; transfer data supervise
    only the final position.
    """
    if isinstance(data, TransferDataset):
        inputs = data.contexts[rows]
        targets = np.zeros_like(inputs)
        targets[:, -1] = data.targets[rows]
        mask = np.zeros(inputs.shape, dtype=bool)
        mask[:, -1] = True
        return inputs, targets, mask
    inputs = data.sequences[rows]
    targets = np.zeros_like(inputs)
    targets[:, :-1] = inputs[:, 1:]
    return inputs, targets, targets != 0


def batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatch row indices, reshuffled each epoch."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


# --- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    history: list[TrainRecord]
    iterations: int
    best_iteration: int
    wall_ms: int
    converged: bool = False

    @property
    def best_mrr(self) -> float:
        return max(r.mrr5 for r in self.history)


def _record(iteration, loss, metrics: Metrics, wall_s) -> TrainRecord:
    return TrainRecord(iteration, float(loss), metrics.mrr, metrics.hr, metrics.ndcg,
                       int(round(wall_s * 1000)))


def train(params: ModelParams, train_data, eval_data, config: TrainConfig,
          budget: int | None = None, lr: float | None = None,
          clock: Callable[[], float] = time.perf_counter,
          on_record: Callable[[TrainRecord], None] | None = None) -> TrainResult:
    """Minibatch Adam on ``train_data`` with periodic held-out evaluation.

    With ``budget`` set, runs exactly that many iterations and returns the final
    parameters. Otherwise stops once MRR@5 fails to improve for ``patience``
    consecutive evaluations (or at ``max_iterations``) and returns the best
    parameters seen. Wall time counts optimization steps only, not evaluation.
    """
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    if budget is not None and budget < 0:
        raise ValueError(f"budget must be non-negative, got {budget}")
    rng = np.random.default_rng(config.seed)
    batches = batch_stream(len(train_data), config.batch_size, rng)
    limit = budget if budget is not None else config.max_iterations
    state = AdamState.zeros(params)

    first_rows = next(batches)
    loss0, _ = sequence_loss(params, *make_batch(train_data, first_rows), with_grad=False)
    history = [_record(0, loss0, evaluate(params, eval_data), 0.0)]
    if on_record:
        on_record(history[0])
    best_mrr, best_iter, best_params = history[0].mrr5, 0, params
    bad_evals = 0
    wall = 0.0
    window_loss, window_steps = 0.0, 0
    converged = False
    pending = first_rows

    it = 0
    while it < limit:
        rows = pending if pending is not None else next(batches)
        pending = None
        start = clock()
        loss, grads = sequence_loss(params, *make_batch(train_data, rows))
        params, state = adam_step(params, grads, state, config, lr)
        wall += clock() - start
        it += 1
        window_loss += loss
        window_steps += 1
        if it % config.eval_every and it != limit:
            continue
        rec = _record(it, window_loss / window_steps, evaluate(params, eval_data), wall)
        window_loss, window_steps = 0.0, 0
        history.append(rec)
        if on_record:
            on_record(rec)
        if rec.mrr5 > best_mrr:
            best_mrr, best_iter, best_params, bad_evals = rec.mrr5, it, params, 0
        else:
            bad_evals += 1
            if budget is None and bad_evals >= config.patience:
                converged = True
                break

    final = params if budget is not None else best_params
    return TrainResult(final, history, it, best_iter, int(round(wall * 1000)), converged)


# --- schedules ------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    kind: str = "plain"
    initial_blocks: int = 2
    stack_times: int = 1
    mode: str = "adjacent"
    budgets: tuple[int | None, ...] = ()  # ts only; None means until converged
    redilate: bool = False

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.initial_blocks < 1 or self.stack_times < 0:
            raise ValueError("initial_blocks must be >= 1 and stack_times >= 0")
        object.__setattr__(self, "mode", self.mode.replace("-", "_"))

    @property
    def final_depth(self) -> int:
        return self.initial_blocks * 2 ** self.stack_times


def default_ts_budgets(total_budget: int, stack_times: int) -> tuple[int | None, ...]:
    """A quarter of the expected from-scratch budget per shallow stage; last stage to convergence."""
    shallow = math.ceil(total_budget / 4)
    return tuple([shallow] * stack_times) + (None,)


@dataclass
class StageResult:
    depth: int
    num_sequences: int
    result: TrainResult


@dataclass
class ScheduleResult:
    params: ModelParams
    stages: list[StageResult] = field(default_factory=list)

    @property
    def final_history(self) -> list[TrainRecord]:
        return self.stages[-1].result.history

    @property
    def depths(self) -> list[int]:
        return [s.depth for s in self.stages]

    def end_to_end_history(self) -> list[TrainRecord]:
        """All stages on one axis: iterations and wall time accumulate across stages."""
        out, it_off, wall_off = [], 0, 0
        for stage in self.stages:
            for rec in stage.result.history:
                if out and rec.iteration == 0:
                    continue  # duplicate of the previous stage's last point, pre-stack
                out.append(replace(rec, iteration=rec.iteration + it_off,
                                   wall_ms=rec.wall_ms + wall_off))
            it_off += stage.result.iterations
            wall_off += stage.result.wall_ms
        return out

    @property
    def total_wall_ms(self) -> int:
        return sum(s.result.wall_ms for s in self.stages)


def _grow(params: ModelParams, schedule: Schedule, stage: int, seed: int) -> ModelParams:
    plan = StackPlan(schedule.mode, len(params.blocks), schedule.redilate)
    grown = apply_plan(params, plan, seed=seed + 7919 * stage)
    log.info("stage %d: stacked %s %d -> %d blocks", stage, plan.mode,
             len(params.blocks), len(grown.blocks))
    return grown


def _stage_config(config: TrainConfig, stage: int) -> tuple[TrainConfig, float | None]:
    lr = config.finetune_learning_rate if stage > 0 else None
    return replace(config, seed=config.seed + stage), lr


def run_cl(schedule: Schedule, snapshots: Sequence[SessionDataset], eval_data,
           model_config: ModelConfig, config: TrainConfig,
           init: ModelParams | None = None, on_record=None,
           clock: Callable[[], float] = time.perf_counter) -> ScheduleResult:
    """Train to convergence on snapshot 0, then stack and retrain on each larger snapshot."""
    if len(snapshots) != schedule.stack_times + 1:
        raise ValueError(f"need {schedule.stack_times + 1} snapshots, got {len(snapshots)}")
    for i in range(1, len(snapshots)):
        if not _contains(snapshots[i], snapshots[i - 1]):
            raise ValueError(f"snapshot {i} does not contain snapshot {i - 1}")
    params = init if init is not None else init_model(
        replace(model_config, num_blocks=schedule.initial_blocks), config.seed)
    out = ScheduleResult(params)
    for stage, data in enumerate(snapshots):
        if stage > 0:
            params = _grow(params, schedule, stage, config.seed)
        cfg, lr = _stage_config(config, stage)
        res = train(params, data, eval_data, cfg, lr=lr, clock=clock,
                    on_record=_tagged(on_record, stage))  # fresh Adam state per stage
        params = res.params
        out.stages.append(StageResult(len(params.blocks), len(data), res))
    out.params = params
    return out


def run_ts(schedule: Schedule, dataset: SessionDataset, eval_data,
           model_config: ModelConfig, config: TrainConfig,
           budgets: Sequence[int | None] | None = None,
           init: ModelParams | None = None, on_record=None,
           clock: Callable[[], float] = time.perf_counter) -> ScheduleResult:
    """Train shallow for ``budgets[0]`` iterations, then stack and continue on the same data."""
    budgets = tuple(budgets if budgets is not None else schedule.budgets)
    if len(budgets) != schedule.stack_times + 1:
        raise ValueError(f"need {schedule.stack_times + 1} budgets, got {len(budgets)}")
    params = init if init is not None else init_model(
        replace(model_config, num_blocks=schedule.initial_blocks), config.seed)
    out = ScheduleResult(params)
    for stage, q in enumerate(budgets):
        if stage > 0:
            params = _grow(params, schedule, stage, config.seed)
        cfg, lr = _stage_config(config, stage)
        res = train(params, dataset, eval_data, cfg, budget=q, lr=lr, clock=clock,
                    on_record=_tagged(on_record, stage))
        params = res.params
        out.stages.append(StageResult(len(params.blocks), len(dataset), res))
    out.params = params
    return out


def attach_head(source: ModelParams, target_vocab: int, seed: int) -> ModelParams:
    """Warm-started copy of ``source`` with a fresh softmax over ``target_vocab`` items."""
    if target_vocab < 1:
        raise ValueError(f"target vocab must be positive, got {target_vocab}")
    cfg = replace(source.config, output_vocab=target_vocab)
    rng = np.random.default_rng(seed)
    w = (rng.standard_normal((cfg.embed_dim, cfg.num_outputs)) * 0.01).astype(source.dtype)
    b = np.zeros(cfg.num_outputs, source.dtype)
    body = source.copy()
    return ModelParams(body.embedding, body.blocks, w, b, cfg)


def run_tf(source: ModelParams, target_train: TransferDataset, target_eval: TransferDataset,
           target_vocab: int, config: TrainConfig, budget: int | None = None,
           on_record=None, clock: Callable[[], float] = time.perf_counter) -> TrainResult:
    """Fine-tune every parameter of ``source`` under a new softmax head on target pairs."""
    params = attach_head(source, target_vocab, config.seed)
    return train(params, target_train, target_eval, config, budget=budget, clock=clock,
                 on_record=on_record)


def run_plain(params: ModelParams, dataset, eval_data, config: TrainConfig,
              budget: int | None = None, on_record=None,
              clock: Callable[[], float] = time.perf_counter) -> ScheduleResult:
    res = train(params, dataset, eval_data, config, budget=budget, clock=clock,
                on_record=_tagged(on_record, 0))
    return ScheduleResult(res.params, [StageResult(len(res.params.blocks), len(dataset), res)])


def _tagged(on_record, stage):
    if on_record is None:
        return None
    return lambda rec: on_record(stage, rec)


def _contains(big: SessionDataset, small: SessionDataset) -> bool:
    have = {row.tobytes() for row in big.sequences}
    return all(row.tobytes() in have for row in small.sequences)


def popularity_ranks(train_data: SessionDataset, eval_data) -> np.ndarray:
    """Ranks from scoring every item by its training frequency (the popularity baseline)."""
    from .evaluation import eval_pairs, ranks_from_logits

    counts = np.bincount(train_data.sequences.ravel(), minlength=train_data.vocab_size + 1)
    counts = counts.astype(np.float64)
    _, targets = eval_pairs(eval_data)
    scores = np.broadcast_to(counts, (len(targets), counts.size))
    return ranks_from_logits(scores, targets)

"""Per-task optimization and the sequential continual-learning loop.

The three variants are configuration ablations of the same code path:
``oa_adapter`` trains the soft-threshold mask, ``o_adapter`` fixes the mask
at identity (gamma = 1, g and tau untrainable), and ``inc_adapter`` is
``o_adapter`` without the orthogonality penalty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import snapshot_mask
from .backbone import AdapterStack, Backbone, begin_task, end_task, forward, predict_logits
from .errors import ConfigError, DataError, ProtocolError
from .metrics import AccuracyMatrix
from .numerics import Node, Tape, zero_grads
from .optim import make_optimizer
from .orthogonality import orth_loss_total
from .tasks import TaskStream

VARIANTS = ("oa_adapter", "o_adapter", "inc_adapter")
THRESHOLD_MODES = ("dynamic", "fixed")
OPTIMIZERS = ("adam", "sgd_momentum")
TAU_GRID = (1e-3, 1e-4, 1e-5)
LAMBDA_ORTH_GRID = (0.0, 0.5, 1.0, 5.0)  # 0 admits the no-constraint ablation
LAMBDA_L2_GRID = (0.0, 0.1, 0.5)

SEED_ADAPTER_INIT = 301
SEED_TASK_SHUFFLE = 302

EVAL_INTERVAL = 25


@dataclass
class TrainConfig:
    variant: str = "oa_adapter"
    threshold_mode: str = "dynamic"
    tau_init: float = 1e-4
    lambda_orth: float = 1.0
    lambda_l2: float = 0.1
    r_max: int = 16
    optimizer: str = "adam"
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(
                f"threshold_mode must be one of {THRESHOLD_MODES}, got {self.threshold_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.tau_init not in TAU_GRID:
            raise ConfigError(f"tau_init must come from {TAU_GRID}, got {self.tau_init}")
        if self.lambda_orth not in LAMBDA_ORTH_GRID:
            raise ConfigError(
                f"lambda_orth must come from {LAMBDA_ORTH_GRID}, got {self.lambda_orth}")
        if self.lambda_l2 not in LAMBDA_L2_GRID:
            raise ConfigError(f"lambda_l2 must come from {LAMBDA_L2_GRID}, got {self.lambda_l2}")
        if self.r_max < 1:
            raise ConfigError(f"r_max must be >= 1, got {self.r_max}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be positive, batch_size >= 1, epochs >= 0")
        if self.variant == "inc_adapter":
            self.lambda_orth = 0.0

    @property
    def mask_enabled(self) -> bool:
        return self.variant == "oa_adapter"


@dataclass
class TaskTrainReport:
    task_id: int
    final_task_loss: float
    final_orth_loss: float
    r_eff_per_layer: list[int]
    steps: int
    wall_time: float


@dataclass
class LossParts:
    total: Node
    task: float
    orth: float
    sparsity: float


def total_loss(tape: Tape, logits: Node, labels: np.ndarray, stack: AdapterStack,
               t: int, config: TrainConfig) -> LossParts:
    """L = mean cross-entropy + lambda_orth * sum_{s<t} pair losses
    + lambda_l2 * sum_layers ||gamma_t||^2."""
    if t != stack.active_task:
        raise ProtocolError(f"total_loss for task {t} but active task is {stack.active_task}")
    ce = tape.cross_entropy(logits, labels)
    node = ce
    orth_node = orth_loss_total(tape, stack, t)
    orth_val = float(orth_node.value[0, 0])
    if config.lambda_orth > 0.0 and t > 1:
        node = tape.add(node, tape.scale(orth_node, config.lambda_orth))
    sparsity_val = 0.0
    if config.mask_enabled and config.lambda_l2 > 0.0:
        for adapter in stack.trainable_adapters():
            gamma = tape.soft_threshold(adapter.g, adapter.tau)
            term = tape.sum_sq(gamma)
            sparsity_val += float(term.value[0, 0])
            node = tape.add(node, tape.scale(term, config.lambda_l2))
    return LossParts(total=node, task=float(ce.value[0, 0]), orth=orth_val,
                     sparsity=sparsity_val)


def _trainable_params(stack: AdapterStack, config: TrainConfig):
    params = []
    for adapter in stack.trainable_adapters():
        params.extend([adapter.W1, adapter.W2])
        if config.mask_enabled:
            params.append(adapter.g)
            if config.threshold_mode == "dynamic":
                params.append(adapter.tau)
    return params


def train_task(backbone: Backbone, stack: AdapterStack, dataset, config: TrainConfig,
               eval_hook=None, step_offset: int = 0) -> TaskTrainReport:
    """Optimize the open task's adapters on its data, then freeze the task."""
    t = stack.active_task
    if t is None:
        raise ProtocolError("train_task requires an open task (call begin_task first)")
    x_train, y_train = dataset.train
    n = len(y_train)
    if n == 0:
        raise DataError(f"task {t} has an empty training split")

    params = _trainable_params(stack, config)
    opt = make_optimizer(config.optimizer, params, config.lr)
    rng = np.random.default_rng([config.seed, SEED_TASK_SHUFFLE, t])
    started = time.perf_counter()
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            zero_grads(params)
            tape = Tape()
            logits = forward(backbone, stack, x_train[idx], tape)
            parts = total_loss(tape, logits, y_train[idx], stack, t, config)
            tape.backward(parts.total)
            opt.step()
            if config.mask_enabled and config.threshold_mode == "dynamic":
                for adapter in stack.trainable_adapters():
                    adapter.clamp_tau()
            step += 1
            if eval_hook is not None and step % EVAL_INTERVAL == 0:
                eval_hook(step_offset + step)

    # Deterministic end-of-task loss snapshot for the report.
    probe = slice(0, min(config.batch_size, n))
    tape = Tape()
    logits = forward(backbone, stack, x_train[probe], tape)
    parts = total_loss(tape, logits, y_train[probe], stack, t, config)
    r_eff = [snapshot_mask(a).r_eff for a in stack.trainable_adapters()]
    end_task(stack)
    return TaskTrainReport(
        task_id=t, final_task_loss=parts.task, final_orth_loss=parts.orth,
        r_eff_per_layer=r_eff, steps=step, wall_time=time.perf_counter() - started)


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    reports: list[TaskTrainReport]
    curves: list[tuple[int, int, float]]  # (step, task_id, test accuracy)
    stack: AdapterStack = field(repr=False)


def run_sequence(backbone: Backbone, stream: TaskStream, config: TrainConfig) -> RunResult:
    """Sequential protocol: for each task, train on that task's data only,
    then evaluate the composed model on every task's test set."""
    if not stream.tasks:
        raise DataError("task stream is empty")
    T = len(stream.tasks)
    stack = AdapterStack(len(backbone.hidden))
    grid = np.full((T, T), np.nan)
    curves: list[tuple[int, int, float]] = []
    reports = []

    def evaluate_all(step: int):
        for i, task in enumerate(stream.tasks, start=1):
            x, y = task.test
            acc = float((predict_logits(backbone, stack, x).argmax(axis=1) == y).mean())
            curves.append((step, i, acc))

    step_offset = 0
    for pos, task in enumerate(stream.tasks, start=1):
        rng = np.random.default_rng([config.seed, SEED_ADAPTER_INIT, pos])
        begin_task(stack, pos, config.r_max, config.tau_init,
                   d=backbone.d, rng=rng, mask_enabled=config.mask_enabled)
        report = train_task(backbone, stack, task, config,
                            eval_hook=evaluate_all, step_offset=step_offset)
        step_offset += report.steps
        reports.append(report)
        for i, other in enumerate(stream.tasks):
            x, y = other.test
            grid[i, pos - 1] = float(
                (predict_logits(backbone, stack, x).argmax(axis=1) == y).mean())
    return RunResult(matrix=AccuracyMatrix(T=T, a=grid), reports=reports,
                     curves=curves, stack=stack)

"""Frozen multi-layer backbone with per-layer adapter insertion points.

Inference is task-ID-free: the residual contributions of every task's
adapters at an insertion point are summed, so the same composed model is
evaluated on every task's test set.
"""

from __future__ import annotations

import numpy as np

from .adapters import OAAdapter, oa_delta
from .errors import DimensionError, PretrainingError, ProtocolError
from .numerics import Node, Param, Tape
from .optim import Adam
from .tasks import TaskDataset

CHECKPOINT_MAGIC = "OACL1"
SEED_BACKBONE_INIT = 201
SEED_PRETRAIN_SHUFFLE = 202


class Backbone:
    """Embedding, L hidden layers (tanh), and a global C-class head."""

    def __init__(self, d_in: int, d: int, L: int, C: int, seed: int):
        if L < 1:
            raise ValueError(f"need at least one hidden layer, got L={L}")
        rng = np.random.default_rng([seed, SEED_BACKBONE_INIT])

        def init(rows, cols, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return Param(rng.uniform(-b, b, size=(rows, cols)))

        self.d_in, self.d, self.L, self.C = d_in, d, L, C
        self.embed = init(d, d_in, d_in)
        self.hidden = [init(d, d, d) for _ in range(L)]
        self.head = init(C, d, d)
        self.pretrain_accuracy: float | None = None
        self.random_warning = False  # set when returned without pretraining

    def params(self) -> list[Param]:
        return [self.embed, *self.hidden, self.head]

    def freeze(self):
        for p in self.params():
            p.frozen = True


class AdapterStack:
    """Per-insertion-point ordered lists of adapters across tasks.

    Tasks 1..t-1 are frozen (with their activated bases cached at freeze
    time); at most one trainable task exists at any time.
    """

    def __init__(self, n_points: int):
        self.points: list[list[OAAdapter]] = [[] for _ in range(n_points)]
        self.bases: list[list] = [[] for _ in range(n_points)]
        self.active_task: int | None = None

    @property
    def task_count(self) -> int:
        return len(self.points[0])

    def trainable_adapters(self) -> list[OAAdapter]:
        if self.active_task is None:
            return []
        return [adapters[self.active_task - 1] for adapters in self.points]


def begin_task(stack: AdapterStack, t: int, r_max: int, tau_init: float, *,
               d: int, rng: np.random.Generator, mask_enabled: bool = True) -> AdapterStack:
    if stack.active_task is not None:
        raise ProtocolError(
            f"begin_task({t}) while task {stack.active_task} is still open")
    if t != stack.task_count + 1:
        raise ProtocolError(f"expected task {stack.task_count + 1}, got begin_task({t})")
    for adapters in stack.points:
        adapters.append(OAAdapter(d, r_max, tau_init, rng, mask_enabled=mask_enabled))
    stack.active_task = t
    return stack


def end_task(stack: AdapterStack) -> AdapterStack:
    if stack.active_task is None:
        raise ProtocolError("end_task without an open task")
    from .orthogonality import activated_basis

    t = stack.active_task
    for point, adapters in enumerate(stack.points):
        adapters[t - 1].freeze()
        stack.bases[point].append(activated_basis(adapters[t - 1], t))
    stack.active_task = None
    return stack


def forward(backbone: Backbone, stack: AdapterStack | None, x, tape: Tape | None = None) -> Node:
    """Logits for a batch x (n, d_in) through the composed model."""
    tape = tape if tape is not None else Tape()
    x = x if isinstance(x, Node) else Node(x)
    if x.shape[1] != backbone.d_in:
        raise DimensionError(f"input width {x.shape[1]} does not match d_in={backbone.d_in}")
    h = tape.tanh(tape.matmul(x, tape.transpose(backbone.embed)))
    for layer_idx, w in enumerate(backbone.hidden):
        h = tape.matmul(h, tape.transpose(w))
        if stack is not None:
            # All tasks' residuals are computed from the same pre-sum h.
            pre = h
            for adapter in stack.points[layer_idx]:
                h = tape.add(h, oa_delta(tape, adapter, pre))
        h = tape.tanh(h)
    return tape.matmul(h, tape.transpose(backbone.head))


def predict_logits(backbone: Backbone, stack: AdapterStack | None, x) -> np.ndarray:
    return forward(backbone, stack, x).value


def build_and_pretrain(seed: int, d_in: int, d: int, L: int, C: int,
                       pretrain_data: TaskDataset, steps: int = 400,
                       lr: float = 3e-3, batch_size: int = 32) -> Backbone:
    """Train a fresh backbone on the base distribution, then freeze it.

    A zero step budget returns a frozen random backbone with a warning flag.
    Failing to reach 60% held-out accuracy after the budget signals a broken
    generator or config.
    """
    backbone = Backbone(d_in, d, L, C, seed)
    if steps == 0:
        backbone.random_warning = True
        backbone.freeze()
        return backbone

    x_train, y_train = pretrain_data.train
    x_val, y_val = pretrain_data.val
    opt = Adam(backbone.params(), lr=lr)
    rng = np.random.default_rng([seed, SEED_PRETRAIN_SHUFFLE])
    n = len(y_train)
    order = rng.permutation(n)
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        for p in backbone.params():
            p.zero_grad()
        tape = Tape()
        logits = forward(backbone, None, x_train[idx], tape)
        loss = tape.cross_entropy(logits, y_train[idx])
        tape.backward(loss)
        opt.step()

    preds = predict_logits(backbone, None, x_val).argmax(axis=1)
    acc = float((preds == y_val).mean())
    backbone.pretrain_accuracy = acc
    if acc < 0.60:
        raise PretrainingError(
            f"backbone reached only {acc:.3f} held-out accuracy after {steps} steps")
    backbone.freeze()
    return backbone


# -- checkpoint serialization ------------------------------------------


def save_checkpoint(path, backbone: Backbone, stack: AdapterStack):
    """Single self-describing binary file (npz) with magic string OACL1."""
    arrays = {
        "magic": np.array(CHECKPOINT_MAGIC),
        "dims": np.array([backbone.d_in, backbone.d, backbone.L, backbone.C]),
        "backbone/embed": backbone.embed.value,
        "backbone/head": backbone.head.value,
        "n_tasks": np.array(stack.task_count),
    }
    for i, w in enumerate(backbone.hidden):
        arrays[f"backbone/hidden{i}"] = w.value
    for point, adapters in enumerate(stack.points):
        for t, a in enumerate(adapters, start=1):
            prefix = f"adapter/p{point}/t{t}"
            arrays[f"{prefix}/W1"] = a.W1.value
            arrays[f"{prefix}/W2"] = a.W2.value
            arrays[f"{prefix}/g"] = a.g.value
            arrays[f"{prefix}/tau"] = a.tau.value
            arrays[f"{prefix}/flags"] = np.array(
                [int(a.frozen), int(a.mask_enabled)])
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[Backbone, AdapterStack]:
    with np.load(path, allow_pickle=False) as z:
        if "magic" not in z or str(z["magic"]) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not an {CHECKPOINT_MAGIC} checkpoint")
        d_in, d, L, C = (int(v) for v in z["dims"])
        backbone = Backbone(d_in, d, L, C, seed=0)
        backbone.embed = Param(z["backbone/embed"], frozen=True)
        backbone.head = Param(z["backbone/head"], frozen=True)
        backbone.hidden = [Param(z[f"backbone/hidden{i}"], frozen=True) for i in range(L)]
        stack = AdapterStack(L)
        n_tasks = int(z["n_tasks"])
        rng = np.random.default_rng(0)
        for point in range(L):
            for t in range(1, n_tasks + 1):
                prefix = f"adapter/p{point}/t{t}"
                frozen, mask_enabled = (bool(v) for v in z[f"{prefix}/flags"])
                a = OAAdapter(d, z[f"{prefix}/W1"].shape[0],
                              float(z[f"{prefix}/tau"][0, 0]), rng,
                              mask_enabled=mask_enabled)
                a.W1 = Param(z[f"{prefix}/W1"], frozen=frozen)
                a.W2 = Param(z[f"{prefix}/W2"], frozen=frozen)
                a.g = Param(z[f"{prefix}/g"], frozen=frozen or not mask_enabled)
                a.tau = Param(z[f"{prefix}/tau"], frozen=frozen or not mask_enabled)
                stack.points[point].append(a)
            from .orthogonality import activated_basis
            stack.bases[point] = [activated_basis(a, t + 1)
                                  for t, a in enumerate(stack.points[point]) if a.frozen]
    return backbone, stack

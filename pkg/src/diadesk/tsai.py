"""Task-specific adapter integration.

Each task owns, per transformer block, a bottleneck adapter
``A(p) = ReLU(p W_down) W_up`` and a signature vector ``tau``. A token's
relevance to a task is the cosine between the token and ``tau``. With one
task the adapter output is scaled by that raw cosine; with several tasks
the cosines are softmax-normalized across tasks and the adapter outputs are
mixed with those weights. Everything happens per token in a single pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .tensor import Tensor


@dataclass(eq=False)
class TaskAdapter:
    w_down: Tensor  # (d, r)
    w_up: Tensor  # (r, d)
    block: int
    task: int
    calls: int = 0  # tokens evaluated, for instrumentation

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]


@dataclass(eq=False)
class SignatureVector:
    tau: Tensor  # (d,)
    block: int
    task: int


def adapter_forward(p, adapter: TaskAdapter) -> Tensor:
    """Un-scaled adapter output ``ReLU(p W_down) W_up`` for tokens ``(..., d)``."""
    p = T.as_tensor(p)
    if p.shape[-1] != adapter.w_down.shape[0]:
        raise DimensionError(f"token width {p.shape[-1]} != adapter width {adapter.w_down.shape[0]}")
    adapter.calls += int(np.prod(p.shape[:-1], dtype=np.int64))
    return T.matmul(T.relu(T.matmul(p, adapter.w_down)), adapter.w_up)


def relevance_scalar(p, signature: SignatureVector) -> Tensor:
    """Cosine between each token and the task signature, shape ``p.shape[:-1]``."""
    return T.matmul(T.l2_normalize(p, axis=-1), T.l2_normalize(signature.tau))


def integrate(p, entries: Sequence[tuple[TaskAdapter, SignatureVector]]) -> Tensor:
    """Residual term added by the adapters of tasks ``1..t`` to tokens ``p``."""
    p = T.as_tensor(p)
    if not entries:
        return T.zeros(p.shape)
    if len(entries) == 1:
        adapter, sig = entries[0]
        s = relevance_scalar(p, sig)
        return T.reshape(s, s.shape + (1,)) * adapter_forward(p, adapter)
    scores = T.stack([relevance_scalar(p, sig) for _, sig in entries], axis=-1)
    weights = T.softmax(scores, axis=-1)
    out = None
    for i, (adapter, _) in enumerate(entries):
        term = weights[..., i : i + 1] * adapter_forward(p, adapter)
        out = term if out is None else out + term
    return out


class AdapterBank:
    """Per-block ordered lists of ``(TaskAdapter, SignatureVector)``, one entry per task."""

    def __init__(self, dim: int, depth: int, rank: int = 8, seed: int = 0):
        if not 0 < rank < dim:
            raise UsageError(f"adapter rank must satisfy 0 < r < d, got r={rank}, d={dim}")
        self.dim = dim
        self.depth = depth
        self.rank = rank
        self.seed = seed
        self.task_ids: list[int] = []
        self.entries: list[list[tuple[TaskAdapter, SignatureVector]]] = [[] for _ in range(depth)]

    @property
    def num_tasks(self) -> int:
        return len(self.task_ids)

    def add_task(self, task: int) -> AdapterBank:
        """Append a trainable adapter/signature per block and freeze all earlier ones."""
        if task in self.task_ids:
            raise UsageError(f"task {task} already in the adapter bank")
        if self.task_ids and task < self.task_ids[-1]:
            raise UsageError(f"task {task} added after task {self.task_ids[-1]}")
        for block_entries in self.entries:
            for adapter, sig in block_entries:
                for t in (adapter.w_down, adapter.w_up, sig.tau):
                    t.requires_grad = False
                    t.grad = None
        d, r = self.dim, self.rank
        bound = 1.0 / np.sqrt(d)
        for b in range(self.depth):
            rng = np.random.default_rng([self.seed, task, b])
            adapter = TaskAdapter(
                w_down=Tensor(rng.uniform(-bound, bound, size=(d, r)), requires_grad=True),
                w_up=Tensor(np.zeros((r, d)), requires_grad=True),
                block=b,
                task=task,
            )
            sig = SignatureVector(tau=Tensor(rng.normal(size=d), requires_grad=True), block=b, task=task)
            self.entries[b].append((adapter, sig))
        self.task_ids.append(task)
        return self

    def block_entries(self, block: int, task_count: int | None = None):
        entries = self.entries[block]
        return entries if task_count is None else entries[:task_count]

    def hook(self, task_count: int | None = None):
        count = self.num_tasks if task_count is None else task_count
        if count > self.num_tasks:
            raise UsageError(f"bank holds {self.num_tasks} tasks, {count} requested")

        def _hook(h: Tensor, block: int) -> Tensor:
            return integrate(h, self.entries[block][:count])

        return _hook

    def parameters(self) -> list[Tensor]:
        """Trainable tensors only (the newest task's)."""
        out = []
        for block_entries in self.entries:
            for adapter, sig in block_entries:
                out.extend(t for t in (adapter.w_down, adapter.w_up, sig.tau) if t.requires_grad)
        return out

    def freeze(self) -> AdapterBank:
        for block_entries in self.entries:
            for adapter, sig in block_entries:
                for t in (adapter.w_down, adapter.w_up, sig.tau):
                    t.requires_grad = False
                    t.grad = None
        return self

    def reset_counters(self) -> None:
        for block_entries in self.entries:
            for adapter, _ in block_entries:
                adapter.calls = 0

    def call_counts(self) -> dict[tuple[int, int], int]:
        return {(a.task, a.block): a.calls for be in self.entries for a, _ in be}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for b, block_entries in enumerate(self.entries):
            for adapter, sig in block_entries:
                prefix = f"bank.task{adapter.task}.block{b}"
                out[f"{prefix}.w_down"] = adapter.w_down.data
                out[f"{prefix}.w_up"] = adapter.w_up.data
                out[f"{prefix}.tau"] = sig.tau.data
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray], task_ids: Sequence[int]) -> None:
        self.task_ids = []
        self.entries = [[] for _ in range(self.depth)]
        for task in task_ids:
            for b in range(self.depth):
                prefix = f"bank.task{task}.block{b}"
                self.entries[b].append((
                    TaskAdapter(Tensor(np.array(state[f"{prefix}.w_down"])), Tensor(np.array(state[f"{prefix}.w_up"])), b, task),
                    SignatureVector(Tensor(np.array(state[f"{prefix}.tau"])), b, task),
                ))
            self.task_ids.append(task)

    def copy(self) -> AdapterBank:
        clone = AdapterBank(self.dim, self.depth, self.rank, self.seed)
        clone.load_state_dict({k: v.copy() for k, v in self.state_dict().items()}, list(self.task_ids))
        return clone


def add_task(bank: AdapterBank, task: int) -> AdapterBank:
    return bank.add_task(task)

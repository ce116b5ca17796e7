"""Cosine classifier with per-task row blocks and the scaled-margin CE loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, UsageError
from .optim import SGD, cosine_lr
from .tensor import NORMALIZE_EPS, Tensor


@dataclass(frozen=True)
class MarginLossConfig:
    """``s = 0`` is the no-scale sentinel (effective scale 1)."""

    s: float = 16.0
    m: float = 0.1

    def __post_init__(self):
        if self.s < 0 or self.m < 0:
            raise UsageError("margin loss needs s >= 0 and m >= 0")

    @property
    def scale(self) -> float:
        return 1.0 if self.s == 0 else self.s


PLAIN_CE = MarginLossConfig(0.0, 0.0)


class CosineClassifier:
    """Rows grouped by the task that introduced their classes.

    The newest block is ``W_cls^n``; every earlier block together is ``W_cls^o``.
    """

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.blocks: list[Tensor] = []
        self.block_classes: list[list[int]] = []

    @property
    def class_ids(self) -> list[int]:
        return [c for cs in self.block_classes for c in cs]

    @property
    def num_classes(self) -> int:
        return sum(len(cs) for cs in self.block_classes)

    def add_classes(self, classes: Sequence[int]) -> None:
        seen = set(self.class_ids)
        if seen.intersection(classes):
            raise UsageError(f"classes {sorted(seen.intersection(classes))} already have rows")
        rng = np.random.default_rng([self.seed, len(self.blocks)])
        rows = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=(len(classes), self.dim))
        self.blocks.append(Tensor(rows, requires_grad=True))
        self.block_classes.append(list(classes))

    def set_rows(self, class_id: int, row) -> None:
        for blk, cs in zip(self.blocks, self.block_classes):
            if class_id in cs:
                data = blk.data.copy()
                data[cs.index(class_id)] = np.asarray(row, dtype=np.float64)
                blk.data = data
                return
        raise UsageError(f"unknown class {class_id}")

    def weight(self) -> Tensor:
        return self.blocks[0] if len(self.blocks) == 1 else T.concat(self.blocks, axis=0)

    def column_of(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.class_ids)}

    def new_block_slice(self) -> slice:
        n = self.num_classes
        return slice(n - len(self.block_classes[-1]), n)

    def set_trainable(self, old: bool, new: bool) -> None:
        for i, blk in enumerate(self.blocks):
            blk.requires_grad = new if i == len(self.blocks) - 1 else old
            blk.grad = None

    def parameters(self) -> list[Tensor]:
        return [b for b in self.blocks if b.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"classifier.block{i}": b.data for i, b in enumerate(self.blocks)}

    def load_state_dict(self, state: Mapping[str, np.ndarray], block_classes: Sequence[Sequence[int]]) -> None:
        self.blocks = [Tensor(np.array(state[f"classifier.block{i}"])) for i in range(len(block_classes))]
        self.block_classes = [list(cs) for cs in block_classes]

    def predict(self, features) -> np.ndarray:
        """Class ids of the argmax cosine logit."""
        with T.no_grad():
            logits = cosine_logits(features, self).data
        return np.asarray(self.class_ids)[np.argmax(logits, axis=-1)]


def cosine_logits(feature, classifier: CosineClassifier | Tensor) -> Tensor:
    """Cosine between each feature ``(..., d)`` and each class row: ``(..., C)``."""
    w = classifier.weight() if isinstance(classifier, CosineClassifier) else T.as_tensor(classifier)
    if np.any(np.linalg.norm(w.data, axis=-1) <= NORMALIZE_EPS):
        raise DegenerateInputError("classifier has a zero weight row")
    return T.matmul(T.l2_normalize(feature, axis=-1), T.transpose(T.l2_normalize(w, axis=-1), None))


def margin_ce_loss(logits, target, cfg: MarginLossConfig = PLAIN_CE) -> Tensor:
    """Mean of ``-log e^{s(xi_y - m)} / (e^{s(xi_y - m)} + sum_{c != y} e^{s xi_c})``.

    ``logits`` are cosines ``(B, C)`` (or ``(C,)``) restricted to the classes
    that form the denominator; ``target`` holds column indices into them.
    """
    logits = T.as_tensor(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = T.reshape(logits, (1, logits.shape[0]))
    y = np.atleast_1d(np.asarray(target))
    if y.shape[0] != logits.shape[0] or not np.issubdtype(y.dtype, np.integer):
        raise UsageError("one integer target per row is required")
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise UsageError(f"target out of range for {logits.shape[1]} classes")
    rows = np.arange(len(y))
    margin = np.zeros(logits.shape)
    margin[rows, y] = cfg.m
    z = (logits - margin) * cfg.scale
    return -T.getitem(T.log_softmax(z, axis=-1), (rows, y)).mean()


def align_classifier(
    classifier: CosineClassifier,
    prototypes: Mapping[int, np.ndarray],
    make_batches: Callable[[int], Iterable[tuple[np.ndarray, np.ndarray]]],
    epochs: int,
    lr: float,
    momentum: float = 0.9,
) -> list[float]:
    """Fine-tune every classifier row with plain CE over all seen classes.

    ``make_batches(epoch)`` yields ``(features, class_ids)`` pairs, typically
    real current-task features stacked with reconstructed old-class ones.
    Returns the mean loss per epoch.
    """
    old = [c for cs in classifier.block_classes[:-1] for c in cs]
    missing = [c for c in old if c not in prototypes]
    if missing:
        raise UsageError(f"no prototypes for old classes {missing}")
    classifier.set_trainable(old=True, new=True)
    opt = SGD(classifier.parameters(), lr=lr, momentum=momentum)
    col = classifier.column_of()
    history = []
    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, epochs)
        total, count = 0.0, 0
        for feats, labels in make_batches(epoch):
            y = np.array([col[int(c)] for c in labels])
            loss = margin_ce_loss(cosine_logits(feats, classifier), y, PLAIN_CE)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * len(y)
            count += len(y)
        history.append(total / max(count, 1))
    classifier.set_trainable(old=False, new=False)
    return history

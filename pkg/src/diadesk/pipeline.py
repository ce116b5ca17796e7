"""Two-stage incremental training: new-task learning, then classifier alignment."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .alignment import PDL_VARIANTS, gaussian_baseline_sample, pdl_variants, pfr_reconstruct_many
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import CosineClassifier, MarginLossConfig, align_classifier, cosine_logits, margin_ce_loss
from .data import AccessAuditor, Dataset, TaskData, TaskSplit
from .errors import ConfigError, DatasetError, TaskError, UsageError
from .optim import SGD, cosine_lr
from .tsai import AdapterBank, TaskAdapter, adapter_forward
from .vit import Backbone, BackboneConfig

log = logging.getLogger(__name__)

FEATURE_SOURCES = ("pfr", "gaussian")
EVAL_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.015
    epochs: int = 20
    batch_size: int = 32
    lam: float = 0.1
    beta: float = 0.7
    num_pseudo: int = 32
    rank: int = 8
    seed: int = 0
    momentum: float = 0.9
    margin_scale: float = 16.0
    margin: float = 0.1
    align_epochs: int = 5
    align_lr: float = 0.015
    # ablation switches
    use_pdl: bool = True
    use_pfr: bool = True  # False skips classifier alignment entirely
    feature_source: str = "pfr"  # "gaussian" is the Gaussian-sampling baseline
    pdl_variant: str = "pdl"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("must be >= 0", "lam")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("must lie in [0, 1]", "beta")
        for key in ("epochs", "batch_size", "num_pseudo", "rank"):
            if getattr(self, key) <= 0:
                raise ConfigError("must be positive", key)
        if self.align_epochs < 0:
            raise ConfigError("must be >= 0", "align_epochs")
        if self.lr <= 0 or self.align_lr <= 0:
            raise ConfigError("learning rates must be positive", "lr")
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigError(f"expected one of {FEATURE_SOURCES}", "feature_source")
        if self.pdl_variant not in PDL_VARIANTS:
            raise ConfigError(f"expected one of {PDL_VARIANTS}", "pdl_variant")

    @property
    def margin_loss(self) -> MarginLossConfig:
        return MarginLossConfig(self.margin_scale, self.margin)

    def to_dict(self) -> dict:
        return asdict(self)


class PrototypeMemory:
    """Write-once store of per-class mean features (and diagonal variances)."""

    def __init__(self):
        self._mu: dict[tuple[int, int], np.ndarray] = {}
        self._var: dict[tuple[int, int], np.ndarray] = {}

    def write(self, task: int, cls: int, mu: np.ndarray, var: np.ndarray | None = None) -> None:
        if any(c == cls for _, c in self._mu):
            raise UsageError(f"prototype for class {cls} already stored")
        mu = np.array(mu, dtype=np.float64)
        mu.setflags(write=False)
        self._mu[(task, cls)] = mu
        if var is not None:
            var = np.array(var, dtype=np.float64)
            var.setflags(write=False)
            self._var[(task, cls)] = var

    def __len__(self) -> int:
        return len(self._mu)

    def __contains__(self, cls: int) -> bool:
        return any(c == cls for _, c in self._mu)

    def keys(self) -> list[tuple[int, int]]:
        return list(self._mu)

    def classes(self) -> list[int]:
        return [c for _, c in self._mu]

    def by_class(self) -> dict[int, np.ndarray]:
        return {c: mu for (_, c), mu in self._mu.items()}

    def variance(self, cls: int) -> np.ndarray:
        for (_, c), v in self._var.items():
            if c == cls:
                return v
        raise UsageError(f"no variance stored for class {cls}")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for (t, c), mu in self._mu.items():
            out[f"proto.task{t}.class{c}.mu"] = mu
            if (t, c) in self._var:
                out[f"proto.task{t}.class{c}.var"] = self._var[(t, c)]
        return out

    def load_state_dict(self, state, keys: Sequence[Sequence[int]]) -> None:
        self._mu.clear()
        self._var.clear()
        for t, c in keys:
            var = state.get(f"proto.task{t}.class{c}.var")
            self.write(t, c, state[f"proto.task{t}.class{c}.mu"], var)


class ModelSnapshot:
    """Frozen copy of backbone + adapters as of the end of the previous task."""

    def __init__(self, backbone: Backbone, bank: AdapterBank):
        self.backbone = backbone.copy().freeze()
        self.bank = bank.copy().freeze()

    def tokens(self, images) -> np.ndarray:
        with T.no_grad():
            hook = self.bank.hook() if self.bank.num_tasks else None
            return self.backbone.forward_tokens(images, hook).data


def _batched_tokens(backbone: Backbone, hook, images: np.ndarray) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, len(images), EVAL_BATCH):
            out.append(backbone.forward_tokens(images[lo : lo + EVAL_BATCH], hook).data)
    if not out:
        c = backbone.config
        return np.zeros((0, c.seq_len, c.dim))
    return np.concatenate(out)


class IncrementalLearner:
    """State and stage logic shared by the DIA learner and the fine-tune baseline."""

    name = "base"

    def __init__(self, backbone: Backbone, cfg: TrainConfig):
        self.backbone = backbone.freeze()
        self.cfg = cfg
        c = backbone.config
        self.classifier = CosineClassifier(c.dim, seed=cfg.seed)
        self.memory = PrototypeMemory()
        self.task = 0
        self.task_classes: list[list[int]] = []

    # ---- hooks for subclasses ----------------------------------------------------------
    def hook(self, task_count: int | None = None):
        raise NotImplementedError

    def trainable(self) -> list[T.Tensor]:
        raise NotImplementedError

    # ---- shared stages ------------------------------------------------------------------
    def tokens(self, images: np.ndarray, task_count: int | None = None) -> np.ndarray:
        return _batched_tokens(self.backbone, self.hook(task_count), images)

    def check_classes(self, classes: Sequence[int]) -> None:
        seen = set(self.classifier.class_ids)
        overlap = seen.intersection(classes)
        if overlap:
            raise DatasetError(f"classes {sorted(overlap)} already learned; tasks must be disjoint")

    def evaluate(self, eval_ds: Dataset, classes: Sequence[int] | None = None) -> float:
        """Top-1 accuracy (percent) over eval samples of ``classes`` (default: all seen)."""
        classes = self.classifier.class_ids if classes is None else list(classes)
        sub = eval_ds.subset(classes)
        if len(sub) == 0:
            return 0.0
        feats = self.tokens(sub.float_images())[:, 0, :]
        pred = self.classifier.predict(feats)
        return 100.0 * float(np.mean(pred == sub.labels))

    def compute_prototypes(self, t: int, data: TaskData) -> dict[int, np.ndarray]:
        """Per-class mean class-token feature under the current model."""
        images, labels = data.batch(np.arange(len(data)))
        feats = self.tokens(images)[:, 0, :]
        out = {}
        for c in data.classes:
            rows = feats[labels == c]
            if len(rows) == 0:
                raise DatasetError(f"class {c} has no samples")
            mu = rows.mean(axis=0)
            self.memory.write(t, c, mu, rows.var(axis=0))
            out[c] = mu
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        state.update(self.backbone.state_dict())
        state.update(self.classifier.state_dict())
        state.update(self.memory.state_dict())
        return state

    def meta(self) -> dict:
        return {
            "learner": self.name,
            "task": self.task,
            "task_classes": self.task_classes,
            "classifier_blocks": self.classifier.block_classes,
            "prototype_keys": [list(k) for k in self.memory.keys()],
            "backbone_config": self.backbone.config.to_dict(),
            "train_config": self.cfg.to_dict(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict(), self.meta())

    def _restore(self, state, meta) -> None:
        self.backbone.load_state_dict(state)
        self.backbone.freeze()
        self.classifier.load_state_dict(state, meta["classifier_blocks"])
        self.memory.load_state_dict(state, meta["prototype_keys"])
        self.task = meta["task"]
        self.task_classes = [list(c) for c in meta["task_classes"]]

    def _loader(self, n: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        order = rng.permutation(n)
        bs = self.cfg.batch_size
        for lo in range(0, n, bs):
            yield order[lo : lo + bs]


class DIALearner(IncrementalLearner):
    """Per-task adapters mixed per token, distillation against the previous model,
    prototype memory and reconstruction-based classifier alignment."""

    name = "dia"

    def __init__(self, backbone: Backbone, cfg: TrainConfig):
        super().__init__(backbone, cfg)
        c = backbone.config
        self.bank = AdapterBank(c.dim, c.depth, cfg.rank, seed=cfg.seed)
        self.snapshot: ModelSnapshot | None = None

    def hook(self, task_count: int | None = None):
        return self.bank.hook(task_count) if self.bank.num_tasks else None

    def trainable(self):
        return self.bank.parameters() + self.classifier.parameters()

    def begin_task(self, t: int, classes: Sequence[int]) -> None:
        self.check_classes(classes)
        self.snapshot = ModelSnapshot(self.backbone, self.bank) if t > 1 else None
        self.bank.add_task(t)
        self.classifier.add_classes(classes)
        self.classifier.set_trainable(old=False, new=True)
        self.task = t
        self.task_classes.append(list(classes))

    def train_new_task(self, t: int, data: TaskData) -> dict:
        """Optimize ``L_CE + lam * L_pdl`` over the new adapters and new classifier rows."""
        cfg = self.cfg
        if t != self.task:
            raise UsageError(f"begin_task({t}) must run before train_new_task")
        use_pdl = t > 1 and cfg.use_pdl and cfg.lam > 0
        old_tokens = None
        if use_pdl:
            images, _ = data.batch(np.arange(len(data)))
            old_tokens = _batched_tokens(self.snapshot.backbone, self.snapshot.bank.hook(), images)
        new_block = self.classifier.blocks[-1]
        col = {c: i for i, c in enumerate(self.classifier.block_classes[-1])}
        opt = SGD(self.trainable(), lr=cfg.lr, momentum=cfg.momentum)
        rng = np.random.default_rng([cfg.seed, t, 11])
        hook = self.bank.hook()
        losses, pdl_values = [], []
        for epoch in range(cfg.epochs):
            opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            total = 0.0
            for idx in self._loader(len(data), rng):
                images, labels = data.batch(idx)
                tokens = self.backbone.forward_tokens(images, hook)
                logits = cosine_logits(tokens[:, 0, :], new_block)
                y = np.array([col[int(c)] for c in labels])
                loss = margin_ce_loss(logits, y, cfg.margin_loss)
                if use_pdl:
                    pdl = pdl_variants(tokens, old_tokens[idx], cfg.pdl_variant)
                    pdl_values.append(pdl.item())
                    loss = loss + cfg.lam * pdl
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
            losses.append(total / len(data))
        self.bank.freeze()
        self.classifier.set_trainable(old=False, new=False)
        return {"loss_curve": losses, "pdl_values": pdl_values}

    def pseudo_features(self, classes: np.ndarray, cls_tokens, patch_tokens, rng) -> tuple[np.ndarray, dict]:
        mus = self.memory.by_class()
        protos = np.stack([mus[int(c)] for c in classes])
        if self.cfg.feature_source == "gaussian":
            feats = np.stack([
                gaussian_baseline_sample(mus[int(c)], self.memory.variance(int(c)), rng) for c in classes
            ])
            return feats, {}
        rec = pfr_reconstruct_many(protos, cls_tokens, patch_tokens, self.cfg.beta)
        return rec.features, rec.diagnostics()

    def run_alignment_stage(self, t: int, data: TaskData) -> dict:
        """Fine-tune all classifier rows on real features plus N pseudo-features per batch."""
        cfg = self.cfg
        if not cfg.use_pfr or cfg.align_epochs == 0:
            return {"skipped": True}
        seen = self.classifier.class_ids
        missing = [c for c in seen if c not in self.memory]
        if missing:
            raise UsageError(f"no prototypes for classes {missing}")
        images, labels = data.batch(np.arange(len(data)))
        tokens = self.tokens(images)
        rng = np.random.default_rng([cfg.seed, t, 23])
        diag = {"retrieved_mean": [], "no_retrieval": 0, "excluded_tokens": 0, "empty_pool": 0}
        seen_arr = np.asarray(seen)

        def make_batches(epoch):
            for idx in self._loader(len(labels), rng):
                sampled = seen_arr[rng.integers(0, len(seen_arr), size=cfg.num_pseudo)]
                pseudo, d = self.pseudo_features(sampled, tokens[idx, 0, :], tokens[idx, 1:, :], rng)
                if d:
                    diag["retrieved_mean"].append(d["retrieved_mean"])
                    diag["no_retrieval"] += d["no_retrieval"]
                    diag["excluded_tokens"] += d["excluded_tokens"]
                    diag["empty_pool"] += int(d["empty_pool"])
                yield np.concatenate([tokens[idx, 0, :], pseudo]), np.concatenate([labels[idx], sampled])

        history = align_classifier(self.classifier, self.memory.by_class(), make_batches, cfg.align_epochs, cfg.align_lr, cfg.momentum)
        rm = diag.pop("retrieved_mean")
        diag["retrieved_mean"] = float(np.mean(rm)) if rm else 0.0
        return {"loss_curve": history, **diag}

    def state_dict(self):
        state = super().state_dict()
        state.update(self.bank.state_dict())
        return state

    def meta(self):
        m = super().meta()
        m["bank_tasks"] = list(self.bank.task_ids)
        return m

    def _restore(self, state, meta):
        super()._restore(state, meta)
        self.bank.load_state_dict(state, meta["bank_tasks"])
        self.bank.freeze()


class FinetuneLearner(IncrementalLearner):
    """Catastrophic-forgetting control: one shared adapter per block and the whole
    classifier are fine-tuned on each task in turn; no routing, no distillation,
    no alignment."""

    name = "finetune"

    def __init__(self, backbone: Backbone, cfg: TrainConfig):
        super().__init__(backbone, cfg)
        c = backbone.config
        bank = AdapterBank(c.dim, c.depth, cfg.rank, seed=cfg.seed).add_task(1)
        self.adapters: list[TaskAdapter] = [bank.entries[b][0][0] for b in range(c.depth)]

    def hook(self, task_count: int | None = None):
        return lambda h, block: adapter_forward(h, self.adapters[block])

    def trainable(self):
        return [t for a in self.adapters for t in (a.w_down, a.w_up)] + self.classifier.parameters()

    def begin_task(self, t: int, classes: Sequence[int]) -> None:
        self.check_classes(classes)
        self.classifier.add_classes(classes)
        self.classifier.set_trainable(old=True, new=True)
        self.task = t
        self.task_classes.append(list(classes))

    def train_new_task(self, t: int, data: TaskData) -> dict:
        cfg = self.cfg
        col = self.classifier.column_of()
        for a in self.adapters:
            a.w_down.requires_grad = a.w_up.requires_grad = True
        opt = SGD(self.trainable(), lr=cfg.lr, momentum=cfg.momentum)
        rng = np.random.default_rng([cfg.seed, t, 11])
        hook = self.hook()
        losses = []
        for epoch in range(cfg.epochs):
            opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            total = 0.0
            for idx in self._loader(len(data), rng):
                images, labels = data.batch(idx)
                tokens = self.backbone.forward_tokens(images, hook)
                logits = cosine_logits(tokens[:, 0, :], self.classifier)
                loss = margin_ce_loss(logits, np.array([col[int(c)] for c in labels]), cfg.margin_loss)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
            losses.append(total / len(data))
        return {"loss_curve": losses}

    def run_alignment_stage(self, t: int, data: TaskData) -> dict:
        return {"skipped": True}

    def compute_prototypes(self, t, data):
        return {}

    def state_dict(self):
        state = super().state_dict()
        for a in self.adapters:
            state[f"shared.block{a.block}.w_down"] = a.w_down.data
            state[f"shared.block{a.block}.w_up"] = a.w_up.data
        return state

    def _restore(self, state, meta):
        super()._restore(state, meta)
        for a in self.adapters:
            a.w_down = T.Tensor(np.array(state[f"shared.block{a.block}.w_down"]))
            a.w_up = T.Tensor(np.array(state[f"shared.block{a.block}.w_up"]))


LEARNERS = {"dia": DIALearner, "finetune": FinetuneLearner}


def load_learner(path, backbone: Backbone | None = None) -> IncrementalLearner:
    state, meta = load_checkpoint(path)
    cfg = TrainConfig(**meta["train_config"])
    bb = backbone.copy() if backbone is not None else Backbone(BackboneConfig(**meta["backbone_config"]))
    learner = LEARNERS[meta["learner"]](bb, cfg)
    learner._restore(state, meta)
    return learner


@dataclass
class TaskStream:
    train: Dataset
    eval: Dataset
    split: TaskSplit


def run_incremental(
    stream: TaskStream,
    learner: IncrementalLearner,
    *,
    checkpoint_dir=None,
    start_task: int = 1,
    auditor: AccessAuditor | None = None,
    history: list[dict] | None = None,
) -> dict:
    """Train tasks ``start_task..T`` and return the metric log.

    Per task: snapshot + new adapters, new-task learning, prototypes,
    classifier alignment, evaluation on every class seen so far.
    """
    from pathlib import Path

    auditor = auditor or AccessAuditor()
    records = list(history or [])
    train_sets = {
        t: TaskData(t, stream.train.subset(g), auditor) for t, g in enumerate(stream.split.groups, start=1)
    }
    for t in range(start_task, stream.split.num_tasks + 1):
        classes = list(stream.split.groups[t - 1])
        data = train_sets[t]
        auditor.begin_task(t)
        try:
            learner.begin_task(t, classes)
            stage1 = learner.train_new_task(t, data)
            learner.compute_prototypes(t, data)
            stage2 = learner.run_alignment_stage(t, data)
            acc = learner.evaluate(stream.eval, stream.split.classes_up_to(t))
        except Exception as exc:
            raise TaskError(t, exc) from exc
        records.append({
            "task": t,
            "classes": classes,
            "accuracy": acc,
            "loss_curve": stage1["loss_curve"],
            "pdl_values": stage1.get("pdl_values", []),
            "alignment": stage2,
        })
        log.info("%s task %d: A=%.2f", learner.name, t, acc)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            learner.save(Path(checkpoint_dir) / f"task{t}.ckpt")
    accs = [r["accuracy"] for r in records]
    return {
        "schema_version": 1,
        "learner": learner.name,
        "tasks": records,
        "accuracies": accs,
        "final_accuracy": accs[-1] if accs else None,
        "average_accuracy": float(np.mean(accs)) if accs else None,
        "access_violations": len(auditor.violations),
    }

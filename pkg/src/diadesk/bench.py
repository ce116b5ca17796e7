"""Experiment harness: streams, metrics, the fine-tune baseline and ablation runs."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AccessAuditor, DatasetSpec, generate_synthetic, load_raw, make_task_split
from .errors import UsageError
from .pipeline import DIALearner, FinetuneLearner, IncrementalLearner, TaskStream, TrainConfig, run_incremental
from .vit import Backbone, BackboneConfig, pretrain_backbone

METRICS_SCHEMA_VERSION = 1

# Held-out base classes for backbone pre-training. Templates come from a seed no
# experiment stream uses, so incremental classes are never seen in pre-training.
BASE_DATASET = DatasetSpec(num_classes=30, train_per_class=100, eval_per_class=0, seed=1000, template_seed=1000)
BASE_EPOCHS = 10
BUILTIN_BACKBONE = Path(__file__).parent / "assets" / "backbone_base.ckpt"

# name -> TrainConfig overrides (method "finetune" handled separately)
ABLATIONS: dict[str, dict] = {
    "dia": {},
    "no_pdl": {"use_pdl": False},
    "no_pfr": {"use_pfr": False},
    "no_pdl_no_pfr": {"use_pdl": False, "use_pfr": False},
    "gaussian": {"feature_source": "gaussian"},
    "pdl_with_cls": {"pdl_variant": "with_cls"},
    "full_token_l1": {"pdl_variant": "full_token_l1"},
}


@dataclass
class MetricsRecord:
    accuracies: list[float]
    average_accuracy: float
    per_class: list[dict[int, float]] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]

    def to_dict(self) -> dict:
        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "accuracies": self.accuracies,
            "final_accuracy": self.final_accuracy,
            "average_accuracy": self.average_accuracy,
            "per_class": [{str(k): v for k, v in pc.items()} for pc in self.per_class],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "accuracy", "running_average"])
        for t, a in enumerate(self.accuracies, start=1):
            w.writerow([t, repr(a), repr(float(np.mean(self.accuracies[:t])))])
        return buf.getvalue()


def summarize(accuracies: Sequence[float], per_class: Sequence[dict] | None = None) -> MetricsRecord:
    accs = [float(a) for a in accuracies]
    if not accs:
        raise UsageError("no accuracies to summarize")
    if any(not 0.0 <= a <= 100.0 for a in accs):
        raise UsageError("accuracies must lie in [0, 100]")
    return MetricsRecord(accs, sum(accs) / len(accs), list(per_class or []))


def evaluate(learner: IncrementalLearner, eval_ds, classes: Sequence[int] | None = None) -> float:
    """Task-agnostic top-1 accuracy (percent) over the eval samples of ``classes``."""
    return learner.evaluate(eval_ds, classes)


def per_class_accuracy(learner: IncrementalLearner, eval_ds, classes: Sequence[int]) -> dict[int, float]:
    return {int(c): learner.evaluate(eval_ds, [c]) for c in classes}


def load_stream(spec: DatasetSpec, num_tasks: int, split_seed: int | None = None) -> TaskStream:
    if spec.source == "raw":
        if not spec.path:
            raise UsageError("raw datasets need a path")
        train = load_raw(Path(spec.path) / "train.bin")
        eval_ = load_raw(Path(spec.path) / "eval.bin")
    else:
        train, eval_ = generate_synthetic(spec)
    seed = spec.seed if split_seed is None else split_seed
    return TaskStream(train, eval_, make_task_split(spec.num_classes, num_tasks, seed))


def default_stream(seed: int = 0) -> TaskStream:
    """10 synthetic classes in 5 tasks of 2, 200 train / 50 eval samples per class."""
    return load_stream(DatasetSpec(seed=seed), num_tasks=5)


def pretrain_base_backbone(
    config: BackboneConfig | None = None,
    spec: DatasetSpec = BASE_DATASET,
    epochs: int = BASE_EPOCHS,
    seed: int = 0,
) -> Backbone:
    base, _ = generate_synthetic(spec)
    return pretrain_backbone(config or BackboneConfig(), base.float_images(), base.labels, epochs=epochs, seed=seed)


def save_backbone(path, backbone: Backbone, **meta) -> None:
    save_checkpoint(path, backbone.state_dict(), {"backbone_config": backbone.config.to_dict(), **meta})


def load_backbone(path) -> Backbone:
    state, meta = load_checkpoint(path)
    if "backbone_config" not in meta:
        raise UsageError(f"{path} is not a backbone checkpoint")
    bb = Backbone(BackboneConfig(**meta["backbone_config"]))
    bb.load_state_dict(state)
    return bb.freeze()


def builtin_backbone() -> Backbone:
    """The shipped backbone pre-trained on ``BASE_DATASET`` (default config)."""
    return load_backbone(BUILTIN_BACKBONE)


def run_method(
    stream: TaskStream,
    backbone: Backbone,
    cfg: TrainConfig,
    method: str = "dia",
    *,
    checkpoint_dir=None,
    with_per_class: bool = False,
) -> dict:
    learners = {"dia": DIALearner, "finetune": FinetuneLearner}
    if method not in learners:
        raise UsageError(f"unknown method {method!r}")
    learner = learners[method](backbone.copy(), cfg)
    auditor = AccessAuditor()
    log = run_incremental(stream, learner, checkpoint_dir=checkpoint_dir, auditor=auditor)
    if with_per_class:
        log["per_class_final"] = {
            str(k): v for k, v in per_class_accuracy(learner, stream.eval, learner.classifier.class_ids).items()
        }
    log["config"] = cfg.to_dict()
    log["method"] = method
    return log


def baseline_finetune(stream: TaskStream, backbone: Backbone, cfg: TrainConfig) -> MetricsRecord:
    """Sequential fine-tuning of one shared adapter + classifier: the forgetting control."""
    log = run_method(stream, backbone, cfg, "finetune")
    return summarize(log["accuracies"])


def run_ablation(stream: TaskStream, backbone: Backbone, cfg: TrainConfig, name: str) -> dict:
    if name == "finetune":
        return run_method(stream, backbone, cfg, "finetune")
    if name not in ABLATIONS:
        raise UsageError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS) + ['finetune']}")
    log = run_method(stream, backbone, replace(cfg, **ABLATIONS[name]), "dia")
    log["ablation"] = name
    return log


def accuracy_curve_rows(logs: dict[str, dict]) -> str:
    """Whitespace-separated columns (task, one accuracy column per run) for gnuplot."""
    names = sorted(logs)
    n = max(len(logs[k]["accuracies"]) for k in names)
    lines = ["# task " + " ".join(names)]
    for t in range(n):
        cells = []
        for k in names:
            accs = logs[k]["accuracies"]
            cells.append(f"{accs[t]:.6f}" if t < len(accs) else "NaN")
        lines.append(f"{t + 1} " + " ".join(cells))
    return "\n".join(lines) + "\n"

"""Command line entry point: ``diadesk <subcommand> ...``.

Subcommands
    gen-data   write the configured dataset as raw binary files
    train      run the incremental stream, write logs and per-task checkpoints
    eval       re-evaluate a saved checkpoint on the configured eval split
    analyze    SVD factorization reports, one JSON file per (task, block)
    ablate     train with ablation flags applied on top of the config
    report     gnuplot-ready accuracy columns and a CSV summary of finished runs
    pretrain   regenerate a base-class backbone checkpoint
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import bench
from .config import AblationFlags, ExperimentConfig, dump_config, load_config
from .data import generate_synthetic, write_raw
from .errors import DiaError, UsageError
from .pipeline import load_learner
from .svd_analysis import TOLERANCE, analyze_bank, make_probes
from .vit import Backbone

log = logging.getLogger("diadesk")


def _backbone(cfg: ExperimentConfig) -> Backbone:
    spec = cfg.backbone
    if spec.checkpoint is None:
        return Backbone(spec.config, seed=spec.seed).freeze()
    path = bench.BUILTIN_BACKBONE if spec.checkpoint == "builtin" else Path(spec.checkpoint)
    bb = bench.load_backbone(path)
    if bb.config != spec.config:
        raise UsageError(f"backbone checkpoint {path} has config {bb.config}, experiment expects {spec.config}")
    return bb


def _stream(cfg: ExperimentConfig):
    return bench.load_stream(cfg.dataset, cfg.num_tasks, cfg.split_seed)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train(cfg: ExperimentConfig, out: Path) -> dict:
    train_cfg = cfg.effective_train
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg) + "\n")
    logd = bench.run_method(
        _stream(cfg), _backbone(cfg), train_cfg, cfg.method, checkpoint_dir=out / "checkpoints", with_per_class=True
    )
    _write_json(out / "metrics.json", logd)
    (out / "metrics.csv").write_text(bench.summarize(logd["accuracies"]).to_csv())
    print(f"A^T={logd['final_accuracy']:.2f} mean={logd['average_accuracy']:.2f} -> {out}")
    return logd


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.dataset.source != "synthetic":
        raise UsageError("gen-data only renders synthetic datasets")
    out = Path(args.out or Path(cfg.output_dir) / "data")
    out.mkdir(parents=True, exist_ok=True)
    train, eval_ = generate_synthetic(cfg.dataset)
    write_raw(out / "train.bin", train)
    write_raw(out / "eval.bin", eval_)
    print(f"wrote {len(train)} train / {len(eval_)} eval samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _train(cfg, Path(args.out or cfg.output_dir))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    learner = load_learner(args.checkpoint, _backbone(cfg))
    stream = _stream(cfg)
    classes = stream.split.classes_up_to(learner.task)
    acc = bench.evaluate(learner, stream.eval, classes)
    result = {"task": learner.task, "accuracy": acc, "checkpoint": str(args.checkpoint)}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), result)
    return 0


def cmd_analyze(args) -> int:
    learner = load_learner(args.checkpoint)
    bank = getattr(learner, "bank", None)
    if bank is None or not bank.num_tasks:
        raise UsageError("checkpoint holds no per-task adapters")
    probes = make_probes(bank.dim, args.probes, args.seed)
    out = Path(args.out)
    failures = 0
    grouped: dict[tuple[int, int], dict] = {}
    for rep in analyze_bank(bank, probes, args.tol):
        entry = grouped.setdefault((rep.task, rep.block), {"task": rep.task, "block": rep.block, "schema_version": 1})
        entry[rep.kind] = rep.to_dict()
        failures += not rep.passed
    for (t, b), entry in sorted(grouped.items()):
        entry["passed"] = all(entry[k]["passed"] for k in ("linear", "nonlinear"))
        _write_json(out / f"task{t}_block{b}.json", entry)
    print(f"{len(grouped)} reports in {out}, {failures} failing")
    return 1 if failures else 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    flags = AblationFlags(
        no_pdl=args.no_pdl or cfg.ablation.no_pdl,
        no_pfr=args.no_pfr or cfg.ablation.no_pfr,
        gaussian_fr=args.gaussian_fr or cfg.ablation.gaussian_fr,
        pdl_variant=args.pdl_variant if args.pdl_variant is not None else cfg.ablation.pdl_variant,
        beta=args.beta if args.beta is not None else cfg.ablation.beta,
        lam=args.lam if args.lam is not None else cfg.ablation.lam,
    )
    cfg = replace(cfg, ablation=flags)
    cfg.effective_train  # validate before any work
    tag = args.tag or "_".join(
        [k for k in ("no_pdl", "no_pfr", "gaussian_fr") if getattr(flags, k)]
        + [f"{k}{getattr(flags, k)}" for k in ("pdl_variant", "beta", "lam") if getattr(flags, k) is not None]
    ) or "full"
    root = Path(args.out or Path(cfg.output_dir) / "ablate")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    for seed in seeds:
        seeded = replace(cfg, train=replace(cfg.train, seed=seed))
        if args.seeds:
            seeded = replace(seeded, dataset=replace(cfg.dataset, seed=seed))
        _train(seeded, root / f"{tag}_seed{seed}")
    return 0


def cmd_report(args) -> int:
    logs = {}
    for run in args.runs:
        path = Path(run)
        path = path / "metrics.json" if path.is_dir() else path
        try:
            logs[path.parent.name] = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"no metrics log at {path}") from exc
    columns = bench.accuracy_curve_rows(logs)
    table = ["run,final_accuracy,average_accuracy"] + [
        f"{k},{v['final_accuracy']!r},{v['average_accuracy']!r}" for k, v in sorted(logs.items())
    ]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "accuracy_curves.dat").write_text(columns)
        (out / "summary.csv").write_text("\n".join(table) + "\n")
    sys.stdout.write(columns)
    return 0


def cmd_pretrain(args) -> int:
    spec = replace(bench.BASE_DATASET, num_classes=args.classes, train_per_class=args.per_class)
    bb = bench.pretrain_base_backbone(spec=spec, epochs=args.epochs, seed=args.seed)
    bench.save_backbone(args.out, bb, base_dataset=asdict(spec), epochs=args.epochs, seed=args.seed)
    print(f"backbone written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diadesk", description="Desk-scale non-exemplar class-incremental learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the configured synthetic dataset to raw binary files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="directory (default: <output_dir>/data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the task stream")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override output_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="also write the result JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="SVD identity reports for every adapter in a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--probes", type=int, default=128)
    a.add_argument("--seed", type=int, default=20240101)
    a.add_argument("--tol", type=float, default=TOLERANCE)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("ablate", help="train with components switched off or re-weighted")
    b.add_argument("--config", required=True)
    b.add_argument("--no-pdl", action="store_true", help="drop patch-level distillation")
    b.add_argument("--no-pfr", action="store_true", help="skip classifier alignment")
    b.add_argument("--gaussian-fr", action="store_true", help="Gaussian-sampled old-class features")
    b.add_argument("--pdl-variant", choices=["pdl", "with_cls", "full_token_l1"])
    b.add_argument("--beta", type=float)
    b.add_argument("--lam", type=float)
    b.add_argument("--seeds", help="comma-separated seeds (sets train and dataset seed)")
    b.add_argument("--tag", help="run directory prefix")
    b.add_argument("--out", help="root directory (default: <output_dir>/ablate)")
    b.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="accuracy curves (gnuplot columns) and a CSV summary")
    r.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    pt = sub.add_parser("pretrain", help="pre-train a backbone on held-out base classes")
    pt.add_argument("--out", required=True)
    pt.add_argument("--classes", type=int, default=bench.BASE_DATASET.num_classes)
    pt.add_argument("--per-class", type=int, default=bench.BASE_DATASET.train_per_class)
    pt.add_argument("--epochs", type=int, default=bench.BASE_EPOCHS)
    pt.add_argument("--seed", type=int, default=0)
    pt.set_defaults(func=cmd_pretrain)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DiaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface.

Subcommands: synth-data, train, eval, audit-params, report.
Exit codes: 0 success, 1 config error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .backbone import BackboneParams, ViTConfig, load_backbone, save_backbone
from .data import SyntheticLTSpec, generate_synthetic_lt, load_dataset, save_dataset
from .errors import ArchiveError, ConfigError
from .peft import PeftConfig
from .rng import RngStream
from .trainer import (
    TrainConfig,
    TteConfig,
    audit_params,
    evaluate_model,
    load_checkpoint,
    report_json,
    save_checkpoint,
    train,
)
from .tte import validate_expand


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pel", description="Parameter-efficient long-tailed fine-tuning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic long-tailed dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--n-max", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--out", required=True, help="output directory (train.pel + test.pel)")

    p = sub.add_parser("train", help="train tuning module + classifier on a frozen backbone")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--data", required=True, help="dataset archive, or a directory with train.pel/test.pel")
    p.add_argument("--backbone", required=True, help="backbone weights archive")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tte-expand", type=int, default=None, help="enable TTE with this expanded size")
    p.add_argument("--tte", choices=["off"], default=None, help="'off' disables TTE")

    p = sub.add_parser("audit-params", help="closed-form vs enumerated parameter counts")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=["imagenet-lt", "places-lt", "inat18", "cifar100-lt"])
    group.add_argument("--config", help="JSON file with vit/peft/classes fields")

    p = sub.add_parser("report", help="analysis payloads for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("init-backbone", help="write a randomly initialized backbone archive")
    p.add_argument("--image-size", type=int, required=True)
    p.add_argument("--patch-size", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--projection-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _load_datasets(data_arg: str):
    path = Path(data_arg)
    if path.is_dir():
        train_path = path / "train.pel"
        test_path = path / "test.pel"
        if not train_path.exists():
            raise ArchiveError(f"{path}: no train.pel in dataset directory")
        test = load_dataset(test_path) if test_path.exists() else None
        return load_dataset(train_path), test
    return load_dataset(path), None


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _write_analysis_csvs(out_dir: Path, report: dict) -> None:
    analysis = report.get("analysis", {})
    if "classifier_weight_norms" in analysis:
        _write_csv(out_dir / "weight_norms.csv", ["class", "weight_norm"],
                   list(enumerate(analysis["classifier_weight_norms"])))
    if "class_mean_similarity" in analysis:
        sim = analysis["class_mean_similarity"]
        _write_csv(out_dir / "similarity.csv", [f"class_{j}" for j in range(len(sim))], sim)
    if "learned_scales" in analysis:
        _write_csv(out_dir / "scales.csv", ["layer", "scale"],
                   list(enumerate(analysis["learned_scales"])))
    if report.get("epochs"):
        rows = []
        for e in report["epochs"]:
            acc = e["train_accuracy"]
            rows.append([e["epoch"], e["lr"], e["train_loss"], acc.get("overall"),
                         acc.get("many"), acc.get("medium"), acc.get("few")])
        _write_csv(out_dir / "convergence.csv",
                   ["epoch", "lr", "train_loss", "overall", "many", "medium", "few"], rows)
    if "train_test_gap" in report:
        gaps = report["train_test_gap"]
        _write_csv(out_dir / "gaps.csv", ["split", "gap"],
                   [[k, v] for k, v in gaps.items()])


def _cmd_synth_data(args) -> int:
    spec = SyntheticLTSpec(
        class_count=args.classes, n_max=args.n_max, imbalance_ratio=args.ratio,
        image_size=args.image_size, seed=args.seed, test_per_class=args.test_per_class,
    )
    train_ds, test_ds = generate_synthetic_lt(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, out / "train.pel")
    save_dataset(test_ds, out / "test.pel")
    print(json.dumps({
        "train": str(out / "train.pel"), "test": str(out / "test.pel"),
        "train_size": len(train_ds), "test_size": len(test_ds),
        "per_class_counts": train_ds.per_class_counts.tolist(),
    }))
    return 0


def _cmd_train(args) -> int:
    with open(args.config) as f:
        doc = json.load(f)
    doc["backbone_path"] = str(Path(args.backbone).resolve())
    config = TrainConfig.from_json(doc)
    backbone, warns = load_backbone(args.backbone)
    for w in warns:
        print(f"warning: {w}", file=sys.stderr)
    if config.tte.enabled:
        msg = validate_expand(config.tte.expand, backbone.config.patch_size)
        if msg:
            print(f"warning: {msg}", file=sys.stderr)
    train_ds, test_ds = _load_datasets(args.data)
    report, model = train(config, train_ds, backbone, test_ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report))
    save_checkpoint(model, out / "checkpoint.pel")
    _write_analysis_csvs(out, report)
    summary = {"report": str(out / "report.json"), "checkpoint": str(out / "checkpoint.pel")}
    if "test_accuracy" in report:
        summary["test_accuracy"] = report["test_accuracy"]
        summary["test_accuracy_tte"] = report["test_accuracy_tte"]
    print(json.dumps(summary, sort_keys=True))
    return 0


def _resolve_tte(args, default: TteConfig) -> TteConfig:
    if args.tte == "off":
        return TteConfig.off()
    if args.tte_expand is not None:
        return TteConfig(expand=args.tte_expand, enabled=True)
    return default


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset, _ = _load_datasets(args.data)
    tte = _resolve_tte(args, model.config.tte)
    if tte.enabled:
        msg = validate_expand(tte.expand, model.vit.patch_size)
        if msg:
            print(f"warning: {msg}", file=sys.stderr)
    result = evaluate_model(model, dataset, tte)
    print(json.dumps({"tte": tte.to_json(), "accuracy": result["accuracy"]}, sort_keys=True))
    return 0


def _cmd_audit(args) -> int:
    if args.preset:
        out = audit_params(preset=args.preset)
    else:
        with open(args.config) as f:
            doc = json.load(f)
        vit = ViTConfig.from_json(doc["vit"])
        peft_config = PeftConfig.from_json(doc["peft"])
        out = audit_params(vit=vit, peft_config=peft_config, classes=doc.get("classes"))
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def _cmd_report(args) -> int:
    from .trainer import analysis_payloads, train_test_gap

    model = load_checkpoint(args.checkpoint)
    dataset, _ = _load_datasets(args.data)
    result = evaluate_model(model, dataset, model.config.tte)
    report = {
        "analysis": analysis_payloads(model, dataset),
        "test_accuracy": result["accuracy"],
    }
    if model.final_train_accuracy is not None:
        report["final_train_accuracy"] = model.final_train_accuracy
        report["train_test_gap"] = train_test_gap(model.final_train_accuracy, result["accuracy"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "analysis.json").write_text(report_json(report))
    _write_analysis_csvs(out, report)
    print(json.dumps({"analysis": str(out / "analysis.json")}))
    return 0


def _cmd_init_backbone(args) -> int:
    config = ViTConfig(
        image_size=args.image_size, patch_size=args.patch_size, depth=args.depth,
        dim=args.dim, heads=args.heads,
        has_feature_projection=args.projection_dim is not None,
        projection_dim=args.projection_dim,
    )
    params = BackboneParams.init_random(config, RngStream(args.seed))
    save_backbone(params, args.out)
    print(json.dumps({"backbone": args.out, "params": sum(t.size for _, t in params.named_tensors())}))
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "audit-params": _cmd_audit,
    "report": _cmd_report,
    "init-backbone": _cmd_init_backbone,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ArchiveError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

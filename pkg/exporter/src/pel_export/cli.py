"""pel-export: convert pretrained CLIP-style weights into toolkit archives."""

from __future__ import annotations

import argparse
import json
import sys


def _load_model(model_id: str):
    from transformers import CLIPModel

    return CLIPModel.from_pretrained(model_id).eval()


def _load_tokenizer(model_id: str):
    from transformers import AutoTokenizer

    return AutoTokenizer.from_pretrained(model_id)


def _read_classes(args) -> list[str]:
    if args.classes_file:
        with open(args.classes_file) as f:
            return [line.strip() for line in f if line.strip()]
    return [c.strip() for c in args.classes.split(",")]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pel-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("backbone", help="export the visual tower to a weights archive")
    p.add_argument("--model", required=True, help="model id or local directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("text", help="export per-class text features")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--classes", help="comma-separated class names, dataset order")
    group.add_argument("--classes-file", help="one class name per line, dataset order")
    p.add_argument("--template", default="a photo of a {}.")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    from .export import ArchitectureMismatch, export_backbone, export_text_features
    from .manifest import ExportManifest

    try:
        if args.command == "backbone":
            manifest = ExportManifest(model_id=args.model, weights_out=args.out)
            result = export_backbone(manifest, _load_model(args.model))
        else:
            manifest = ExportManifest(
                model_id=args.model, class_names=_read_classes(args),
                text_out=args.out, template=args.template,
            )
            result = export_text_features(manifest, _load_model(args.model),
                                          _load_tokenizer(args.model))
    except (ValueError, ArchitectureMismatch) as e:
        print(f"export error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

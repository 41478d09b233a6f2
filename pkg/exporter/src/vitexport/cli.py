"""Command-line entry points for the export tool."""

from __future__ import annotations

import argparse
import json
import sys

from .export import export_calibration, export_model, verify_export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vitexport")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="export model weights + reference outputs")
    p.add_argument("--model-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("calibration", help="export embedded calibration tokens")
    p.add_argument("--model-id", default="toy-vit")
    p.add_argument("--dataset", required=True, help=".npz with images[, labels]")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="re-read an export and print a summary")
    p.add_argument("--model-id", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "model":
        manifest = export_model(args.model_id, args.out, seed=args.seed)
        print(f"wrote {manifest.checkpoint_file} and {manifest.reference_file}")
    elif args.command == "calibration":
        info = export_calibration(args.dataset, args.samples, args.out,
                                  model_id=args.model_id, seed=args.seed)
        print(f"wrote {args.out} with tokens {info['tokens_shape']}")
    else:
        print(json.dumps(verify_export(args.out, args.model_id), indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())

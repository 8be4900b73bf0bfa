"""CLI: export-model / export-traces for Keras checkpoints."""

import argparse
import sys

from .export import ExportError, UnsupportedLayer, export_model, export_traces


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mdlw-export",
        description="Convert Keras checkpoints to MDLW and emit reference traces")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("export-model", help="write the checkpoint as MDLW")
    p.add_argument("--checkpoint", required=True, help=".keras model file")
    p.add_argument("--out", required=True, help="MDLW output path")

    p = sub.add_parser("export-traces", help="write logits + layer readouts")
    p.add_argument("--checkpoint", required=True, help=".keras model file")
    p.add_argument("--inputs", required=True, help="raw f32 LE input blob")
    p.add_argument("--out", required=True, help="trace file output path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "export-model":
            out, manifest = export_model(args.checkpoint, args.out)
            print(f"wrote {out} ({len(manifest['layers'])} layers) "
                  f"and {out}.manifest.json")
        else:
            out, index = export_traces(args.checkpoint, args.inputs, args.out)
            print(f"wrote {out}: {index['count']} inputs, "
                  f"{index['num_classes']} logits, "
                  f"widths {index['layer_widths']}")
        return 0
    except (UnsupportedLayer, ExportError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

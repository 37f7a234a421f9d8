"""CLI: `isalux-export --mode semantic --images DIR --out DIR` or
`--mode perceptual-weights --out FILE`."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ModelLoadError, export_extractor_weights, export_semantic


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isalux-export",
        description="Export semantic prior maps or perceptual-extractor weights as ISAT1 files",
    )
    parser.add_argument("--mode", required=True, choices=["semantic", "perceptual-weights"])
    parser.add_argument("--images", help="directory of PNG/JPEG inputs (semantic mode)")
    parser.add_argument("--out", required=True, help="output directory (semantic) or file path")
    parser.add_argument(
        "--untrained",
        action="store_true",
        help="use randomly initialized models (offline testing; no real semantics)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "semantic":
            if not args.images:
                print("error: semantic mode needs --images DIR", file=sys.stderr)
                return 1
            image_dir = Path(args.images)
            images = sorted(
                str(p) for ext in ("*.png", "*.jpg", "*.jpeg") for p in image_dir.glob(ext)
            )
            if not images:
                print(f"error: no images found under {image_dir}", file=sys.stderr)
                return 1
            export_semantic(images, args.out, untrained=args.untrained)
        else:
            export_extractor_weights(args.out, untrained=args.untrained)
    except ModelLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

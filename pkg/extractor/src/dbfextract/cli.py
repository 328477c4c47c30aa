"""``extract`` command: images in, .dbf feature maps out."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import ShapeMismatchError, extract, list_inputs
from .models import ExtractorSpec


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="extract",
        description="Export last-conv-layer CNN feature maps as .dbf files",
    )
    ap.add_argument("--model", required=True, choices=["vgg16", "alexnet", "resnet50"])
    ap.add_argument("--fm", type=int, choices=[1, 2, 3],
                    help="VGG-16 block-5 sub-layer (required for vgg16)")
    ap.add_argument("--in", dest="source", required=True,
                    help="image directory or manifest file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--weights", default="pretrained",
                    choices=["pretrained", "random"],
                    help="random = seeded init for offline structural runs")
    ap.add_argument("--seed", type=int, default=0,
                    help="seed for --weights random")
    ap.add_argument("--batch-size", type=int, default=8)
    args = ap.parse_args(argv)

    try:
        spec = ExtractorSpec(args.model, args.fm)
        images = list_inputs(Path(args.source))
        if not images:
            raise FileNotFoundError(f"no input images found under {args.source}")
        count = extract(
            images, spec, Path(args.out),
            weights=args.weights, seed=args.seed, batch_size=args.batch_size,
        )
    except (ValueError, OSError, RuntimeError, ShapeMismatchError) as exc:
        print(f"extract: error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {count} feature maps ({spec.tag}) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

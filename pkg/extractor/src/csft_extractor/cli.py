"""Command line: extract features from one video or image directory."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .extract import ExtractionJob, extract
from .media import MediaError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="csft-extract",
        description="Encode uniformly sampled frames into a CSFT feature file.")
    parser.add_argument("--in", dest="input_path", required=True,
                        help="video file or directory of frame images")
    parser.add_argument("--out", dest="output_path", required=True,
                        help="feature file to write (.csft)")
    parser.add_argument("--frames", type=int, default=50)
    parser.add_argument("--encoder", default="clip-vit-b32")
    parser.add_argument("--dim", type=int, default=None,
                        help="fail unless the encoder emits this width")
    args = parser.parse_args(argv)
    try:
        prov = extract(ExtractionJob(args.input_path, args.output_path,
                                     frames=args.frames, encoder=args.encoder,
                                     expected_dim=args.dim))
    except (MediaError, EncoderError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {prov['frames']} x {prov['dim']} features "
          f"({prov['total_frames']} source frames) to {args.output_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: export-features and generate-captions.

JSON results go to stdout; logs go to stderr. Exit codes: 0 success,
2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import DEFAULT_PROMPT, AdapterConfig, AdapterError
from .export import export_features, generate_captions


def _add_common(p):
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--device", default="cpu", help="inference device")
    p.add_argument("--batch-size", type=int, default=8, help="inference batch size")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="densealign-adapters",
        description="Export frozen visual features and synthetic captions "
        "into the alignment training file formats.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser(
        "export-features",
        help="extract patch features from a frozen backbone into a feature store",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--out", required=True, help="output feature store path")
    p.add_argument("--backbone", default="stub",
                   help="backbone id: 'stub', 'stub:d_v=16,grid=4x4', or 'hf:<model-id>'")

    p = sub.add_parser(
        "generate-captions",
        help="caption every image with a generative model into JSONL",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--out", required=True, help="output caption JSONL path")
    p.add_argument("--vlm", default="stub",
                   help="caption model id: 'stub' or 'hf:<model-id>'")
    p.add_argument("--prompt", default=DEFAULT_PROMPT,
                   help="prompt recorded verbatim in every record")
    p.add_argument("--cache-dir", default="",
                   help="caption cache directory; empty disables caching")
    p.add_argument("--max-tokens", type=int, default=64,
                   help="maximum generated tokens")
    p.add_argument("--temperature", type=float, default=0.0,
                   help="sampling temperature; 0 = greedy")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "export-features":
            config = AdapterConfig(
                image_dir=args.images, features_out=args.out,
                backbone=args.backbone, device=args.device,
                batch_size=args.batch_size,
            )
            result = export_features(config)
        else:
            config = AdapterConfig(
                image_dir=args.images, captions_out=args.out,
                vlm=args.vlm, prompt=args.prompt, device=args.device,
                batch_size=args.batch_size, cache_dir=args.cache_dir,
                max_tokens=args.max_tokens, temperature=args.temperature,
                seed=args.seed,
            )
            result = generate_captions(config)
    except AdapterError as exc:
        logging.getLogger("densealign_adapters").error("%s", exc)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

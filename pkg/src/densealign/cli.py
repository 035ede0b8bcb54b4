"""Command-line entry point for training, evaluation, statistics, synthetic
data generation, and visualizations.

Every subcommand writes a run manifest (resolved configuration, inputs,
outputs, seed, tool version) before doing any work, prints machine-readable
JSON to stdout and human logs to stderr, and uses exit codes 0 (success),
2 (usage or input error), 3 (numerical failure). The DALIGN_THREADS
environment variable caps worker parallelism for evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import segeval as S
from . import trainer as TR
from .concepts import ConceptVocabulary, build_concept_vocab
from .encoder import build_vocab, tokenize
from .tensor import ParameterError, ShapeError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def log(msg):
    print(msg, file=sys.stderr)


def emit(obj):
    print(json.dumps(obj, sort_keys=True))


def worker_count():
    raw = os.environ.get("DALIGN_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"DALIGN_THREADS must be an integer, got {raw!r}")
    return 1


def write_manifest(path, subcommand, args, inputs, outputs):
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "func"
    }
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def require_files(*paths):
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input: {p}")


def parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except Exception:
        raise ValueError(f"expected HxW, got {text!r}")


# --------------------------------------------------------------------------
# train


def cmd_train(args):
    require_files(args.features, args.captions)
    if args.resume:
        require_files(args.resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", "train", args,
                   [args.features, args.captions],
                   [out / "checkpoint.dack", out / "metrics.jsonl"])
    config = TR.TrainConfig(
        features=args.features, captions=args.captions, out_dir=args.out,
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        lam=args.lam, tau=args.tau, seed=args.seed, resume=args.resume,
        clip_norm=args.clip_norm, cosine_lr=args.cosine_lr,
        vocab_min_freq=args.vocab_min_freq,
        concept_min_freq=args.concept_min_freq,
        d_t=args.d_t, n_layers=args.n_layers, n_heads=args.n_heads,
        max_len=args.max_len,
    )
    log(f"training {config.epochs} epochs on {args.captions}")
    ckpt, means = TR.fit(config)
    emit({"checkpoint": str(ckpt), "epochs": config.epochs,
          "final_metrics": means[-1] if means else {}})
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def load_prototypes(args, class_names, templates):
    if args.prototypes:
        require_files(args.prototypes)
        table = json.loads(Path(args.prototypes).read_text())
        missing = [n for n in class_names if n not in table]
        if missing:
            raise ValueError(f"prototype file lacks classes: {missing}")
        protos = np.stack([np.asarray(table[n], dtype=np.float64)
                           for n in class_names])
        norms = np.linalg.norm(protos, axis=1, keepdims=True)
        return protos / np.maximum(norms, 1e-12)
    require_files(args.checkpoint)
    model, cfg, vocab, _ = TR.load_model(args.checkpoint)
    embed = S.model_embed_fn(model, vocab, cfg.max_len)
    return S.embed_classes(class_names, templates, embed)


def load_masks(masks_dir, records):
    masks = {}
    for rec in records:
        path = Path(masks_dir) / f"{rec.image_id}.pgm"
        require_files(path)
        masks[rec.image_id] = D.read_mask(path)
    return masks


def cmd_eval(args):
    require_files(args.features, args.classes)
    if not args.prototypes:
        require_files(args.checkpoint)
    protocol = {"fg": "foreground", "whole": "whole-image"}[args.protocol]
    if protocol == "whole-image" and args.threshold is None and not args.calibrate:
        raise ValueError("whole-image protocol needs --threshold or --calibrate")

    out = Path(args.out)
    write_manifest(Path(str(out) + ".manifest.json"), "eval", args,
                   [args.features, args.classes, args.masks], [out])

    class_set = D.ClassSet.load(args.classes)
    store = D.read_feature_store(args.features)
    records = sorted(store.records, key=lambda r: r.image_id)
    masks = load_masks(args.masks, records)
    protos = load_prototypes(args, class_set.classes, class_set.templates)

    threshold = args.threshold
    if protocol == "whole-image" and args.calibrate:
        n_val = min(args.calibrate, len(records) - 1)
        val, records = records[:n_val], records[n_val:]
        base = S.EvalConfig(protocol="foreground", window=args.window,
                            stride=args.stride)
        preds = [S.predict_image(r, protos, masks[r.image_id].shape, base)
                 for r in val]
        scores = np.concatenate([p.scores.ravel() for p in preds])
        grid = (np.array([float(g) for g in args.grid.split(",")])
                if args.grid else np.linspace(scores.min(), scores.max(), 21))
        threshold = S.calibrate_threshold(
            preds, [masks[r.image_id] for r in val], grid, len(class_set.classes)
        )
        log(f"calibrated background threshold {threshold:.6g} on {n_val} images")

    config = S.EvalConfig(
        protocol=protocol, window=args.window, stride=args.stride,
        background_threshold=threshold if protocol == "whole-image" else None,
    )
    report = S.evaluate(records, masks, protos, class_set.classes, config,
                        workers=worker_count())
    report.save(out)
    emit(report.to_dict())
    return EXIT_OK


# --------------------------------------------------------------------------
# stats


def cmd_stats(args):
    require_files(args.captions)
    write_manifest(Path(args.captions).with_suffix(".stats.manifest.json"),
                   "stats", args, [args.captions], [])
    captions = D.read_captions(args.captions)
    if not captions:
        raise ValueError(f"caption store {args.captions} is empty")
    texts = [c.caption for c in captions]
    if args.concepts:
        require_files(args.concepts)
        concept_vocab = ConceptVocabulary.load(args.concepts)
    else:
        concept_vocab = build_concept_vocab(texts, min_freq=args.concept_min_freq)
    vocab = build_vocab(texts)
    corpus_words = set(vocab.id_to_token[4:])
    toks = [tokenize(t, vocab, args.max_len) for t in texts]
    items, per_caption = TR._collect_concepts(texts, toks, concept_vocab,
                                              corpus_words)
    labels = [label for _, _, label in items]
    owner = [i for i, _, _ in items]

    batches = TR.epoch_batches(list(range(len(texts))), args.batch_size,
                               args.seed, 0)
    uniques = []
    for batch in batches:
        members = set(batch)
        uniques.append(len({l for i, l in zip(owner, labels) if i in members}))
    emit({
        "concepts_per_caption": sum(per_caption) / len(per_caption),
        "unique_concepts_per_batch": (float(np.mean(uniques)) if uniques else 0.0),
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# synth / heatmap / pca


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", "synth", args, [],
                   [out / "features.dvf", out / "captions.jsonl",
                    out / "classes.json", out / "means.json"])
    h, w = parse_size(args.grid)
    spec = D.SyntheticWorldSpec(
        concepts=args.concepts.split(","), d_v=args.d_v, grid=(h, w),
        regions_per_image=args.regions, sigma=args.sigma,
        image_count=args.images, seed=args.seed, mask_scale=args.mask_scale,
        mean_mix=args.mean_mix,
    )
    store, captions, _, _ = D.generate_synthetic_world(spec, out)
    emit({"out": str(out), "images": len(store), "d_v": spec.d_v,
          "concepts": sorted(spec.concepts)})
    return EXIT_OK


def _record_by_id(store, image_id):
    if image_id not in store:
        raise ValueError(f"image id {image_id!r} not in feature store")
    return store.get(image_id)


def _query_embed_fn(args):
    if args.prototypes:
        require_files(args.prototypes)
        table = json.loads(Path(args.prototypes).read_text())

        def embed(text):
            if text not in table:
                raise ValueError(f"query {text!r} not in prototype file")
            return np.asarray(table[text], dtype=np.float64)

        return embed
    require_files(args.checkpoint)
    model, cfg, vocab, _ = TR.load_model(args.checkpoint)
    return S.model_embed_fn(model, vocab, cfg.max_len)


def cmd_heatmap(args):
    require_files(args.features)
    write_manifest(Path(str(args.out) + ".manifest.json"), "heatmap", args,
                   [args.features], [args.out])
    store = D.read_feature_store(args.features)
    rec = _record_by_id(store, args.image_id)
    size = parse_size(args.out_size) if args.out_size else (rec.h_p * 4, rec.w_p * 4)
    S.heatmap(rec, args.query, _query_embed_fn(args), args.out, size)
    emit({"out": str(args.out), "size": list(size), "query": args.query})
    return EXIT_OK


def cmd_pca(args):
    require_files(args.features)
    write_manifest(Path(str(args.out) + ".manifest.json"), "pca", args,
                   [args.features], [args.out])
    store = D.read_feature_store(args.features)
    rec = _record_by_id(store, args.image_id)
    size = parse_size(args.out_size) if args.out_size else (rec.h_p * 4, rec.w_p * 4)
    S.pca_rgb(rec, args.out, size)
    emit({"out": str(args.out), "size": list(size)})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="densealign",
        description="Dense text-to-patch alignment toolkit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(
            name, help=help_,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train the text encoder against frozen features")
    p.add_argument("--features", required=True, help="feature store file")
    p.add_argument("--captions", required=True, help="caption JSONL file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=1, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="examples per batch")
    p.add_argument("--lr", type=float, default=3e-4, help="Adam learning rate")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="concept loss weight")
    p.add_argument("--tau", type=float, default=0.1,
                   help="visual pooling temperature")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--resume", default="", help="checkpoint to resume from")
    p.add_argument("--clip-norm", type=float, default=1.0,
                   help="global gradient norm clip")
    p.add_argument("--cosine-lr", action="store_true", default=False,
                   help="cosine learning rate decay")
    p.add_argument("--vocab-min-freq", type=int, default=1,
                   help="min word frequency for the vocabulary")
    p.add_argument("--concept-min-freq", type=int, default=1,
                   help="min head frequency for the concept vocabulary")
    p.add_argument("--d-t", type=int, default=128, help="encoder width")
    p.add_argument("--n-layers", type=int, default=4, help="encoder layers")
    p.add_argument("--n-heads", type=int, default=4, help="attention heads")
    p.add_argument("--max-len", type=int, default=32, help="max caption tokens")

    p = add("eval", cmd_eval, "zero-shot segmentation scoring")
    p.add_argument("--checkpoint", default="", help="trained checkpoint")
    p.add_argument("--features", required=True, help="feature store file")
    p.add_argument("--masks", required=True, help="directory of <image_id>.pgm masks")
    p.add_argument("--classes", required=True, help="classes.json file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--protocol", choices=("fg", "whole"), default="fg",
                   help="foreground or whole-image scoring")
    p.add_argument("--threshold", type=float, default=None,
                   help="background threshold (whole protocol)")
    p.add_argument("--calibrate", type=int, default=0,
                   help="calibrate the threshold on the first N images")
    p.add_argument("--grid", default="",
                   help="comma-separated calibration thresholds")
    p.add_argument("--window", type=int, default=0,
                   help="sliding window size in patches (0 = whole grid)")
    p.add_argument("--stride", type=int, default=0,
                   help="sliding window stride in patches (0 = window)")
    p.add_argument("--prototypes", default="",
                   help="JSON class-to-vector file replacing the text encoder")

    p = add("stats", cmd_stats, "caption concept statistics")
    p.add_argument("--captions", required=True, help="caption JSONL file")
    p.add_argument("--concepts", default="",
                   help="concept vocabulary file (default: built from captions)")
    p.add_argument("--concept-min-freq", type=int, default=1,
                   help="min head frequency when building the vocabulary")
    p.add_argument("--batch-size", type=int, default=64,
                   help="batch size for the unique-concepts statistic")
    p.add_argument("--max-len", type=int, default=32, help="max caption tokens")
    p.add_argument("--seed", type=int, default=0, help="batching seed")

    p = add("synth", cmd_synth, "generate a synthetic feature/caption world")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--concepts", default="cow,tree,grass,cat",
                   help="comma-separated concept names")
    p.add_argument("--d-v", type=int, default=16, help="feature dimension")
    p.add_argument("--grid", default="16x16", help="patch grid HxW")
    p.add_argument("--regions", type=int, default=2, help="regions per image")
    p.add_argument("--sigma", type=float, default=0.05, help="feature noise scale")
    p.add_argument("--images", type=int, default=64, help="image count")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--mask-scale", type=int, default=4,
                   help="mask pixels per patch")
    p.add_argument("--mean-mix", type=float, default=0.0,
                   help="0 = orthonormal concept means, 1 = random unit vectors")

    p = add("heatmap", cmd_heatmap, "patch similarity heatmap for a text query")
    p.add_argument("--features", required=True, help="feature store file")
    p.add_argument("--image-id", required=True, help="record to visualize")
    p.add_argument("--query", required=True, help="text concept to localize")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--out-size", default="", help="output HxW (default 4x grid)")
    p.add_argument("--checkpoint", default="", help="trained checkpoint")
    p.add_argument("--prototypes", default="",
                   help="JSON query-to-vector file replacing the text encoder")

    p = add("pca", cmd_pca, "RGB PCA projection of patch features")
    p.add_argument("--features", required=True, help="feature store file")
    p.add_argument("--image-id", required=True, help="record to visualize")
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--out-size", default="", help="output HxW (default 4x grid)")

    return parser


INPUT_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    KeyError,
    ValueError,  # covers FormatError, SpecError, ConfigError, ContractError
    TR.EpochError,
    S.ReportError,
    ShapeError,
    ParameterError,
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as e:
        log(f"numerical failure: {e}")
        return EXIT_NUMERIC
    except INPUT_ERRORS as e:
        log(f"error: {e}")
        return EXIT_INPUT


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

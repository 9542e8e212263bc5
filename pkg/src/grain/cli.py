"""Command-line interface.

Subcommands: synth, annotate, train, eval (classify | attrs | retrieve |
ground), ground, inspect-shard.  Every run that produces an artifact also
writes a RunManifest next to it.  Exit codes: 0 success, 2 configuration
error, 3 data/schema error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from .annotation import AnnotateConfig, annotate_corpus
from .clients import (
    KIND_CAPTION,
    KIND_FEATURES,
    KIND_SUBJECT,
    HttpDetectionClient,
    HttpGenerationClient,
    MockDetectionClient,
    MockGenerationClient,
)
from .config import TrainConfig, resolve_config
from .data import inspect_shard, load_image, load_samples_from_manifest, read_shard
from .errors import ConfigError, CorruptImage, DegenerateBox, GrainError, SchemaError
from .evaluate import (
    ClassPromptSet,
    GrainEncoder,
    build_classifier,
    classify,
    classify_by_attributes,
    dump_groundings,
    retrieve,
)
from .model import ModelConfig
from .runlog import build_manifest, log_event
from .synth import synth_grounded_dataset
from .tokenizer import Tokenizer
from .train import fit, load_checkpoint, restore_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _write_manifest(target, command: str, argv, config: dict, seed=None, inputs=None, outputs=None, started_at=None):
    target = Path(target)
    path = target / "run_manifest.json" if target.is_dir() else Path(str(target) + ".manifest.json")
    manifest = build_manifest(
        command, list(argv), config, seed=seed, inputs=inputs or [], outputs=outputs or [], started_at=started_at
    )
    manifest.write(path)


# -- annotate ------------------------------------------------------------------


def _clients_from_fixtures(path):
    """Fixture file layout:
    {"generation": {image_id: {"subject": str, "features": str, "caption": str}},
     "detection": {image_id: {query: [[x0, y0, x1, y1, score], ...]}}}
    """
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    gen_table = {}
    for image_id, replies in payload.get("generation", {}).items():
        for kind_name, kind in (("subject", KIND_SUBJECT), ("features", KIND_FEATURES), ("caption", KIND_CAPTION)):
            if kind_name in replies:
                gen_table[(image_id, kind)] = replies[kind_name]
    det_table = {}
    for image_id, queries in payload.get("detection", {}).items():
        for query, hits in queries.items():
            det_table[(image_id, query)] = [tuple(h) for h in hits]
    return MockGenerationClient(gen_table), MockDetectionClient(det_table)


def cmd_annotate(args) -> int:
    started = time.time()
    if args.client == "mock":
        if not args.fixtures:
            raise ConfigError("--fixtures is required with the mock client")
        gen_client, det_client = _clients_from_fixtures(args.fixtures)
    else:
        if not (args.gen_endpoint and args.det_endpoint):
            raise ConfigError("--gen-endpoint and --det-endpoint are required with the http client")
        gen_client = HttpGenerationClient(args.gen_endpoint)
        det_client = HttpDetectionClient(args.det_endpoint)
    config = AnnotateConfig(
        conf_threshold=args.conf_threshold,
        nms_iou=args.nms_iou,
        retries=args.retries,
        workers=args.workers,
    )
    samples = load_samples_from_manifest(args.manifest)
    shard = annotate_corpus(samples, gen_client, det_client, config, args.out)
    inputs = [args.manifest] + ([args.fixtures] if args.fixtures else [])
    _write_manifest(
        shard, "annotate", sys.argv[1:], vars(config) | {"client": args.client},
        inputs=inputs, outputs=[shard], started_at=started,
    )
    log_event("annotate_done", shard=str(shard), n_samples=len(samples))
    return EXIT_OK


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    shard = synth_grounded_dataset(
        args.out, n_images=args.n_images, n_classes=args.n_classes, seed=args.seed, image_size=args.image_size
    )
    _write_manifest(
        Path(args.out), "synth", sys.argv[1:],
        {"n_images": args.n_images, "n_classes": args.n_classes, "image_size": args.image_size},
        seed=args.seed, outputs=[shard], started_at=started,
    )
    log_event("synth_done", shard=str(shard))
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def _cli_train_overrides(args) -> dict:
    overrides = {}
    for key in ("epochs", "batch_size", "peak_lr", "seed", "max_steps", "warmup_steps"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.no_rd_loss:
        overrides["use_rd_loss"] = False
    if args.no_box_loss:
        overrides["use_box_loss"] = False
    if args.no_mllm_caption:
        overrides["use_mllm_caption"] = False
    return overrides


def cmd_train(args) -> int:
    started = time.time()
    base = TrainConfig.tiny() if args.preset == "tiny" else TrainConfig()
    cfg = resolve_config(args.config, _cli_train_overrides(args), base=base)
    model_cfg = ModelConfig.tiny() if args.preset == "tiny" else ModelConfig()
    records = []
    for shard in args.shard:
        records.extend(read_shard(shard))
    ckpt = fit(records, args.images, model_cfg, cfg, args.out, resume=args.resume)
    _write_manifest(
        Path(args.out), "train", sys.argv[1:], cfg.to_dict() | {"preset": args.preset},
        seed=cfg.seed, inputs=list(args.shard), outputs=[ckpt], started_at=started,
    )
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def _load_encoder(checkpoint_path) -> GrainEncoder:
    payload = load_checkpoint(checkpoint_path)
    return GrainEncoder(restore_model(payload), Tokenizer.default())


def _load_labeled_images(data_dir):
    """Images + integer labels from a synth-style directory."""
    data_dir = Path(data_dir)
    with open(data_dir / "labels.json", encoding="utf-8") as f:
        labels_by_id = json.load(f)
    with open(data_dir / "class_descriptions.json", encoding="utf-8") as f:
        class_descriptions = json.load(f)
    classnames = sorted(class_descriptions)
    class_index = {name: i for i, name in enumerate(classnames)}
    image_ids = sorted(labels_by_id)
    images = np.stack([load_image(data_dir / "images" / f"{i}.png") for i in image_ids])
    labels = np.array([class_index[labels_by_id[i]] for i in image_ids])
    prompt_sets = [ClassPromptSet(name, list(class_descriptions[name])) for name in classnames]
    return image_ids, images, labels, classnames, prompt_sets


def cmd_eval(args) -> int:
    started = time.time()
    encoder = _load_encoder(args.checkpoint)
    out = Path(args.out)
    if args.mode == "classify":
        _, images, labels, classnames, prompt_sets = _load_labeled_images(args.data)
        classifier = build_classifier(prompt_sets, encoder)
        _, report = classify(images, labels, classifier, encoder, classnames, dataset=str(args.data))
    elif args.mode == "attrs":
        _, images, labels, _, prompt_sets = _load_labeled_images(args.data)
        _, report = classify_by_attributes(images, labels, prompt_sets, encoder, dataset=str(args.data))
    elif args.mode == "retrieve":
        records = read_shard(args.shard)
        images = np.stack([load_image(Path(args.images) / f"{r.image_id}.png") for r in records])
        image_embeds = encoder.embed_images(images)
        text_embeds = encoder.embed_texts([r.original_caption for r in records])
        report = retrieve(image_embeds, text_embeds, dataset=str(args.shard))
    else:  # ground
        return _run_ground(args, encoder, started)
    report.write(out)
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    inputs = [args.checkpoint] + ([args.shard] if args.mode == "retrieve" else [])
    _write_manifest(out, f"eval-{args.mode}", sys.argv[1:], {"mode": args.mode}, inputs=inputs, outputs=[out], started_at=started)
    return EXIT_OK


def _run_ground(args, encoder: GrainEncoder, started: float) -> int:
    data_dir = Path(args.data)
    if args.descriptions:
        with open(args.descriptions, encoding="utf-8") as f:
            class_descriptions = json.load(f)
    else:
        with open(data_dir / "class_descriptions.json", encoding="utf-8") as f:
            class_descriptions = json.load(f)
    descriptions = [d for name in sorted(class_descriptions) for d in class_descriptions[name]]
    with open(data_dir / "labels.json", encoding="utf-8") as f:
        image_ids = sorted(json.load(f))
    images = [load_image(data_dir / "images" / f"{i}.png") for i in image_ids]
    dump_groundings(images, image_ids, descriptions, encoder.model, encoder.tokenizer, args.out)
    _write_manifest(
        Path(args.out), "ground", sys.argv[1:], {"n_images": len(images)},
        inputs=[args.checkpoint], outputs=[args.out], started_at=started,
    )
    print(json.dumps({"out": str(args.out), "n_images": len(images)}))
    return EXIT_OK


def cmd_inspect_shard(args) -> int:
    summary = inspect_shard(args.shard)
    text = json.dumps(summary, ensure_ascii=False, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _write_manifest(Path(args.out), "inspect-shard", sys.argv[1:], {}, inputs=[args.shard], outputs=[args.out])
    print(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grain", description="fine-grained vision-language toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic grounded dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=32)
    p.add_argument("--n-classes", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", help="run the grounded-annotation pipeline")
    p.add_argument("--manifest", required=True, help="JSONL of {image_id, image_path, caption}")
    p.add_argument("--out", required=True)
    p.add_argument("--client", choices=("mock", "http"), default="mock")
    p.add_argument("--fixtures", help="canned replies for the mock client")
    p.add_argument("--gen-endpoint")
    p.add_argument("--det-endpoint")
    p.add_argument("--conf-threshold", type=float, default=0.3)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train a model on grounded shards")
    p.add_argument("--shard", action="append", required=True)
    p.add_argument("--images", required=True, help="directory holding {image_id}.png")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("tiny", "base"), default="tiny")
    p.add_argument("--config", help="YAML file with TrainConfig fields")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--peak-lr", type=float, dest="peak_lr")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--no-rd-loss", action="store_true")
    p.add_argument("--no-box-loss", action="store_true")
    p.add_argument("--no-mllm-caption", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot evaluation")
    p.add_argument("mode", choices=("classify", "attrs", "retrieve", "ground"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="synth-style directory (classify/attrs/ground)")
    p.add_argument("--shard", help="shard for retrieval")
    p.add_argument("--images", help="image directory for retrieval")
    p.add_argument("--descriptions", help="class->descriptions JSON (ground)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ground", help="dump predicted boxes and region-description matches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--descriptions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=lambda args: _run_ground(args, _load_encoder(args.checkpoint), time.time()))

    p = sub.add_parser("inspect-shard", help="summarize a shard")
    p.add_argument("shard")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_shard)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log_event("config_error", error=str(exc))
        return EXIT_CONFIG
    except (SchemaError, CorruptImage, DegenerateBox) as exc:
        log_event("data_error", error=str(exc), kind=type(exc).__name__)
        return EXIT_DATA
    except GrainError as exc:
        log_event("runtime_error", error=str(exc), kind=type(exc).__name__)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        traceback.print_exc()
        log_event("unexpected_error", error=str(exc), kind=type(exc).__name__)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

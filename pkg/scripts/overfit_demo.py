#!/usr/bin/env python3
"""Overfit the tiny preset on a small synthetic corpus and report retrieval.

Sanity harness for the full training loop: 32 images with 32 distinct marker
classes, 200 steps on one CPU core.  A healthy build drives total loss down
by well over 90% and reaches perfect Recall@1 in both retrieval directions
on the training captions.
"""

import argparse
import json
import pathlib
import tempfile
import time

import numpy as np

from grain.config import TrainConfig
from grain.data import load_image, read_shard
from grain.evaluate import GrainEncoder, retrieve
from grain.model import ModelConfig
from grain.synth import synth_grounded_dataset
from grain.train import fit, load_checkpoint, restore_model


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=pathlib.Path, default=None,
                        help="work dir (default: a fresh temp dir)")
    parser.add_argument("--n-images", type=int, default=32)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    work = args.out or pathlib.Path(tempfile.mkdtemp(prefix="overfit-"))
    data = work / "data"
    shard = synth_grounded_dataset(
        data, n_images=args.n_images, n_classes=args.n_images, seed=args.seed
    )
    records = read_shard(shard)

    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=8,
        peak_lr=1e-3,
        caption_swap_prob=0.0,
        seed=args.seed,
        checkpoint_every_epochs=args.epochs,
    )
    started = time.monotonic()
    ckpt = fit(records, data / "images", ModelConfig.tiny(), cfg, work / "run")
    elapsed = time.monotonic() - started

    entries = [
        json.loads(line)
        for line in (work / "run" / "loss_log.jsonl").read_text().splitlines()
    ]
    first = entries[0]["l_total"]
    final = float(np.mean([e["l_total"] for e in entries[-5:]]))

    model = restore_model(load_checkpoint(ckpt))
    encoder = GrainEncoder(model)
    images = np.stack(
        [load_image(data / "images" / f"{r.image_id}.png") for r in records]
    )
    report = retrieve(
        encoder.embed_images(images),
        encoder.embed_texts([r.original_caption for r in records]),
        ks=(1, 5),
    )

    print(f"trained {entries[-1]['step']} steps in {elapsed:.1f}s -> {ckpt}")
    print(f"l_total: {first:.4f} -> {final:.4f} "
          f"({1 - final / first:.1%} reduction)")
    for key in sorted(report.recall_at):
        print(f"{key}: {report.recall_at[key]:.3f}")


if __name__ == "__main__":
    main()

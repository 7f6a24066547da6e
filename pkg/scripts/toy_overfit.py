#!/usr/bin/env python3
"""End-to-end desk-scale run: synthesize a toy dataset, overfit the 3D
decoder on frozen slice embeddings, then report DSC and HD95 on the
training cases via sliding-window inference.

With the defaults (4 cases of 8x64x64, 3 classes, 200 iterations) the mean
foreground DSC lands around 0.97 in about half a minute on one CPU core.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from volseg import (
    AugmentConfig,
    Decoder3d,
    DecoderConfig,
    EncoderConfig,
    TrainConfig,
    argmax_segmentation,
    evaluate_volume,
    generate_toy_dataset,
    load_checkpoint,
    load_manifest,
    normalize_intensity,
    read_nifti,
    read_nifti_labels,
    read_nifti_spacing,
    run_training,
    sliding_window_predict,
    summarize_cases,
)


def parse_triple(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    return tuple(parts)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="toy_run", help="work directory")
    ap.add_argument("--cases", type=int, default=4)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--shape", type=parse_triple, default=(8, 64, 64),
                    help="volume D,H,W")
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--iters-per-epoch", type=int, default=25)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--train-seed", type=int, default=2)
    args = ap.parse_args()

    root = Path(args.out_dir)
    manifest_path = generate_toy_dataset(
        root / "data", num_cases=args.cases, num_classes=args.classes,
        shape=args.shape, seed=args.data_seed, num_val=0,
    )
    manifest = load_manifest(manifest_path)
    print(f"dataset: {args.cases} cases of {args.shape}, "
          f"{args.classes} classes -> {manifest_path}")

    enc_cfg = EncoderConfig(seed=0)
    dec_cfg = DecoderConfig(in_channels=256 * manifest.modality_count,
                            num_classes=manifest.num_classes)
    train_cfg = TrainConfig(
        epochs=args.epochs, iters_per_epoch=args.iters_per_epoch,
        batch_size=args.batch_size, max_epoch=args.epochs,
    )
    t0 = time.perf_counter()
    result = run_training(
        manifest=manifest, enc_cfg=enc_cfg, dec_cfg=dec_cfg,
        train_cfg=train_cfg, out_dir=root / "run",
        aug_cfg=AugmentConfig.disabled(), seed=args.train_seed,
        cache_dir=root / "cache", verbose=True,
    )
    print(f"trained {args.epochs * args.iters_per_epoch} iterations "
          f"in {time.perf_counter() - t0:.1f}s, "
          f"final loss {result.final_loss:.4f}")

    model = Decoder3d(dec_cfg)
    load_checkpoint(result.checkpoint_dir, model, dec_cfg, train_cfg, enc_cfg)

    results = []
    for entry in manifest.cases:
        vol = read_nifti(manifest.resolve(entry.image_path))
        vol = normalize_intensity(vol, manifest.normalization,
                                  *manifest.clip_percentiles)
        lab = read_nifti_labels(manifest.resolve(entry.label_path),
                                manifest.num_classes)
        spacing = read_nifti_spacing(manifest.resolve(entry.label_path))
        probs = sliding_window_predict(
            vol, model, enc_cfg, manifest.patch_size,
            overlap=0.5, cache_dir=root / "cache", case_id=entry.case_id,
        )
        seg = argmax_segmentation(probs)
        case = evaluate_volume(seg, lab.labels, spacing,
                               manifest.num_classes, entry.case_id)
        results.append(case)
        hd = "NA" if case.mean_hd95 is None else f"{case.mean_hd95:.2f}"
        print(f"{entry.case_id}: mean foreground DSC {case.mean_dsc:.4f}, "
              f"mean HD95 {hd}")

    summary = summarize_cases(results)
    print(f"mean foreground DSC over {len(results)} cases: "
          f"{summary['mean_dsc']:.4f}")
    return 0 if summary["mean_dsc"] >= 0.95 else 1


if __name__ == "__main__":
    raise SystemExit(main())

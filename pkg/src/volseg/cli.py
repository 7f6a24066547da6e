"""Command-line entry points.

Subcommands: train, predict, evaluate, extract-embeddings, count-params,
make-toy-dataset. All failures from malformed inputs exit with status 2
and a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, derive_decoder_config, load_run_config, save_run_config
from .decoder import Decoder3d, DecoderConfig, count_parameters
from .encoder import embedding_cache_get_or_compute, encode_volume
from .inference import argmax_segmentation, sliding_window_predict
from .metrics import evaluate_volume, summarize_cases, write_metrics_csv, write_metrics_json
from .nifti import (
    read_header_bytes,
    read_nifti,
    read_nifti_labels,
    read_nifti_spacing,
    write_nifti_labels,
)
from .rvf import rvf_write
from .toydata import generate_toy_dataset
from .training import TrainConfig, load_checkpoint, run_training
from .volume_io import (
    AugmentConfig,
    DatasetManifest,
    LabelVolume,
    load_manifest,
    normalize_intensity,
)


def _parse_int_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_int_quad(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected four comma-separated ints, got {text!r}")
    return tuple(int(p) for p in parts)


def _load_run(path) -> tuple[RunConfig, DatasetManifest]:
    run = load_run_config(path)
    manifest = load_manifest(run.manifest_path)
    return run, manifest


def _normalized_case_volume(manifest: DatasetManifest, entry):
    vol = read_nifti(manifest.resolve(entry.image_path))
    return normalize_intensity(vol, manifest.normalization, *manifest.clip_percentiles)


def _cmd_train(args) -> int:
    run, manifest = _load_run(args.config)
    dec_cfg = derive_decoder_config(run, manifest)
    out_dir = args.out_dir or run.output_dir
    if out_dir is None:
        raise ValueError("no output directory: pass --out-dir or set output_dir in the config")
    result = run_training(
        manifest=manifest,
        enc_cfg=run.encoder,
        dec_cfg=dec_cfg,
        train_cfg=run.train,
        out_dir=out_dir,
        aug_cfg=run.augment,
        loss_cfg=run.loss,
        seed=run.seed,
        cache_dir=run.cache_dir,
        resume=args.resume,
        verbose=not args.quiet,
    )
    print(f"trained {result.epochs_run} epochs, final_loss={result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"log: {result.log_path}")
    return 0


def _load_model_for_predict(run: RunConfig, manifest: DatasetManifest, checkpoint):
    dec_cfg = derive_decoder_config(run, manifest)
    model = Decoder3d(dec_cfg)
    load_checkpoint(checkpoint, model, dec_cfg, train_cfg=None, encoder_cfg=run.encoder)
    return model


def _cmd_predict(args) -> int:
    run, manifest = _load_run(args.config)
    model = _load_model_for_predict(run, manifest, args.checkpoint)
    window = args.window or run.inference.window or manifest.patch_size
    overlap = run.inference.overlap if args.overlap is None else args.overlap
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest.split_cases(args.split)
    if args.case is not None:
        entries = [e for e in entries if e.case_id == args.case]
        if not entries:
            raise ValueError(f"case {args.case!r} not found in split {args.split!r}")
    for entry in entries:
        vol = _normalized_case_volume(manifest, entry)
        probs = sliding_window_predict(
            vol, model, run.encoder, window,
            overlap=overlap, cache_dir=run.cache_dir, case_id=entry.case_id,
        )
        labels = argmax_segmentation(probs)
        out_path = out_dir / f"{entry.case_id}.nii.gz"
        template = read_header_bytes(manifest.resolve(entry.image_path))
        write_nifti_labels(
            out_path,
            LabelVolume(labels=labels, num_classes=manifest.num_classes),
            spacing=vol.spacing,
            template_header=template,
        )
        if args.save_probs:
            rvf_write(out_dir / f"{entry.case_id}_probs.rvf",
                      probs.astype(np.float32), metadata={"case_id": entry.case_id})
        print(f"{entry.case_id}: wrote {out_path}")
    return 0


def _fmt_metric(value) -> str:
    return "NA" if value is None else f"{value:.4f}"


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    entries = manifest.split_cases(args.split)
    if not entries:
        raise ValueError(f"no cases in split {args.split!r}")
    results = []
    for entry in entries:
        ref_path = manifest.resolve(entry.label_path)
        pred_path = Path(args.pred_dir) / f"{entry.case_id}.nii.gz"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        try:
            ref = read_nifti_labels(ref_path, manifest.num_classes)
            pred = read_nifti_labels(pred_path, manifest.num_classes)
            spacing = read_nifti_spacing(ref_path)
            case = evaluate_volume(
                pred.labels, ref.labels, spacing, manifest.num_classes, entry.case_id
            )
        except ValueError as exc:
            raise ValueError(f"case {entry.case_id}: {exc}") from exc
        results.append(case)
        print(
            f"{entry.case_id}: mean_dsc={_fmt_metric(case.mean_dsc)} "
            f"mean_hd95={_fmt_metric(case.mean_hd95)}"
        )
    summary = summarize_cases(results)
    if args.out_json:
        write_metrics_json(args.out_json, results)
    if args.out_csv:
        write_metrics_csv(args.out_csv, results)
    print(
        f"mean_dsc={_fmt_metric(summary['mean_dsc'])} "
        f"mean_hd95={_fmt_metric(summary['mean_hd95'])}"
    )
    return 0


def _cmd_extract_embeddings(args) -> int:
    run, manifest = _load_run(args.config)
    entries = [e for e in manifest.cases if e.case_id == args.case]
    if not entries:
        raise ValueError(f"case {args.case!r} not found in manifest")
    vol = _normalized_case_volume(manifest, entries[0])
    if run.cache_dir is not None:
        emb = embedding_cache_get_or_compute(args.case, vol, run.encoder, run.cache_dir)
    else:
        emb = encode_volume(vol, run.encoder)
    rvf_write(args.out, emb.data,
              metadata={"case_id": args.case, "stride": emb.stride})
    print(f"{args.case}: wrote {args.out} shape={emb.data.shape}")
    return 0


def _cmd_count_params(args) -> int:
    if args.config is not None:
        run, manifest = _load_run(args.config)
        derived = derive_decoder_config(run, manifest)
        in_channels = args.in_channels or derived.in_channels
        num_classes = args.num_classes or derived.num_classes
        block_channels = args.block_channels or derived.block_channels
    else:
        if args.in_channels is None or args.num_classes is None:
            raise ValueError(
                "pass --config or both --in-channels and --num-classes"
            )
        in_channels = args.in_channels
        num_classes = args.num_classes
        block_channels = args.block_channels or (128, 64, 32, 16)
    cfg = DecoderConfig(
        in_channels=in_channels,
        num_classes=num_classes,
        block_channels=block_channels,
    )
    count = count_parameters(cfg)
    allocated = sum(
        p.numel() for p in Decoder3d(cfg).parameters() if p.requires_grad
    )
    if count.total != allocated:
        raise RuntimeError(
            f"closed-form count {count.total} != allocated count {allocated}"
        )
    if args.json:
        print(json.dumps(
            {"total": count.total, "allocated": allocated, "match": True,
             "by_layer": count.by_layer},
            indent=2,
        ))
    else:
        width = max(len(k) for k in count.by_layer)
        for name, n in count.by_layer.items():
            print(f"{name:<{width}}  {n:>12,}")
        print(f"{'total':<{width}}  {count.total:>12,}")
        print(f"closed-form {count.total} == allocated {allocated}: match")
    return 0


def _cmd_make_toy_dataset(args) -> int:
    manifest_path = generate_toy_dataset(
        args.out_dir,
        num_cases=args.cases,
        num_classes=args.classes,
        shape=args.shape,
        modalities=args.modalities,
        seed=args.seed,
        num_val=args.val,
    )
    print(f"wrote {manifest_path}")
    if args.emit_config:
        run = RunConfig(
            manifest_path="manifest.json",
            seed=2,
            cache_dir="cache",
            train=TrainConfig(
                epochs=8, iters_per_epoch=25, batch_size=2, max_epoch=8,
                checkpoint_every=0,
            ),
            augment=AugmentConfig.disabled(),
        )
        config_path = Path(args.out_dir) / "config.json"
        save_run_config(config_path, run)
        print(f"wrote {config_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volseg",
        description="Volumetric segmentation with a frozen slice encoder "
                    "and a trainable 3D decoder.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="torch CPU thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the decoder on a dataset")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out-dir", default=None,
                   help="directory for logs and checkpoints "
                        "(default: output_dir from the config)")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="segment cases with a trained checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--case", default=None, help="restrict to one case id")
    p.add_argument("--overlap", type=float, default=None,
                   help="window overlap fraction (default: config, then 0.5)")
    p.add_argument("--window", type=_parse_int_triple, default=None,
                   help="window D,H,W (default: config, then manifest patch size)")
    p.add_argument("--save-probs", action="store_true",
                   help="also write fused class probabilities as RVF")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against reference labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("extract-embeddings",
                       help="write one case's frozen slice embeddings as RVF")
    p.add_argument("--config", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_embeddings)

    p = sub.add_parser("count-params",
                       help="closed-form decoder parameter count, cross-checked "
                            "against an allocated module")
    p.add_argument("--config", default=None,
                   help="derive decoder dimensions from a run config")
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--block-channels", type=_parse_int_quad, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("make-toy-dataset", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--shape", type=_parse_int_triple, default=(8, 64, 64),
                   help="volume D,H,W")
    p.add_argument("--modalities", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val", type=int, default=1, help="cases assigned to the val split")
    p.add_argument("--emit-config", action="store_true",
                   help="also write a ready-to-train run config")
    p.set_defaults(func=_cmd_make_toy_dataset)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

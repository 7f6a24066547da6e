#!/usr/bin/env python3
"""Print the closed-form decoder parameter table for the two reference
configurations and cross-check each total against an allocated module.

The single-modality 9-class setup totals 1,881,035 trainable parameters;
the four-modality 4-class setup totals 4,633,252.
"""

import argparse

from volseg import Decoder3d, DecoderConfig, count_parameters

REFERENCE_CONFIGS = [
    ("single modality, 9 classes",
     DecoderConfig(in_channels=256, num_classes=9)),
    ("four modalities, 4 classes",
     DecoderConfig(in_channels=1024, num_classes=4)),
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--by-layer", action="store_true",
                    help="also print the per-layer breakdown")
    args = ap.parse_args()

    for label, cfg in REFERENCE_CONFIGS:
        count = count_parameters(cfg)
        allocated = sum(
            p.numel() for p in Decoder3d(cfg).parameters() if p.requires_grad
        )
        print(f"{label} (in={cfg.in_channels}, N={cfg.num_classes}, "
              f"blocks={cfg.block_channels})")
        if args.by_layer:
            width = max(len(k) for k in count.by_layer)
            for name, n in count.by_layer.items():
                print(f"  {name:<{width}}  {n:>12,}")
        status = "match" if count.total == allocated else "MISMATCH"
        print(f"  closed-form {count.total:,} == allocated {allocated:,}: "
              f"{status}")
        if count.total != allocated:
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

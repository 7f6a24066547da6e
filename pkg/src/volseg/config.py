"""Run configuration: one JSON file wiring dataset, encoder, decoder,
training, augmentation, and loss settings together.

Parsing is strict: unknown keys and wrong types are rejected with the
JSONPath of the offending entry (e.g. ``$.train.init_lr``). Every section
is optional except ``manifest``; omitted fields take the library defaults.
Relative paths (manifest, cache_dir, encoder checkpoint) resolve against
the directory containing the config file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .decoder import DecoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .training import TrainConfig
from .volume_io import AugmentConfig, DatasetManifest

DEFAULT_BLOCK_CHANNELS = (128, 64, 32, 16)
SCHEMA_VERSION = 1


@dataclass
class InferenceConfig:
    """Sliding-window defaults; window None means the manifest patch size."""

    window: tuple[int, int, int] | None = None
    overlap: float = 0.5

    def __post_init__(self):
        if self.window is not None:
            self.window = tuple(int(w) for w in self.window)
            if len(self.window) != 3 or any(w < 1 for w in self.window):
                raise ValueError(f"window must be 3 positive ints, got {self.window}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")


@dataclass
class RunConfig:
    manifest_path: str
    seed: int = 0
    cache_dir: str | None = None
    output_dir: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_block_channels: tuple[int, int, int, int] = DEFAULT_BLOCK_CHANNELS
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.decoder_block_channels = tuple(int(c) for c in self.decoder_block_channels)


def derive_decoder_config(run: RunConfig, manifest: DatasetManifest) -> DecoderConfig:
    """Decoder input width and class count follow the data, never the config:
    in_channels = embed_dim * modalities, num_classes from the manifest."""
    return DecoderConfig(
        in_channels=run.encoder.embed_dim * manifest.modality_count,
        num_classes=manifest.num_classes,
        block_channels=run.decoder_block_channels,
    )


# ---------------------------------------------------------------------------
# strict JSON parsing
# ---------------------------------------------------------------------------


def _type_name(value) -> str:
    return type(value).__name__


def _int(value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"expected integer, got {_type_name(value)}")
    return value


def _float(value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected number, got {_type_name(value)}")
    return float(value)


def _bool(value):
    if not isinstance(value, bool):
        raise TypeError(f"expected boolean, got {_type_name(value)}")
    return value


def _str(value):
    if not isinstance(value, str):
        raise TypeError(f"expected string, got {_type_name(value)}")
    return value


def _opt_str(value):
    return None if value is None else _str(value)


def _num_list(value, length=None):
    if not isinstance(value, list):
        raise TypeError(f"expected list, got {_type_name(value)}")
    if length is not None and len(value) != length:
        raise TypeError(f"expected {length} entries, got {len(value)}")
    return [_float(v) for v in value]


def _int_list(value, length=None):
    if not isinstance(value, list):
        raise TypeError(f"expected list, got {_type_name(value)}")
    if length is not None and len(value) != length:
        raise TypeError(f"expected {length} entries, got {len(value)}")
    return [_int(v) for v in value]


def _section(doc, path, converters) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected object, got {_type_name(doc)}")
    kwargs = {}
    for key, value in doc.items():
        if key not in converters:
            raise ConfigError(f"{path}.{key}", "unknown key")
        try:
            kwargs[key] = converters[key](value)
        except TypeError as exc:
            raise ConfigError(f"{path}.{key}", str(exc)) from exc
    return kwargs


def _build(path, factory, kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


_ENCODER_KEYS = {
    "backend": _str,
    "seed": _int,
    "checkpoint_path": _opt_str,
    "embed_dim": _int,
    "patch_stride": _int,
    "toy_depth": _int,
    "toy_heads": _int,
    "toy_mlp_ratio": _float,
    "vit_width": _int,
    "vit_depth": _int,
    "vit_heads": _int,
    "vit_pretrain_grid": _int,
    "pixel_mean": lambda v: tuple(_num_list(v, 3)),
    "pixel_std": lambda v: tuple(_num_list(v, 3)),
}

_TRAIN_KEYS = {
    "epochs": _int,
    "iters_per_epoch": _int,
    "batch_size": _int,
    "init_lr": _float,
    "power": _float,
    "max_epoch": _int,
    "momentum": _float,
    "weight_decay": _float,
    "foreground_fraction": _float,
    "checkpoint_every": _int,
    "deterministic": _bool,
}

_AUGMENT_KEYS = {
    "enabled": _bool,
    "p_rotation": _float,
    "rotation_max_deg": _float,
    "p_scaling": _float,
    "scale_range": lambda v: tuple(_num_list(v, 2)),
    "p_brightness": _float,
    "brightness_range": lambda v: tuple(_num_list(v, 2)),
    "p_gamma": _float,
    "gamma_range": lambda v: tuple(_num_list(v, 2)),
    "p_mirror": lambda v: tuple(_num_list(v, 3)),
}

_LOSS_KEYS = {
    "eps": _float,
    "include_background_in_dice": _bool,
    "ds_weights": lambda v: None if v is None else tuple(_num_list(v)),
}

_DECODER_KEYS = {
    "block_channels": lambda v: tuple(_int_list(v, 4)),
}

_INFERENCE_KEYS = {
    "window": lambda v: None if v is None else tuple(_int_list(v, 3)),
    "overlap": _float,
}

_TOP_KEYS = ("schema_version", "manifest", "seed", "cache_dir", "output_dir",
             "encoder", "decoder", "train", "augment", "loss", "inference")


def parse_run_config(
    doc: dict, base_dir: Path | None = None, check_paths: bool | None = None
) -> RunConfig:
    """Validate a config document; paths are checked for existence when the
    document came from a file (check_paths defaults to base_dir given)."""
    if check_paths is None:
        check_paths = base_dir is not None
    if not isinstance(doc, dict):
        raise ConfigError("$", f"expected object, got {_type_name(doc)}")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"$.{key}", "unknown key")
    if "manifest" not in doc:
        raise ConfigError("$.manifest", "missing required key")
    base = Path(base_dir) if base_dir is not None else Path(".")

    def _resolve(rel):
        return rel if rel is None or Path(rel).is_absolute() else str(base / rel)

    try:
        version = _int(doc.get("schema_version", SCHEMA_VERSION))
    except TypeError as exc:
        raise ConfigError("$.schema_version", str(exc)) from exc
    if version != SCHEMA_VERSION:
        raise ConfigError(
            "$.schema_version", f"unsupported version {version}, expected {SCHEMA_VERSION}"
        )
    try:
        manifest_path = _resolve(_str(doc["manifest"]))
        seed = _int(doc.get("seed", 0))
    except TypeError as exc:
        raise ConfigError("$", str(exc)) from exc
    if check_paths and not Path(manifest_path).exists():
        raise ConfigError("$.manifest", f"path {manifest_path} does not exist")
    try:
        cache_dir = _resolve(_opt_str(doc.get("cache_dir")))
    except TypeError as exc:
        raise ConfigError("$.cache_dir", str(exc)) from exc
    try:
        output_dir = _resolve(_opt_str(doc.get("output_dir")))
    except TypeError as exc:
        raise ConfigError("$.output_dir", str(exc)) from exc

    enc_kwargs = _section(doc.get("encoder", {}), "$.encoder", _ENCODER_KEYS)
    if enc_kwargs.get("checkpoint_path"):
        enc_kwargs["checkpoint_path"] = _resolve(enc_kwargs["checkpoint_path"])
        if check_paths and not Path(enc_kwargs["checkpoint_path"]).exists():
            raise ConfigError(
                "$.encoder.checkpoint_path",
                f"path {enc_kwargs['checkpoint_path']} does not exist",
            )
    encoder = _build("$.encoder", EncoderConfig, enc_kwargs)

    dec_kwargs = _section(doc.get("decoder", {}), "$.decoder", _DECODER_KEYS)
    block_channels = dec_kwargs.get("block_channels", DEFAULT_BLOCK_CHANNELS)
    # validate widths early with a stand-in input width
    _build("$.decoder", DecoderConfig,
           {"in_channels": 1 + max(block_channels, default=1),
            "num_classes": 2, "block_channels": block_channels})

    train = _build("$.train", TrainConfig,
                   _section(doc.get("train", {}), "$.train", _TRAIN_KEYS))

    aug_kwargs = _section(doc.get("augment", {}), "$.augment", _AUGMENT_KEYS)
    enabled = aug_kwargs.pop("enabled", True)
    if not enabled:
        if aug_kwargs:
            raise ConfigError(
                "$.augment", "'enabled': false cannot be combined with other keys"
            )
        augment = AugmentConfig.disabled()
    else:
        augment = _build("$.augment", AugmentConfig, aug_kwargs)

    loss = _build("$.loss", LossConfig,
                  _section(doc.get("loss", {}), "$.loss", _LOSS_KEYS))

    inference = _build(
        "$.inference", InferenceConfig,
        _section(doc.get("inference", {}), "$.inference", _INFERENCE_KEYS),
    )

    return RunConfig(
        manifest_path=manifest_path,
        seed=seed,
        cache_dir=cache_dir,
        output_dir=output_dir,
        encoder=encoder,
        decoder_block_channels=block_channels,
        train=train,
        augment=augment,
        loss=loss,
        inference=inference,
        schema_version=version,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("$", f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from exc
    return parse_run_config(doc, base_dir=path.parent)


def run_config_to_dict(cfg: RunConfig) -> dict:
    enc = cfg.encoder
    return {
        "schema_version": cfg.schema_version,
        "manifest": cfg.manifest_path,
        "seed": cfg.seed,
        "cache_dir": cfg.cache_dir,
        "output_dir": cfg.output_dir,
        "encoder": {
            "backend": enc.backend,
            "seed": enc.seed,
            "checkpoint_path": enc.checkpoint_path,
            "embed_dim": enc.embed_dim,
            "patch_stride": enc.patch_stride,
            "toy_depth": enc.toy_depth,
            "toy_heads": enc.toy_heads,
            "toy_mlp_ratio": enc.toy_mlp_ratio,
            "vit_width": enc.vit_width,
            "vit_depth": enc.vit_depth,
            "vit_heads": enc.vit_heads,
            "vit_pretrain_grid": enc.vit_pretrain_grid,
            "pixel_mean": list(enc.pixel_mean),
            "pixel_std": list(enc.pixel_std),
        },
        "decoder": {"block_channels": list(cfg.decoder_block_channels)},
        "train": {
            "epochs": cfg.train.epochs,
            "iters_per_epoch": cfg.train.iters_per_epoch,
            "batch_size": cfg.train.batch_size,
            "init_lr": cfg.train.init_lr,
            "power": cfg.train.power,
            "max_epoch": cfg.train.max_epoch,
            "momentum": cfg.train.momentum,
            "weight_decay": cfg.train.weight_decay,
            "foreground_fraction": cfg.train.foreground_fraction,
            "checkpoint_every": cfg.train.checkpoint_every,
            "deterministic": cfg.train.deterministic,
        },
        "augment": {
            "p_rotation": cfg.augment.p_rotation,
            "rotation_max_deg": cfg.augment.rotation_max_deg,
            "p_scaling": cfg.augment.p_scaling,
            "scale_range": list(cfg.augment.scale_range),
            "p_brightness": cfg.augment.p_brightness,
            "brightness_range": list(cfg.augment.brightness_range),
            "p_gamma": cfg.augment.p_gamma,
            "gamma_range": list(cfg.augment.gamma_range),
            "p_mirror": list(cfg.augment.p_mirror),
        },
        "loss": {
            "eps": cfg.loss.eps,
            "include_background_in_dice": cfg.loss.include_background_in_dice,
            "ds_weights": (
                None if cfg.loss.ds_weights is None else list(cfg.loss.ds_weights)
            ),
        },
        "inference": {
            "window": (
                None if cfg.inference.window is None else list(cfg.inference.window)
            ),
            "overlap": cfg.inference.overlap,
        },
    }


def save_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(run_config_to_dict(cfg), indent=2) + "\n")

"""Frozen 2D slice encoding: volume -> stacked per-slice embeddings.

A volume (M, D, H, W) is split into D grayscale slices per modality, each
triplicated to 3 identical channels, pushed through a frozen 2D encoder, and
the per-slice feature maps are stacked along depth. Each modality yields a
256-channel block; modalities are concatenated along channels, giving an
embedding volume of shape (256*M, D, H/16, W/16).

Two backends:

* ``toy``: a small randomly initialized (seeded) ViT, frozen. Deterministic,
  fast, no weights on disk; stands in for a large pretrained backbone at
  desk scale.
* ``pretrained_vit``: a ViT-B-shaped encoder whose weights are loaded from a
  checkpoint directory; position embeddings learned on a fixed pretraining
  grid are bilinearly resized to the native slice resolution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .digests import array_digest, config_digest
from .errors import CheckpointError, ShapeError
from .rvf import read_tensor_dir, rvf_read, rvf_write, write_tensor_dir
from .volume_io import Volume

PATCH_STRIDE = 16
EMBED_DIM = 256


@dataclass(frozen=True)
class EncoderConfig:
    backend: str = "toy"  # "toy" | "pretrained_vit"
    seed: int = 0
    checkpoint_path: str | None = None
    embed_dim: int = EMBED_DIM
    patch_stride: int = PATCH_STRIDE
    # toy backend
    toy_depth: int = 2
    toy_heads: int = 4
    toy_mlp_ratio: float = 2.0
    # pretrained backend (ViT-B defaults)
    vit_width: int = 768
    vit_depth: int = 12
    vit_heads: int = 12
    vit_pretrain_grid: int = 64  # pos-embedding grid the backbone was trained at
    pixel_mean: tuple[float, float, float] = (123.675, 116.28, 103.53)
    pixel_std: tuple[float, float, float] = (58.395, 57.12, 57.375)

    def __post_init__(self):
        if self.backend not in ("toy", "pretrained_vit"):
            raise ValueError(f"unknown encoder backend {self.backend!r}")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2D sin/cos encoding")

    @property
    def digest(self) -> str:
        return config_digest(self)


@dataclass
class EmbeddingVolume:
    """Stacked slice embeddings: (256*M, D, H/16, W/16) float32."""

    data: np.ndarray
    stride: int = PATCH_STRIDE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeError(f"embedding must be (C, D, h, w), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def split_into_slices(vol: Volume, modality: int = 0) -> np.ndarray:
    """One modality as (D, 3, H, W) with three identical channels per slice."""
    if not 0 <= modality < vol.num_modalities:
        raise IndexError(f"modality {modality} out of range [0, {vol.num_modalities})")
    slices = vol.data[modality][:, np.newaxis]  # (D, 1, H, W)
    return np.repeat(slices, 3, axis=1).astype(np.float32)


def sinusoidal_position_grid(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2D sin/cos position encoding table of shape (h, w, dim)."""
    if dim % 4:
        raise ValueError("dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = np.arange(h)[:, None] * freqs[None, :]  # (h, quarter)
    xs = np.arange(w)[:, None] * freqs[None, :]
    table = np.zeros((h, w, dim), dtype=np.float32)
    table[:, :, 0 * quarter : 1 * quarter] = np.sin(ys)[:, None, :]
    table[:, :, 1 * quarter : 2 * quarter] = np.cos(ys)[:, None, :]
    table[:, :, 2 * quarter : 3 * quarter] = np.sin(xs)[None, :, :]
    table[:, :, 3 * quarter : 4 * quarter] = np.cos(xs)[None, :, :]
    return table


def interpolate_position_embeddings(table: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a (h0, w0, C) grid to (h1, w1, C), corners aligned.

    Identity (a copy) when the target matches the source shape.
    """
    h0, w0, _ = table.shape
    h1, w1 = target
    if h1 < 1 or w1 < 1:
        raise ValueError(f"target grid must be positive, got {target}")
    if (h1, w1) == (h0, w0):
        return table.copy()
    ys = np.linspace(0.0, h0 - 1.0, h1) if h1 > 1 else np.zeros(1)
    xs = np.linspace(0.0, w0 - 1.0, w1) if w1 > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h0 - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w0 - 1)
    y1 = np.minimum(y0 + 1, h0 - 1)
    x1 = np.minimum(x0 + 1, w0 - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    t00 = table[y0][:, x0]
    t01 = table[y0][:, x1]
    t10 = table[y1][:, x0]
    t11 = table[y1][:, x1]
    out = (
        t00 * (1 - wy) * (1 - wx)
        + t01 * (1 - wy) * wx
        + t10 * wy * (1 - wx)
        + t11 * wy * wx
    )
    return out.astype(table.dtype)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: x += MHA(LN(x)); x += MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


def _seeded_vit_init_(module: nn.Module, seed: int, std: float = 0.02) -> None:
    """Normal(0, std) weights, zero biases, unit LayerNorm, from one PRNG stream."""
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(module.named_parameters()):
        with torch.no_grad():
            if param.ndim >= 2 or name.endswith("in_proj_weight"):
                param.copy_(torch.empty_like(param).normal_(0.0, std, generator=gen))
            elif "norm" in name and name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class ToySliceEncoder(nn.Module):
    """Frozen random-weight ViT: stride-16 patch projection, sinusoidal 2D
    position encoding, a couple of pre-norm attention blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            3, cfg.embed_dim, kernel_size=cfg.patch_stride, stride=cfg.patch_stride
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.toy_heads, cfg.toy_mlp_ratio)
            for _ in range(cfg.toy_depth)
        )
        _seeded_vit_init_(self, cfg.seed)
        _freeze(self)

    @torch.no_grad()
    def encode_slices(self, slices: np.ndarray) -> np.ndarray:
        """(D, 3, H, W) float32 -> (D, embed_dim, H/16, W/16) float32."""
        d, _, height, width = slices.shape
        h, w = height // self.cfg.patch_stride, width // self.cfg.patch_stride
        x = torch.from_numpy(np.ascontiguousarray(slices))
        x = self.patch_embed(x)  # (D, C, h, w)
        tokens = x.flatten(2).transpose(1, 2)  # (D, h*w, C)
        pos = sinusoidal_position_grid(h, w, self.cfg.embed_dim).reshape(h * w, -1)
        tokens = tokens + torch.from_numpy(pos)
        for block in self.blocks:
            tokens = block(tokens)
        out = tokens.transpose(1, 2).reshape(d, self.cfg.embed_dim, h, w)
        return out.numpy()


class LayerNorm2d(nn.Module):
    """Channel-wise LayerNorm over (N, C, H, W) maps."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class PretrainedViTEncoder(nn.Module):
    """ViT-B-shaped frozen slice encoder loaded from a checkpoint directory.

    Runs at native slice resolution: the absolute position-embedding grid
    learned at pretraining time is bilinearly resized to the slice's token
    grid. Inputs are min-max rescaled to [0, 255] per slice and standardized
    with the backbone's pixel statistics. A small convolutional neck maps the
    transformer width down to the 256 embedding channels.
    """

    def __init__(self, cfg: EncoderConfig, _blank: bool = False):
        super().__init__()
        self.cfg = cfg
        width = cfg.vit_width
        self.patch_embed = nn.Conv2d(3, width, cfg.patch_stride, cfg.patch_stride)
        self.pos_embed = nn.Parameter(
            torch.zeros(cfg.vit_pretrain_grid, cfg.vit_pretrain_grid, width)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(width, cfg.vit_heads, 4.0) for _ in range(cfg.vit_depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(width, cfg.embed_dim, 1, bias=False),
            LayerNorm2d(cfg.embed_dim),
            nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 3, padding=1, bias=False),
            LayerNorm2d(cfg.embed_dim),
        )
        if _blank:
            _seeded_vit_init_(self, cfg.seed)
        else:
            if cfg.checkpoint_path is None:
                raise CheckpointError("pretrained_vit backend requires checkpoint_path")
            self._load(cfg.checkpoint_path)
        _freeze(self)

    def _load(self, path) -> None:
        if not Path(path).exists():
            raise CheckpointError(f"encoder checkpoint {path} does not exist")
        tensors, _ = read_tensor_dir(path)
        state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
        try:
            self.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"encoder checkpoint mismatch: {exc}") from exc

    def _standardize(self, slices: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(slices))
        flat = x.flatten(1)
        lo = flat.min(dim=1).values[:, None, None, None]
        hi = flat.max(dim=1).values[:, None, None, None]
        x = (x - lo) / torch.clamp(hi - lo, min=1e-8) * 255.0
        mean = torch.tensor(self.cfg.pixel_mean).view(1, 3, 1, 1)
        std = torch.tensor(self.cfg.pixel_std).view(1, 3, 1, 1)
        return (x - mean) / std

    @torch.no_grad()
    def encode_slices(self, slices: np.ndarray) -> np.ndarray:
        d, _, height, width = slices.shape
        h, w = height // self.cfg.patch_stride, width // self.cfg.patch_stride
        x = self.patch_embed(self._standardize(slices))
        tokens = x.flatten(2).transpose(1, 2)
        pos = interpolate_position_embeddings(
            self.pos_embed.numpy(), (h, w)
        ).reshape(h * w, -1)
        tokens = tokens + torch.from_numpy(pos)
        for block in self.blocks:
            tokens = block(tokens)
        maps = tokens.transpose(1, 2).reshape(d, self.cfg.vit_width, h, w)
        return self.neck(maps).numpy()


def save_encoder_checkpoint(directory, encoder: PretrainedViTEncoder) -> None:
    """Persist encoder weights in the tensor-directory format ``_load`` reads."""
    tensors = {k: v.detach().numpy() for k, v in encoder.state_dict().items()}
    write_tensor_dir(directory, tensors, extra={"format": "volseg-encoder"})


def initialize_encoder_checkpoint(directory, cfg: EncoderConfig) -> None:
    """Write a seeded randomly initialized checkpoint the ViT backend can load.

    Useful for smoke tests and for exercising the pretrained code path without
    real released weights; the tensor names and shapes match ``_load``.
    """
    save_encoder_checkpoint(directory, PretrainedViTEncoder(cfg, _blank=True))


_BACKENDS: dict[str, nn.Module] = {}


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    """Construct (and memoize) the frozen backend for a config."""
    key = cfg.digest
    if key not in _BACKENDS:
        if cfg.backend == "toy":
            _BACKENDS[key] = ToySliceEncoder(cfg)
        else:
            _BACKENDS[key] = PretrainedViTEncoder(cfg)
    return _BACKENDS[key]


def toy_encoder_forward(slices: np.ndarray, seed: int) -> np.ndarray:
    """(D, 3, H, W) -> (D, 256, H/16, W/16) through the frozen toy backend."""
    _check_inplane(slices.shape[2], slices.shape[3])
    return build_encoder(EncoderConfig(backend="toy", seed=seed)).encode_slices(slices)


def _check_inplane(height: int, width: int) -> None:
    if height % PATCH_STRIDE or width % PATCH_STRIDE:
        raise ShapeError(
            f"in-plane size ({height}, {width}) must be a multiple of {PATCH_STRIDE}"
        )


_SLICE_CHUNK = 16  # slices encoded per forward pass, bounds activation memory


def encode_volume(vol: Volume, enc: EncoderConfig) -> EmbeddingVolume:
    """Encode every slice of every modality; stack depth-wise, concat modalities.

    Output shape is exactly (256*M, D, H/16, W/16). Deterministic for a fixed
    config: the encoder is frozen.
    """
    _, _, height, width = vol.data.shape
    _check_inplane(height, width)
    backend = build_encoder(enc)
    per_modality = []
    for m in range(vol.num_modalities):
        slices = split_into_slices(vol, m)
        chunks = [
            backend.encode_slices(slices[i : i + _SLICE_CHUNK])
            for i in range(0, slices.shape[0], _SLICE_CHUNK)
        ]
        emb = np.concatenate(chunks, axis=0)  # (D, 256, h, w)
        per_modality.append(emb.transpose(1, 0, 2, 3))  # (256, D, h, w)
    data = np.ascontiguousarray(np.concatenate(per_modality, axis=0))
    return EmbeddingVolume(data=data, stride=enc.patch_stride)


def embedding_cache_key(vol: Volume, enc: EncoderConfig) -> str:
    return f"{array_digest(vol.data)}-{enc.digest}"


def embedding_cache_get_or_compute(
    case_id: str,
    vol: Volume,
    enc: EncoderConfig,
    cache_dir,
    encode_fn=encode_volume,
) -> EmbeddingVolume:
    """Content-addressed embedding cache.

    The key hashes the volume content and the encoder config, so a changed
    seed or checkpoint recomputes. Corrupt entries are recomputed and
    overwritten with a warning. Writes are atomic (temp file + rename).
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = embedding_cache_key(vol, enc)
    path = cache_dir / f"{key}.rvf"
    if path.exists():
        try:
            arr, meta = rvf_read(path)
            return EmbeddingVolume(data=arr, stride=int(meta.get("stride", enc.patch_stride)))
        except Exception as exc:  # corrupt entry: recompute below
            warnings.warn(f"embedding cache entry {path.name} unreadable ({exc}); recomputing")
    emb = encode_fn(vol, enc)
    tmp = path.with_name(path.name + ".tmp")
    rvf_write(tmp, emb.data, metadata={"case_id": case_id, "stride": emb.stride, "key": key})
    tmp.replace(path)
    return emb

"""Segmentation training objective: soft dice + cross-entropy, with
exponentially decaying deep-supervision weights across resolution stages.

The dice term is the squared-denominator volumetric form: per class,
``(2 * sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)`` with sums taken over
batch and all spatial positions, then averaged over classes. Cross-entropy
is computed from log-softmax directly for numerical stability. Both terms
enter the combined loss with unit weight.

Deep supervision: stage l (finest first, l = 1..L) gets weight
proportional to 2^(1-l), normalized to sum to one. Targets for coarser
stages are nearest-neighbor subsampled, never interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    eps: float = DICE_EPS
    include_background_in_dice: bool = True
    ds_weights: tuple[float, ...] | None = None  # None: derive from stage count

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.ds_weights is not None:
            object.__setattr__(self, "ds_weights", tuple(float(w) for w in self.ds_weights))
            if any(w < 0 for w in self.ds_weights):
                raise ValueError(f"stage weights must be nonnegative, got {self.ds_weights}")
            if abs(sum(self.ds_weights) - 1.0) > 1e-6:
                raise ValueError(f"stage weights must sum to 1, got {self.ds_weights}")


def _check_pair(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.ndim != 5:
        raise ShapeError(f"logits must be (B, N, D, H, W), got {tuple(logits.shape)}")
    if target.ndim != 4:
        raise ShapeError(f"target must be (B, D, H, W), got {tuple(target.shape)}")
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeError(
            f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree"
        )
    if target.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
        raise TypeError(f"target must be an integer tensor, got {target.dtype}")


def one_hot_target(target: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, D, H, W) int -> (B, N, D, H, W) float one-hot."""
    if int(target.min()) < 0 or int(target.max()) >= num_classes:
        raise ValueError(
            f"target values outside [0, {num_classes}): "
            f"[{int(target.min())}, {int(target.max())}]"
        )
    return F.one_hot(target.long(), num_classes).permute(0, 4, 1, 2, 3)


def soft_dice_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    eps: float = DICE_EPS,
    include_background: bool = True,
) -> torch.Tensor:
    """1 - mean-over-classes soft dice, sums over batch and volume."""
    _check_pair(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = one_hot_target(target, logits.shape[1]).to(probs.dtype)
    dims = (0, 2, 3, 4)
    intersect = (probs * onehot).sum(dim=dims)
    denom = probs.pow(2).sum(dim=dims) + onehot.pow(2).sum(dim=dims)
    dice = (2.0 * intersect + eps) / (denom + eps)
    if not include_background:
        if logits.shape[1] < 2:
            raise ValueError("cannot exclude background with a single class")
        dice = dice[1:]
    return 1.0 - dice.mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean voxel-wise negative log-likelihood via log-softmax + gather."""
    _check_pair(logits, target)
    logp = F.log_softmax(logits, dim=1)
    picked = logp.gather(1, target.long().unsqueeze(1))
    return -picked.mean()


@dataclass
class LossTerms:
    total: torch.Tensor
    dice: torch.Tensor
    ce: torch.Tensor


def combined_loss(
    logits: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()
) -> LossTerms:
    """dice + CE with unit weights, plus the individual terms for logging."""
    dice = soft_dice_loss(logits, target, cfg.eps, cfg.include_background_in_dice)
    ce = cross_entropy_loss(logits, target)
    return LossTerms(total=dice + ce, dice=dice, ce=ce)


def deep_supervision_weights(num_stages: int) -> tuple[float, ...]:
    """Stage weights proportional to 2^(1-l), normalized to sum to one."""
    if num_stages < 1:
        raise ValueError(f"need at least one stage, got {num_stages}")
    raw = [2.0 ** (1 - l) for l in range(1, num_stages + 1)]
    total = sum(raw)
    return tuple(w / total for w in raw)


def _subsample_target(target: torch.Tensor, stage_shape: tuple[int, ...]) -> torch.Tensor:
    """Nearest-neighbor subsample (B, D, H, W) target to a stage's grid."""
    factors = []
    for ax, (full, small) in enumerate(zip(target.shape[1:], stage_shape)):
        if small < 1 or full % small:
            raise ShapeError(
                f"stage axis {ax} extent {small} does not divide target extent {full}"
            )
        factors.append(full // small)
    fd, fh, fw = factors
    return target[:, ::fd, ::fh, ::fw]


def deep_supervision_loss(
    stages: list[torch.Tensor] | tuple[torch.Tensor, ...],
    target: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> LossTerms:
    """Weighted combined loss over decoder stages (finest first).

    The finest stage must match the target grid exactly; coarser stages
    must divide it. Returns weighted totals; the dice and ce fields hold
    the same stage-weighted sums of their per-stage terms.
    """
    if not stages:
        raise ValueError("no stages given")
    if tuple(stages[0].shape[2:]) != tuple(target.shape[1:]):
        raise ShapeError(
            f"finest stage {tuple(stages[0].shape)} does not match "
            f"target {tuple(target.shape)}"
        )
    weights = cfg.ds_weights or deep_supervision_weights(len(stages))
    if len(weights) != len(stages):
        raise ValueError(f"{len(weights)} weights for {len(stages)} stages")
    total = dice_sum = ce_sum = None
    for weight, logits in zip(weights, stages):
        small = _subsample_target(target, tuple(logits.shape[2:]))
        terms = combined_loss(logits, small, cfg)
        w_total = weight * terms.total
        w_dice = weight * terms.dice
        w_ce = weight * terms.ce
        total = w_total if total is None else total + w_total
        dice_sum = w_dice if dice_sum is None else dice_sum + w_dice
        ce_sum = w_ce if ce_sum is None else ce_sum + w_ce
    return LossTerms(total=total, dice=dice_sum, ce=ce_sum)

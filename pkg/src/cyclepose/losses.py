"""Loss terms of the training objective.

All functions take NCHW tensors.  Masks may hold instance labels; any nonzero
value counts as nucleus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

FLOW_SCALE = 5.0


@dataclass(frozen=True)
class LossWeights:
    w_cyc_img: float = 10.0
    w_cyc_mask: float = 15.0
    w_perlin: float = 15.0
    lambda_m2i: float = 7.5
    t_n: float = 0.2
    t_b: float = 0.3
    dilation_d: int = 5
    # treat the image extrema as constants (no gradient through min/max)
    detach_extrema: bool = False

    def __post_init__(self):
        for name in ("w_cyc_img", "w_cyc_mask", "w_perlin", "lambda_m2i"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.t_n <= 1.0 and 0.0 <= self.t_b <= 1.0):
            raise ValueError("t_n and t_b must lie in [0, 1]")
        if self.dilation_d < 0:
            raise ValueError("dilation_d must be >= 0")


@dataclass
class SegLossTerms:
    flow_l2: torch.Tensor
    prob_ce: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.flow_l2 + self.prob_ce


def seg_loss(pred: torch.Tensor, target: torch.Tensor) -> SegLossTerms:
    """Flow MSE on targets scaled by ``FLOW_SCALE`` plus BCE on the prob logit.

    ``pred`` is raw segmenter output (flows, logit); ``target`` an encoded
    flow representation (flows, binary probability).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    flow_l2 = F.mse_loss(FLOW_SCALE * pred[:, :2], FLOW_SCALE * target[:, :2])
    prob_ce = F.binary_cross_entropy_with_logits(pred[:, 2], target[:, 2])
    return SegLossTerms(flow_l2, prob_ce)


def _extrema(img: torch.Tensor, detach: bool) -> tuple[torch.Tensor, torch.Tensor]:
    flat = (img.detach() if detach else img).flatten(1)
    shape = (-1,) + (1,) * (img.dim() - 1)
    return flat.amin(dim=1).view(shape), flat.amax(dim=1).view(shape)


def _binary(mask: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    return (mask != 0).to(dtype)


def dilate(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Binary dilation with a ``size x size`` square structuring element."""
    if size <= 1:
        return mask
    lo, hi = (size - 1) // 2, size // 2
    padded = F.pad(mask, (lo, hi, lo, hi), value=0.0)
    return F.max_pool2d(padded, size, stride=1)


def m2i_nuclei(mask: torch.Tensor, fake: torch.Tensor, t_n: float = 0.2,
               detach_extrema: bool = False) -> torch.Tensor:
    """Penalty for nucleus pixels darker than ``c_min + t_n * (c_max - c_min)``."""
    m = _binary(mask, fake.dtype)
    cmin, cmax = _extrema(fake, detach_extrema)
    return m * torch.clamp(t_n * (cmax - cmin) + cmin - fake, min=0.0)


def m2i_bg(mask: torch.Tensor, fake: torch.Tensor, dilation_d: int = 5, t_b: float = 0.3,
           detach_extrema: bool = False) -> torch.Tensor:
    """Penalty for clear-background pixels brighter than ``c_min + t_b * (c_max - c_min)``.

    Clear background is the complement of the mask dilated by a square of
    side ``dilation_d``; the ring in between is left unconstrained.
    """
    m = _binary(mask, fake.dtype)
    clear_bg = 1.0 - dilate(m, dilation_d)
    cmin, cmax = _extrema(fake, detach_extrema)
    return clear_bg * torch.clamp(fake - cmin - t_b * (cmax - cmin), min=0.0)


def m2i_total(mask: torch.Tensor, fake: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``lambda / |m| * sum(L_nuclei + L_bg)`` with |m| the pixel count, averaged over the batch."""
    w = weights
    per_pixel = (m2i_nuclei(mask, fake, w.t_n, w.detach_extrema)
                 + m2i_bg(mask, fake, w.dilation_d, w.t_b, w.detach_extrema))
    return weights.lambda_m2i * per_pixel.flatten(1).mean(dim=1).mean()


def lsgan_loss(scores: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    target = torch.ones_like(scores) if target_is_real else torch.zeros_like(scores)
    return F.mse_loss(scores, target)


def total_loss(components: Mapping[str, torch.Tensor | float]):
    """Sum of already-weighted terms; the weights live inside each term."""
    return sum(components.values(), start=0.0)

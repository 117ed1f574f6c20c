"""Training objectives: supervised CE, weighted mixed CE, and the guidance loss
with its uncertainty factor. All CE terms are mean-reduced over valid pixels so
loss magnitudes do not scale with image resolution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .selftrain import PseudoLabel

IGNORE_INDEX = 255


@dataclass(frozen=True)
class LossConfig:
    lambda_gt: float = 1.0
    d: float = 5.0
    tau: float = 0.968
    ignore_index: int = IGNORE_INDEX
    per_pixel_q: bool = False      # use 1[conf > tau] per pixel instead of the scalar q
    uncertainty_off: bool = False  # ablation: force beta to 1

    def __post_init__(self) -> None:
        if self.lambda_gt < 0.0:
            raise ValueError(f"lambda_gt must be >= 0, got {self.lambda_gt}")
        if self.d < 0.0:
            raise ValueError(f"d must be >= 0, got {self.d}")


@dataclass
class LossBreakdown:
    """Per-step loss record; total = l_sup + l_mix + lambda_gt * l_gt."""

    l_sup: float
    l_mix: float
    l_gt: float
    beta: float
    q: float
    r: float
    total: float

    CSV_FIELDS = ("step", "l_sup", "l_mix", "l_gt", "q", "r", "beta", "total")


def ce_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    pixel_weights: torch.Tensor | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """Cross entropy averaged over non-ignore pixels, optionally weighted per pixel.

    Ignore pixels contribute to neither numerator nor denominator; the
    denominator is the valid-pixel count (weights scale terms, not the mean).
    """
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
        if pixel_weights is not None:
            pixel_weights = pixel_weights.unsqueeze(0)
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")

    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels are ignored; cross entropy undefined")

    log_probs = F.log_softmax(logits, dim=1)
    safe_labels = labels.long().clamp(0, logits.shape[1] - 1)
    picked = log_probs.gather(1, safe_labels.unsqueeze(1)).squeeze(1)
    per_pixel = -picked
    if pixel_weights is not None:
        if pixel_weights.shape != labels.shape:
            raise ValueError(
                f"pixel weights {tuple(pixel_weights.shape)} do not match labels {tuple(labels.shape)}"
            )
        per_pixel = per_pixel * pixel_weights.to(per_pixel.dtype)
    return per_pixel[valid].sum() / n_valid


def beta(r: float, d: float) -> float:
    """Uncertainty factor 1 - exp(-d * r): small when little source content was pasted."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"source ratio r must be in [0, 1], got {r}")
    if d < 0.0:
        raise ValueError(f"d must be >= 0, got {d}")
    return 1.0 - math.exp(-d * r)


def guidance_loss(
    logits_guided: torch.Tensor,
    pseudo: PseudoLabel,
    r: float,
    config: LossConfig,
) -> torch.Tensor:
    """Guidance objective for one image: beta(r) * q * CE(guided logits, pseudo-labels).

    The CE covers the full grid, pasted regions included, so the model is
    trained to recover the target prediction even where it was occluded. With
    `per_pixel_q` the scalar q is replaced by the per-pixel confidence
    indicator; with `uncertainty_off` beta is pinned to 1.
    """
    labels = torch.from_numpy(pseudo.labels).to(logits_guided.device)
    b = 1.0 if config.uncertainty_off else beta(r, config.d)
    if config.per_pixel_q:
        weights = torch.from_numpy(
            (pseudo.confidence > config.tau).astype("float64")
        ).to(logits_guided.device)
        ce = ce_loss(logits_guided, labels, pixel_weights=weights, ignore_index=config.ignore_index)
        return b * ce
    ce = ce_loss(logits_guided, labels, ignore_index=config.ignore_index)
    return b * pseudo.q * ce


def total_loss(
    l_sup: float,
    l_mix: float,
    l_gt: float,
    q: float,
    r: float,
    beta_value: float,
    config: LossConfig,
) -> LossBreakdown:
    """Assemble the step record; rejects non-finite components by name."""
    parts = {"l_sup": float(l_sup), "l_mix": float(l_mix), "l_gt": float(l_gt)}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite loss component {name}: {value}")
    total = parts["l_sup"] + parts["l_mix"] + config.lambda_gt * parts["l_gt"]
    return LossBreakdown(
        l_sup=parts["l_sup"],
        l_mix=parts["l_mix"],
        l_gt=parts["l_gt"],
        beta=float(beta_value),
        q=float(q),
        r=float(r),
        total=total,
    )

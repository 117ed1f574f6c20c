"""Mean-teacher self-training: EMA weight tracking, pseudo-labels, and the
confidence-derived weights applied to mixed-image training."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mixing import ClassMask

DEFAULT_TAU = 0.968


@dataclass
class PseudoLabel:
    """Teacher prediction for one target image."""

    labels: np.ndarray      # (H, W) int64, per-pixel argmax (ties -> lowest class id)
    confidence: np.ndarray  # (H, W) float, max softmax probability
    q: float                # fraction of pixels with confidence strictly above tau


class EmaTeacher:
    """Gradient-free copy of the student, updated as p_bar <- a*p_bar + (1-a)*p.

    Initialized as an exact copy of the student; stays in eval mode so
    pseudo-labeling is deterministic.
    """

    def __init__(self, student: nn.Module, alpha: float = 0.999):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        self.alpha = alpha
        self.module = copy.deepcopy(student)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, student: nn.Module) -> None:
        teacher_params = dict(self.module.named_parameters())
        student_params = dict(student.named_parameters())
        if teacher_params.keys() != student_params.keys():
            raise ValueError("teacher/student parameter names do not match")
        for name, p_t in teacher_params.items():
            p_s = student_params[name]
            if p_t.shape != p_s.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
            p_t.mul_(self.alpha).add_(p_s.detach(), alpha=1.0 - self.alpha)


def pseudo_from_logits(logits: torch.Tensor, tau: float = DEFAULT_TAU) -> PseudoLabel:
    """Build a PseudoLabel from one image's logits (C, H, W)."""
    if logits.dim() != 3:
        raise ValueError(f"expected (C, H, W) logits, got {tuple(logits.shape)}")
    probs = F.softmax(logits.detach(), dim=0).cpu().numpy()
    labels = np.argmax(probs, axis=0).astype(np.int64)  # np.argmax: first max wins
    confidence = probs.max(axis=0)
    q = float((confidence > tau).mean(dtype=np.float64))
    return PseudoLabel(labels=labels, confidence=confidence, q=q)


def pseudo_label(teacher: EmaTeacher, image: np.ndarray, tau: float = DEFAULT_TAU) -> PseudoLabel:
    """Pseudo-label a single (H, W, 3) target image with the teacher."""
    dtype = next(teacher.module.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0).to(dtype)
    with torch.no_grad():
        logits = teacher.module(x)[0]
    return pseudo_from_logits(logits, tau=tau)


def pixel_weights(mask: ClassMask | np.ndarray, q: float) -> np.ndarray:
    """Per-pixel loss weights for a mixed image: 1 on source pixels, q on target pixels."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    m = mask.mask if isinstance(mask, ClassMask) else np.asarray(mask)
    m = m.astype(np.float64)
    return m + q * (1.0 - m)

"""Segmentation metrics (confusion matrix, per-class IoU, mIoU) and qualitative
prediction dumps, including mixed-input vs guided-reconstruction panels."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .guider import Guider
from .mixing import build_mask, mix, sample_classes
from .model import SegModel
from .shapeworld import CLASS_NAMES, IGNORE, LabeledImage

# fixed palette, one row per class id (documented in dump metadata)
PALETTE = np.array(
    [
        [106, 142, 35],   # background
        [70, 130, 180],   # sky
        [70, 70, 70],     # road
        [196, 90, 30],    # box
        [240, 220, 60],   # disk
        [110, 75, 40],    # pole
    ],
    dtype=np.uint8,
)


class IoUReport:
    """Confusion-matrix accumulator; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, prediction: np.ndarray, truth: np.ndarray) -> "IoUReport":
        if prediction.shape != truth.shape:
            raise ValueError(f"prediction {prediction.shape} does not match truth {truth.shape}")
        keep = truth != IGNORE
        pred, tru = prediction[keep], truth[keep]
        if pred.size == 0:
            return self
        if pred.min() < 0 or pred.max() >= self.num_classes:
            raise ValueError(f"prediction contains class ids outside [0, {self.num_classes - 1}]")
        if tru.max() >= self.num_classes:
            raise ValueError(f"truth contains class ids outside [0, {self.num_classes - 1}]")
        flat = self.num_classes * tru.astype(np.int64) + pred.astype(np.int64)
        counts = np.bincount(flat, minlength=self.num_classes**2)
        self.confusion += counts.reshape(self.num_classes, self.num_classes)
        return self

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN marks classes absent from both prediction and truth."""
        tp = np.diag(self.confusion).astype(np.float64)
        denom = self.confusion.sum(axis=1) + self.confusion.sum(axis=0) - np.diag(self.confusion)
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)

    def miou(self) -> float:
        iou = self.per_class_iou()
        defined = ~np.isnan(iou)
        if not defined.any():
            return float("nan")
        return float(iou[defined].mean())

    def to_dict(self) -> dict:
        iou = self.per_class_iou()
        return {
            "num_classes": self.num_classes,
            "confusion": self.confusion.tolist(),
            "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
            "miou": self.miou(),
        }


def predict(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Predicted label map for one (H, W, 3) image."""
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0).to(dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(x)[0]
    if was_training:
        model.train()
    return np.argmax(logits.cpu().numpy(), axis=0).astype(np.int64)


def evaluate_model(model: SegModel, images: list[LabeledImage]) -> IoUReport:
    report = IoUReport(model.config.num_classes)
    for item in images:
        report.accumulate(predict(model, item.pixels), item.labels)
    return report


def colorize(labels: np.ndarray) -> np.ndarray:
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    valid = labels != IGNORE
    out[valid] = PALETTE[labels[valid] % len(PALETTE)]
    return out


def _save_rgb(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(path)


def _palette_meta() -> dict:
    return {
        "palette": {str(i): PALETTE[i].tolist() for i in range(len(PALETTE))},
        "class_names": list(CLASS_NAMES),
        "ignore_color": [0, 0, 0],
    }


def dump_predictions(
    model: SegModel,
    images: list[LabeledImage],
    out_dir: str | Path,
    guider: Guider | None = None,
    seed: int = 0,
) -> list[Path]:
    """Write color-mapped prediction panels; with a guider, also write the
    mixed-input prediction next to the guided reconstruction's prediction."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "meta.json").write_text(json.dumps(_palette_meta(), indent=2) + "\n")
    if guider is None:
        print("no guider in checkpoint: skipping guided-prediction panels")

    dtype = next(model.parameters()).dtype
    written: list[Path] = []
    rng = np.random.default_rng(seed)
    model.eval()
    for i, item in enumerate(images):
        pred_path = out_dir / f"pred_{i:06}.png"
        _save_rgb(pred_path, colorize(predict(model, item.pixels)))
        written.append(pred_path)

        if guider is None:
            continue
        partner = images[(i + 1) % len(images)]
        cmask = build_mask(item.labels, sample_classes(item.labels, rng))
        batch = mix(item.pixels, item.labels, partner.pixels, partner.labels, cmask)
        x = torch.from_numpy(np.ascontiguousarray(batch.image.astype(np.float32)))
        x = x.permute(2, 0, 1).unsqueeze(0).to(dtype)
        mask_scale = torch.from_numpy(batch.mask_scale[None]).to(dtype)
        with torch.no_grad():
            features = model.encode(x)
            direct = model.decode(features)[0]
            guided = model.decode(guider.reconstruct(features, mask_scale))[0]
        left = colorize(np.argmax(direct.cpu().numpy(), axis=0))
        right = colorize(np.argmax(guided.cpu().numpy(), axis=0))
        divider = np.full((left.shape[0], 2, 3), 255, dtype=np.uint8)
        pair_path = out_dir / f"guided_{i:06}.png"
        _save_rgb(pair_path, np.concatenate([left, divider, right], axis=1))
        written.append(pair_path)
    return written


def write_mix_preview(
    source: LabeledImage,
    target: LabeledImage,
    target_labels: np.ndarray,
    out_dir: str | Path,
    rng: np.random.Generator,
) -> list[Path]:
    """Dump the mixing panels (source, target, mixed image, mixed labels, mask)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cmask = build_mask(source.labels, sample_classes(source.labels, rng))
    batch = mix(source.pixels, source.labels, target.pixels, target_labels, cmask)

    def as_rgb(img: np.ndarray) -> np.ndarray:
        return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

    panels = {
        "x_source.png": as_rgb(source.pixels),
        "x_target.png": as_rgb(target.pixels),
        "x_mixed.png": as_rgb(batch.image),
        "y_mixed.png": colorize(batch.labels),
        "mask.png": np.repeat(batch.mask.mask[..., None] * 255, 3, axis=2).astype(np.uint8),
    }
    written = []
    for name, rgb in panels.items():
        path = out_dir / name
        _save_rgb(path, rgb)
        written.append(path)
    (out_dir / "meta.json").write_text(
        json.dumps({**_palette_meta(), "sampled_classes": sorted(cmask.classes)}, indent=2) + "\n"
    )
    return written

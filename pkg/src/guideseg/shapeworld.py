"""Procedural "ShapeWorld" scenes: paired segmentation domains with a photometric gap.

A scene is a banded landscape (sky on top, road at the bottom, open ground in
between) populated with boxes, disks and thin poles. Objects follow loose
placement rules -- disks hang in the sky, boxes rest on the ground, poles stand
on the road edge -- so image context carries real signal. Geometry is a pure
function of (seed, index); the domain gap is photometric only (hue rotation,
brightness, texture noise), which keeps labels identical across domains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE = 255

CLASS_NAMES = ("background", "sky", "road", "box", "disk", "pole")

# Class anchor colors. Every object class blends its anchor with a cue
# relative to its host region (boxes brighter than the ground they stand on,
# disks brighter than their sky, poles darker than their road), so identity is
# carried partly by absolute color (which a photometric domain shift destroys)
# and partly by shape, position, and relative brightness (which survive it).
# Inter-class contrast is deliberately modest: under target-domain texture
# noise individual pixels are ambiguous and context has to carry real weight.
_BASE_COLORS = np.array(
    [
        [0.44, 0.52, 0.40],  # background: green field, mid value
        [0.52, 0.64, 0.80],  # sky: light blue, high value
        [0.30, 0.29, 0.32],  # road: near-gray asphalt, low value
        [0.62, 0.46, 0.32],  # box: brick
        [0.80, 0.78, 0.56],  # disk: pale sun
        [0.22, 0.17, 0.13],  # pole: dark wood
    ]
)

# world-generation knobs: global contrast, region color jitter, object anchor
# blend weight, relative-brightness factor ranges, per-pixel texture noise
_CONTRAST = 1.0
_REGION_JITTER = 0.06
_ANCHOR_BLEND = 0.2
_BOX_FACTOR = (1.15, 1.35)
_DISK_FACTOR = (1.10, 1.30)
_POLE_FACTOR = (0.60, 0.85)
_CANVAS_NOISE = 0.01

_META_NAME = "meta.json"
_DATASET_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the procedural generator."""

    rng_seed: int
    num_classes: int = 6
    image_size: int = 64
    objects_per_scene: tuple[int, int] = (2, 6)

    def __post_init__(self) -> None:
        if self.num_classes < 2 or self.num_classes > len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}], got {self.num_classes}")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")


@dataclass(frozen=True)
class DomainShift:
    """Photometric-only domain gap. The identity shift is (0, 1, 0)."""

    hue_shift: float = 0.0
    brightness_scale: float = 1.0
    texture_noise_std: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.hue_shift <= 1.0:
            raise ValueError(f"hue_shift must be in [0, 1], got {self.hue_shift}")
        if self.brightness_scale <= 0.0:
            raise ValueError(f"brightness_scale must be > 0, got {self.brightness_scale}")
        if self.texture_noise_std < 0.0:
            raise ValueError(f"texture_noise_std must be >= 0, got {self.texture_noise_std}")


IDENTITY_SHIFT = DomainShift(0.0, 1.0, 0.0)


@dataclass
class LabeledImage:
    """Image in [0, 1] (H, W, 3) plus an integer label map (H, W)."""

    pixels: np.ndarray
    labels: np.ndarray

    def validate(self, num_classes: int) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.labels.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"label shape {self.labels.shape} does not match image {self.pixels.shape[:2]}"
            )
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels contain non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels outside [0, 1]")
        bad = (self.labels >= num_classes) & (self.labels != IGNORE)
        if bad.any():
            raise ValueError(
                f"label values outside [0, {num_classes - 1}] + IGNORE: found {sorted(np.unique(self.labels[bad]))}"
            )


@dataclass
class SceneLayout:
    """Shared geometry of one scene: canonical pixels, labels, and a noise key."""

    pixels: np.ndarray  # float32 (H, W, 3), canonical (source) appearance
    labels: np.ndarray  # uint8 (H, W)
    noise_seed: int


def _scene_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def generate_scene(spec: SceneSpec, index: int) -> SceneLayout:
    """Generate the layout for scene `index`, deterministic across processes."""
    if index < 0:
        raise ValueError(f"scene index must be >= 0, got {index}")
    if spec.image_size % 8 != 0:
        raise ValueError(
            f"image_size must be divisible by 8 (model output stride), got {spec.image_size}"
        )

    size = spec.image_size
    rng = _scene_rng(spec.rng_seed, index)
    labels = np.zeros((size, size), dtype=np.uint8)

    sky_h = int(rng.integers(round(0.12 * size), round(0.28 * size) + 1))
    road_h = int(rng.integers(round(0.18 * size), round(0.32 * size) + 1))
    road_top = size - road_h
    if spec.num_classes > 1:
        labels[:sky_h, :] = 1
    if spec.num_classes > 2:
        labels[road_top:, :] = 2

    n_objects = int(rng.integers(spec.objects_per_scene[0], spec.objects_per_scene[1] + 1))
    # pole kept rare on purpose (hard-class reporting)
    kinds, probs = ["box", "disk", "pole"], [0.45, 0.45, 0.10]
    # object_field tags each object with its own id so appearance can vary
    # per object, not just per class
    object_field = np.zeros((size, size), dtype=np.int32)
    for obj_index in range(1, n_objects + 1):
        kind = rng.choice(kinds, p=probs)
        if kind == "box" and spec.num_classes > 3:
            w = int(rng.integers(max(3, size // 8), max(4, size // 3) + 1))
            h = int(rng.integers(max(3, size // 8), max(4, size // 3) + 1))
            x0 = int(rng.integers(0, max(1, size - w)))
            y1 = road_top + int(rng.integers(0, max(1, road_h // 4)))  # resting on the ground line
            y0 = max(0, y1 - h)
            labels[y0:y1, x0 : x0 + w] = 3
            object_field[y0:y1, x0 : x0 + w] = obj_index
        elif kind == "disk" and spec.num_classes > 4:
            r = int(rng.integers(max(2, size // 16), max(3, size // 8) + 1))
            cy = int(rng.integers(0, max(1, size // 3)))  # upper part of the scene
            cx = int(rng.integers(0, size))
            yy, xx = np.ogrid[:size, :size]
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
            labels[inside] = 4
            object_field[inside] = obj_index
        elif kind == "pole" and spec.num_classes > 5:
            w = int(rng.integers(1, max(2, size // 24) + 1))
            h = int(rng.integers(size // 4, size // 2 + 1))
            x0 = int(rng.integers(0, max(1, size - w)))
            labels[max(0, road_top - h) : road_top, x0 : x0 + w] = 5
            object_field[max(0, road_top - h) : road_top, x0 : x0 + w] = obj_index

    # class colors: regions jitter around their anchors; object colors blend
    # their anchor with a brightness cue relative to their host region, giving
    # each class both a breakable and an unbreakable identity
    w = _ANCHOR_BLEND
    class_colors = _BASE_COLORS[: spec.num_classes].copy()
    class_colors[:3] += rng.uniform(-_REGION_JITTER, _REGION_JITTER, size=(min(3, spec.num_classes), 3))
    if spec.num_classes > 3:  # box: brick anchor + brighter-than-ground cue
        class_colors[3] = w * class_colors[3] + (1 - w) * class_colors[0] * rng.uniform(*_BOX_FACTOR)
    if spec.num_classes > 4:  # disk: pale anchor + brighter-than-sky cue
        class_colors[4] = w * class_colors[4] + (1 - w) * class_colors[1] * rng.uniform(*_DISK_FACTOR)
    if spec.num_classes > 5:  # pole: dark anchor + darker-than-road cue
        class_colors[5] = w * class_colors[5] + (1 - w) * class_colors[2] * rng.uniform(*_POLE_FACTOR)
    if _CONTRAST != 1.0:  # pull class colors toward their mean: ambiguity dial
        mean_color = class_colors.mean(axis=0, keepdims=True)
        class_colors = mean_color + _CONTRAST * (class_colors - mean_color)
    pixels = class_colors[np.minimum(labels, spec.num_classes - 1)]
    object_jitter = rng.uniform(-0.05, 0.05, size=(n_objects + 1, 3))
    object_jitter[0] = 0.0
    pixels += object_jitter[object_field]

    # scene-level illumination variety (time of day / weather stand-in): both
    # domain populations share this distribution since it precedes the shift
    hue_wobble = float(rng.uniform(-0.05, 0.05))
    hsv = _rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + hue_wobble) % 1.0
    pixels = _hsv_to_rgb(hsv)
    pixels = pixels * float(rng.uniform(0.8, 1.2))
    pixels += rng.normal(0.0, _CANVAS_NOISE, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)

    noise_seed = int(_scene_rng(spec.rng_seed, index, stream=1).integers(0, 2**31 - 1))
    return SceneLayout(pixels=pixels, labels=labels, noise_seed=noise_seed)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    h = np.zeros_like(maxc)
    h = np.where(maxc == r, (g - b) / safe, h)
    h = np.where(maxc == g, 2.0 + (b - r) / safe, h)
    h = np.where(maxc == b, 4.0 + (r - g) / safe, h)
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = np.stack(
        [
            np.stack([v, t, p], axis=-1),
            np.stack([q, v, p], axis=-1),
            np.stack([p, v, t], axis=-1),
            np.stack([p, q, v], axis=-1),
            np.stack([t, p, v], axis=-1),
            np.stack([v, p, q], axis=-1),
        ],
        axis=0,
    )
    return np.take_along_axis(choices, i[None, ..., None], axis=0)[0]


def render_domain(layout: SceneLayout, shift: DomainShift) -> LabeledImage:
    """Render a layout under a photometric shift. Labels pass through untouched.

    Stages whose parameter is the identity are skipped, so the identity shift
    reproduces the source render bit for bit. Output pixels are clamped to
    [0, 1] and quantized to the 8-bit grid used by the on-disk format.
    """
    pixels = layout.pixels.astype(np.float64)
    if shift.hue_shift != 0.0:
        hsv = _rgb_to_hsv(pixels)
        hsv[..., 0] = (hsv[..., 0] + shift.hue_shift) % 1.0
        pixels = _hsv_to_rgb(hsv)
    if shift.brightness_scale != 1.0:
        pixels = pixels * shift.brightness_scale
    if shift.texture_noise_std > 0.0:
        noise_rng = np.random.default_rng(np.random.SeedSequence([layout.noise_seed]))
        pixels = pixels + noise_rng.normal(0.0, shift.texture_noise_std, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    pixels = (np.round(pixels * 255.0) / np.float32(255.0)).astype(np.float32)
    return LabeledImage(pixels=pixels, labels=layout.labels.copy())


def generate_dataset(spec: SceneSpec, indices: range | list[int], shift: DomainShift) -> list[LabeledImage]:
    """Render a list of scenes under one shift."""
    return [render_domain(generate_scene(spec, i), shift) for i in indices]


def _load_meta(root: Path) -> dict:
    meta_path = root / _META_NAME
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset metadata missing: {meta_path}")
    try:
        return json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt dataset metadata {meta_path}: {exc}") from exc


def write_dataset(
    root: str | Path,
    images: list[LabeledImage],
    num_classes: int,
    split: str = "train",
    extra_meta: dict | None = None,
) -> None:
    """Write images/labels as 8-bit PNGs plus a meta.json describing the set."""
    root = Path(root)
    img_dir = root / "images" / split
    lab_dir = root / "labels" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)

    for i, item in enumerate(images):
        item.validate(num_classes)
        rgb = np.round(item.pixels * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(img_dir / f"{i:06}.png")
        Image.fromarray(item.labels.astype(np.uint8), mode="L").save(lab_dir / f"{i:06}.png")

    meta_path = root / _META_NAME
    meta = _load_meta(root) if meta_path.exists() else {"format_version": _DATASET_VERSION, "splits": {}}
    meta["num_classes"] = num_classes
    meta["splits"][split] = len(images)
    if extra_meta:
        meta.update(extra_meta)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(root: str | Path, split: str = "train") -> list[LabeledImage]:
    """Read a split back; file and label-range problems name the offending path."""
    root = Path(root)
    meta = _load_meta(root)
    if split not in meta.get("splits", {}):
        raise ValueError(f"split {split!r} not present in {root / _META_NAME}")
    num_classes = int(meta["num_classes"])
    count = int(meta["splits"][split])

    images = []
    for i in range(count):
        img_path = root / "images" / split / f"{i:06}.png"
        lab_path = root / "labels" / split / f"{i:06}.png"
        for path in (img_path, lab_path):
            if not path.exists():
                raise FileNotFoundError(f"dataset file missing: {path}")
        try:
            rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise ValueError(f"corrupt image file {img_path}: {exc}") from exc
        try:
            labels = np.asarray(Image.open(lab_path), dtype=np.uint8)
        except Exception as exc:
            raise ValueError(f"corrupt label file {lab_path}: {exc}") from exc

        bad = (labels >= num_classes) & (labels != IGNORE)
        if bad.any():
            raise ValueError(
                f"label file {lab_path} has values outside [0, {num_classes - 1}] + IGNORE: "
                f"{sorted(int(v) for v in np.unique(labels[bad]))}"
            )
        pixels = (rgb.astype(np.float32) / np.float32(255.0)).astype(np.float32)
        images.append(LabeledImage(pixels=pixels, labels=labels))
    return images


def dataset_meta(root: str | Path) -> dict:
    return _load_meta(Path(root))


def write_domain_pair(
    out_dir: str | Path,
    seed: int,
    count: int,
    image_size: int,
    shift: DomainShift,
    val_count: int | None = None,
    num_classes: int = 6,
) -> tuple[Path, Path]:
    """Write a source/target directory pair with disjoint scene indices.

    Source scenes use the identity shift; target scenes use `shift`. Index
    ranges do not overlap, so the two populations share layout statistics
    without sharing any individual layout. The target gets a held-out val
    split for adaptation metrics.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if val_count is None:
        val_count = max(8, count // 4)
    spec = SceneSpec(rng_seed=seed, num_classes=num_classes, image_size=image_size)
    out_dir = Path(out_dir)
    source_dir = out_dir / "source"
    target_dir = out_dir / "target"

    shift_meta = {
        "rng_seed": seed,
        "image_size": image_size,
        "scene_spec": {"num_classes": num_classes, "objects_per_scene": list(spec.objects_per_scene)},
    }
    src_images = generate_dataset(spec, range(0, count), IDENTITY_SHIFT)
    write_dataset(
        source_dir,
        src_images,
        num_classes,
        split="train",
        extra_meta={**shift_meta, "shift": vars(IDENTITY_SHIFT)},
    )

    tgt_train = generate_dataset(spec, range(count, 2 * count), shift)
    tgt_val = generate_dataset(spec, range(2 * count, 2 * count + val_count), shift)
    write_dataset(target_dir, tgt_train, num_classes, split="train", extra_meta={**shift_meta, "shift": vars(shift)})
    write_dataset(target_dir, tgt_val, num_classes, split="val")
    return source_dir, target_dir

import numpy as np
import pytest
from PIL import Image

from conftest import ACCEPTANCE_SHIFT
from guideseg.shapeworld import (
    IDENTITY_SHIFT,
    IGNORE,
    DomainShift,
    LabeledImage,
    SceneSpec,
    dataset_meta,
    generate_dataset,
    generate_scene,
    read_dataset,
    render_domain,
    write_dataset,
    write_domain_pair,
)


def test_generate_scene_deterministic():
    spec = SceneSpec(rng_seed=0)
    a = generate_scene(spec, 0)
    b = generate_scene(spec, 0)
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.labels, b.labels)
    assert a.noise_seed == b.noise_seed


def test_generate_scene_index_changes_labels():
    spec = SceneSpec(rng_seed=0)
    a = generate_scene(spec, 0)
    b = generate_scene(spec, 1)
    assert not np.array_equal(a.labels, b.labels)


def test_generate_scene_rejects_bad_size():
    with pytest.raises(ValueError, match="divisible by 8"):
        generate_scene(SceneSpec(rng_seed=0, image_size=63), 0)


def test_generate_scene_rejects_negative_index():
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(rng_seed=0), -1)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(rng_seed=0, num_classes=1)
    with pytest.raises(ValueError):
        SceneSpec(rng_seed=0, objects_per_scene=(4, 2))


def test_domain_shift_validation():
    with pytest.raises(ValueError):
        DomainShift(hue_shift=1.5)
    with pytest.raises(ValueError):
        DomainShift(brightness_scale=0.0)
    with pytest.raises(ValueError):
        DomainShift(texture_noise_std=-0.1)


def test_identity_shift_is_pixel_identical():
    layout = generate_scene(SceneSpec(rng_seed=3), 5)
    a = render_domain(layout, IDENTITY_SHIFT)
    b = render_domain(layout, DomainShift(0.0, 1.0, 0.0))
    assert np.array_equal(a.pixels, b.pixels)


@pytest.mark.parametrize(
    "shift",
    [ACCEPTANCE_SHIFT, DomainShift(0.7, 1.3, 0.0), DomainShift(0.0, 0.5, 0.1)],
)
def test_labels_preserved_under_photometric_shift(shift):
    layout = generate_scene(SceneSpec(rng_seed=1), 2)
    source = render_domain(layout, IDENTITY_SHIFT)
    target = render_domain(layout, shift)
    assert np.array_equal(source.labels, target.labels)


def test_extreme_brightness_clamps():
    layout = generate_scene(SceneSpec(rng_seed=1), 0)
    bright = render_domain(layout, DomainShift(0.0, 10.0, 0.0))
    assert bright.pixels.max() <= 1.0
    assert bright.pixels.min() >= 0.0


def test_render_deterministic_with_noise():
    layout = generate_scene(SceneSpec(rng_seed=2), 4)
    a = render_domain(layout, ACCEPTANCE_SHIFT)
    b = render_domain(layout, ACCEPTANCE_SHIFT)
    assert np.array_equal(a.pixels, b.pixels)


def test_scene_invariants_hold_over_many_scenes():
    spec = SceneSpec(rng_seed=11)
    for index in range(20):
        image = render_domain(generate_scene(spec, index), ACCEPTANCE_SHIFT)
        assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0
        assert np.isfinite(image.pixels).all()
        assert (image.labels == 0).any(), "background class missing"
        assert image.labels.max() < spec.num_classes


def test_dataset_roundtrip_is_exact(tmp_path):
    spec = SceneSpec(rng_seed=5, image_size=32)
    images = generate_dataset(spec, range(10), ACCEPTANCE_SHIFT)
    write_dataset(tmp_path, images, spec.num_classes, split="train")
    restored = read_dataset(tmp_path, split="train")
    assert len(restored) == 10
    for original, loaded in zip(images, restored):
        assert np.array_equal(original.pixels, loaded.pixels)
        assert np.array_equal(original.labels, loaded.labels)


def test_read_missing_file_names_path(tmp_path):
    spec = SceneSpec(rng_seed=5, image_size=32)
    write_dataset(tmp_path, generate_dataset(spec, range(3), IDENTITY_SHIFT), 6)
    victim = tmp_path / "images" / "train" / "000001.png"
    victim.unlink()
    with pytest.raises(FileNotFoundError, match="000001.png"):
        read_dataset(tmp_path)


def test_read_truncated_label_file_names_path(tmp_path):
    spec = SceneSpec(rng_seed=5, image_size=32)
    write_dataset(tmp_path, generate_dataset(spec, range(3), IDENTITY_SHIFT), 6)
    victim = tmp_path / "labels" / "train" / "000002.png"
    victim.write_bytes(victim.read_bytes()[:20])
    with pytest.raises(ValueError, match="000002.png"):
        read_dataset(tmp_path)


def test_read_rejects_out_of_range_labels(tmp_path):
    spec = SceneSpec(rng_seed=5, image_size=32)
    write_dataset(tmp_path, generate_dataset(spec, range(2), IDENTITY_SHIFT), 6)
    victim = tmp_path / "labels" / "train" / "000000.png"
    Image.fromarray(np.full((32, 32), 7, dtype=np.uint8), mode="L").save(victim)
    with pytest.raises(ValueError, match="000000.png"):
        read_dataset(tmp_path)


def test_ignore_value_survives_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 6, size=(16, 16)).astype(np.uint8)
    labels[0, :4] = IGNORE
    pixels = (np.round(rng.random((16, 16, 3)) * 255) / np.float32(255)).astype(np.float32)
    write_dataset(tmp_path, [LabeledImage(pixels, labels)], 6)
    (loaded,) = read_dataset(tmp_path)
    assert np.array_equal(loaded.labels, labels)


def test_write_domain_pair_structure(tmp_path):
    source_dir, target_dir = write_domain_pair(
        tmp_path, seed=0, count=6, image_size=32, shift=ACCEPTANCE_SHIFT, val_count=4
    )
    source = read_dataset(source_dir, "train")
    target = read_dataset(target_dir, "train")
    val = read_dataset(target_dir, "val")
    assert len(source) == 6 and len(target) == 6 and len(val) == 4
    meta = dataset_meta(target_dir)
    assert meta["shift"]["hue_shift"] == ACCEPTANCE_SHIFT.hue_shift
    # disjoint scene indices: the two populations are not the same layouts
    assert not np.array_equal(source[0].labels, target[0].labels)

import numpy as np
import pytest
import torch

from gradcheck import check_gradients
from guideseg.losses import ce_loss
from guideseg.model import SegModel, SegModelConfig


def make_model(channels=(16, 32, 64), num_classes=6, seed=0):
    torch.manual_seed(seed)
    return SegModel(SegModelConfig(num_classes=num_classes, encoder_channels=channels))


def test_feature_and_logit_shapes():
    model = make_model(channels=(32, 64, 128))
    x = torch.randn(1, 3, 64, 64)
    features = model.encode(x)
    assert features.shape == (1, 128, 8, 8)
    logits = model.decode(features)
    assert logits.shape == (1, 6, 64, 64)


def test_output_stride_invariant():
    model = make_model()
    for size in (16, 32, 64, 96):
        features = model.encode(torch.randn(2, 3, size, size))
        assert features.shape[2:] == (size // 8, size // 8)


def test_eval_mode_determinism():
    model = make_model().eval()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a = model(x)
        b = model(x.clone())
    assert torch.equal(a, b)


def test_encode_rejects_bad_sizes():
    model = make_model()
    with pytest.raises(ValueError, match="divisible"):
        model.encode(torch.randn(1, 3, 60, 60))
    with pytest.raises(ValueError, match="expected"):
        model.encode(torch.randn(1, 4, 64, 64))


def test_decode_rejects_wrong_channels():
    model = make_model()
    with pytest.raises(ValueError, match="features"):
        model.decode(torch.randn(1, 32, 8, 8))


def test_decode_of_encode_is_finite():
    model = make_model()
    logits = model(torch.rand(2, 3, 32, 32))
    assert torch.isfinite(logits).all()


def test_parameter_groups_partition():
    model = make_model()
    groups = model.parameter_groups()
    encoder_ids = {id(p) for p in groups["encoder"]}
    decoder_ids = {id(p) for p in groups["decoder"]}
    all_ids = {id(p) for p in model.parameters()}
    assert encoder_ids & decoder_ids == set()
    assert encoder_ids | decoder_ids == all_ids


def test_parameter_group_sizes_stable():
    sizes_a = {k: len(v) for k, v in make_model(seed=0).parameter_groups().items()}
    sizes_b = {k: len(v) for k, v in make_model(seed=1).parameter_groups().items()}
    assert sizes_a == sizes_b


def test_class_permutation_of_head_permutes_logits():
    torch.manual_seed(0)
    model = make_model().double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        features = model.encode(x)
        base_pre = model.classifier(features)
        base = model(x)
        perm = torch.randperm(6)
        model.classifier.weight.copy_(model.classifier.weight[perm].clone())
        model.classifier.bias.copy_(model.classifier.bias[perm].clone())
        permuted_pre = model.classifier(features)
        permuted = model(x)
    # exact through the classifier; the upsample kernel's summation order may
    # shift by one ulp when channel memory layout changes
    assert torch.equal(permuted_pre, base_pre[:, perm])
    assert torch.allclose(permuted, base[:, perm], atol=1e-12, rtol=0.0)


def test_gradients_match_finite_differences():
    torch.manual_seed(1)
    rng = np.random.default_rng(1)
    model = SegModel(SegModelConfig(num_classes=4, encoder_channels=(8, 12, 16))).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    labels = torch.from_numpy(rng.integers(0, 4, (1, 16, 16))).long()

    def loss_fn():
        return ce_loss(model(x), labels)

    # 32 sampled parameter entries spread over encoder and decoder tensors
    named = dict(model.named_parameters())
    targets = {
        "first_conv": named["encoder.0.weight"],
        "mid_conv": named["encoder.9.weight"],
        "last_norm": named["encoder.16.weight"],
        "head": named["classifier.weight"],
    }
    check_gradients(loss_fn, targets, entries_per_tensor=8, rng=rng, step=1e-5, tol=1e-4)

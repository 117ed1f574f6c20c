import numpy as np
import pytest
import torch

from gradcheck import check_gradients
from guideseg.guider import Guider, GuiderConfig

TOY = GuiderConfig(feature_dim=16, embed_dim=32, num_blocks=1, patch_size=2, num_heads=4, mlp_ratio=2.0)


def make_guider(config=TOY, seed=0, double=True):
    torch.manual_seed(seed)
    guider = Guider(config)
    return guider.double() if double else guider


def warm_projections(guider, seed=1, scale=0.05):
    """Give the zero-initialized projections small random values so the
    aggregation branch actually contributes."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in (guider.z1, guider.z2):
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=conv.weight.dtype) * scale)
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen, dtype=conv.bias.dtype) * scale)


def test_config_validation():
    with pytest.raises(ValueError, match="num_heads"):
        GuiderConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValueError, match="divisible by 4"):
        GuiderConfig(embed_dim=34, num_heads=2)


def test_zero_init_state():
    guider = make_guider()
    assert torch.equal(guider.z1.weight, torch.zeros_like(guider.z1.weight))
    assert torch.equal(guider.z1.bias, torch.zeros_like(guider.z1.bias))
    assert torch.equal(guider.z2.weight, torch.zeros_like(guider.z2.weight))
    assert torch.equal(guider.z2.bias, torch.zeros_like(guider.z2.bias))
    token = guider.token.detach()
    assert token.abs().max() > 0
    assert 0.005 < token.std().item() < 0.05


def test_zero_init_flag_off_randomizes_projections():
    guider = make_guider(GuiderConfig(feature_dim=16, embed_dim=32, num_heads=4, zero_init=False))
    assert guider.z1.weight.abs().max() > 0


def test_offset_is_zero_for_any_input_at_init():
    guider = make_guider()
    for seed in range(3):
        torch.manual_seed(seed)
        x = torch.randn(2, 16, 8, 8, dtype=torch.float64)
        offset = guider.gia_forward(x)
        assert torch.equal(offset, torch.zeros_like(offset))


def test_shape_contract_with_default_geometry():
    config = GuiderConfig(feature_dim=128, embed_dim=512, num_blocks=2, patch_size=4, num_heads=8)
    guider = make_guider(config, double=False)
    x = torch.randn(1, 128, 8, 8)
    tokens = guider.gia.patch_embed(x)
    assert tokens.shape == (1, 512, 2, 2)  # 2x2 token grid at embed dim 512
    out = guider.gia_forward(x)
    assert out.shape == x.shape


def test_patch_divisibility_error():
    guider = make_guider(GuiderConfig(feature_dim=16, embed_dim=32, num_heads=4, patch_size=3))
    with pytest.raises(ValueError, match="patch"):
        guider.gia_forward(torch.randn(1, 16, 8, 8, dtype=torch.float64))


class TestInitFeatures:
    def setup_method(self):
        self.guider = make_guider()
        torch.manual_seed(3)
        self.features = torch.randn(1, 16, 4, 4, dtype=torch.float64)

    def test_zero_mask_passes_features_through(self):
        mask = torch.zeros(1, 4, 4, dtype=torch.float64)
        assert torch.equal(self.guider.init_features(self.features, mask), self.features)

    def test_full_mask_places_token_everywhere(self):
        mask = torch.ones(1, 4, 4, dtype=torch.float64)
        out = self.guider.init_features(self.features, mask)
        expected = self.guider.token.detach().view(1, 16, 1, 1).expand_as(out)
        assert torch.equal(out, expected)

    def test_single_masked_position(self):
        mask = torch.zeros(1, 4, 4, dtype=torch.float64)
        mask[0, 2, 1] = 1.0
        out = self.guider.init_features(self.features, mask)
        assert torch.equal(out[0, :, 2, 1], self.guider.token.detach())
        untouched = torch.ones(4, 4, dtype=torch.bool)
        untouched[2, 1] = False
        assert torch.equal(out[0][:, untouched], self.features[0][:, untouched])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mask"):
            self.guider.init_features(self.features, torch.zeros(1, 2, 2, dtype=torch.float64))


def test_reconstruct_is_identity_at_init():
    guider = make_guider()
    torch.manual_seed(5)
    features = torch.randn(2, 16, 4, 4, dtype=torch.float64)
    mask = (torch.rand(2, 4, 4) > 0.5).double()
    f_ini = guider.init_features(features, mask)
    assert torch.equal(guider.reconstruct(features, mask), f_ini)


def test_reconstruct_zero_mask_at_init_returns_input():
    guider = make_guider()
    features = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    mask = torch.zeros(1, 4, 4, dtype=torch.float64)
    assert torch.equal(guider.reconstruct(features, mask), features)


def test_skip_connection_ablation():
    guider = make_guider()
    warm_projections(guider)
    features = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    mask = (torch.rand(1, 4, 4) > 0.5).double()
    f_ini = guider.init_features(features, mask)
    no_skip = guider.reconstruct(features, mask, skip_connection=False)
    assert torch.equal(no_skip, guider.gia_forward(f_ini))
    with_skip = guider.reconstruct(features, mask, skip_connection=True)
    assert torch.equal(with_skip, no_skip + f_ini)


def test_config_level_skip_flag():
    config = GuiderConfig(
        feature_dim=16, embed_dim=32, num_blocks=1, patch_size=2, num_heads=4, skip_connection=False
    )
    guider = make_guider(config)
    warm_projections(guider)
    features = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    mask = torch.zeros(1, 4, 4, dtype=torch.float64)
    assert torch.equal(
        guider.reconstruct(features, mask),
        guider.gia_forward(guider.init_features(features, mask)),
    )


def test_position_encoding_breaks_permutation_equivariance():
    guider = make_guider()
    warm_projections(guider)
    torch.manual_seed(7)
    x = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    # swap the two top patch blocks (patch_size=2 -> blocks [0:2,0:2] and [0:2,2:4])
    swapped = x.clone()
    swapped[..., :2, :2], swapped[..., :2, 2:4] = x[..., :2, 2:4], x[..., :2, :2]
    out = guider.gia_forward(x)
    out_swapped = guider.gia_forward(swapped)
    reswapped = out_swapped.clone()
    reswapped[..., :2, :2], reswapped[..., :2, 2:4] = out_swapped[..., :2, 2:4], out_swapped[..., :2, :2]
    # without position information these would be equal
    assert not torch.allclose(out, reswapped, atol=1e-9)


def test_token_receives_gradient_when_masked():
    guider = make_guider()
    warm_projections(guider)
    features = torch.randn(1, 16, 4, 4, dtype=torch.float64)
    mask = torch.zeros(1, 4, 4, dtype=torch.float64)
    mask[0, 1, 1] = 1.0
    guider.reconstruct(features, mask).sum().backward()
    assert guider.token.grad is not None
    assert guider.token.grad.abs().max() > 0


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    guider = make_guider(seed=4)
    warm_projections(guider, seed=5)
    torch.manual_seed(6)
    features = torch.randn(1, 16, 8, 8, dtype=torch.float64)
    mask = (torch.rand(1, 8, 8) > 0.6).double()
    weights = torch.randn(1, 16, 8, 8, dtype=torch.float64)

    def loss_fn():
        return (guider.reconstruct(features, mask) * weights).sum()

    targets = {
        "token": guider.token,
        "z1": guider.z1.weight,
        "z2": guider.z2.weight,
        "attention_qkv": guider.gia.blocks[0].attn.to_qkv.weight,
    }
    check_gradients(loss_fn, targets, entries_per_tensor=6, rng=rng, step=1e-5, tol=1e-4)

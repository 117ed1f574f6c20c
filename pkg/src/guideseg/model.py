"""Small encoder-decoder segmentation network with an exposed latent interface.

Three strided conv stages give a fixed output stride of 8; the decoder is a
1x1 classifier head plus bilinear upsampling back to input resolution. Group
normalization keeps batch size 2 stable, and there is no dropout, so eval-mode
forwards are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

OUTPUT_STRIDE = 8


@dataclass(frozen=True)
class SegModelConfig:
    num_classes: int = 6
    in_channels: int = 3
    encoder_channels: tuple[int, ...] = (32, 64, 128)
    output_stride: int = OUTPUT_STRIDE

    def __post_init__(self) -> None:
        if self.output_stride != OUTPUT_STRIDE:
            raise ValueError(f"output_stride is fixed at {OUTPUT_STRIDE}")
        if len(self.encoder_channels) != 3:
            raise ValueError("encoder has exactly 3 stride-2 stages")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def feature_dim(self) -> int:
        return self.encoder_channels[-1]


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = max(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class SegModel(nn.Module):
    """F = decode(encode(x)); encoder and decoder parameters stay separately addressable."""

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = config.in_channels
        for ch in config.encoder_channels:
            layers += [
                nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1),
                _group_norm(ch),
                nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, kernel_size=3, padding=1),
                _group_norm(ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = ch
        self.encoder = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(config.feature_dim, config.num_classes, kernel_size=1)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, feature_dim, H/8, W/8); H and W must divide by 8."""
        if images.dim() != 4 or images.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        if h % OUTPUT_STRIDE != 0 or w % OUTPUT_STRIDE != 0:
            raise ValueError(f"image size {h}x{w} not divisible by output stride {OUTPUT_STRIDE}")
        return self.encoder(images)

    def decode(self, features: torch.Tensor) -> torch.Tensor:
        """(B, feature_dim, h, w) -> logits (B, C, 8h, 8w)."""
        if features.dim() != 4 or features.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"expected (B, {self.config.feature_dim}, h, w) features, got {tuple(features.shape)}"
            )
        logits = self.classifier(features)
        return F.interpolate(logits, scale_factor=OUTPUT_STRIDE, mode="bilinear", align_corners=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint, exhaustive split of trainable parameters into encoder/decoder."""
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.classifier.parameters()),
        }

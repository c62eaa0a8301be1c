"""The full detector: residual backbone, FPN (or deconv decoder) and heads."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import AblationFlags, ModelConfig, validate_config
from .nn_blocks import Bottleneck, ResidualBlockSpec, batch_norm

# Identity blocks after each stage's ConvBlock; 3-4-6-3 blocks in total.
IDENTITY_BLOCKS = (2, 3, 5, 2)
STAGE_STRIDES = (1, 2, 2, 2)
EXPANSION = 4
HEATMAP_BIAS = -2.19


class BackboneOutputs(NamedTuple):
    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor


class HeadOutputs(NamedTuple):
    heatmap: torch.Tensor  # (B, n_classes, H/R, W/R), sigmoid output
    offset: torch.Tensor  # (B, 2, H/R, W/R), (dx, dy)
    size: torch.Tensor  # (B, 2, H/R, W/R), (w, h) in output cells


class Backbone(nn.Module):
    def __init__(self, base_width: int = 64, flags: AblationFlags | None = None,
                 cbam_reduction: int = 16, cbam_kernel: int = 7):
        super().__init__()
        flags = flags or AblationFlags()
        self.stem = nn.Sequential(
            nn.Conv2d(3, base_width, 7, stride=2, padding=3, bias=False),
            batch_norm(base_width),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stages = nn.ModuleList()
        self.out_channels: list[int] = []
        in_ch = base_width
        for stage, (n_id, stride) in enumerate(zip(IDENTITY_BLOCKS, STAGE_STRIDES), start=1):
            mid = base_width * 2 ** (stage - 1)
            out = mid * EXPANSION
            common = dict(stage=stage, mid_channels=mid, out_channels=out, cbam=flags.cbam,
                          acon=flags.acon, dcn=flags.dcn and stage == 4)
            blocks = [Bottleneck(ResidualBlockSpec("conv", in_channels=in_ch, stride=stride, **common),
                                 cbam_reduction, cbam_kernel)]
            for _ in range(n_id):
                blocks.append(Bottleneck(ResidualBlockSpec("identity", in_channels=out, **common),
                                         cbam_reduction, cbam_kernel))
            self.stages.append(nn.Sequential(*blocks))
            self.out_channels.append(out)
            in_ch = out

    def forward(self, x) -> BackboneOutputs:
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ValueError(f"input spatial size {tuple(x.shape[-2:])} must be divisible by 32")
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return BackboneOutputs(*feats)


def upsample_like(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class FPN(nn.Module):
    """Top-down fusion of C2..C5; only the stride-4 map P2 is returned."""

    def __init__(self, in_channels: list[int], channels: int = 256):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.out_channels = channels

    def forward(self, feats: BackboneOutputs) -> torch.Tensor:
        if len(feats) != len(self.laterals):
            raise ValueError("FPN got the wrong number of feature maps")
        p = self.laterals[-1](feats[-1])
        for lateral, c in zip(reversed(self.laterals[:-1]), reversed(feats[:-1])):
            p = lateral(c) + upsample_like(p, c)
        return p


class DeconvDecoder(nn.Module):
    """Three stride-2 transposed convs taking C5 back to stride 4 (FPN-off path)."""

    def __init__(self, in_channels: int, channels: int = 256):
        super().__init__()
        widths = [channels, max(channels // 2, 1), max(channels // 4, 1)]
        layers = []
        for width in widths:
            layers += [nn.ConvTranspose2d(in_channels, width, 4, stride=2, padding=1, bias=False),
                       batch_norm(width), nn.ReLU()]
            in_channels = width
        self.body = nn.Sequential(*layers)
        self.out_channels = widths[-1]

    def forward(self, feats: BackboneOutputs) -> torch.Tensor:
        return self.body(feats.c5)


class Head(nn.Module):
    def __init__(self, in_channels: int, mid_channels: int, out_channels: int, bias: float = 0.0):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.out = nn.Conv2d(mid_channels, out_channels, 1)
        nn.init.constant_(self.out.bias, bias)

    def forward(self, x):
        return self.out(F.relu(self.conv(x)))


class CCenterNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg = validate_config(cfg)
        self.cfg = cfg
        flags = cfg.ablation
        self.backbone = Backbone(cfg.base_width, flags, cfg.cbam_reduction, cfg.cbam_kernel)
        if flags.fpn:
            self.neck = FPN(self.backbone.out_channels, cfg.fpn_channels)
        else:
            self.neck = DeconvDecoder(self.backbone.out_channels[-1], cfg.fpn_channels)
        c = self.neck.out_channels
        self.heatmap_head = Head(c, cfg.head_channels, cfg.n_classes, bias=HEATMAP_BIAS)
        self.offset_head = Head(c, cfg.head_channels, 2)
        self.size_head = Head(c, cfg.head_channels, 2)
        self.backbone_frozen = False

    def heads(self, features: torch.Tensor) -> HeadOutputs:
        return HeadOutputs(
            torch.sigmoid(self.heatmap_head(features)),
            self.offset_head(features),
            self.size_head(features),
        )

    def forward(self, images: torch.Tensor) -> HeadOutputs:
        return self.heads(self.neck(self.backbone(images)))

    def freeze_backbone(self, frozen: bool = True) -> None:
        """Stop (or resume) updates of backbone weights and BatchNorm statistics."""
        self.backbone_frozen = frozen
        for p in self.backbone.parameters():
            p.requires_grad_(not frozen)
        self.backbone.train(self.training and not frozen)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.backbone_frozen:
            self.backbone.eval()
        return self


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig) -> CCenterNet:
    return CCenterNet(cfg)

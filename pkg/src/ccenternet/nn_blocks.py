"""Building blocks of the detector backbone.

Offsets for the deformable convolution use the layout ``(dy_0, dx_0,
dy_1, dx_1, ...)`` with taps enumerated row-major over the kernel, the same
layout torchvision uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def h_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return F.relu6(x + 3.0) / 6.0


def _channel_view(p: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if p.dim() != 1:
        return p
    if x.dim() < 2 or x.shape[1] != p.shape[0]:
        raise ValueError(f"parameter of size {p.shape[0]} does not match channels of {tuple(x.shape)}")
    return p.view(1, -1, *([1] * (x.dim() - 2)))


def acon_c(x: torch.Tensor, p1: torch.Tensor, p2: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """ACON-C: ``(p1 - p2) x * sigmoid(beta (p1 - p2) x) + p2 x``.

    1-D parameters are treated as per-channel and broadcast over axis 1.
    """
    p1, p2, beta = (_channel_view(torch.as_tensor(p, dtype=x.dtype), x) for p in (p1, p2, beta))
    dpx = (p1 - p2) * x
    return dpx * torch.sigmoid(beta * dpx) + p2 * x


class HSigmoid(nn.Module):
    def forward(self, x):
        return h_sigmoid(x)


class AconC(nn.Module):
    """Per-channel learnable ACON-C, initialised to Swish (p1=1, p2=0, beta=1)."""

    def __init__(self, channels: int):
        super().__init__()
        self.p1 = nn.Parameter(torch.ones(channels))
        self.p2 = nn.Parameter(torch.zeros(channels))
        self.beta = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        return acon_c(x, self.p1, self.p2, self.beta)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def mlp(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    def forward(self, x):
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return h_sigmoid(self.mlp(avg) + self.mlp(mx))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("spatial attention kernel must be odd")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return h_sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel then spatial attention, both gated by h-sigmoid."""

    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7):
        super().__init__()
        if channels < 1:
            raise ValueError("CBAM needs at least one channel")
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)


def deform_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    offsets: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 1,
    dilation: int = 1,
) -> torch.Tensor:
    """Deformable convolution (no modulation) with bilinear sampling.

    Samples falling outside the input read as zero. ``offsets`` has shape
    ``(B, 2*kh*kw, H_out, W_out)``.
    """
    b, c, h, w = x.shape
    o, c_w, kh, kw = weight.shape
    if c_w != c:
        raise ValueError(f"weight expects {c_w} input channels, got {c}")
    k = kh * kw
    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if offsets.shape != (b, 2 * k, h_out, w_out):
        raise ValueError(f"offsets must have shape {(b, 2 * k, h_out, w_out)}, got {tuple(offsets.shape)}")

    dev, dt = x.device, x.dtype
    base_y = (torch.arange(h_out, device=dev, dtype=dt) * stride - padding).view(1, 1, h_out, 1)
    base_x = (torch.arange(w_out, device=dev, dtype=dt) * stride - padding).view(1, 1, 1, w_out)
    tap_i, tap_j = torch.meshgrid(
        torch.arange(kh, device=dev, dtype=dt), torch.arange(kw, device=dev, dtype=dt), indexing="ij"
    )
    tap_y = (tap_i.reshape(1, k, 1, 1)) * dilation
    tap_x = (tap_j.reshape(1, k, 1, 1)) * dilation

    off = offsets.view(b, k, 2, h_out, w_out)
    py = base_y + tap_y + off[:, :, 0]
    px = base_x + tap_x + off[:, :, 1]

    y0 = torch.floor(py)
    x0 = torch.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.long()
    x0 = x0.long()

    flat = x.reshape(b, c, h * w)
    sampled = x.new_zeros(b, c, k * h_out * w_out)
    corners = (
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    )
    for yy, xx, wt in corners:
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).view(b, 1, -1).expand(b, c, -1)
        vals = torch.gather(flat, 2, idx)
        sampled = sampled + vals * (wt * valid.to(dt)).view(b, 1, -1)

    sampled = sampled.view(b, c, k, h_out, w_out)
    out = torch.einsum("bckhw,ock->bohw", sampled, weight.reshape(o, c, k))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformConv2d(nn.Module):
    """3x3 deformable convolution whose offsets come from a zero-initialised conv."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.offset_conv = nn.Conv2d(in_channels, 2 * kernel_size * kernel_size, kernel_size,
                                     stride=stride, padding=padding)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def forward(self, x, offsets: torch.Tensor | None = None):
        if offsets is None:
            offsets = self.offset_conv(x)
        return deform_conv2d(x, self.weight, offsets, self.bias, self.stride, self.padding)


BlockKind = Literal["conv", "identity"]


@dataclass(frozen=True)
class ResidualBlockSpec:
    kind: BlockKind
    stage: int
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    cbam: bool = False
    acon: bool = False
    dcn: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "identity"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if not 1 <= self.stage <= 4:
            raise ValueError(f"stage must be 1..4, got {self.stage}")
        if self.dcn and self.stage != 4:
            raise ValueError("deformable 3x3 convolution is only allowed in stage 4")
        if self.kind == "identity" and (self.stride != 1 or self.in_channels != self.out_channels):
            raise ValueError("identity block needs stride 1 and matching channel widths")


def batch_norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block (ConvBlock or IdentityBlock).

    The 3x3 is deformable when ``spec.dcn``; its activation is ACON-C when
    ``spec.acon``; CBAM acts on the branch output before the residual add.
    """

    def __init__(self, spec: ResidualBlockSpec, cbam_reduction: int = 16, cbam_kernel: int = 7):
        super().__init__()
        self.spec = spec
        mid = spec.mid_channels
        self.conv1 = nn.Conv2d(spec.in_channels, mid, 1, bias=False)
        self.bn1 = batch_norm(mid)
        if spec.dcn:
            self.conv2 = DeformConv2d(mid, mid, 3, stride=spec.stride, padding=1)
        else:
            self.conv2 = nn.Conv2d(mid, mid, 3, stride=spec.stride, padding=1, bias=False)
        self.bn2 = batch_norm(mid)
        self.act2 = AconC(mid) if spec.acon else nn.ReLU()
        self.conv3 = nn.Conv2d(mid, spec.out_channels, 1, bias=False)
        self.bn3 = batch_norm(spec.out_channels)
        self.cbam = CBAM(spec.out_channels, cbam_reduction, cbam_kernel) if spec.cbam else None
        if spec.kind == "conv":
            self.shortcut = nn.Sequential(
                nn.Conv2d(spec.in_channels, spec.out_channels, 1, stride=spec.stride, bias=False),
                batch_norm(spec.out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def branch(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.act2(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        if self.cbam is not None:
            y = self.cbam(y)
        return y

    def forward(self, x):
        return F.relu(self.branch(x) + self.shortcut(x))

"""Heatmap focal loss, masked L1 offset / size losses and their weighted sum."""

from __future__ import annotations

from typing import NamedTuple

import torch

ALPHA = 2
BETA = 4
CLAMP = 1e-4


class LossBreakdown(NamedTuple):
    cls: torch.Tensor
    off: torch.Tensor
    reg: torch.Tensor
    det: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_cls": _scalar(self.cls), "L_off": _scalar(self.off),
                "L_reg": _scalar(self.reg), "L_det": _scalar(self.det)}


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _norm(n) -> torch.Tensor | float:
    if isinstance(n, torch.Tensor):
        return n.to(torch.get_default_dtype()).clamp(min=1.0)
    return float(max(n, 1))


def focal_loss(pred: torch.Tensor, target: torch.Tensor, n, alpha: int = ALPHA, beta: int = BETA) -> torch.Tensor:
    """Penalty-reduced pixel-wise focal loss over all classes and positions.

    ``pred`` is clamped to ``[1e-4, 1 - 1e-4]`` before the logs.
    """
    pred = pred.clamp(CLAMP, 1 - CLAMP)
    pos = target.eq(1)
    pos_term = (1 - pred).pow(alpha) * torch.log(pred)
    neg_term = (1 - target).pow(beta) * pred.pow(alpha) * torch.log(1 - pred)
    total = torch.where(pos, pos_term, neg_term).sum()
    return -total / _norm(n)


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, n) -> torch.Tensor:
    """Sum of |pred - target| over both channels at masked positions, over max(n, 1).

    ``pred``/``target`` are ``(..., 2, h, w)`` and ``mask`` is ``(..., h, w)``.
    """
    diff = (pred - target).abs() * mask.unsqueeze(-3)
    return diff.sum() / _norm(n)


def offset_loss(pred, target, mask, n) -> torch.Tensor:
    return masked_l1(pred, target, mask, n)


def size_loss(pred, target, mask, n) -> torch.Tensor:
    return masked_l1(pred, target, mask, n)


def total_loss(l_cls, l_off, l_reg, lambda_reg: float = 0.1, lambda_off: float = 1.0) -> LossBreakdown:
    return LossBreakdown(l_cls, l_off, l_reg, l_cls + lambda_reg * l_reg + lambda_off * l_off)


def detection_loss(outputs, targets: dict, lambda_reg: float = 0.1, lambda_off: float = 1.0) -> LossBreakdown:
    """All three terms for a batch; N is the number of objects in the whole batch."""
    n = targets["n"].sum()
    l_cls = focal_loss(outputs.heatmap, targets["heatmap"], n)
    l_off = offset_loss(outputs.offset, targets["offset"], targets["mask"], n)
    l_reg = size_loss(outputs.size, targets["size"], targets["mask"], n)
    return total_loss(l_cls, l_off, l_reg, lambda_reg, lambda_off)

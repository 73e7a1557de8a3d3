"""Weight-saliency masks computed from forgetting-loss gradients, and gradient masking."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import torch

from .errors import ConfigError, UsageError
from .model import CHECKPOINT_VERSION, ParamGrads, _load_payload

MASK_MODES = ("none", "hard", "soft")


@dataclass(eq=False)
class SaliencyMask:
    values: "OrderedDict[str, torch.Tensor]"
    mode: str
    sparsity: float | None = None

    def fraction_ones(self) -> float:
        ones = sum(int((v == 1).sum()) for v in self.values.values())
        return ones / sum(v.numel() for v in self.values.values())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format_version": CHECKPOINT_VERSION,
            "kind": "mask",
            "mode": self.mode,
            "sparsity": self.sparsity,
            "values": OrderedDict((k, v.detach().cpu().clone()) for k, v in self.values.items()),
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "SaliencyMask":
        payload = _load_payload(path, "mask")
        return cls(OrderedDict(payload["values"]), payload["mode"], payload["sparsity"])


def soft_saliency(g: torch.Tensor) -> torch.Tensor:
    """|2(sigmoid(g) - 0.5)|, evaluated as tanh(|g|/2) (same function, no cancellation near 0)."""
    return torch.tanh(g.abs() / 2)


def ones_mask(reference: Mapping[str, torch.Tensor]) -> SaliencyMask:
    return SaliencyMask(OrderedDict((k, torch.ones_like(v)) for k, v in reference.items()), "none")


def hard_mask(grads: ParamGrads, q: float) -> SaliencyMask:
    """1 on the top ``q`` fraction of coordinates by |g| across the whole model, 0 elsewhere."""
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"hard-mask sparsity q must lie in (0, 1], got {q}")
    flat = torch.cat([g.detach().abs().flatten() for g in grads.values()])
    k = int(round(q * flat.numel()))
    keep = torch.zeros(flat.numel(), dtype=torch.bool)
    # stable sort so ties are broken by position, not by platform
    order = torch.sort(flat, descending=True, stable=True).indices
    keep[order[:k]] = True
    values, offset = OrderedDict(), 0
    for name, g in grads.items():
        n = g.numel()
        values[name] = keep[offset:offset + n].view_as(g).to(g.dtype)
        offset += n
    return SaliencyMask(values, "hard", q)


def mask_from_grads(grads: ParamGrads, mode: str, q: float = 0.5) -> SaliencyMask:
    if mode == "soft":
        return SaliencyMask(OrderedDict((k, soft_saliency(g.detach())) for k, g in grads.items()), "soft")
    if mode == "hard":
        return hard_mask(grads, q)
    if mode == "none":
        return ones_mask(grads)
    raise ConfigError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


def apply_mask(grads: ParamGrads, mask: SaliencyMask) -> ParamGrads:
    """Element-wise ``mask * grads``; returns new tensors."""
    values = mask.values
    if list(values.keys()) != list(grads.keys()):
        raise UsageError("mask and gradients have different parameter names")
    out = OrderedDict()
    for name, g in grads.items():
        m = values[name]
        if m.shape != g.shape:
            raise UsageError(f"mask[{name}] shape {tuple(m.shape)} != grad shape {tuple(g.shape)}")
        out[name] = g * m
    return out

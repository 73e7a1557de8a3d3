"""Classifier backend: architectures, forward passes, gradients, SGD and checkpoints.

Everything else in the package talks to models through the functions here, so
the unlearning code never touches ``loss.backward()`` or ``torch.optim``
directly.
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataFormatError, InputError, UsageError

CHECKPOINT_VERSION = 1
ARCHITECTURES = ("small-cnn", "resnet18-cifar")

# name -> gradient tensor, ordered like model.named_parameters()
ParamGrads = dict[str, torch.Tensor]


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str = "small-cnn"
    num_classes: int = 10
    feature_dim: int | None = None
    # small-cnn conv widths; only shrunk for gradient-check sized models
    channels: tuple[int, int, int, int] | None = None
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.name!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if tuple(self.input_shape) != (3, 32, 32):
            raise ConfigError("only 3x32x32 inputs are supported")
        if self.name == "resnet18-cifar":
            if self.feature_dim not in (None, 512):
                raise ConfigError("resnet18-cifar has a fixed feature_dim of 512")
            if self.channels is not None:
                raise ConfigError("channels only applies to small-cnn")
            object.__setattr__(self, "feature_dim", 512)
        else:
            if self.feature_dim is None:
                object.__setattr__(self, "feature_dim", 128)
            if self.channels is None:
                object.__setattr__(self, "channels", (32, 32, 64, 64))
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
            if len(self.channels) != 4 or min(self.channels) < 1:
                raise ConfigError("small-cnn needs four positive conv widths")
            if self.feature_dim < 1:
                raise ConfigError("feature_dim must be >= 1")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels) if self.channels is not None else None
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        d = dict(d)
        if d.get("channels") is not None:
            d["channels"] = tuple(d["channels"])
        d["input_shape"] = tuple(d.get("input_shape", (3, 32, 32)))
        return cls(**d)


class SmallCNN(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        c1, c2, c3, c4 = spec.channels
        self.body = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c3, c4, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(c4 * 8 * 8, spec.feature_dim), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18Body(nn.Module):
    """ResNet-18 with a 3x3 stem and no initial max-pool (CIFAR variant)."""

    def __init__(self):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(64, 2, 1)
        self.layer2 = self._make_layer(128, 2, 2)
        self.layer3 = self._make_layer(256, 2, 2)
        self.layer4 = self._make_layer(512, 2, 2)

    def _make_layer(self, planes, n_blocks, stride):
        layers = []
        for s in [stride] + [1] * (n_blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)


class Classifier(nn.Module):
    """Feature extractor plus a linear head.

    ``features`` returns the raw activations that enter the head; use
    :func:`forward_features` for the L2-normalized embedding.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.backbone = SmallCNN(spec) if spec.name == "small-cnn" else ResNet18Body()
        self.head = nn.Linear(spec.feature_dim, spec.num_classes)

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.head(self.backbone(x))

    @property
    def params(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self.named_parameters())

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_classifier(spec: ArchitectureSpec, seed: int) -> Classifier:
    """Build a freshly initialized classifier; identical (spec, seed) gives identical weights."""
    if not isinstance(spec, ArchitectureSpec):
        raise ConfigError("spec must be an ArchitectureSpec")
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(spec)
    return model


def _as_batch(model: Classifier, batch) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    if not isinstance(batch, torch.Tensor):
        raise InputError("batch must be a numpy array or a torch tensor")
    if batch.dim() != 4 or tuple(batch.shape[1:]) != tuple(model.spec.input_shape):
        raise InputError(
            f"expected batch of shape Bx{'x'.join(map(str, model.spec.input_shape))}, got {tuple(batch.shape)}"
        )
    dtype = next(model.parameters()).dtype
    if batch.dtype != dtype:
        batch = batch.to(dtype)
    return batch


def forward_logits(model: Classifier, batch) -> torch.Tensor:
    return model(_as_batch(model, batch))


def forward_features(model: Classifier, batch) -> torch.Tensor:
    """Penultimate activations, L2-normalized per row."""
    return F.normalize(model.features(_as_batch(model, batch)), dim=1)


def compute_grads(model: nn.Module, loss: torch.Tensor) -> ParamGrads:
    """d(loss)/d(param) for every named parameter, in parameter order."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise UsageError("loss must be a scalar tensor")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to the model parameters")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    if all(g is None for g in grads):
        raise UsageError("loss is not connected to the model parameters")
    return OrderedDict(
        (n, torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)
    )


def check_congruent(model: nn.Module, tensors: Mapping[str, torch.Tensor], what: str = "grads"):
    params = OrderedDict(model.named_parameters())
    if list(tensors.keys()) != list(params.keys()):
        raise UsageError(f"{what} keys do not match model parameters")
    for name, p in params.items():
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise UsageError(f"{what}[{name}] has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")


class SGD:
    """SGD with momentum whose buffers live for as long as this object.

    Weight decay is added to the gradient before the momentum update
    (``d = g + wd * w; buf = m * buf + d; w -= lr * buf``), which is the
    ``torch.optim.SGD`` convention.
    """

    def __init__(self, model: nn.Module, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.model = model
        self._names = [n for n, _ in model.named_parameters()]
        self._opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self._opt.param_groups[0]["lr"]

    @lr.setter
    def lr(self, value: float):
        for group in self._opt.param_groups:
            group["lr"] = value

    def step(self, grads: Mapping[str, torch.Tensor]) -> nn.Module:
        check_congruent(self.model, grads)
        for name, p in self.model.named_parameters():
            p.grad = grads[name].detach().to(p.dtype)
        self._opt.step()
        for p in self.model.parameters():
            p.grad = None
        return self.model

    def momentum_buffers(self) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        for name, p in zip(self._names, self.model.parameters()):
            buf = self._opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[name] = buf.detach().clone()
        return out


def sgd_step(model: nn.Module, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             optimizer: SGD | None = None) -> nn.Module:
    """One SGD update. Pass ``optimizer`` to keep momentum across calls."""
    if optimizer is None:
        optimizer = SGD(model, lr, momentum, weight_decay)
    return optimizer.step(grads)


def clone_model(model: Classifier) -> Classifier:
    return copy.deepcopy(model)


def _tensor_map(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().cpu().clone()) for k, v in module.state_dict().items())


def save_checkpoint(path, model: Classifier, seed: int | None = None,
                    momentum: Mapping[str, torch.Tensor] | None = None,
                    extra: Mapping | None = None) -> Path:
    """Write a versioned checkpoint. Parameters round-trip bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "classifier",
        "architecture": model.spec.to_dict(),
        "state": _tensor_map(model),
        "momentum": OrderedDict((k, v.detach().cpu().clone()) for k, v in (momentum or {}).items()),
        "seed": seed,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def _load_payload(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != kind:
        raise DataFormatError(f"{path} is not a {kind} checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported format_version {payload.get('format_version')}")
    return payload


def load_checkpoint(path) -> tuple[Classifier, dict]:
    """Return ``(model, payload)``; the model is in eval mode."""
    payload = _load_payload(path, "classifier")
    spec = ArchitectureSpec.from_dict(payload["architecture"])
    model = Classifier(spec)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload

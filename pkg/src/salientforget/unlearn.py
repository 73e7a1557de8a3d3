"""Two-phase unlearning (KL forgetting, then masked contrastive fine-tuning) and baselines."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .data import AugmentationPolicy, CyclingBatches, ForgetSplit, LabeledDataset, augment_batch, batch_iter
from .errors import ConfigError, NumericError
from .losses import contrastive_forget_loss, kl_uniform_loss, retain_ce_loss
from .metrics import mean_cross_similarity
from .model import SGD, ArchitectureSpec, Classifier, build_classifier, clone_model, compute_grads, forward_features
from .saliency import MASK_MODES, SaliencyMask, apply_mask, mask_from_grads

log = logging.getLogger(__name__)

# method name -> mask mode of the two-phase pipeline
VARIANTS = {"cl": "none", "ws-cl": "hard", "wss-cl": "soft"}
BASELINES = ("retrain", "ft", "ga", "rl")
METHODS = BASELINES + tuple(VARIANTS)


@dataclass
class TrainConfig:
    """Plain supervised training, used for the original model and the retrain reference."""

    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    lr_schedule: str = "cosine"
    augment: bool = True
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        return self


@dataclass
class UnlearnConfig:
    tau: float = 1.4
    phase1_epochs: int = 3
    phase2_epochs: int = 5
    phase1_lr: float = 1e-3
    phase2_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size_forget: int = 256
    batch_size_retain: int = 256
    mask_mode: str = "soft"
    hard_sparsity: float = 0.5
    alternation_ratio: int = 1
    mask_ce: bool = False
    seed: int = 0
    # baselines
    ft_epochs: int = 5
    ft_lr: float = 0.01
    ga_epochs: int = 5
    ga_lr: float = 1e-4
    rl_epochs: int = 5
    rl_lr: float = 0.01
    track_similarity: bool = False

    def validate(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        for name in ("phase1_epochs", "phase2_epochs", "ft_epochs", "ga_epochs", "rl_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("phase1_lr", "phase2_lr", "ft_lr", "rl_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.ga_lr < 0:
            raise ConfigError("ga_lr must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if not 0.0 < self.hard_sparsity <= 1.0:
            raise ConfigError("hard_sparsity must lie in (0, 1]")
        if self.alternation_ratio < 1:
            raise ConfigError("alternation_ratio must be >= 1")
        if min(self.batch_size_forget, self.batch_size_retain) < 1:
            raise ConfigError("batch sizes must be >= 1")
        return self


@dataclass
class PhaseReport:
    name: str
    losses: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0
    epochs: int = 0
    steps: int = 0
    similarity_start: float | None = None
    similarity_end: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss during {where}")


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / cfg.epochs))


def train_classifier(model: Classifier, data: LabeledDataset, indices, cfg: TrainConfig,
                     labels: np.ndarray | None = None, policy: AugmentationPolicy | None = None
                     ) -> tuple[Classifier, PhaseReport]:
    """Cross-entropy training on ``indices``; ``labels`` overrides the dataset labels if given."""
    cfg.validate()
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ConfigError("cannot train on an empty index set")
    policy = policy or AugmentationPolicy.for_dataset(data)
    all_labels = data.labels if labels is None else labels
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    report = PhaseReport("train", {"ce": []})
    t0 = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        opt.lr = _epoch_lr(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        total, seen = 0.0, 0
        for idx in batch_iter(indices, cfg.batch_size, cfg.seed, epoch=epoch):
            if cfg.augment:
                x = augment_batch(data.images[idx], policy, rng)
            else:
                x, _ = data.tensors(idx)
            y = torch.from_numpy(all_labels[idx])
            loss = retain_ce_loss(model(x), y)
            _check_finite(loss, "training")
            opt.step(compute_grads(model, loss))
            total += loss.item() * len(idx)
            seen += len(idx)
            report.steps += 1
        report.losses["ce"].append(total / seen)
        report.epochs += 1
        log.info("train epoch %d/%d ce=%.4f", epoch + 1, cfg.epochs, total / seen)
    model.eval()
    report.seconds = time.perf_counter() - t0
    return model, report


def forgetting_phase(model: Classifier, data: LabeledDataset, forget_indices,
                     cfg: UnlearnConfig) -> tuple[Classifier, PhaseReport]:
    """Minimize KL(model || uniform) on the forget set only, without any mask."""
    cfg.validate()
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    if len(forget_indices) == 0:
        raise ConfigError("forget set is empty: nothing to forget")
    opt = SGD(model, cfg.phase1_lr, cfg.momentum, cfg.weight_decay)
    report = PhaseReport("forget", {"kl": []})
    t0 = time.perf_counter()
    model.train()
    for epoch in range(cfg.phase1_epochs):
        total = 0.0
        for idx in batch_iter(forget_indices, cfg.batch_size_forget, cfg.seed, epoch=epoch):
            x, _ = data.tensors(idx)
            loss = kl_uniform_loss(model(x))
            opt.step(compute_grads(model, loss))
            total += loss.item() * len(idx)
            report.steps += 1
        report.losses["kl"].append(total / len(forget_indices))
        report.epochs += 1
    model.eval()
    report.seconds = time.perf_counter() - t0
    return model, report


def compute_saliency(model: Classifier, data: LabeledDataset, forget_indices, cfg: UnlearnConfig,
                     mode: str | None = None) -> SaliencyMask:
    """Mask from the gradient of the mean KL-to-uniform loss over the whole forget set.

    Batches are visited in index order and accumulated sequentially. The model
    is evaluated in eval mode so that batch-norm statistics are not touched.
    """
    mode = cfg.mask_mode if mode is None else mode
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    if len(forget_indices) == 0:
        raise ConfigError("forget set is empty")
    was_training = model.training
    model.eval()
    accum = None
    n = len(forget_indices)
    for idx in batch_iter(forget_indices, cfg.batch_size_forget):
        x, _ = data.tensors(idx)
        loss = kl_uniform_loss(model(x)) * (len(idx) / n)
        grads = compute_grads(model, loss)
        if accum is None:
            accum = grads
        else:
            for k in accum:
                accum[k] = accum[k] + grads[k]
    model.train(was_training)
    return mask_from_grads(accum, mode, cfg.hard_sparsity)


def adversarial_finetune_phase(model: Classifier, data: LabeledDataset, forget_indices, retain_indices,
                               mask: SaliencyMask | None, cfg: UnlearnConfig,
                               policy: AugmentationPolicy | None = None) -> tuple[Classifier, PhaseReport]:
    """Alternate one masked contrastive step on a forget batch with ``r`` cross-entropy steps.

    An epoch is one pass over the forget set. The retain batch that follows a
    contrastive step also supplies that step's negatives. Retain batches are
    drawn from a stream that reshuffles each time it wraps.
    """
    cfg.validate()
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    retain_indices = np.asarray(retain_indices, dtype=np.int64)
    if len(forget_indices) == 0 or len(retain_indices) == 0:
        raise ConfigError("adversarial fine-tuning needs non-empty forget and retain sets")
    policy = policy or AugmentationPolicy.for_dataset(data)
    retain_stream = CyclingBatches(retain_indices, cfg.batch_size_retain, cfg.seed + 1)
    opt = SGD(model, cfg.phase2_lr, cfg.momentum, cfg.weight_decay)
    report = PhaseReport("finetune", {"contrastive": [], "ce": []})
    if cfg.track_similarity:
        report.similarity_start = mean_cross_similarity(model, data, forget_indices, retain_indices)
    t0 = time.perf_counter()
    model.train()
    for epoch in range(cfg.phase2_epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 2])
        con_total = ce_total = 0.0
        con_n = ce_n = 0
        for f_idx in batch_iter(forget_indices, cfg.batch_size_forget, cfg.seed, epoch=epoch):
            r_idx = next(retain_stream)
            x, _ = data.tensors(f_idx)
            x_aug = augment_batch(data.images[f_idx], policy, rng)
            x_r, y_r = data.tensors(r_idx)
            z = forward_features(model, x)
            z_aug = forward_features(model, x_aug)
            z_r = forward_features(model, x_r)
            loss = contrastive_forget_loss(z, z_aug, z_r, cfg.tau)
            _check_finite(loss, "contrastive step")
            grads = compute_grads(model, loss)
            if mask is not None:
                grads = apply_mask(grads, mask)
            opt.step(grads)
            con_total += loss.item()
            con_n += 1
            report.steps += 1
            for j in range(cfg.alternation_ratio):
                if j:
                    r_idx = next(retain_stream)
                    x_r, y_r = data.tensors(r_idx)
                loss = retain_ce_loss(model(x_r), y_r)
                _check_finite(loss, "cross-entropy step")
                grads = compute_grads(model, loss)
                if mask is not None and cfg.mask_ce:
                    grads = apply_mask(grads, mask)
                opt.step(grads)
                ce_total += loss.item()
                ce_n += 1
                report.steps += 1
        report.losses["contrastive"].append(con_total / con_n)
        report.losses["ce"].append(ce_total / ce_n)
        report.epochs += 1
        log.info("finetune epoch %d/%d contrastive=%.4f ce=%.4f", epoch + 1, cfg.phase2_epochs,
                 con_total / con_n, ce_total / ce_n)
    model.eval()
    report.seconds = time.perf_counter() - t0
    if cfg.track_similarity:
        report.similarity_end = mean_cross_similarity(model, data, forget_indices, retain_indices)
    return model, report


@dataclass
class UnlearnResult:
    model: Classifier
    reports: dict[str, PhaseReport]
    rte_seconds: float
    mask: SaliencyMask | None = None


def wss_cl_unlearn(model_original: Classifier, split: ForgetSplit, data: LabeledDataset, cfg: UnlearnConfig,
                   policy: AugmentationPolicy | None = None, mask: SaliencyMask | None = None) -> UnlearnResult:
    """Forgetting phase, saliency mask, then adversarial fine-tuning, on a copy of the model.

    ``cfg.mask_mode`` selects the variant: ``none`` (CL), ``hard`` (WS-CL),
    ``soft`` (WSS-CL). Passing ``mask`` skips mask computation and uses it as is.
    """
    cfg.validate()
    t0 = time.perf_counter()
    model = clone_model(model_original)
    model, r1 = forgetting_phase(model, data, split.forget_indices, cfg)
    if mask is None and cfg.mask_mode != "none":
        mask = compute_saliency(model, data, split.forget_indices, cfg)
    model, r2 = adversarial_finetune_phase(model, data, split.forget_indices, split.retain_indices, mask, cfg, policy)
    rte = time.perf_counter() - t0
    return UnlearnResult(model, {"forget": r1, "finetune": r2}, rte, mask)


def retrain_gold(spec: ArchitectureSpec, data: LabeledDataset, retain_indices, train_cfg: TrainConfig,
                 policy: AugmentationPolicy | None = None) -> tuple[Classifier, PhaseReport]:
    """Train from scratch on the retain set with the same recipe as the original model."""
    if len(retain_indices) == 0:
        raise ConfigError("retain set is empty")
    model = build_classifier(spec, train_cfg.seed)
    return train_classifier(model, data, retain_indices, train_cfg, policy=policy)


def ft_baseline(model_original: Classifier, data: LabeledDataset, retain_indices, cfg: UnlearnConfig,
                policy: AugmentationPolicy | None = None) -> tuple[Classifier, PhaseReport]:
    """A few epochs of cross-entropy fine-tuning on the retain set."""
    cfg.validate()
    tcfg = TrainConfig(epochs=cfg.ft_epochs, lr=cfg.ft_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       batch_size=cfg.batch_size_retain, lr_schedule="constant", seed=cfg.seed)
    model, report = train_classifier(clone_model(model_original), data, retain_indices, tcfg, policy=policy)
    report.name = "ft"
    return model, report


def ga_baseline(model_original: Classifier, data: LabeledDataset, forget_indices,
                cfg: UnlearnConfig) -> tuple[Classifier, PhaseReport]:
    """Gradient ascent on the forget-set cross-entropy for ``ga_epochs`` passes."""
    cfg.validate()
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    if len(forget_indices) == 0:
        raise ConfigError("forget set is empty")
    model = clone_model(model_original)
    report = PhaseReport("ga", {"ce": []})
    if cfg.ga_lr == 0:
        return model, report
    opt = SGD(model, cfg.ga_lr, cfg.momentum, 0.0)
    t0 = time.perf_counter()
    model.train()
    for epoch in range(cfg.ga_epochs):
        total = 0.0
        for idx in batch_iter(forget_indices, cfg.batch_size_forget, cfg.seed, epoch=epoch):
            x, y = data.tensors(idx)
            loss = retain_ce_loss(model(x), y)
            _check_finite(loss, "gradient ascent")
            grads = compute_grads(model, loss)
            opt.step({k: -g for k, g in grads.items()})
            total += loss.item() * len(idx)
            report.steps += 1
        report.losses["ce"].append(total / len(forget_indices))
        report.epochs += 1
    model.eval()
    report.seconds = time.perf_counter() - t0
    return model, report


def random_wrong_labels(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Each label replaced by a uniformly drawn different class."""
    rng = np.random.default_rng([seed, 0x524C])
    shift = rng.integers(1, num_classes, size=len(labels))
    return (np.asarray(labels) + shift) % num_classes


def rl_baseline(model_original: Classifier, data: LabeledDataset, split: ForgetSplit, cfg: UnlearnConfig,
                policy: AugmentationPolicy | None = None) -> tuple[Classifier, PhaseReport]:
    """Fine-tune on the retain set plus the forget set under random wrong labels."""
    cfg.validate()
    labels = data.labels.copy()
    labels[split.forget_indices] = random_wrong_labels(labels[split.forget_indices], data.num_classes, cfg.seed)
    tcfg = TrainConfig(epochs=cfg.rl_epochs, lr=cfg.rl_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       batch_size=cfg.batch_size_retain, lr_schedule="constant", seed=cfg.seed)
    everything = np.arange(len(data), dtype=np.int64)
    model, report = train_classifier(clone_model(model_original), data, everything, tcfg, labels=labels, policy=policy)
    report.name = "rl"
    return model, report


def run_method(method: str, model_original: Classifier, split: ForgetSplit, data: LabeledDataset,
               cfg: UnlearnConfig, train_cfg: TrainConfig | None = None,
               policy: AugmentationPolicy | None = None) -> UnlearnResult:
    """Dispatch by method name; the returned ``rte_seconds`` covers the unlearning work only."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if method in VARIANTS:
        variant_cfg = UnlearnConfig(**{**asdict(cfg), "mask_mode": VARIANTS[method]})
        return wss_cl_unlearn(model_original, split, data, variant_cfg, policy)
    t0 = time.perf_counter()
    if method == "retrain":
        model, rep = retrain_gold(model_original.spec, data, split.retain_indices, train_cfg or TrainConfig(), policy)
    elif method == "ft":
        model, rep = ft_baseline(model_original, data, split.retain_indices, cfg, policy)
    elif method == "ga":
        model, rep = ga_baseline(model_original, data, split.forget_indices, cfg)
    else:
        model, rep = rl_baseline(model_original, data, split, cfg, policy)
    return UnlearnResult(model, {method: rep}, time.perf_counter() - t0)


def config_fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}

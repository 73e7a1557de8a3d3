"""Training objectives: KL-to-uniform forgetting, contrastive forgetting, retain cross-entropy."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError, UsageError


class _KLUniform(torch.autograd.Function):
    """Batch-mean KL to uniform with a hand-written backward.

    The gradient w.r.t. row ``z`` is ``p * (s - sum(p * s))`` with ``s = z - max(z)``,
    which is exactly zero for rows whose logits are all equal. Plain autograd
    through log_softmax leaves ~1e-18 residue there and nudges the weights.
    """

    @staticmethod
    def forward(ctx, logits):
        s = logits.double() - logits.double().amax(dim=1, keepdim=True)
        log_p = F.log_softmax(s, dim=1)
        p = log_p.exp()
        ctx.save_for_backward(p, s)
        kl = (p * (log_p + math.log(logits.shape[1]))).sum(dim=1).mean()
        return kl.to(logits.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        p, s = ctx.saved_tensors
        g = p * (s - (p * s).sum(dim=1, keepdim=True)) / p.shape[0]
        return (g * grad_out.double()).to(grad_out.dtype)


def kl_uniform_loss(logits: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(softmax(logits) || Uniform(K)), i.e. ln K - H(p)."""
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise InputError(f"logits must be B x K with K >= 2, got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    # float64 inside so that uniform rows give exactly 0
    return _KLUniform.apply(logits)


def contrastive_forget_loss(z: torch.Tensor, z_prime: torch.Tensor, z_retain: torch.Tensor,
                            tau: float = 1.4) -> torch.Tensor:
    """InfoNCE-style loss with one positive (the augmented view) and the retain batch as negatives.

    For each forget row ``i``::

        -log( e^{s(z_i, z'_i)/tau} / (e^{s(z_i, z'_i)/tau} + sum_r e^{s(z_i, z_r)/tau}) )

    with cosine similarity ``s``, averaged over the rows. Accepts single
    vectors as well as batches.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if z.dim() == 1:
        z, z_prime = z.unsqueeze(0), z_prime.unsqueeze(0)
    if z_retain.dim() == 1:
        z_retain = z_retain.unsqueeze(0)
    if z_retain.shape[0] == 0:
        raise UsageError("contrastive loss needs at least one negative")
    if z.shape != z_prime.shape or z.shape[1] != z_retain.shape[1]:
        raise InputError("embedding shapes disagree")
    z, z_prime, z_retain = (F.normalize(t, dim=1) for t in (z, z_prime, z_retain))
    pos = (z * z_prime).sum(dim=1, keepdim=True)
    neg = z @ z_retain.T
    logits = torch.cat([pos, neg], dim=1) / tau
    return -F.log_softmax(logits, dim=1)[:, 0].mean()


def retain_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean cross-entropy."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def per_sample_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long), reduction="none")

"""UA / RA / TA / MIA / Avg. Gap / RTE evaluation."""
from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ForgetSplit, LabeledDataset
from .errors import DataFormatError, UsageError
from .model import Classifier, forward_features

METRIC_KEYS = ("ua", "ra", "ta", "mia")
MIA_MEMBER_CAP = 10000


@torch.no_grad()
def predict(model: Classifier, data: LabeledDataset, indices=None, batch_size: int = 512):
    """Eval-mode logits for ``indices`` (default: all), plus the matching labels, as numpy."""
    if indices is None:
        indices = np.arange(len(data))
    indices = np.asarray(indices, dtype=np.int64)
    was_training = model.training
    model.eval()
    chunks = []
    for start in range(0, len(indices), batch_size):
        x, _ = data.tensors(indices[start:start + batch_size])
        chunks.append(model(x))
    model.train(was_training)
    k = model.spec.num_classes
    logits = torch.cat(chunks).numpy() if chunks else np.zeros((0, k), np.float32)
    return logits, data.labels[indices]


def _per_sample_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(logits).double()
    return F.cross_entropy(t, torch.from_numpy(labels), reduction="none").numpy()


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    # np.argmax picks the lowest index among ties
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy_pct(model: Classifier, data: LabeledDataset, indices=None) -> float:
    if indices is not None and len(indices) == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    return _accuracy(*predict(model, data, indices))


def ua(model: Classifier, data: LabeledDataset, forget_indices) -> float:
    return 100.0 - accuracy_pct(model, data, forget_indices)


def attack_threshold(member_losses, nonmember_losses) -> float:
    """Loss threshold maximizing balanced accuracy.

    A sample is called a member when ``loss <= threshold``. Candidates are the
    observed loss values; among equally good ones the smallest wins.
    """
    member = np.sort(np.asarray(member_losses, dtype=np.float64))
    nonmember = np.sort(np.asarray(nonmember_losses, dtype=np.float64))
    if len(member) == 0 or len(nonmember) == 0:
        raise UsageError("membership attack needs members and non-members")
    candidates = np.unique(np.concatenate([member, nonmember]))
    tpr = np.searchsorted(member, candidates, side="right") / len(member)
    tnr = 1.0 - np.searchsorted(nonmember, candidates, side="right") / len(nonmember)
    return float(candidates[np.argmax(tpr + tnr)])


def mia_from_losses(member_losses, nonmember_losses, target_losses) -> float:
    """Percentage of ``target_losses`` the threshold attacker judges to be non-members."""
    target = np.asarray(target_losses, dtype=np.float64)
    if len(target) == 0:
        raise UsageError("no target samples for the membership attack")
    t = attack_threshold(member_losses, nonmember_losses)
    return 100.0 * float(np.mean(target > t))


def mia_member_sample(retain_indices, test_size: int, seed: int) -> np.ndarray:
    n = min(test_size, MIA_MEMBER_CAP, len(retain_indices))
    rng = np.random.default_rng([seed, 0x4D4941])
    return np.sort(rng.choice(np.asarray(retain_indices), size=n, replace=False))


def mia_efficacy(model: Classifier, train: LabeledDataset, member_indices, test: LabeledDataset,
                 forget_indices) -> float:
    """Fraction (in %) of the forget set judged non-member by a loss-threshold attacker.

    The attacker is calibrated on ``member_indices`` (retain samples) against
    the whole test set.
    """
    if len(member_indices) == 0 or len(forget_indices) == 0:
        raise UsageError("membership attack needs non-empty member and forget sets")
    if np.intersect1d(member_indices, forget_indices).size:
        raise UsageError("member sample overlaps the forget set")
    member = _per_sample_loss(*predict(model, train, member_indices))
    nonmember = _per_sample_loss(*predict(model, test))
    target = _per_sample_loss(*predict(model, train, forget_indices))
    return mia_from_losses(member, nonmember, target)


@torch.no_grad()
def mean_cross_similarity(model: Classifier, data: LabeledDataset, a_indices, b_indices,
                          batch_size: int = 512) -> float:
    """Mean cosine similarity over all pairs (a, b); equals mean(z_a) . mean(z_b)."""
    was_training = model.training
    model.eval()
    means = []
    for idx in (np.asarray(a_indices), np.asarray(b_indices)):
        total = None
        for start in range(0, len(idx), batch_size):
            x, _ = data.tensors(idx[start:start + batch_size])
            s = forward_features(model, x).double().sum(0)
            total = s if total is None else total + s
        means.append(total / len(idx))
    model.train(was_training)
    return float(means[0] @ means[1])


def format_rte(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 60}:{s % 60:02d}"


def machine_fingerprint() -> str:
    import os
    return f"{platform.node()}/{platform.machine()}/{os.cpu_count()}cpu/torch-{torch.__version__}"


@dataclass
class MetricsReport:
    ua: float
    ra: float
    ta: float
    mia: float
    rte_seconds: float = 0.0
    method: str = ""
    dataset: str = ""
    split: dict = field(default_factory=dict)
    gaps: dict | None = None
    avg_gap: float | None = None
    machine: str | None = None

    def __post_init__(self):
        for key in METRIC_KEYS:
            v = getattr(self, key)
            if not (np.isfinite(v) and 0.0 <= v <= 100.0):
                raise UsageError(f"{key}={v} is not a percentage")
        if self.rte_seconds < 0:
            raise UsageError("rte_seconds must be >= 0")

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def with_reference(self, reference: "MetricsReport") -> "MetricsReport":
        self.gaps = {k: abs(getattr(self, k) - getattr(reference, k)) for k in METRIC_KEYS}
        self.avg_gap = mean_abs_gap(self.gaps.values())
        return self

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "dataset": self.dataset,
            "split": self.split,
            "ua": self.ua,
            "ra": self.ra,
            "ta": self.ta,
            "mia": self.mia,
            "rte_seconds": self.rte_seconds,
        }
        if self.gaps is not None:
            d["gaps"] = self.gaps
            d["avg_gap"] = self.avg_gap
        if self.machine is not None:
            d["machine"] = self.machine
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "MetricsReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataFormatError(f"cannot read report {path}: {exc}") from exc


def mean_abs_gap(gaps) -> float:
    gaps = [abs(float(g)) for g in gaps]
    if len(gaps) != 4:
        raise UsageError("Avg. Gap is defined over exactly four metric gaps")
    return sum(gaps) / 4.0


def avg_gap(report: MetricsReport, reference: MetricsReport) -> float:
    return mean_abs_gap(getattr(report, k) - getattr(reference, k) for k in METRIC_KEYS)


def evaluate_all(model: Classifier, train: LabeledDataset, split: ForgetSplit, test: LabeledDataset,
                 rte_seconds: float = 0.0, reference: MetricsReport | None = None, method: str = "",
                 mia_seed: int = 0) -> MetricsReport:
    """Full metric suite for one model; one forward pass over train and test each."""
    train_logits, train_labels = predict(model, train)
    test_logits, test_labels = predict(model, test)
    f, r = split.forget_indices, split.retain_indices
    if len(f) == 0:
        raise UsageError("forget set is empty")
    train_loss = _per_sample_loss(train_logits, train_labels)
    members = mia_member_sample(r, len(test), mia_seed)
    report = MetricsReport(
        ua=100.0 - _accuracy(train_logits[f], train_labels[f]),
        ra=_accuracy(train_logits[r], train_labels[r]),
        ta=_accuracy(test_logits, test_labels),
        mia=mia_from_losses(train_loss[members], _per_sample_loss(test_logits, test_labels), train_loss[f]),
        rte_seconds=float(rte_seconds),
        method=method,
        dataset=train.name,
        split=split.describe(),
        machine=machine_fingerprint(),
    )
    if reference is not None:
        report.with_reference(reference)
    return report


def per_class_accuracy(model: Classifier, train: LabeledDataset, split: ForgetSplit, test: LabeledDataset) -> dict:
    """UA on the forgotten class, RA on the rest of train, TA on test classes other than the forgotten one."""
    train_logits, train_labels = predict(model, train)
    test_logits, test_labels = predict(model, test)
    keep = test_labels != split.label
    return {
        "ua": 100.0 - _accuracy(train_logits[split.forget_indices], train_labels[split.forget_indices]),
        "ra": _accuracy(train_logits[split.retain_indices], train_labels[split.retain_indices]),
        "ta": _accuracy(test_logits[keep], test_labels[keep]),
    }

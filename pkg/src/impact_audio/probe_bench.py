"""Frozen-encoder evaluation: repeated stratified splits, a small probe
head, and per-class / per-machine F1 reporting.

Protocol per machine and repeat: 20% of each class trains a fresh
probe (embeddings stay frozen), the remaining 80% is scored. Per-class
F1 and the macro mean are aggregated as mean +- sample standard
deviation over the repeats; confusion counts are summed across repeats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ClassTooSmall, ConfigError, LengthMismatch
from .model import _trunc_normal_


@dataclass
class LabeledEmbeddingSet:
    embeddings: np.ndarray
    labels: list[str]
    machine: str
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ConfigError("embeddings must be an N x D matrix")
        if len(self.labels) != self.embeddings.shape[0]:
            raise ConfigError("label count must match embedding rows")
        if not self.class_names:
            self.class_names = sorted(set(self.labels))
        if len(set(self.class_names)) < 2:
            raise ConfigError("need at least two classes")
        missing = set(self.labels) - set(self.class_names)
        if missing:
            raise ConfigError(f"labels {sorted(missing)} not in class_names")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class ProbeConfig:
    hidden_units: int = 256
    learning_rate: float = 1e-3
    epochs: int = 200
    linear_only: bool = False
    seed: int = 0


@dataclass
class ProbeReport:
    machine: str
    class_names: list[str]
    n_repeats: int
    split_fraction: float
    per_class_f1: dict[str, tuple[float, float]]
    machine_f1: tuple[float, float]
    confusion: np.ndarray
    repeat_macro_f1: list[float]
    repeat_class_f1: dict[str, list[float]]


def stratified_split(
    labels: Sequence[str], train_fraction: float = 0.2, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class split indices: round(fraction * n) to train (min 1)."""
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError("train_fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise ClassTooSmall(f"class {cls!r} has {idx.size} sample(s); need >= 2")
        n_train = max(1, int(np.floor(train_fraction * idx.size + 0.5)))
        n_train = min(n_train, idx.size - 1)
        shuffled = rng.permutation(idx)
        train.append(shuffled[:n_train])
        test.append(shuffled[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


class ProbeHead(nn.Module):
    """Hidden-layer classifier trained on frozen embeddings."""

    def __init__(self, dim: int, n_classes: int, config: ProbeConfig):
        super().__init__()
        if config.linear_only:
            self.net = nn.Linear(dim, n_classes)
        else:
            self.net = nn.Sequential(
                nn.Linear(dim, config.hidden_units),
                nn.GELU(),
                nn.Linear(config.hidden_units, n_classes),
            )
        generator = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for module in self.net.modules():
                if isinstance(module, nn.Linear):
                    _trunc_normal_(module.weight, 0.02, generator)
                    module.bias.zero_()

    def forward(self, x):
        return self.net(x)


def train_probe(train_set: LabeledEmbeddingSet, config: ProbeConfig | None = None) -> ProbeHead:
    """Full-batch Adam on softmax cross-entropy; embeddings never change."""
    config = config or ProbeConfig()
    classes = train_set.class_names
    index = {c: i for i, c in enumerate(classes)}
    x = torch.from_numpy(train_set.embeddings).to(torch.float32)
    y = torch.tensor([index[label] for label in train_set.labels])

    head = ProbeHead(train_set.dim, len(classes), config)
    optimizer = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    head.train()
    for _ in range(config.epochs):
        optimizer.zero_grad()
        loss = loss_fn(head(x), y)
        loss.backward()
        optimizer.step()
    head.eval()
    return head


def predict(head: ProbeHead, embeddings: np.ndarray, class_names: list[str]) -> list[str]:
    x = torch.from_numpy(np.asarray(embeddings, dtype=np.float64)).to(torch.float32)
    with torch.no_grad():
        picks = head(x).argmax(dim=1).tolist()
    return [class_names[i] for i in picks]


# --- metrics -------------------------------------------------------------------

def f1_per_class(
    preds: Sequence[str], truth: Sequence[str], classes: Sequence[str]
) -> dict[str, float]:
    """F1 = 2TP / (2TP + FP + FN) per class, 0 when the denominator is 0."""
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truth)} labels")
    scores = {}
    for cls in classes:
        tp = sum(1 for p, t in zip(preds, truth) if p == cls and t == cls)
        fp = sum(1 for p, t in zip(preds, truth) if p == cls and t != cls)
        fn = sum(1 for p, t in zip(preds, truth) if p != cls and t == cls)
        denom = 2 * tp + fp + fn
        scores[cls] = 2 * tp / denom if denom else 0.0
    return scores


def macro_f1(preds, truth, classes) -> float:
    scores = f1_per_class(preds, truth, classes)
    return float(np.mean([scores[c] for c in classes]))


def confusion_matrix(preds, truth, classes) -> np.ndarray:
    """Rows = truth, columns = prediction."""
    if len(preds) != len(truth):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truth)} labels")
    index = {c: i for i, c in enumerate(classes)}
    out = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(preds, truth):
        out[index[t], index[p]] += 1
    return out


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size <= 1:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def run_benchmark(
    sets: Sequence[LabeledEmbeddingSet],
    n_repeats: int = 10,
    base_seed: int = 0,
    probe_config: ProbeConfig | None = None,
    train_fraction: float = 0.2,
) -> dict[str, ProbeReport]:
    """Repeated-split probe evaluation; one report per machine."""
    if n_repeats < 1:
        raise ConfigError("n_repeats must be >= 1")
    probe_config = probe_config or ProbeConfig()
    reports = {}
    for data in sets:
        classes = data.class_names
        labels = np.asarray(data.labels)
        repeat_macro = []
        repeat_class: dict[str, list[float]] = {c: [] for c in classes}
        confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for repeat in range(n_repeats):
            seed = base_seed + repeat
            train_idx, test_idx = stratified_split(data.labels, train_fraction, seed)
            train_set = LabeledEmbeddingSet(
                data.embeddings[train_idx],
                labels[train_idx].tolist(),
                data.machine,
                classes,
            )
            head = train_probe(
                train_set,
                ProbeConfig(
                    hidden_units=probe_config.hidden_units,
                    learning_rate=probe_config.learning_rate,
                    epochs=probe_config.epochs,
                    linear_only=probe_config.linear_only,
                    seed=seed,
                ),
            )
            preds = predict(head, data.embeddings[test_idx], classes)
            truth = labels[test_idx].tolist()
            scores = f1_per_class(preds, truth, classes)
            for c in classes:
                repeat_class[c].append(scores[c])
            repeat_macro.append(float(np.mean([scores[c] for c in classes])))
            confusion += confusion_matrix(preds, truth, classes)

        reports[data.machine] = ProbeReport(
            machine=data.machine,
            class_names=list(classes),
            n_repeats=n_repeats,
            split_fraction=train_fraction,
            per_class_f1={c: _mean_std(repeat_class[c]) for c in classes},
            machine_f1=_mean_std(repeat_macro),
            confusion=confusion,
            repeat_macro_f1=repeat_macro,
            repeat_class_f1=repeat_class,
        )
    return reports


# --- report output -----------------------------------------------------------------

def write_reports(reports: dict[str, ProbeReport], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["machine", "class", "f1_mean", "f1_std"])
        for report in reports.values():
            for cls in report.class_names:
                mean, std = report.per_class_f1[cls]
                writer.writerow([report.machine, cls, f"{mean:.6f}", f"{std:.6f}"])

    with open(out_dir / "machine_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["machine", "f1_mean", "f1_std", "n_repeats"])
        for report in reports.values():
            mean, std = report.machine_f1
            writer.writerow([report.machine, f"{mean:.6f}", f"{std:.6f}", report.n_repeats])

    for report in reports.values():
        path = out_dir / f"confusion_{report.machine}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["truth\\pred"] + report.class_names)
            for i, cls in enumerate(report.class_names):
                writer.writerow([cls] + [int(v) for v in report.confusion[i]])

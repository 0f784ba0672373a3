"""Reference video classifier and the real / synthetic / mixed training experiment."""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import batch_indices, check_finite
from .config import TrainConfig
from .data import LabeledVideoDataset, split_dataset
from .rng import derive_seed, seeded_init, torch_generator
from .video import clips_to_tensor

CONDITIONS = ("real_only", "synthetic_only", "real_plus_synthetic")


class VideoClassifier(nn.Module):
    """Three strided 3D convolutions, global average pool, linear head.

    Global pooling makes the network indifferent to clip length, so the same
    weights can also embed frame-difference clips.
    """

    kind = "classifier"

    def __init__(self, channels: int, width: int = 8):
        super().__init__()
        self.channels = channels
        self.width = width
        self.features = nn.Sequential(
            nn.Conv3d(channels, width, 3, stride=(1, 2, 2), padding=1), nn.SiLU(),
            nn.Conv3d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv3d(2 * width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Linear(2 * width, 2)

    @property
    def feature_dim(self) -> int:
        return 2 * self.width

    def config(self) -> dict:
        return {"channels": self.channels, "width": self.width}

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate features ``[N, feature_dim]``."""
        return self.features(x).mean(dim=(2, 3, 4))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)


def train_classifier(train: LabeledVideoDataset, config: TrainConfig,
                     rng: torch.Generator | None = None, *, width: int = 8) -> VideoClassifier:
    labels = train.labels
    if len(train) == 0 or len(set(labels.tolist())) < 2:
        raise ValueError("training set must contain both classes")
    channels = train.geometry[-1]
    with seeded_init(config.seed):
        model = VideoClassifier(channels, width)
    rng = rng if rng is not None else torch_generator(config.seed)
    x_all = clips_to_tensor(train.clips)
    y_all = torch.from_numpy(labels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    for step in range(config.steps):
        idx = batch_indices(len(x_all), config, rng)
        loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
        check_finite(loss, step, "classifier")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.lr > 0:
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def predict(model: VideoClassifier, dataset: LabeledVideoDataset, batch: int = 64) -> np.ndarray:
    x = clips_to_tensor(dataset.clips)
    return torch.cat([model(x[i:i + batch]).argmax(dim=1) for i in range(0, len(x), batch)]).numpy()


def f1_per_class(y_true, y_pred, cls: int) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    tp = int(np.sum((y_pred == cls) & (y_true == cls)))
    fp = int(np.sum((y_pred == cls) & (y_true != cls)))
    fn = int(np.sum((y_pred != cls) & (y_true == cls)))
    denom = 2 * tp + fp + fn
    # class absent from both truth and prediction counts as perfectly handled
    return 1.0 if denom == 0 else 2 * tp / denom


def accuracy_f1(y_true, y_pred) -> tuple[float, float]:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty test set")
    acc = float(np.mean(y_true == y_pred))
    return acc, (f1_per_class(y_true, y_pred, 0) + f1_per_class(y_true, y_pred, 1)) / 2


def evaluate_classifier(model: VideoClassifier, test: LabeledVideoDataset) -> tuple[float, float]:
    """Accuracy and macro-averaged F1 over the two classes."""
    if len(test) == 0:
        raise ValueError("empty test set")
    return accuracy_f1(test.labels, predict(model, test))


# -------------------------------------------------------------- experiment


@dataclass
class ExperimentReport:
    cells: list[dict] = field(default_factory=list)

    def median(self, condition: str, fraction: float, metric: str = "accuracy") -> float:
        vals = [c[metric] for c in self.cells
                if c["condition"] == condition and c["fraction"] == fraction and c["status"] == "ok"]
        return statistics.median(vals) if vals else float("nan")

    def summary(self) -> dict:
        fractions = sorted({c["fraction"] for c in self.cells}, reverse=True)
        out = {}
        for cond in CONDITIONS:
            out[cond] = {
                str(f): {"median_accuracy": self.median(cond, f, "accuracy"),
                         "median_f1": self.median(cond, f, "f1"),
                         "failed_cells": sum(1 for c in self.cells if c["condition"] == cond
                                             and c["fraction"] == f and c["status"] != "ok")}
                for f in fractions
            }
        return out


def _ids_digest(ids) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()[:16]


def augmentation_experiment(real: LabeledVideoDataset, synthetic: LabeledVideoDataset,
                            fractions, seeds, config: TrainConfig, *, width: int = 8) -> ExperimentReport:
    """Train on real / synthetic / real+synthetic for every (fraction, seed) cell.

    All three conditions of a cell are scored on the same held-out real split.
    A condition that raises is recorded with ``status="failed"``.
    """
    if len(synthetic) == 0:
        raise ValueError("synthetic dataset is empty")
    report = ExperimentReport()
    for fi, fraction in enumerate(fractions):
        for seed in seeds:
            train, test = split_dataset(real, fraction, seed)
            sources = {
                "real_only": train,
                "synthetic_only": synthetic,
                "real_plus_synthetic": train.concat(synthetic),
            }
            cfg = config.with_(seed=derive_seed(config.seed, seed, fi))
            test_digest = _ids_digest(test.ids)
            for condition in CONDITIONS:
                cell = {"condition": condition, "fraction": fraction, "seed": seed,
                        "n_train": len(sources[condition]), "n_test": len(test),
                        "test_ids": test_digest, "accuracy": float("nan"), "f1": float("nan"),
                        "status": "ok", "error": ""}
                try:
                    model = train_classifier(sources[condition], cfg, width=width)
                    cell["accuracy"], cell["f1"] = evaluate_classifier(model, test)
                except Exception as exc:  # noqa: BLE001 - a failed cell is data, not a crash
                    cell["status"] = "failed"
                    cell["error"] = f"{type(exc).__name__}: {exc}"
                report.cells.append(cell)
    return report

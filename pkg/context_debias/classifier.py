from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from context_debias.predictions import PredictionTable
from context_debias.errors import CheckpointFormatError, ConfigError, PreconditionError, TrainingFailure
from context_debias.scenegen import ImageSample, multi_hot, stack_pixels
from context_debias.seeding import derive_seed, torch_generator

LOGGER = logging.getLogger("context-debias")

CLASSIFIER_VERSION = 1


@dataclass(frozen=True)
class ClassifierConfig:
    mode: str = "multi_label"
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-4
    width: int = 32
    blocks: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in {"multi_label", "single_label"}:
            raise ConfigError(f"Unknown classifier mode={self.mode}")
        if self.lr_schedule not in {"cosine", "constant"}:
            raise ConfigError(f"Unknown lr_schedule={self.lr_schedule}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("Classifier epochs/batch_size/lr/weight_decay out of range")
        if not 1 <= self.blocks <= 4 or self.width < 4:
            raise ConfigError("Classifier needs 1-4 blocks and width >= 4")


class SmallConvNet(nn.Module):
    """Conv-BN-ReLU-pool blocks, global average pooling and a linear head."""

    def __init__(self, num_classes: int, width: int = 32, blocks: int = 3) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for i in range(blocks):
            c_out = width * 2**i
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.feature_dim = c_in
        self.head = nn.Linear(c_in, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def label_targets(samples: Sequence[ImageSample], categories: Sequence[str], mode: str) -> np.ndarray:
    """Multi-hot rows (multi_label) or class indices (single_label, exactly one known class per image)."""
    if mode == "multi_label":
        return multi_hot([s.labels for s in samples], categories)
    index = {c: i for i, c in enumerate(categories)}
    out = np.zeros(len(samples), dtype=np.int64)
    for row, s in enumerate(samples):
        present = sorted(label for label in s.labels if label in index)
        if len(present) != 1:
            raise PreconditionError(f"single_label image needs exactly one class id={s.id} labels={present}")
        out[row] = index[present[0]]
    return out


@dataclass(eq=False)
class TrainedClassifier:
    model: SmallConvNet
    categories: tuple[str, ...]
    config: ClassifierConfig
    loss_trace: list[float] = field(default_factory=list)

    def _batches(self, samples: Sequence[ImageSample], size: int = 256) -> list[torch.Tensor]:
        return [torch.from_numpy(stack_pixels(samples[i : i + size])) for i in range(0, len(samples), size)]

    def predict_proba(self, samples: Sequence[ImageSample]) -> np.ndarray:
        self.model.eval()
        outs: list[np.ndarray] = []
        with torch.no_grad():
            for x in self._batches(samples):
                logits = self.model(x)
                probs = torch.sigmoid(logits) if self.config.mode == "multi_label" else torch.softmax(logits, dim=1)
                outs.append(probs.double().numpy())
        if not outs:
            return np.zeros((0, len(self.categories)), dtype=np.float64)
        return np.concatenate(outs)

    def predict_table(self, samples: Sequence[ImageSample]) -> PredictionTable:
        return PredictionTable(tuple(s.id for s in samples), self.categories, self.predict_proba(samples))

    def features(self, samples: Sequence[ImageSample]) -> np.ndarray:
        self.model.eval()
        outs: list[np.ndarray] = []
        with torch.no_grad():
            for x in self._batches(samples):
                outs.append(self.model.features(x).double().numpy())
        if not outs:
            return np.zeros((0, self.model.feature_dim), dtype=np.float64)
        return np.concatenate(outs)


def train_classifier(
    train: Sequence[ImageSample],
    categories: Sequence[str],
    config: ClassifierConfig,
    *,
    eval_sets: dict[str, Sequence[ImageSample]] | None = None,
) -> tuple[TrainedClassifier, dict[str, PredictionTable]]:
    """Train from scratch on ``train`` and return prediction tables for each named eval set."""
    config.validate()
    if not train:
        raise PreconditionError("Classifier needs at least one training image")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "classifier-init"))
        model = SmallConvNet(len(categories), config.width, config.blocks)

    x_all = torch.from_numpy(stack_pixels(train))
    y_all = torch.from_numpy(label_targets(train, categories, config.mode))
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = max(1, steps_per_epoch * config.epochs)
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
        )
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: 1.0)
    gen = torch_generator(config.seed, "classifier-shuffle")

    trace: list[float] = []
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen)
        for start in range(0, len(train), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            logits = model(x_all[idx])
            if config.mode == "multi_label":
                loss = F.binary_cross_entropy_with_logits(logits, y_all[idx])
            else:
                loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingFailure(f"Classifier loss became non-finite epoch={epoch}", trace)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            trace.append(float(loss.detach()))
        last = trace[-1] if trace else float("nan")
        LOGGER.info("Classifier epoch complete epoch=%s loss=%.5f images=%s", epoch, last, len(train))

    trained = TrainedClassifier(model=model, categories=tuple(categories), config=config, loss_trace=trace)
    tables = {name: trained.predict_table(samples) for name, samples in (eval_sets or {}).items()}
    return trained, tables


def save_classifier(trained: TrainedClassifier, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CLASSIFIER_VERSION,
        "categories": list(trained.categories),
        "config": asdict(trained.config),
        "state_dict": {k: v.detach().clone() for k, v in trained.model.state_dict().items()},
        "loss_trace": torch.tensor(trained.loss_trace, dtype=torch.float64),
    }
    tmp = path.with_name(f"{path.name}.tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_classifier(path: Path) -> TrainedClassifier:
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointFormatError(f"Unreadable classifier path={path} error={type(exc).__name__}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format_version") != CLASSIFIER_VERSION:
        raise CheckpointFormatError(f"Unsupported classifier archive path={path}")
    config = ClassifierConfig(**raw["config"])
    model = SmallConvNet(len(raw["categories"]), config.width, config.blocks)
    model.load_state_dict(raw["state_dict"])
    model.eval()
    return TrainedClassifier(
        model=model,
        categories=tuple(str(c) for c in raw["categories"]),
        config=config,
        loss_trace=[float(x) for x in raw["loss_trace"].tolist()],
    )

"""GELU -> ReLU replacement with block-by-block knowledge distillation.

The student starts as a copy of the teacher.  Blocks are visited in
architectural order; each visit switches the MLP activation to ReLU, zeroes
and freezes the FC1 bias, then runs one distillation epoch against the
(unchanged) teacher.  One epoch per block, so N blocks give N epochs.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import ContractError, ParameterError
from .swin import Activation, SwinModel, model_forward_var, predict

log_columns = ("epoch", "block", "mean_kd_loss", "eval_acc", "seconds")


@dataclass
class DistillConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 32
    kd_temperature: float = 1.0
    data_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.kd_temperature <= 0:
            raise ParameterError("learning_rate, batch_size and kd_temperature must be positive")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ParameterError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    block: str
    mean_kd_loss: float
    eval_acc: float
    seconds: float


@dataclass
class DistillLog:
    epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        lines = [",".join(log_columns)]
        for r in self.epochs:
            lines.append(f"{r.epoch},{r.block},{r.mean_kd_loss:.8g},{r.eval_acc:.6f},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"


def eval_accuracy(model, dataset: Dataset, batch_size: int = 128) -> float:
    """Top-1 accuracy; ``model`` is a float SwinModel or anything with ``predict(images)``."""
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    num_classes = model.config.num_classes
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    if isinstance(model, SwinModel):
        logits = predict(model, dataset.images, batch_size)
    else:
        logits = model.predict(dataset.images, batch_size)
    return accuracy_from_logits(logits, labels)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_teacher(
    model: SwinModel,
    train: Dataset,
    epochs: int = 10,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
    log=None,
) -> SwinModel:
    """Hard-label cross-entropy training in place; returns the model."""
    rng = np.random.default_rng(seed)
    opt = ad.SGD(learning_rate, momentum)
    params = model.parameters()
    for epoch in range(epochs):
        losses = []
        for images, labels in train.batches(batch_size, rng.permutation(len(train))):
            loss = ad.forward_backward(params, lambda: ad.cross_entropy(model_forward_var(model, images), labels))
            opt.step(params)
            losses.append(loss)
        if log:
            log(f"teacher epoch {epoch + 1}/{epochs}: loss {np.mean(losses):.4f}")
    return model


def kd_epoch(
    student: SwinModel,
    teacher: SwinModel,
    dataset: Dataset,
    cfg: DistillConfig,
    optimizer: ad.SGD,
    rng: np.random.Generator,
) -> float:
    """One pass over ``dataset`` matching the teacher's soft labels; returns mean KD loss."""
    params = student.parameters()
    losses = []
    for images, _ in dataset.batches(cfg.batch_size, rng.permutation(len(dataset))):
        teacher_logits = model_forward_var(teacher, images).value
        loss = ad.forward_backward(
            params,
            lambda: ad.kd_loss(model_forward_var(student, images), teacher_logits, cfg.kd_temperature),
        )
        optimizer.step(params)
        losses.append(loss)
    return float(np.mean(losses))


def swap_block_to_relu(student: SwinModel, prefix: str):
    student.activations[prefix] = Activation.RELU
    bias = student.params[f"{prefix}.fc1.bias"]
    bias.value = np.zeros_like(bias.value)
    bias.zero_grad()
    bias.trainable = False


def naive_swap(teacher: SwinModel) -> SwinModel:
    """All blocks to ReLU with zeroed FC1 bias, no distillation (the ablation)."""
    student = teacher.clone()
    for prefix in student.block_prefixes():
        swap_block_to_relu(student, prefix)
    return student


def gelu_replace_distill(
    teacher: SwinModel,
    dataset: Dataset,
    cfg: Optional[DistillConfig] = None,
    eval_set: Optional[Dataset] = None,
    log=None,
) -> tuple[SwinModel, DistillLog]:
    cfg = cfg or DistillConfig()
    if len(dataset) == 0:
        raise ParameterError("distillation dataset is empty")
    not_gelu = [p for p, a in teacher.activations.items() if a != Activation.GELU]
    if not_gelu:
        raise ContractError(f"teacher must be all-GELU; blocks already ReLU: {', '.join(sorted(not_gelu))}")

    rng = np.random.default_rng(cfg.seed)
    n_used = max(1, int(round(cfg.data_fraction * len(dataset))))
    subset = dataset.subset(np.sort(rng.choice(len(dataset), size=n_used, replace=False)))

    student = teacher.clone()
    optimizer = ad.SGD(cfg.learning_rate, cfg.momentum)
    history = DistillLog()
    for epoch, prefix in enumerate(student.block_prefixes(), start=1):
        start = time.perf_counter()
        swap_block_to_relu(student, prefix)
        loss = kd_epoch(student, teacher, subset, cfg, optimizer, rng)
        acc = eval_accuracy(student, eval_set) if eval_set is not None else float("nan")
        record = EpochRecord(epoch, prefix, loss, acc, time.perf_counter() - start)
        history.epochs.append(record)
        if log:
            log(f"kd epoch {epoch}: block {prefix} loss {loss:.5f} eval_acc {acc:.4f}")
    return student, history

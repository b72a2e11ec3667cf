"""Supervised training: extractor pretraining and head-only fine-tuning.

Fine-tuning freezes the extractor, so features are computed once and the
head is trained as a linear model on them. Shuffling draws from the seeded
stream, making every loop bit-reproducible for a fixed config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng, tensor as T
from .datasets import Dataset
from .errors import ConfigError, ContractError, NumericOverflowError, TrainingError
from .layers import DownstreamHead, FeatureExtractor, build_head
from .tensor import Tensor


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.1
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    momentum: float = 0.9  # sgd only

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(params: list[Tensor], cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                   weight_decay=cfg.weight_decay)
    return Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _batches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_extractor(model: FeatureExtractor, data: Dataset, cfg: TrainConfig,
                       head: DownstreamHead | None = None) -> FeatureExtractor:
    """Train extractor + classification head end to end; BN in batch-stats mode.

    The head is temporary scaffolding (pass one in to keep it). The caller
    is responsible for keeping this dataset disjoint from any fine-tuning set.
    """
    if model.frozen:
        raise ContractError("cannot pretrain a frozen extractor")
    if len(data) == 0:
        raise ConfigError("pretraining dataset is empty")
    if head is None:
        head = build_head(data.classes, seed=cfg.seed)
    images = data.images()
    labels = data.labels()
    params = [p for _, p in model.parameters()] + [p for _, p in head.parameters()]
    opt = make_optimizer(params, cfg)

    first_batch_loss = None
    final_epoch_loss = None
    for epoch in range(cfg.epochs):
        gen = rng.stream(cfg.seed, "pretrain-shuffle", epoch)
        losses = []
        for idx in _batches(len(data), cfg.batch_size, gen):
            opt.zero_grad()
            try:
                feats = model.forward(Tensor(images[idx]), train=True)
                logits = head.forward(feats)
                loss = T.softmax_cross_entropy(logits, labels[idx])
                T.backward(loss)
            except NumericOverflowError as exc:
                raise TrainingError(f"pretraining diverged: {exc}", epoch=epoch) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("pretraining diverged: non-finite loss", epoch=epoch)
            if first_batch_loss is None:
                first_batch_loss = value
            losses.append(value)
            opt.step()
        final_epoch_loss = float(np.mean(losses))
    if final_epoch_loss >= first_batch_loss:
        raise TrainingError(
            f"pretraining did not improve: {first_batch_loss:.4f} -> {final_epoch_loss:.4f}",
            epoch=cfg.epochs - 1)
    return model


def features_of(model: FeatureExtractor, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-mode feature matrix, computed in chunks."""
    rows = []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            rows.append(model.forward(Tensor(images[start:start + chunk])).data)
    return np.concatenate(rows) if rows else np.zeros((0, model.feature_width))


def transfer_finetune(model: FeatureExtractor, head: DownstreamHead, data: Dataset,
                      cfg: TrainConfig) -> DownstreamHead:
    """Train only the head on frozen-extractor features."""
    if not model.frozen:
        raise ContractError("transfer_finetune requires a frozen extractor")
    if len(data) == 0:
        raise ConfigError("fine-tuning dataset is empty")
    feats = features_of(model, data.images())
    labels = data.labels()
    params = [p for _, p in head.parameters()]
    opt = make_optimizer(params, cfg)
    for epoch in range(cfg.epochs):
        gen = rng.stream(cfg.seed, "finetune-shuffle", epoch)
        for idx in _batches(len(data), cfg.batch_size, gen):
            opt.zero_grad()
            try:
                logits = head.forward(Tensor(feats[idx]))
                loss = T.softmax_cross_entropy(logits, labels[idx])
                T.backward(loss)
            except NumericOverflowError as exc:
                raise TrainingError(f"fine-tuning diverged: {exc}", epoch=epoch) from exc
            opt.step()
    return head


def evaluate_accuracy(model: FeatureExtractor, head: DownstreamHead, data: Dataset) -> float:
    """Fraction of points whose argmax logit matches the dataset label."""
    if len(data) == 0:
        return 0.0
    feats = features_of(model, data.images())
    with T.no_grad():
        logits = head.forward(Tensor(feats)).data
    return float((logits.argmax(axis=1) == data.labels()).mean())


def predict_label(model: FeatureExtractor, head: DownstreamHead, image: np.ndarray) -> int:
    feats = features_of(model, image[None] if image.ndim == 3 else image)
    with T.no_grad():
        logits = head.forward(Tensor(feats)).data
    return int(logits.argmax(axis=1)[0])

"""FixMatch-style consistency training with pluggable threshold schedules.

Per step: weakly augment an unlabeled batch, predict with the current
student weights under no-grad, accept the rows whose max softmax
probability clears the active threshold, then train on cross-entropy of
the labeled batch plus (for accepted rows only) cross-entropy of strongly
augmented views against their pseudo-labels. The unsupervised term is
averaged over the full unlabeled batch, so rejected rows contribute zeros
and the loss magnitude stays comparable across schedules.

Rejected rows receive exactly zero gradient, so the strong branch only
ever runs the accepted subset; both branches share one forward pass with
per-row loss weights. Evaluation uses EMA weights; pseudo-labeling uses
the student. Every random choice comes from a named stream under the run
seed, which is what makes `lambda_u=0` bit-identical to supervised-only
training and repeated runs byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .augment import DEFAULT_SPEC, AugmentationSpec, strong_augment, weak_augment
from .datagen import DatasetBundle, check_disjoint
from .errors import ConfigError
from .models import ClassifierConfig, classifier_forward, init_classifier
from .optim import EmaParams, init_sgd, sgd_step
from .rng import stream
from .schedulers import (
    AdaptiveAscent,
    IterationClock,
    ThresholdSchedule,
    adaptive_update,
    threshold_at,
)
from .tensor import Tensor, backward

METRICS_HEADER = ("iter", "loss_sup", "loss_unsup", "mask_rate", "threshold", "test_accuracy")

# stream ids under the run seed
_S_INIT, _S_LABELED, _S_UNLABELED, _S_AUG_LABELED, _S_AUG_WEAK, _S_AUG_STRONG = range(6)


@dataclass(frozen=True)
class TrainConfig:
    labeled_batch: int = 8
    mu: int = 4
    lambda_u: float = 1.0
    iterations: int = 5000
    learning_rate: float = 0.03
    momentum: float = 0.9
    ema_decay: float = 0.999
    seed: int = 1
    eval_every: int = 250

    def __post_init__(self):
        if self.labeled_batch < 1 or self.mu < 1:
            raise ValueError("labeled_batch and mu must be positive")
        if self.lambda_u < 0:
            raise ValueError(f"lambda_u must be nonnegative, got {self.lambda_u}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")

    @property
    def unlabeled_batch(self) -> int:
        return self.labeled_batch * self.mu

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class PseudoLabelDecision:
    max_prob: float
    argmax_class: int
    accepted: bool
    threshold_used: float


@dataclass
class RunRecord:
    iter: int
    loss_sup: float
    loss_unsup: float
    mask_rate: float
    threshold: float
    test_accuracy: float


def pseudo_label(probs, threshold: float) -> PseudoLabelDecision:
    """Gate one probability vector; ties break to the lowest class index."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size < 2 or p.min() < -1e-9 or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"malformed probability vector (sum={p.sum():.8f})")
    cls = int(np.argmax(p))
    mx = float(p[cls])
    return PseudoLabelDecision(
        max_prob=mx,
        argmax_class=cls,
        accepted=bool(mx >= threshold),
        threshold_used=float(threshold),
    )


def consistency_loss(weak_probs, strong_logits: Tensor, threshold: float):
    """Masked cross-entropy against pseudo-labels, averaged over the full batch.

    Returns (loss Tensor, mask_rate). `weak_probs` must come from a
    no-gradient evaluation; only its argmax and max enter the computation.
    """
    probs = np.asarray(weak_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"weak_probs must be a nonempty B x C array, got {probs.shape}")
    if strong_logits.shape != probs.shape:
        raise ValueError(
            f"strong logits shape {strong_logits.shape} != weak probs {probs.shape}"
        )
    bu = probs.shape[0]
    pseudo = probs.argmax(axis=1)
    accepted = probs.max(axis=1) >= threshold
    loss = T.softmax_cross_entropy(
        strong_logits, pseudo, weights=accepted.astype(np.float64), divisor=float(bu)
    )
    return loss, float(accepted.mean())


def evaluate(params: dict, config: ClassifierConfig, images, labels, batch: int = 200) -> float:
    """Accuracy of argmax predictions, no augmentation, no gradient."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("evaluate needs a nonempty test set")
    correct = 0
    with T.no_grad():
        for start in range(0, len(images), batch):
            chunk = images[start : start + batch]
            logits = classifier_forward(params, Tensor(chunk), config)
            correct += int((logits.data.argmax(axis=1) == labels[start : start + batch]).sum())
    return correct / len(images)


@dataclass
class StepStats:
    loss_sup: float
    loss_unsup: float
    mask_rate: float
    threshold: float


class SslTrainer:
    """Owns parameters, optimizer state, EMA weights and the RNG streams."""

    def __init__(
        self,
        config: TrainConfig,
        classifier_config: ClassifierConfig,
        bundle: DatasetBundle,
        schedule: ThresholdSchedule,
        augment_spec: AugmentationSpec = DEFAULT_SPEC,
    ):
        check_disjoint(bundle)
        if len(bundle.labeled_images) == 0 or len(bundle.unlabeled_images) == 0:
            raise ConfigError("labeled and unlabeled pools must be nonempty")
        self.config = config
        self.classifier_config = classifier_config
        self.bundle = bundle
        self.schedule = schedule
        self.augment_spec = augment_spec
        self.params = init_classifier(classifier_config, stream(config.seed, _S_INIT))
        self.opt = init_sgd(self.params, config.learning_rate, config.momentum)
        self.ema = EmaParams(self.params, config.ema_decay)
        self.iteration = 0
        self._rng_labeled = stream(config.seed, _S_LABELED)
        self._rng_unlabeled = stream(config.seed, _S_UNLABELED)
        self._rng_aug_labeled = stream(config.seed, _S_AUG_LABELED)
        self._rng_aug_weak = stream(config.seed, _S_AUG_WEAK)
        self._rng_aug_strong = stream(config.seed, _S_AUG_STRONG)

    def _active_threshold(self, weak_max_probs: Optional[np.ndarray]) -> float:
        if isinstance(self.schedule, AdaptiveAscent):
            if weak_max_probs is None:
                return self.schedule.tau
            return adaptive_update(self.schedule, weak_max_probs)
        clock = IterationClock(i=self.iteration, i_max=max(self.config.iterations, 1))
        return threshold_at(self.schedule, clock)

    def sample_batches(self):
        """Draw one labeled and one unlabeled batch (uniform, with replacement)."""
        cfg = self.config
        li = self._rng_labeled.integers(0, len(self.bundle.labeled_images), size=cfg.labeled_batch)
        ui = self._rng_unlabeled.integers(
            0, len(self.bundle.unlabeled_images), size=cfg.unlabeled_batch
        )
        return (
            self.bundle.labeled_images[li],
            self.bundle.labeled_labels[li],
            self.bundle.unlabeled_images[ui],
        )

    def step(self, x_labeled, y_labeled, x_unlabeled) -> StepStats:
        """One optimizer update; returns the step's metric fields."""
        cfg = self.config
        bl = len(x_labeled)
        x_l = weak_augment(x_labeled, self._rng_aug_labeled, self.augment_spec)

        if cfg.lambda_u > 0:
            bu = len(x_unlabeled)
            if bu == 0:
                raise ConfigError("unlabeled batch is empty")
            u_weak = weak_augment(x_unlabeled, self._rng_aug_weak, self.augment_spec)
            with T.no_grad():
                weak_logits = classifier_forward(
                    self.params, Tensor(u_weak), self.classifier_config
                )
            weak_probs = T.softmax(weak_logits.data)
            max_probs = weak_probs.max(axis=1)
            pseudo = weak_probs.argmax(axis=1)
            threshold = self._active_threshold(max_probs)
            accepted = max_probs >= threshold
            mask_rate = float(accepted.mean())
            acc_idx = np.flatnonzero(accepted)
        else:
            threshold = self._active_threshold(None)
            mask_rate = 0.0
            acc_idx = np.empty(0, dtype=np.int64)

        if acc_idx.size:
            u_strong = strong_augment(
                x_unlabeled[acc_idx], self._rng_aug_strong, self.augment_spec
            )
            inputs = np.concatenate([x_l, u_strong])
            targets = np.concatenate([y_labeled, pseudo[acc_idx]])
            weights = np.concatenate(
                [np.full(bl, 1.0 / bl), np.full(acc_idx.size, cfg.lambda_u / bu)]
            )
        else:
            inputs = x_l
            targets = np.asarray(y_labeled)
            weights = np.full(bl, 1.0 / bl)

        logits = classifier_forward(self.params, Tensor(inputs), self.classifier_config)
        loss = T.softmax_cross_entropy(logits, targets, weights=weights, divisor=1.0)
        backward(loss)
        sgd_step(self.params, self.opt)
        self.ema.update(self.params)
        self.iteration += 1

        per_row = T.per_row_cross_entropy(logits.data, targets)
        loss_sup = float(per_row[:bl].mean())
        loss_unsup = float(per_row[bl:].sum() / bu) if acc_idx.size else 0.0
        return StepStats(
            loss_sup=loss_sup,
            loss_unsup=loss_unsup,
            mask_rate=mask_rate,
            threshold=float(threshold),
        )

    def evaluate_ema(self) -> float:
        return evaluate(
            self.ema.as_tensors(),
            self.classifier_config,
            self.bundle.test_images,
            self.bundle.test_labels,
        )


def train_step(trainer: SslTrainer) -> StepStats:
    """Sample batches and advance the trainer by one iteration."""
    x_l, y_l, x_u = trainer.sample_batches()
    return trainer.step(x_l, y_l, x_u)


def train_run(
    config: TrainConfig,
    bundle: DatasetBundle,
    schedule: ThresholdSchedule,
    classifier_config: Optional[ClassifierConfig] = None,
    augment_spec: AugmentationSpec = DEFAULT_SPEC,
) -> tuple:
    """Run `config.iterations` steps, evaluating every `eval_every`.

    Returns (records, trainer); records hold one row per evaluation point.
    """
    if classifier_config is None:
        classifier_config = ClassifierConfig()
    trainer = SslTrainer(config, classifier_config, bundle, schedule, augment_spec)
    records = []
    for _ in range(config.iterations):
        stats = train_step(trainer)
        if trainer.iteration % config.eval_every == 0 or trainer.iteration == config.iterations:
            records.append(
                RunRecord(
                    iter=trainer.iteration,
                    loss_sup=stats.loss_sup,
                    loss_unsup=stats.loss_unsup,
                    mask_rate=stats.mask_rate,
                    threshold=stats.threshold,
                    test_accuracy=trainer.evaluate_ema(),
                )
            )
    return records, trainer


def write_metrics_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.iter,
                    repr(float(r.loss_sup)),
                    repr(float(r.loss_unsup)),
                    repr(float(r.mask_rate)),
                    repr(float(r.threshold)),
                    repr(float(r.test_accuracy)),
                ]
            )


def read_metrics_csv(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                RunRecord(
                    iter=int(row["iter"]),
                    loss_sup=float(row["loss_sup"]),
                    loss_unsup=float(row["loss_unsup"]),
                    mask_rate=float(row["mask_rate"]),
                    threshold=float(row["threshold"]),
                    test_accuracy=float(row["test_accuracy"]),
                )
            )
    return records

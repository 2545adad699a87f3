"""Training: patch-and-global MSE loss, cosine schedule, Adam, split hygiene.

Scores are min-max scaled to [0, 1] over each training fold; predictions are
inverse-scaled when reporting errors in raw units. Splits are built at the
content level so no distorted version of a test content ever appears in
training. Whole runs are reproducible bit-for-bit from (seed, data, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from pstpcqa import autodiff as ad
from pstpcqa.autodiff import Tensor
from pstpcqa.network import ModelConfig, ModelWeights, PredictionBundle, forward, init_weights
from pstpcqa.patching import PatchConfig, PatchSet, extract_patches
from pstpcqa.pointcloud import LabeledSample


class MissingGradient(ValueError):
    """An optimizer step was requested before gradients were populated."""


class EmptyContent(ValueError):
    """Split generation needs at least two distinct, nonempty content ids."""


@dataclass(frozen=True)
class LossConfig:
    """Weights of the patch-wise and global squared-error terms."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    """Cosine-annealed learning rate and epoch/batch layout."""

    eta_max: float = 0.001
    eta_min: float = 0.0
    t_max: int = 400
    epochs: int = 400
    batch_size: int = 4

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")
        if self.t_max < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("t_max, epochs, and batch_size must be positive")


@dataclass(frozen=True)
class SplitPlan:
    """Train/test sample indices for one fold; contents never straddle."""

    train: tuple
    test: tuple
    fold_index: int = 0


def loss(bundle: PredictionBundle, y: float, cfg: LossConfig) -> Tensor:
    """alpha * mean_k((score_k - y)^2) + beta * (global - y)^2."""
    patch_term = ad.mean_all(ad.square(bundle.scores_t - float(y)))
    global_term = ad.square(bundle.global_t - float(y))
    return cfg.alpha * patch_term + cfg.beta * global_term


def cosine_lr(step: int, cfg: ScheduleConfig) -> float:
    """Annealed rate at an epoch index; clamps to eta_min past t_max."""
    t = min(max(step, 0), cfg.t_max)
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + math.cos(math.pi * t / cfg.t_max))


class AdamState:
    """First/second moment accumulators keyed like the parameter store."""

    def __init__(self, weights: ModelWeights, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in weights.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in weights.params.items()}


def adam_step(weights: ModelWeights, state: AdamState, lr: float) -> None:
    """One Adam update in place from the accumulated gradients."""
    for name, p in weights.params.items():
        if p.grad is None:
            raise MissingGradient(f"parameter {name} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in weights.params.items():
        g = p.grad
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def make_splits(samples: Sequence[LabeledSample], scheme: str = "leave-one-content-out",
                seed: int = 0, train_contents: Optional[Sequence[str]] = None,
                test_contents: Optional[Sequence[str]] = None) -> list[SplitPlan]:
    """Build leakage-free folds over sample indices.

    "leave-one-content-out" emits one fold per distinct content id, testing
    on every distorted version of that content. "fixed" consumes explicit
    train/test content lists.
    """
    contents = sorted({s.content_id for s in samples})
    by_content = {c: [i for i, s in enumerate(samples) if s.content_id == c] for c in contents}

    if scheme == "leave-one-content-out":
        if len(contents) < 2:
            raise EmptyContent("need at least two distinct contents to form folds")
        plans = []
        for fold, held_out in enumerate(contents):
            test = tuple(by_content[held_out])
            train = tuple(i for c in contents if c != held_out for i in by_content[c])
            plans.append(SplitPlan(train=train, test=test, fold_index=fold))
        return plans

    if scheme == "fixed":
        if not train_contents or not test_contents:
            raise EmptyContent("fixed scheme requires explicit train and test content lists")
        overlap = set(train_contents) & set(test_contents)
        if overlap:
            raise EmptyContent(f"contents appear on both sides of the split: {sorted(overlap)}")
        train = tuple(i for c in train_contents for i in by_content.get(c, []))
        test = tuple(i for c in test_contents for i in by_content.get(c, []))
        if not train or not test:
            raise EmptyContent("fixed split selects no samples on one side")
        return [SplitPlan(train=train, test=test, fold_index=0)]

    raise ValueError(f"unknown split scheme {scheme!r}")


def check_no_leakage(plan: SplitPlan, samples: Sequence[LabeledSample]) -> None:
    train_contents = {samples[i].content_id for i in plan.train}
    test_contents = {samples[i].content_id for i in plan.test}
    shared = train_contents & test_contents
    if shared:
        raise EmptyContent(f"split leaks contents across train/test: {sorted(shared)}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float


@dataclass
class FitResult:
    """Trained weights plus the per-epoch log and the fold's score scaling."""

    weights: ModelWeights
    log: list = field(default_factory=list)
    mos_min: float = 0.0
    mos_max: float = 1.0

    def rescale(self, scaled):
        """Inverse of the fold's min-max transform, back to raw score units."""
        return np.asarray(scaled) * (self.mos_max - self.mos_min) + self.mos_min


def fit(samples: Sequence[LabeledSample], config: ModelConfig, loss_cfg: LossConfig,
        sched_cfg: ScheduleConfig, split: SplitPlan, seed: int = 0,
        patch_sets: Optional[dict] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> FitResult:
    """Optimize weights on the training side of one split.

    Patch extraction runs once per training sample up front (pass
    `patch_sets` keyed by sample index to reuse cached extractions). Labels
    are min-max scaled to [0, 1] over the fold; each batch averages the
    per-sample losses, backpropagates once, and takes one Adam step with the
    per-epoch cosine rate.
    """
    if not split.train:
        raise EmptyContent("training split is empty")
    check_no_leakage(split, samples)

    if patch_sets is None:
        patch_sets = {}
    for i in split.train:
        if i not in patch_sets:
            patch_sets[i] = extract_patches(
                samples[i].cloud, PatchConfig(config.K, config.Np, config.seed))

    train_mos = np.array([samples[i].mos for i in split.train], dtype=np.float64)
    mos_min = float(train_mos.min())
    mos_max = float(train_mos.max())
    span = mos_max - mos_min if mos_max > mos_min else 1.0
    targets = {i: (samples[i].mos - mos_min) / span for i in split.train}

    weights = init_weights(config, seed=seed)
    adam = AdamState(weights)
    order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, 0x5EED]
    )))

    log: list[EpochRecord] = []
    train_idx = np.array(split.train, dtype=np.int64)
    for epoch in range(sched_cfg.epochs):
        lr = cosine_lr(epoch, sched_cfg)
        order = order_rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(train_idx), sched_cfg.batch_size):
            batch = train_idx[order[start:start + sched_cfg.batch_size]]
            weights.zero_grads()
            batch_loss = None
            for i in batch:
                bundle = forward(patch_sets[int(i)], config, weights, mode="train")
                sample_loss = loss(bundle, targets[int(i)], loss_cfg)
                batch_loss = sample_loss if batch_loss is None else batch_loss + sample_loss
            batch_loss = (1.0 / len(batch)) * batch_loss
            ad.backward(batch_loss)
            adam_step(weights, adam, lr)
            epoch_losses.append(float(batch_loss.data))
        record = EpochRecord(epoch=epoch, lr=lr, train_loss=float(np.mean(epoch_losses)))
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)

    return FitResult(weights=weights, log=log, mos_min=mos_min, mos_max=mos_max)


def predict(samples: Sequence[LabeledSample], indices: Sequence[int], config: ModelConfig,
            result: FitResult, patch_sets: Optional[dict] = None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions (raw units) and truths for the given samples."""
    if patch_sets is None:
        patch_sets = {}
    preds, truths = [], []
    for i in indices:
        if i not in patch_sets:
            patch_sets[i] = extract_patches(
                samples[i].cloud, PatchConfig(config.K, config.Np, config.seed))
        bundle = forward(patch_sets[i], config, result.weights, mode="eval")
        preds.append(float(result.rescale(bundle.global_score)))
        truths.append(samples[i].mos)
    return np.array(preds), np.array(truths)

"""Shared attack types: configuration, result batches, invariant checks.

All attacks operate on NHWC float images in [0,1] with an l-infinity
budget. Per-image randomness always comes from a Philox stream keyed by
(seed, image index), so results do not depend on how a batch is split
across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ATTACK_KINDS = ("APGD_CE", "APGD_T", "FAB_T", "SQUARE")

BOUND_SLACK = 1e-6


class AttackError(RuntimeError):
    pass


class BoundViolationError(AttackError):
    """An adversarial example left the epsilon ball or [0,1]."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    n_iter: int = 100
    n_restarts: int = 1
    n_target_classes: int = 9
    seed: int = 0
    attack_kind: str = "APGD_CE"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0,1]")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.attack_kind!r}")


@dataclass
class AdversarialBatch:
    """Originals, adversarials and bookkeeping for one attack run."""

    attack_kind: str
    originals: np.ndarray     # (N,32,32,3) float32 in [0,1]
    adversarials: np.ndarray  # same shape, within the epsilon ball
    labels: np.ndarray        # (N,) true classes
    success: np.ndarray       # (N,) bool, source model fooled
    final_loss: np.ndarray    # (N,) attack objective at the returned point
    epsilon: float
    audit: dict = field(default_factory=dict)  # instrumentation counters

    def __len__(self):
        return len(self.labels)


def per_image_rng(seed: int, index: int) -> np.random.Generator:
    """Philox stream keyed by (seed, image index)."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, index]))


def project_linf(x_adv: np.ndarray, x_orig: np.ndarray, eps: float) -> np.ndarray:
    """Clamp into the intersection of B_inf(x_orig, eps) and [0,1]."""
    return np.clip(np.clip(x_adv, x_orig - eps, x_orig + eps), 0.0, 1.0)


def check_bounds(batch: AdversarialBatch):
    """Hard assertion: epsilon bound and box constraint on every AE."""
    delta = np.abs(batch.adversarials - batch.originals).reshape(len(batch), -1).max(axis=1)
    if np.any(delta > batch.epsilon + BOUND_SLACK):
        raise BoundViolationError(
            f"{batch.attack_kind}: max |delta| {delta.max():.6f} > eps {batch.epsilon:.6f}")
    if batch.adversarials.min() < 0.0 or batch.adversarials.max() > 1.0:
        raise BoundViolationError(f"{batch.attack_kind}: adversarials leave [0,1]")


def margin(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """z_y - max_{i != y} z_i (negative means misclassified)."""
    n = len(labels)
    rows = np.arange(n)
    z_y = logits[rows, labels]
    masked = logits.copy()
    masked[rows, labels] = -np.inf
    return z_y - masked.max(axis=1)

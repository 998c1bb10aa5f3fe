"""l-infinity adversarial attacks: APGD-ce, APGD-t, FAB-t, Square."""

from .apgd import apgd
from .common import (
    ATTACK_KINDS,
    AdversarialBatch,
    AttackConfig,
    AttackError,
    BoundViolationError,
    check_bounds,
    margin,
    per_image_rng,
    project_linf,
)
from .fab import fab_t, projection_linf
from .square import square_attack
from .suite import SuiteResult, default_configs, load_batch, run_attack_suite, save_batch

__all__ = [
    "ATTACK_KINDS", "AdversarialBatch", "AttackConfig", "AttackError",
    "BoundViolationError", "SuiteResult", "apgd", "check_bounds",
    "default_configs", "fab_t", "load_batch", "margin", "per_image_rng",
    "project_linf", "projection_linf", "run_attack_suite", "save_batch",
    "square_attack",
]

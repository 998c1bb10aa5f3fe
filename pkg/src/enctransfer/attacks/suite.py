"""Run the four attacks against one source model; persist the results.

The suite shares one image slice across attacks. Gradient-based attacks
are skipped (with the error recorded) when the model cannot provide
input gradients, e.g. an FFX front-end; Square always runs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..models import GradientUnavailableError
from .apgd import apgd
from .common import ATTACK_KINDS, AdversarialBatch, AttackConfig
from .fab import fab_t
from .square import square_attack

SQUARE_QUERIES_DEFAULT = 1000


def default_configs(seed: int, epsilon: float = 8.0 / 255.0, n_iter: int = 100,
                    square_queries: int = SQUARE_QUERIES_DEFAULT) -> dict:
    """One AttackConfig per attack kind; Square gets a query budget."""
    cfgs = {}
    for kind in ATTACK_KINDS:
        cfgs[kind] = AttackConfig(
            epsilon=epsilon,
            n_iter=square_queries if kind == "SQUARE" else n_iter,
            seed=seed, attack_kind=kind)
    return cfgs


@dataclass
class SuiteResult:
    batches: dict = field(default_factory=dict)  # attack_kind -> AdversarialBatch
    errors: dict = field(default_factory=dict)   # attack_kind -> message


_RUNNERS = {
    "APGD_CE": lambda m, x, y, c, i: apgd(m, x, y, c, loss="cross_entropy", indices=i),
    "APGD_T": lambda m, x, y, c, i: apgd(m, x, y, c, loss="dlr_targeted", indices=i),
    "FAB_T": lambda m, x, y, c, i: fab_t(m, x, y, c, indices=i),
    "SQUARE": lambda m, x, y, c, i: square_attack(m, x, y, c, indices=i),
}


def run_attack_suite(model, images, labels, configs: dict,
                     indices=None, log=None) -> SuiteResult:
    """Run every attack in `configs` on the same image slice.

    Per-attack failures are recorded in the result, not raised, so a
    gradient-free model still yields its Square batch.
    """
    result = SuiteResult()
    for kind, cfg in configs.items():
        if kind not in _RUNNERS:
            raise ValueError(f"unknown attack kind {kind!r}")
        if cfg.attack_kind != kind:
            cfg = replace(cfg, attack_kind=kind)
        try:
            result.batches[kind] = _RUNNERS[kind](model, images, labels, cfg, indices)
            if log:
                b = result.batches[kind]
                log(f"{kind}: {int(b.success.sum())}/{len(b)} fooled")
        except GradientUnavailableError as e:
            result.errors[kind] = str(e)
            if log:
                log(f"{kind}: skipped ({e})")
    return result


# -- persistence: one directory per batch ------------------------------------

def save_batch(batch: AdversarialBatch, path: str, cfg: AttackConfig | None = None,
               model_checksum: str | None = None):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "attack_kind": batch.attack_kind,
        "epsilon": batch.epsilon,
        "n_images": len(batch),
        "model_checksum": model_checksum,
        "config": None if cfg is None else {
            "epsilon": cfg.epsilon, "n_iter": cfg.n_iter,
            "n_restarts": cfg.n_restarts, "n_target_classes": cfg.n_target_classes,
            "seed": cfg.seed, "attack_kind": cfg.attack_kind,
        },
        "audit": {k: int(v) for k, v in batch.audit.items()},
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    np.save(os.path.join(path, "originals.npy"), batch.originals)
    np.save(os.path.join(path, "adversarials.npy"), batch.adversarials)
    np.save(os.path.join(path, "labels.npy"), batch.labels)
    np.save(os.path.join(path, "success.npy"), batch.success)
    np.save(os.path.join(path, "final_loss.npy"), batch.final_loss)


def load_batch(path: str) -> AdversarialBatch:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    return AdversarialBatch(
        attack_kind=manifest["attack_kind"],
        originals=np.load(os.path.join(path, "originals.npy")),
        adversarials=np.load(os.path.join(path, "adversarials.npy")),
        labels=np.load(os.path.join(path, "labels.npy")),
        success=np.load(os.path.join(path, "success.npy")),
        final_loss=np.load(os.path.join(path, "final_loss.npy")),
        epsilon=manifest["epsilon"],
        audit=manifest.get("audit", {}),
    )

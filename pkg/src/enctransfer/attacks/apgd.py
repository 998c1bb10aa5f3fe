"""Auto-PGD under the l-infinity norm.

Sign-gradient ascent with momentum 0.75 and an adaptive step size:
start at 2*eps, and at checkpoint iterations halve the step and restart
from the best point so far whenever fewer than 75% of the steps since
the last checkpoint improved the objective, or the best loss stagnated
without a halving. Checkpoint spacing starts at ceil(0.22*n) and shrinks
by 0.03*n down to 0.06*n, following the published schedule.

Losses: per-image cross-entropy (APGD-ce) or the targeted DLR ratio
(one run per candidate target class, used by APGD-t).
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .common import AdversarialBatch, AttackConfig, check_bounds, per_image_rng, project_linf

MOMENTUM = 0.75
RHO = 0.75


def ce_values(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, dtype=np.float64))
    return (lse - z[np.arange(len(labels)), labels]).astype(np.float32)


def dlr_targeted_values(logits: np.ndarray, labels: np.ndarray, targets: np.ndarray) -> np.ndarray:
    rows = np.arange(len(labels))
    zs = np.sort(logits, axis=1)
    denom = zs[:, -1] - 0.5 * (zs[:, -3] + zs[:, -4]) + 1e-12
    return -(logits[rows, labels] - logits[rows, targets]) / denom


def _ce_loss_fn(labels):
    return lambda z: ad.tsum(ad.cross_entropy(z, labels))


def _dlr_targeted_loss_fn(labels, targets):
    def fn(z):
        order = np.argsort(z.data, axis=1)
        zy = ad.take_per_row(z, labels)
        zt = ad.take_per_row(z, targets)
        z1 = ad.take_per_row(z, order[:, -1])
        z3 = ad.take_per_row(z, order[:, -3])
        z4 = ad.take_per_row(z, order[:, -4])
        denom = ad.add(ad.sub(z1, ad.mul(ad.add(z3, z4), 0.5)), 1e-12)
        return ad.tsum(ad.div(ad.sub(zt, zy), denom))
    return fn


def _checkpoint_schedule(n_iter):
    k = max(int(0.22 * n_iter), 1)
    size_decr = max(int(0.03 * n_iter), 1)
    k_min = max(int(0.06 * n_iter), 1)
    return k, size_decr, k_min


def _random_init(x, eps, seed, indices):
    t = np.empty_like(x)
    for i, idx in enumerate(indices):
        t[i] = per_image_rng(seed, int(idx)).uniform(-1.0, 1.0, size=x.shape[1:])
    scale = np.abs(t).reshape(len(t), -1).max(axis=1).reshape(-1, 1, 1, 1) + 1e-12
    return np.clip(x + eps * t / scale, 0.0, 1.0).astype(np.float32)


def _single_run(model, x, labels, cfg, loss_values, loss_fn, indices, audit):
    n = len(x)
    eps = cfg.epsilon
    n_iter = cfg.n_iter
    bshape = (-1, 1, 1, 1)

    x_adv = _random_init(x, eps, cfg.seed, indices)
    grad, logits = model.loss_gradient(x_adv, loss_fn)
    loss = loss_values(logits)

    x_best = x_adv.copy()
    loss_best = loss.copy()
    grad_best = grad.copy()
    fooled = logits.argmax(axis=1) != labels
    x_best_adv = np.where(fooled.reshape(bshape), x_adv, x).astype(np.float32)
    ever_fooled = fooled.copy()

    step = np.full(n, 2.0 * eps, dtype=np.float32)
    k, size_decr, k_min = _checkpoint_schedule(n_iter)
    counter = 0
    improved_steps = np.zeros(n, dtype=np.int64)
    loss_best_last_check = loss_best.copy()
    reduced_last_check = np.ones(n, dtype=bool)
    x_adv_old = x_adv.copy()

    for i in range(n_iter):
        a = MOMENTUM if i > 0 else 1.0
        z_momentum = x_adv - x_adv_old
        x_adv_old = x_adv.copy()
        x1 = project_linf(x_adv + step.reshape(bshape) * np.sign(grad), x, eps)
        x_adv = project_linf(x_adv + (x1 - x_adv) * a + z_momentum * (1 - a), x, eps)

        grad, logits = model.loss_gradient(x_adv, loss_fn)
        new_loss = loss_values(logits)
        fooled = logits.argmax(axis=1) != labels
        newly = fooled & ~ever_fooled
        x_best_adv[newly] = x_adv[newly]
        ever_fooled |= fooled

        improved = new_loss > loss_best
        improved_steps += new_loss > loss
        loss = new_loss
        x_best[improved] = x_adv[improved]
        grad_best[improved] = grad[improved]
        if np.any(loss_best[improved] > new_loss[improved]):
            audit["apgd_best_loss_decreases"] = audit.get("apgd_best_loss_decreases", 0) + 1
        loss_best = np.maximum(loss_best, new_loss)

        counter += 1
        if counter == k:
            frac_bad = improved_steps < RHO * k
            stagnant = ~reduced_last_check & (loss_best_last_check >= loss_best)
            halve = frac_bad | stagnant
            step[halve] /= 2.0
            x_adv[halve] = x_best[halve]
            grad[halve] = grad_best[halve]
            reduced_last_check = halve
            loss_best_last_check = loss_best.copy()
            improved_steps[:] = 0
            counter = 0
            k = max(k - size_decr, k_min)

    out = np.where(ever_fooled.reshape(bshape), x_best_adv, x_best).astype(np.float32)
    return out, ever_fooled, loss_best


def apgd(model, images, labels, cfg: AttackConfig, loss: str = "cross_entropy",
         indices=None) -> AdversarialBatch:
    """APGD-ce (loss='cross_entropy') or APGD-t (loss='dlr_targeted')."""
    x = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if indices is None:
        indices = np.arange(len(x))
    audit = {}
    kind = "APGD_CE" if loss == "cross_entropy" else "APGD_T"

    if cfg.n_iter == 0 or cfg.epsilon == 0.0:
        logits = model.logits(x)
        fooled = logits.argmax(axis=1) != labels
        batch = AdversarialBatch(kind, x.copy(), x.copy(), labels, fooled,
                                 ce_values(logits, labels), cfg.epsilon, audit)
        check_bounds(batch)
        return batch

    if loss == "cross_entropy":
        adv, fooled, best = _single_run(
            model, x, labels, cfg, lambda z: ce_values(z, labels),
            _ce_loss_fn(labels), indices, audit)
    elif loss == "dlr_targeted":
        clean_logits = model.logits(x)
        order = np.argsort(clean_logits, axis=1)
        adv = x.copy()
        fooled = np.zeros(len(x), dtype=bool)
        best = np.full(len(x), -np.inf, dtype=np.float32)
        for rank in range(2, 2 + cfg.n_target_classes):
            targets = order[:, -rank].astype(np.int64)
            targets = np.where(targets == labels, order[:, -1], targets)  # never target truth
            run_cfg = AttackConfig(cfg.epsilon, cfg.n_iter, cfg.n_restarts,
                                   cfg.n_target_classes, cfg.seed + rank, cfg.attack_kind)
            a, f, b = _single_run(
                model, x, labels, run_cfg,
                lambda z, t=targets: dlr_targeted_values(z, labels, t),
                _dlr_targeted_loss_fn(labels, targets), indices, audit)
            take_success = f & ~fooled          # first success wins
            take_loss = ~fooled & ~f & (b > best)  # best loss among failures
            take = take_success | take_loss
            adv[take] = a[take]
            best[take] = b[take]
            fooled |= f
    else:
        raise ValueError(f"unknown APGD loss {loss!r}")

    batch = AdversarialBatch(kind, x.copy(), adv, labels, fooled, best, cfg.epsilon, audit)
    check_bounds(batch)
    return batch

"""Square attack: black-box random search with square-shaped updates.

Needs only forward passes, so it works against every front-end
including FFX. Initialization is per-column vertical stripes of +-eps;
each later query re-randomizes one square window of the perturbation to
+-eps per channel, and the candidate is kept only if the margin loss
z_y - max_{i!=y} z_i strictly improves. The window side length follows
the published piecewise-constant area schedule starting at p_init=0.8.

Every image draws from its own Philox stream keyed by (seed, image
index), and draws happen on a fixed per-iteration cadence, so results
are identical no matter how a batch is split across workers.
"""

from __future__ import annotations

import numpy as np

from .common import AdversarialBatch, AttackConfig, check_bounds, margin, per_image_rng

P_INIT = 0.8
_MAX_REDRAWS = 20


def p_selection(p_init: float, it: int, n_iters: int) -> float:
    """Fraction of pixels changed per query, on a 10000-query reference scale."""
    it = int(it / n_iters * 10000)
    for hi, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16),
                    (2000, 32), (4000, 64), (6000, 128), (8000, 256), (10000, 512)):
        if it <= hi:
            return p_init / div
    return p_init / 512


def _draw_window(rng, h, w, s):
    return rng.integers(0, h - s), rng.integers(0, w - s)


def square_attack(model, images, labels, cfg: AttackConfig, indices=None) -> AdversarialBatch:
    """Run the l-inf Square attack with a budget of cfg.n_iter queries."""
    x = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n, h, w, c = x.shape
    eps = np.float32(cfg.epsilon)
    if indices is None:
        indices = np.arange(n)
    rngs = [per_image_rng(cfg.seed, int(i)) for i in indices]
    audit = {}

    if cfg.n_iter == 0 or cfg.epsilon == 0.0:
        logits = model.logits(x)
        batch = AdversarialBatch("SQUARE", x.copy(), x.copy(), labels,
                                 margin(logits, labels) < 0,
                                 margin(logits, labels), cfg.epsilon, audit)
        check_bounds(batch)
        return batch

    # init: per-channel vertical stripes
    x_best = np.empty_like(x)
    for i in range(n):
        stripes = rngs[i].choice([-eps, eps], size=(1, w, c)).astype(np.float32)
        x_best[i] = np.clip(x[i] + stripes, 0.0, 1.0)
    loss_min = margin(model.logits(x_best), labels)

    for it in range(cfg.n_iter - 1):
        active = np.flatnonzero(loss_min > 0)
        if len(active) == 0:
            break
        p = p_selection(P_INIT, it, cfg.n_iter)
        s = int(round(np.sqrt(p * h * w)))
        s = min(max(s, 1), h - 1)

        x_new = x_best[active].copy()
        for j, i in enumerate(active):
            rng = rngs[i]
            deltas = x_best[i] - x[i]
            ch, cw = _draw_window(rng, h, w, s)
            win = (slice(ch, ch + s), slice(cw, cw + s))
            for _ in range(_MAX_REDRAWS):
                cand = np.clip(x[i][win] + deltas[win], 0.0, 1.0)
                if np.any(np.abs(cand - x_best[i][win]) >= 1e-7):
                    break
                deltas[win] = rng.choice([-eps, eps], size=(1, 1, c)).astype(np.float32)
            x_new[j] = np.clip(x[i] + deltas, 0.0, 1.0)

        loss_new = margin(model.logits(x_new), labels[active])
        improved = loss_new < loss_min[active]
        if np.any(loss_new[improved] > loss_min[active][improved]):
            audit["square_loss_increases"] = audit.get("square_loss_increases", 0) + 1
        upd = active[improved]
        x_best[upd] = x_new[improved]
        loss_min[upd] = loss_new[improved]

    audit.setdefault("square_loss_increases", 0)
    batch = AdversarialBatch("SQUARE", x.copy(), x_best, labels,
                             loss_min < 0, loss_min, cfg.epsilon, audit)
    check_bounds(batch)
    return batch

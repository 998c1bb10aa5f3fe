"""Accuracy and attack-success-rate metrics, plus transfer matrices.

Both metrics are computed from integer counts with a single final
division, so printed values are reproducible to the 0.01 the paper's
tables use.

  Acc  = 100/N  * #{k : target(adv_k)  = y_k}
  ASR  = 100/Nc * #{k in commonly-correct : target(adv_k) != y_k}

where the commonly-correct set is {k : target(x_k) = y_k and
source(x_k) = y_k} and Nc is its size. ASR is undefined (None) when
Nc = 0. By default an AE does not have to fool the source model to count
toward ASR; `require_source_success=True` switches to the stricter
convention found elsewhere in the transferability literature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np


class EmptyRecordsError(ValueError):
    """Metric requested over zero records."""


@dataclass
class EvalRecords:
    """Per-image predictions needed by the metrics.

    y:         true labels
    src_clean: source model predictions on clean images
    tgt_clean: target model predictions on clean images
    tgt_adv:   target model predictions on the adversarial images
    src_adv:   source model predictions on adversarial images (optional,
               only needed for require_source_success)
    """

    y: np.ndarray
    src_clean: np.ndarray
    tgt_clean: np.ndarray
    tgt_adv: np.ndarray
    src_adv: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.src_clean = np.asarray(self.src_clean, dtype=np.int64)
        self.tgt_clean = np.asarray(self.tgt_clean, dtype=np.int64)
        self.tgt_adv = np.asarray(self.tgt_adv, dtype=np.int64)
        n = len(self.y)
        for name in ("src_clean", "tgt_clean", "tgt_adv"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.y)


def accuracy(records: EvalRecords) -> float:
    """Percent of adversarial images the target still classifies correctly."""
    n = len(records)
    if n == 0:
        raise EmptyRecordsError("accuracy over zero records")
    return 100.0 * int(np.sum(records.tgt_adv == records.y)) / n


def asr(records: EvalRecords, require_source_success: bool = False):
    """Attack success rate in percent, or None when Nc = 0."""
    common = (records.tgt_clean == records.y) & (records.src_clean == records.y)
    n_c = int(np.sum(common))
    if n_c == 0:
        return None
    fooled = common & (records.tgt_adv != records.y)
    if require_source_success:
        if records.src_adv is None:
            raise ValueError("require_source_success needs src_adv predictions")
        fooled = fooled & (np.asarray(records.src_adv) != records.y)
    return 100.0 * int(np.sum(fooled)) / n_c


def common_correct_count(records: EvalRecords) -> int:
    return int(np.sum((records.tgt_clean == records.y) & (records.src_clean == records.y)))


def round2(value) -> str:
    """Half-up presentation rounding to 2 decimals; '-' for undefined."""
    if value is None:
        return "-"
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class Cell:
    """One (source, target, attack) entry of a transfer report."""

    source: str
    target: str
    attack: str
    n: int
    n_c: int
    acc: float
    asr: float | None


@dataclass
class TransferReport:
    """Grid of Acc/ASR cells in the shape of the paper's tables."""

    cells: dict = field(default_factory=dict)  # (source, target, attack) -> Cell

    def add(self, cell: Cell):
        self.cells[(cell.source, cell.target, cell.attack)] = cell

    def get(self, source, target, attack) -> Cell | None:
        return self.cells.get((source, target, attack))

    @property
    def sources(self):
        return sorted({k[0] for k in self.cells})

    @property
    def targets(self):
        return sorted({k[1] for k in self.cells})

    @property
    def attacks(self):
        return sorted({k[2] for k in self.cells})


def evaluate_cell(source_name, target_name, attack_name, records: EvalRecords,
                  require_source_success: bool = False) -> Cell:
    return Cell(source_name, target_name, attack_name,
                n=len(records), n_c=common_correct_count(records),
                acc=accuracy(records),
                asr=asr(records, require_source_success))


def transfer_matrix(batches, target_models, predict_fn,
                    require_source_success: bool = False) -> TransferReport:
    """Assemble the source -> target grid.

    batches: iterable of (source_name, attack_name, originals, adversarials,
    labels, src_clean_pred) tuples; target_models: {name: model};
    predict_fn(model, images) -> labels. Clean target predictions are
    computed once per (target, source image set).
    """
    report = TransferReport()
    clean_cache = {}
    for source_name, attack_name, originals, adversarials, labels, src_clean in batches:
        for target_name, model in target_models.items():
            ck = (target_name, id(originals))
            if ck not in clean_cache:
                clean_cache[ck] = predict_fn(model, originals)
            records = EvalRecords(labels, src_clean, clean_cache[ck],
                                  predict_fn(model, adversarials))
            report.add(evaluate_cell(source_name, target_name, attack_name, records,
                                     require_source_success))
    return report

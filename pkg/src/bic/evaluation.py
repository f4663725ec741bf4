"""Classification-map evaluation: confusion matrices, per-class and overall P/R/F1.

Rows of the confusion matrix are true classes, columns predicted, both in the
stable class ordinal order. The "overall" row is the support-weighted mean of
the per-class values (macro averaging is available behind a flag). Rendered
numbers are rounded half-up to two decimals; full precision is kept internally.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .fusion import BuildingPrediction, UnclassifiedBuilding
from .osm import BuildingClass

N_CLASSES = len(BuildingClass)
_CLASS_ORDER = list(BuildingClass)
_CLASS_INDEX = {c: i for i, c in enumerate(_CLASS_ORDER)}


class InsufficientPopulation(ValueError):
    """An audit sample was requested that exceeds the evaluable population."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """Integer count grid: counts[true][predicted]."""

    counts: tuple[tuple[int, ...], ...]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def row_sum(self, i: int) -> int:
        return sum(self.counts[i])

    def col_sum(self, j: int) -> int:
        return sum(row[j] for row in self.counts)


@dataclass(frozen=True)
class ClassRow:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassMetrics:
    per_class: tuple[ClassRow, ...]
    overall_precision: float
    overall_recall: float
    overall_f1: float
    evaluated: int


def confusion(
    pairs: Iterable[tuple[BuildingClass, BuildingClass]],
) -> ConfusionMatrix:
    """Tally (truth, predicted) pairs into the 8x8 grid."""
    grid = [[0] * N_CLASSES for _ in range(N_CLASSES)]
    for truth, predicted in pairs:
        grid[_CLASS_INDEX[truth]][_CLASS_INDEX[predicted]] += 1
    return ConfusionMatrix(tuple(tuple(row) for row in grid))


def normalize_rows(m: ConfusionMatrix) -> list[list[float]]:
    """Each row divided by its row sum; zero-support rows stay all-zero (no NaN)."""
    out = []
    for row in m.counts:
        total = sum(row)
        if total == 0:
            out.append([0.0] * len(row))
        else:
            out.append([c / total for c in row])
    return out


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; zero when both vanish."""
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def weighted_overall(
    rows: Sequence[tuple[float, float, float, int]],
) -> tuple[float, float, float]:
    """Support-weighted mean of per-class (precision, recall, f1) rows."""
    total = sum(support for *_, support in rows)
    if total == 0:
        return 0.0, 0.0, 0.0
    wp = sum(p * s for p, _, _, s in rows) / total
    wr = sum(r * s for _, r, _, s in rows) / total
    wf = sum(f * s for _, _, f, s in rows) / total
    return wp, wr, wf


def macro_overall(
    rows: Sequence[tuple[float, float, float, int]],
) -> tuple[float, float, float]:
    """Unweighted mean over classes with nonzero support."""
    live = [(p, r, f) for p, r, f, s in rows if s > 0]
    if not live:
        return 0.0, 0.0, 0.0
    n = len(live)
    return (
        sum(p for p, _, _ in live) / n,
        sum(r for _, r, _ in live) / n,
        sum(f for _, _, f in live) / n,
    )


def class_metrics(m: ConfusionMatrix, *, macro: bool = False) -> ClassMetrics:
    """Per-class precision/recall/F1/support plus the aggregated overall row."""
    rows: list[ClassRow] = []
    for i, cls in enumerate(_CLASS_ORDER):
        diag = m.counts[i][i]
        col = m.col_sum(i)
        row = m.row_sum(i)
        p = diag / col if col else 0.0
        r = diag / row if row else 0.0
        rows.append(ClassRow(cls.value, p, r, f1(p, r), row))
    quads = [(c.precision, c.recall, c.f1, c.support) for c in rows]
    op, orec, of = macro_overall(quads) if macro else weighted_overall(quads)
    return ClassMetrics(
        per_class=tuple(rows),
        overall_precision=op,
        overall_recall=orec,
        overall_f1=of,
        evaluated=m.total,
    )


@dataclass(frozen=True)
class ClassProportions:
    """Fraction of classified buildings per class; empty marks a zero population."""

    fractions: dict[str, float]
    total: int

    @property
    def empty(self) -> bool:
        return self.total == 0


def class_proportions(predictions: Sequence[BuildingPrediction]) -> ClassProportions:
    counts = {cls.value: 0 for cls in _CLASS_ORDER}
    for p in predictions:
        counts[p.label.value] = counts.get(p.label.value, 0) + 1
    total = len(predictions)
    if total == 0:
        return ClassProportions({k: 0.0 for k in counts}, 0)
    return ClassProportions({k: v / total for k, v in counts.items()}, total)


def sample_for_audit(building_ids: Sequence[int], n: int, seed: int) -> list[int]:
    """Seeded uniform sample without replacement, deterministic for a given seed."""
    population = sorted(building_ids)
    if n > len(population):
        raise InsufficientPopulation(f"asked for {n} of {len(population)} buildings")
    return random.Random(seed).sample(population, n)


def round2(x: float) -> float:
    """Half-up rounding to two decimals, as rendered in the report tables."""
    return float(Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def metrics_payload(
    matrix: ConfusionMatrix,
    metrics: ClassMetrics,
    proportions: ClassProportions,
    unclassified: Sequence[UnclassifiedBuilding],
    *,
    audit_sample: Optional[Sequence[int]] = None,
) -> dict:
    payload = {
        "confusion": [list(row) for row in matrix.counts],
        "confusion_normalized": normalize_rows(matrix),
        "class_order": [c.value for c in _CLASS_ORDER],
        "per_class": [
            {
                "class": row.label,
                "precision": row.precision,
                "recall": row.recall,
                "f1": row.f1,
                "support": row.support,
            }
            for row in metrics.per_class
        ],
        "overall": {
            "precision": metrics.overall_precision,
            "recall": metrics.overall_recall,
            "f1": metrics.overall_f1,
        },
        "evaluated": metrics.evaluated,
        "proportions": proportions.fractions,
        "classified_total": proportions.total,
        "unclassified": {
            "total": len(unclassified),
            "no_imagery": sum(1 for u in unclassified if u.reason.value == "no_imagery"),
            "all_filtered": sum(1 for u in unclassified if u.reason.value == "all_filtered"),
        },
    }
    if audit_sample is not None:
        payload["audit_sample"] = list(audit_sample)
    return payload


def write_metrics_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def render_metrics_table(metrics: ClassMetrics) -> str:
    """Plain-text table mirroring the published layout, values at two decimals."""
    name_width = max(len(row.label) for row in metrics.per_class)
    lines = [
        f"{'':{name_width}}  precision  recall  F1 score  support",
    ]
    for row in metrics.per_class:
        lines.append(
            f"{row.label:{name_width}}  {round2(row.precision):9.2f}  {round2(row.recall):6.2f}"
            f"  {round2(row.f1):8.2f}  {row.support:7d}"
        )
    lines.append(
        f"{'overall':{name_width}}  {round2(metrics.overall_precision):9.2f}"
        f"  {round2(metrics.overall_recall):6.2f}"
        f"  {round2(metrics.overall_f1):8.2f}  {metrics.evaluated:7d}"
    )
    return "\n".join(lines) + "\n"

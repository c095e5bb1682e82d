"""Rank correlations, top-10 precision/recall, confusion matrices."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .aa import BLOSUM62
from .ingest.dms import DmsAssay
from .variants import RankedMutation

log = logging.getLogger(__name__)

TOP_K = 10


class UndefinedCorrelationError(ValueError):
    pass


def rankdata(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    boundaries = np.flatnonzero(np.diff(sorted_a)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(a)]])
    ranks = np.empty(len(a))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise UndefinedCorrelationError("need at least two pairs")
    rx, ry = rankdata(xs), rankdata(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("constant input")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def _maybe_spearman(xs, ys) -> float | None:
    try:
        return spearman(xs, ys)
    except UndefinedCorrelationError:
        return None


@dataclass(frozen=True)
class EvaluationReport:
    spearman_all: float | None
    spearman_better_wt: float | None
    spearman_worse_wt: float | None
    top10_precision: float
    top10_recall: float
    n_total: int
    n_better: int
    n_worse: int

    def to_dict(self) -> dict:
        return asdict(self)


def top_k_hits(ranked: Sequence[RankedMutation], assay: DmsAssay, k: int = TOP_K) -> int:
    fitness = assay.fitness
    head = sorted(ranked, key=lambda m: m.rank)[:k]
    return sum(1 for m in head if assay.is_better(fitness[m.key]))


def evaluate_ranking(
    ranked: Sequence[RankedMutation],
    assay: DmsAssay,
    recall_denominator: str = "assay",
    by: str = "score",
) -> EvaluationReport:
    """Compare a mutation ranking against measured fitness.

    ``by="score"`` correlates each mutation's ``S(i, a)`` with fitness;
    ``by="rank"`` uses the ranking order itself (``-rank``) as the prediction.
    The top-10 metrics only ask whether each of the first 10 mutations beats
    the wildtype.  Recall divides by all better-than-wildtype mutations in
    the assay (``"assay"``) or only those among the ranked candidates
    (``"candidates"``).
    """
    if not ranked:
        raise ValueError("empty ranking")
    if by not in ("score", "rank"):
        raise ValueError(f"unknown prediction source {by!r}")
    fitness = assay.fitness
    missing = [f"{m.wt}{m.position}{m.mut}" for m in ranked if m.key not in fitness]
    if missing:
        raise KeyError(f"ranked mutations absent from assay {assay.assay_id}: {missing[:10]}")

    pred = np.array([m.score if by == "score" else -m.rank for m in ranked], dtype=np.float64)
    fit = np.array([fitness[m.key] for m in ranked])
    better = fit > assay.wt_fitness
    worse = fit < assay.wt_fitness

    hits = top_k_hits(ranked, assay)
    shown = min(TOP_K, len(ranked))
    if len(ranked) < TOP_K:
        warnings.warn(f"only {len(ranked)} ranked mutations; top-{TOP_K} precision uses {shown}")
    if recall_denominator == "assay":
        denom = assay.n_better
    elif recall_denominator == "candidates":
        denom = int(better.sum())
    else:
        raise ValueError(f"unknown recall denominator {recall_denominator!r}")

    return EvaluationReport(
        spearman_all=_maybe_spearman(pred, fit),
        spearman_better_wt=_maybe_spearman(pred[better], fit[better]),
        spearman_worse_wt=_maybe_spearman(pred[worse], fit[worse]),
        top10_precision=hits / shown,
        top10_recall=hits / denom if denom else 0.0,
        n_total=len(ranked),
        n_better=int(better.sum()),
        n_worse=int(worse.sum()),
    )


def confusion_from_labels(true: Iterable[int], predicted: Iterable[int], n_classes: int = 20) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.fromiter(true, dtype=np.int64), np.fromiter(predicted, dtype=np.int64)), 1)
    return cm


def confusion_matrix(model, dataset) -> np.ndarray:
    """Counts of (true label, argmax prediction) over ``dataset``."""
    from .scorer.train import predictions

    if not dataset:
        raise ValueError("empty dataset")
    return confusion_from_labels((g.true_label.index for g in dataset), predictions(model, dataset))


def compare_to_blosum62(confusion: np.ndarray, blosum: np.ndarray = BLOSUM62) -> float:
    """Spearman between row-normalized off-diagonal confusion and BLOSUM62 scores."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.shape != (20, 20) or np.shape(blosum) != (20, 20):
        raise ValueError("confusion and substitution matrices must both be 20 x 20")
    off = ~np.eye(20, dtype=bool)
    if confusion[off].sum() == 0:
        raise UndefinedCorrelationError("confusion matrix has no off-diagonal mass")
    rows = confusion.sum(axis=1, keepdims=True)
    freq = np.divide(confusion, rows, out=np.zeros_like(confusion), where=rows > 0)
    return spearman(freq[off], np.asarray(blosum, dtype=np.float64)[off])


def cross_model_correlation(
    ranked_a: Sequence[RankedMutation],
    ranked_b: Sequence[RankedMutation],
    assay: DmsAssay,
    subset: str = "all",
) -> float:
    """Spearman between two models' scores on the mutations both rank."""
    if subset not in ("all", "better_wt"):
        raise ValueError(f"unknown subset {subset!r}")
    a = {m.key: m.score for m in ranked_a}
    b = {m.key: m.score for m in ranked_b}
    fitness = assay.fitness
    shared = sorted(set(a) & set(b))
    if subset == "better_wt":
        shared = [k for k in shared if k in fitness and assay.is_better(fitness[k])]
    if len(shared) < 2:
        raise UndefinedCorrelationError(f"only {len(shared)} shared mutations")
    return spearman([a[k] for k in shared], [b[k] for k in shared])


# ---------------------------------------------------------------------------
# summary table (one row per model and strategy, averaged over assays)

TABLE_COLUMNS = [
    "model", "strategy", "top10_precision", "top10_recall",
    "spearman_average", "spearman_worse_wt", "spearman_better_wt", "n_assays",
]


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(entries: Iterable[tuple[str, str, EvaluationReport]]) -> list[dict]:
    grouped: dict[tuple[str, str], list[EvaluationReport]] = {}
    for model, strategy, report in entries:
        grouped.setdefault((model, strategy), []).append(report)
    rows = []
    for (model, strategy), reports in grouped.items():
        rows.append({
            "model": model,
            "strategy": strategy,
            "top10_precision": _mean(r.top10_precision for r in reports),
            "top10_recall": _mean(r.top10_recall for r in reports),
            "spearman_average": _mean(r.spearman_all for r in reports),
            "spearman_worse_wt": _mean(r.spearman_worse_wt for r in reports),
            "spearman_better_wt": _mean(r.spearman_better_wt for r in reports),
            "n_assays": len(reports),
        })
    return rows


def write_summary(rows: Sequence[dict], stream: TextIO) -> None:
    w = csv.DictWriter(stream, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]))
                    for k in TABLE_COLUMNS})

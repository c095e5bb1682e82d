"""Ridge regression on sequence embeddings, optionally augmented with S(i, a).

A single mutant ``x_1 .. a_i .. x_n`` is embedded residue by residue (one-hot
or a 19-dimensional AAIndex projection), flattened, and the structure score
of the substituted amino acid is appended as one final feature.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np
from scipy import linalg

from .aa import CODES, index_of
from .ingest.dms import DmsAssay, MutationRecord
from .metrics import UndefinedCorrelationError, spearman

log = logging.getLogger(__name__)

EMBEDDING_KINDS = ("one_hot", "aa_index")
AAINDEX_DIM = 19
METRICS = ("spearman_all", "spearman_better_wt", "top10_precision", "top10_recall")
VARIANTS = ("augmented", "baseline")


class DimensionalityError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# embeddings


def read_aaindex_csv(stream: TextIO | str) -> np.ndarray:
    """Read ``aa,<values...>`` rows into a 20 x K table in alphabet order.

    Empty cells and ``NA`` become NaN (imputed later by ``reduce_aaindex``).
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows = {}
    reader = csv.reader(stream)
    next(reader)
    for rec in reader:
        if not rec:
            continue
        values = [float(v) if v.strip() not in ("", "NA", "nan") else np.nan for v in rec[1:]]
        rows[rec[0].strip().upper()] = values
    missing = set(CODES) - set(rows)
    if missing:
        raise DimensionalityError(f"AAIndex table lacks rows for {sorted(missing)}")
    return np.array([rows[c] for c in CODES], dtype=np.float64)


def reduce_aaindex(raw: np.ndarray, n_components: int = AAINDEX_DIM) -> np.ndarray:
    """Impute, z-score and project a 20 x K index table onto its top principal axes.

    Component signs are fixed so the largest-magnitude coordinate of every
    output column is positive.
    """
    raw = np.array(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != 20:
        raise DimensionalityError(f"expected a 20 x K table, got {raw.shape}")
    if raw.shape[1] < n_components:
        raise DimensionalityError(f"need at least {n_components} index columns, got {raw.shape[1]}")
    nan_cols = np.isnan(raw).all(axis=0)
    if nan_cols.any():
        raise DimensionalityError(f"columns {np.flatnonzero(nan_cols).tolist()} are entirely missing")
    col_mean = np.nanmean(raw, axis=0)
    raw = np.where(np.isnan(raw), col_mean, raw)

    std = raw.std(axis=0)
    if (std == 0).any():
        raise DimensionalityError(f"constant columns {np.flatnonzero(std == 0).tolist()}")
    z = (raw - raw.mean(axis=0)) / std

    cov = z.T @ z / len(z)
    evals, evecs = np.linalg.eigh(cov)
    top = np.argsort(evals, kind="stable")[::-1][:n_components]
    proj = z @ evecs[:, top]
    lead = proj[np.argmax(np.abs(proj), axis=0), np.arange(n_components)]
    return proj * np.where(lead < 0, -1.0, 1.0)


def _table(kind: str, table: np.ndarray | None) -> np.ndarray:
    if kind == "one_hot":
        return np.eye(20)
    if kind == "aa_index":
        if table is None:
            raise ValueError("aa_index embedding needs a reduced AAIndex table")
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (20, AAINDEX_DIM):
            raise DimensionalityError(f"reduced AAIndex table must be 20 x {AAINDEX_DIM}, got {table.shape}")
        return table
    raise ValueError(f"unknown embedding kind {kind!r}; expected one of {EMBEDDING_KINDS}")


def embed(
    sequence: str,
    position: int,
    mutant: str,
    kind: str = "one_hot",
    score: float = 0.0,
    table: np.ndarray | None = None,
) -> np.ndarray:
    """Flattened embedding of the mutated sequence with ``score`` appended."""
    emb = _table(kind, table)
    if not 1 <= position <= len(sequence):
        raise ValueError(f"position {position} outside sequence of length {len(sequence)}")
    mut_idx = index_of(mutant)
    if sequence[position - 1] == mutant:
        raise ValueError(f"{mutant}{position} is not a substitution")
    idx = np.array([index_of(c) for c in sequence])
    idx[position - 1] = mut_idx
    return np.concatenate([emb[idx].ravel(), [float(score)]])


def design_matrix(
    sequence: str,
    records: Sequence[MutationRecord],
    scores: Sequence[float],
    kind: str = "one_hot",
    table: np.ndarray | None = None,
) -> np.ndarray:
    """Rows of ``embed`` for many single mutants of one wildtype, built in bulk."""
    emb = _table(kind, table)
    dim = emb.shape[1]
    base = emb[[index_of(c) for c in sequence]].ravel()
    X = np.tile(np.append(base, 0.0), (len(records), 1))
    for row, (rec, s) in enumerate(zip(records, scores)):
        start = (rec.position - 1) * dim
        X[row, start : start + dim] = emb[index_of(rec.mut)]
        X[row, -1] = s
    return X


# ---------------------------------------------------------------------------
# ridge


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    intercept: float
    lam: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.intercept


def ridge_fit(X: np.ndarray, y: Sequence[float], lam: float = 1.0) -> RidgeModel:
    """Minimize ``|y - Xw - b|^2 + lam |w|^2`` with the intercept unpenalized.

    Solves the centred normal equations ``(X'X + lam I) w = X'y`` by Cholesky.
    When there are fewer samples than features the equivalent dual system
    ``(XX' + lam I) a = y, w = X'a`` is solved instead; it has the same
    solution and a much smaller matrix.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError(f"need matching non-empty X and y, got {X.shape} and {y.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc, yc = X - x_mean, y - y_mean
    n, d = Xc.shape

    if lam == 0 and np.linalg.matrix_rank(Xc) < d:
        raise SingularSystemError("design is rank-deficient at lambda = 0; use lambda > 0")
    try:
        if n < d and lam > 0:
            c = linalg.cho_factor(Xc @ Xc.T + lam * np.eye(n))
            w = Xc.T @ linalg.cho_solve(c, yc)
        else:
            c = linalg.cho_factor(Xc.T @ Xc + lam * np.eye(d))
            w = linalg.cho_solve(c, Xc.T @ yc)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal equations not positive definite ({exc}); use lambda > 0") from exc
    return RidgeModel(weights=w, intercept=float(y_mean - x_mean @ w), lam=float(lam))


def stationarity_residual(model: RidgeModel, X: np.ndarray, y: Sequence[float]) -> float:
    """``|(X'X + lam I) w - X'y| / |X'y|`` on centred data (0 when X'y = 0)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Xc, yc = X - X.mean(axis=0), y - y.mean()
    rhs = Xc.T @ yc
    lhs = Xc.T @ (Xc @ model.weights) + model.lam * model.weights
    denom = np.linalg.norm(rhs)
    return float(np.linalg.norm(lhs - rhs) / denom) if denom > 0 else float(np.linalg.norm(lhs - rhs))


# ---------------------------------------------------------------------------
# learning curves


def heldout_metrics(pred: np.ndarray, true: np.ndarray, wt_fitness: float, k: int = 10) -> dict[str, float]:
    better = true > wt_fitness

    def rho(mask=None):
        try:
            return spearman(pred, true) if mask is None else spearman(pred[mask], true[mask])
        except UndefinedCorrelationError:
            return float("nan")

    top = np.argsort(-pred, kind="stable")[:k]
    hits = int(better[top].sum())
    n_better = int(better.sum())
    return {
        "spearman_all": rho(),
        "spearman_better_wt": rho(better),
        "top10_precision": hits / min(k, len(pred)),
        "top10_recall": hits / n_better if n_better else 0.0,
    }


@dataclass
class LearningCurve:
    assay_id: str
    kind: str
    # (size, repeat, variant, metric, value)
    rows: list[tuple[int, int, str, str, float]] = field(default_factory=list)

    def values(self, variant: str, metric: str, size: int) -> np.ndarray:
        return np.array([v for s, _, var, m, v in self.rows if var == variant and m == metric and s == size])

    @property
    def sizes(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def aggregate(self, variant: str) -> list[tuple[int, str, float, float]]:
        out = []
        for size in self.sizes:
            for metric in METRICS:
                vals = self.values(variant, metric, size)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    mean, std = float(np.nanmean(vals)), float(np.nanstd(vals))
                out.append((size, metric, mean, std))
        return out

    def mean(self, variant: str, metric: str, size: int) -> float:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return float(np.nanmean(self.values(variant, metric, size)))

    def write_rows(self, variant: str, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["size", "repeat", "metric", "value"])
        for size, rep, var, metric, value in sorted(self.rows, key=lambda r: (r[0], r[1], METRICS.index(r[3]))):
            if var == variant:
                w.writerow([size, rep, metric, repr(value)])

    def write_aggregate(self, variant: str, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["size", "metric", "mean", "std"])
        for size, metric, mean, std in self.aggregate(variant):
            w.writerow([size, metric, repr(mean), repr(std)])


def scores_for(assay: DmsAssay, matrix, offset: int = 0) -> dict[tuple[int, str], float]:
    """Look up ``S(i, a_i)`` for every assay record covered by a score matrix."""
    rows = matrix.row_of()
    out = {}
    for rec in assay.records:
        r = rows.get(rec.position + offset)
        if r is not None:
            out[rec.key] = float(matrix.scores[r, index_of(rec.mut)])
    return out


def learning_curve(
    assay: DmsAssay,
    scores: Mapping[tuple[int, str], float],
    kind: str = "one_hot",
    sizes: Sequence[int] = (24, 48, 96, 144, 192),
    repeats: int = 20,
    test_fraction: float = 0.2,
    lam: float = 1.0,
    seed: int = 0,
    table: np.ndarray | None = None,
) -> LearningCurve:
    """Train augmented and baseline ridge models on growing training subsets.

    Each repeat shuffles the scored mutations with its own generator
    (``seed + repeat``), holds out ``test_fraction`` of them, and trains on
    nested prefixes of the rest.  The baseline is the same model with the
    score column set to zero.
    """
    records = [r for r in assay.records if r.key in scores]
    dropped = len(assay.records) - len(records)
    if dropped:
        log.info("%s: %d mutations have no structure score and are left out", assay.assay_id, dropped)
    n = len(records)
    n_test = int(round(test_fraction * n))
    n_train = n - n_test
    too_big = [s for s in sizes if s > n_train or s < 1]
    if too_big:
        raise ValueError(
            f"{assay.assay_id}: training sizes {too_big} exceed the {n_train} available training rows"
        )

    X_aug = design_matrix(assay.sequence, records, [scores[r.key] for r in records], kind, table)
    X_base = X_aug.copy()
    X_base[:, -1] = 0.0
    y = np.array([r.fitness for r in records])

    curve = LearningCurve(assay.assay_id, kind)
    for rep in range(repeats):
        rng = np.random.default_rng(seed + rep)
        perm = rng.permutation(n)
        test, pool = perm[:n_test], perm[n_test:]
        for size in sizes:
            train = pool[:size]
            for variant, X in (("augmented", X_aug), ("baseline", X_base)):
                model = ridge_fit(X[train], y[train], lam)
                metrics = heldout_metrics(model.predict(X[test]), y[test], assay.wt_fitness)
                for metric in METRICS:
                    curve.rows.append((int(size), rep, variant, metric, metrics[metric]))
    return curve


def plot_curves(curves: Sequence[LearningCurve], path_prefix: str) -> list[str]:
    """One line chart per metric; returns written paths.  Needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for metric in METRICS:
        fig, ax = plt.subplots(figsize=(5, 4))
        for curve in curves:
            for variant in VARIANTS:
                agg = [(s, m, sd) for s, met, m, sd in curve.aggregate(variant) if met == metric]
                if not agg:
                    continue
                xs, ms, sds = map(np.array, zip(*agg))
                ax.errorbar(xs, ms, yerr=sds, marker="o", capsize=3, label=f"{curve.kind} {variant}")
        ax.set_xlabel("training mutations")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = f"{path_prefix}_{metric}.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written

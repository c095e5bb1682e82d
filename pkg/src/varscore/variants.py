"""Per-position amino-acid scores and the two mutation rankings.

``S(i, a)`` is the scorer's logit for amino acid ``a`` when residue ``i`` is
masked.  A mutation ``(i, a)`` with ``a != x_i`` can be ranked

* globally: by ``S(i, a)`` descending, whatever the position;
* positionally: positions whose wildtype residue the scorer is least sure of
  (lowest ``S(i, x_i)``) come first, each contributing its 3 best mutants.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

from .aa import CODES, index_of
from .ingest.dms import DmsAssay
from .scorer.model import GVPScorer, forward_many
from .structio import AtomicGraph, extract_local_environment, mask_residue

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    def __init__(self, message: str, positions: Sequence[int] = ()):
        self.positions = list(positions)
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    positions: np.ndarray        # (n,) structure residue numbers
    wildtype: str                # one letter per row
    scores: np.ndarray           # (n, 20), columns in aa.CODES order
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[1] != 20:
            raise ValueError(f"score matrix must be n x 20, got {scores.shape}")
        if len(self.positions) != len(scores) or len(self.wildtype) != len(scores):
            raise ValueError("positions, wildtype and score rows differ in length")
        if not np.isfinite(scores).all():
            raise ValueError("score matrix contains non-finite entries")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.int64))

    def __len__(self):
        return len(self.positions)

    @property
    def wt_index(self) -> np.ndarray:
        return np.array([index_of(c) for c in self.wildtype], dtype=np.int64)

    @property
    def correct(self) -> np.ndarray:
        """Whether each row's argmax (lowest index on ties) is the wildtype."""
        return self.scores.argmax(axis=1) == self.wt_index

    def row_of(self) -> dict[int, int]:
        return {int(p): r for r, p in enumerate(self.positions)}

    def to_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["position", "wt_aa", *CODES])
        for p, wt, row in zip(self.positions, self.wildtype, self.scores):
            w.writerow([int(p), wt, *(repr(float(x)) for x in row)])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, stream: TextIO | str, provenance: dict | None = None) -> "ScoreMatrix":
        if isinstance(stream, str):
            stream = io.StringIO(stream)
        reader = csv.reader(stream)
        header = next(reader)
        if header[:2] != ["position", "wt_aa"] or sorted(header[2:]) != sorted(CODES) or len(header) != 22:
            raise ValueError(f"unexpected score matrix header: {header}")
        cols = [header.index(c) for c in CODES]
        positions, wt, rows = [], [], []
        for rec in reader:
            if not rec:
                continue
            positions.append(int(rec[0]))
            wt.append(rec[1])
            rows.append([float(rec[c]) for c in cols])
        return cls(np.array(positions), "".join(wt), np.array(rows).reshape(-1, 20), provenance or {})


def score_structure(
    model: GVPScorer,
    graph: AtomicGraph,
    mode: str = "full",
    radius: float | None = None,
    provenance: dict | None = None,
) -> ScoreMatrix:
    """Mask each residue in turn and record the scorer's 20 logits.

    ``mode="local"`` first cuts out the atoms within ``radius`` of the
    residue's alpha carbon and masks within that environment.
    """
    if not graph.ca_map:
        raise ValueError("structure has no residues with a mapped CA")
    if mode not in ("full", "local"):
        raise ValueError(f"unknown environment mode {mode!r}")
    if mode == "local" and not (radius and radius > 0):
        raise ValueError("local mode needs a positive radius")
    positions = list(graph.ca_map)
    masked = []
    for p in positions:
        env = extract_local_environment(graph, p, radius) if mode == "local" else graph
        masked.append(mask_residue(env, p))
    scores = forward_many(model, masked)
    prov = {"environment": mode if mode == "full" else f"local:{radius}"}
    prov.update(provenance or {})
    return ScoreMatrix(
        positions=np.array(positions),
        wildtype="".join(graph.residue_type(p).code for p in positions),
        scores=scores,
        provenance=prov,
    )


class Candidate(NamedTuple):
    position: int
    wt: str
    mut: str
    score: float
    self_score: float


@dataclass(frozen=True)
class RankedMutation:
    position: int
    wt: str
    mut: str
    score: float
    self_score: float
    rank: int

    def __post_init__(self):
        if self.wt == self.mut:
            raise ValueError(f"mutant equals wildtype at position {self.position}")

    @property
    def key(self) -> tuple[int, str]:
        return (self.position, self.mut)


def check_alignment(matrix: ScoreMatrix, assay: DmsAssay, offset: int = 0) -> None:
    """Raise if the structure and assay disagree on any shared wildtype residue."""
    bad = []
    for p, wt in zip(matrix.positions.tolist(), matrix.wildtype):
        q = p - offset
        if 1 <= q <= len(assay.sequence) and assay.sequence[q - 1] != wt:
            bad.append(q)
    if bad:
        raise AlignmentError(
            f"{assay.assay_id}: structure and assay wildtype differ at positions {bad}", bad
        )


def generate_mutations(
    matrix: ScoreMatrix, assay: DmsAssay, filter_wrong: bool = True, offset: int = 0
) -> list[Candidate]:
    """Measured single mutants that the score matrix covers.

    ``offset`` converts assay numbering to structure numbering
    (``structure = assay + offset``).  Positions are reported in assay
    numbering.  With ``filter_wrong`` every position whose wildtype residue
    the scorer fails to recover is dropped.
    """
    check_alignment(matrix, assay, offset)
    rows = matrix.row_of()
    correct = matrix.correct
    out = []
    for rec in assay.records:
        r = rows.get(rec.position + offset)
        if r is None:
            continue
        if filter_wrong and not correct[r]:
            continue
        out.append(
            Candidate(
                rec.position,
                rec.wt,
                rec.mut,
                float(matrix.scores[r, index_of(rec.mut)]),
                float(matrix.scores[r, index_of(rec.wt)]),
            )
        )
    out.sort(key=lambda c: (c.position, index_of(c.mut)))
    return out


def _ranked(items: Iterable[Candidate]) -> list[RankedMutation]:
    return [RankedMutation(*c, rank=k) for k, c in enumerate(items, start=1)]


def rank_global(candidates: Sequence[Candidate]) -> list[RankedMutation]:
    """Score descending; ties by position then amino-acid index."""
    if not candidates:
        raise ValueError("no candidates to rank")
    return _ranked(sorted(candidates, key=lambda c: (-c.score, c.position, index_of(c.mut))))


def rank_positional(
    candidates: Sequence[Candidate], top_k: int = 3, epsilon: float = 0.0
) -> list[RankedMutation]:
    """Least-confident wildtype positions first, ``top_k`` mutants each.

    Each position is truncated to its ``top_k`` best mutants before positions
    are merged.  Positions whose wildtype scores are equal (within
    ``epsilon``, chained between neighbours in sorted order) form one tier,
    and inside a tier mutants are interleaved by score descending.  Remaining
    ties go to position, then amino-acid index.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    by_pos: dict[int, list[Candidate]] = {}
    for c in candidates:
        by_pos.setdefault(c.position, []).append(c)
    kept = {
        p: sorted(items, key=lambda c: (-c.score, index_of(c.mut)))[:top_k]
        for p, items in by_pos.items()
    }
    order = sorted(kept, key=lambda p: (kept[p][0].self_score, p))

    tiers: list[list[int]] = []
    for p in order:
        if tiers and kept[p][0].self_score - kept[tiers[-1][-1]][0].self_score <= epsilon:
            tiers[-1].append(p)
        else:
            tiers.append([p])

    result: list[Candidate] = []
    for tier in tiers:
        pooled = [c for p in tier for c in kept[p]]
        result.extend(sorted(pooled, key=lambda c: (-c.score, c.position, index_of(c.mut))))
    return _ranked(result)


RANKERS = {"global": rank_global, "positional": rank_positional}

TSV_HEADER = ["rank", "position", "wt", "mut", "score", "self_score"]


def write_ranked(ranked: Sequence[RankedMutation], stream: TextIO) -> None:
    w = csv.writer(stream, delimiter="\t", lineterminator="\n")
    w.writerow(TSV_HEADER)
    for m in ranked:
        w.writerow([m.rank, m.position, m.wt, m.mut, repr(m.score), repr(m.self_score)])


def read_ranked(stream: TextIO | str) -> list[RankedMutation]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.DictReader(stream, delimiter="\t")
    if reader.fieldnames != TSV_HEADER:
        raise ValueError(f"unexpected ranked-mutation header: {reader.fieldnames}")
    return [
        RankedMutation(
            position=int(r["position"]),
            wt=r["wt"],
            mut=r["mut"],
            score=float(r["score"]),
            self_score=float(r["self_score"]),
            rank=int(r["rank"]),
        )
        for r in reader
    ]

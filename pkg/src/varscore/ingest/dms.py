"""Deep-mutational-scanning assay files.

The on-disk format is a ProteinGym-style CSV with ``mutant`` and
``DMS_score`` columns, optionally preceded by ``# key: value`` metadata
lines::

    # id: BLAT_ECOLX
    # sequence: MSIQHFRVALIPFFAAFCLPVFA...
    # wt_fitness: 0.0
    # taxon: prokaryote
    mutant,DMS_score
    A24G,0.83

Without a ``sequence`` line the wildtype is rebuilt from a
``mutated_sequence`` column if one is present.
"""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field

from ..aa import CODES

log = logging.getLogger(__name__)

TAXA = ("human", "eukaryote", "prokaryote", "virus", "unknown")
_MUTANT = re.compile(r"^([A-Za-z])(\d+)([A-Za-z])$")


class DmsError(ValueError):
    pass


class DmsParseError(DmsError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class DmsConsistencyError(DmsError):
    pass


@dataclass(frozen=True)
class MutationRecord:
    position: int
    wt: str
    mut: str
    fitness: float

    @property
    def key(self) -> tuple[int, str]:
        return (self.position, self.mut)

    @property
    def token(self) -> str:
        return f"{self.wt}{self.position}{self.mut}"


@dataclass(frozen=True)
class DmsAssay:
    assay_id: str
    sequence: str
    records: tuple[MutationRecord, ...]
    wt_fitness: float = 0.0
    taxon: str = "unknown"
    skipped_multi: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.taxon not in TAXA:
            raise DmsError(f"unknown taxon {self.taxon!r}; expected one of {TAXA}")
        seen = set()
        bad = []
        for r in self.records:
            if r.key in seen:
                raise DmsConsistencyError(f"{self.assay_id}: duplicate mutation {r.token}")
            seen.add(r.key)
            if not 1 <= r.position <= len(self.sequence) or self.sequence[r.position - 1] != r.wt:
                bad.append(r.token)
        if bad:
            raise DmsConsistencyError(
                f"{self.assay_id}: wildtype letters disagree with the sequence at {', '.join(bad[:10])}"
            )

    def __len__(self):
        return len(self.records)

    @property
    def fitness(self) -> dict[tuple[int, str], float]:
        return {r.key: r.fitness for r in self.records}

    def is_better(self, fitness: float) -> bool:
        return fitness > self.wt_fitness

    @property
    def n_better(self) -> int:
        return sum(1 for r in self.records if r.fitness > self.wt_fitness)

    def mutated_sequence(self, record: MutationRecord) -> str:
        i = record.position - 1
        return self.sequence[:i] + record.mut + self.sequence[i + 1 :]


def parse_mutant(token: str, row: int | None = None) -> tuple[str, int, str]:
    m = _MUTANT.match(token.strip())
    if not m:
        raise DmsParseError(f"malformed mutant {token!r}", row)
    wt, pos, mut = m.group(1).upper(), int(m.group(2)), m.group(3).upper()
    for letter in (wt, mut):
        if letter not in CODES:
            raise DmsParseError(f"{letter!r} in {token!r} is not a canonical amino acid", row)
    if wt == mut:
        raise DmsParseError(f"{token!r} is not a substitution", row)
    if pos < 1:
        raise DmsParseError(f"position in {token!r} must be 1-based", row)
    return wt, pos, mut


def parse_dms(
    content: bytes | str,
    assay_id: str | None = None,
    wt_fitness: float | None = None,
) -> DmsAssay:
    if isinstance(content, bytes):
        content = content.decode("utf-8")
    lines = content.splitlines()
    meta: dict[str, str] = {}
    start = 0
    while start < len(lines) and (lines[start].startswith("#") or not lines[start].strip()):
        body = lines[start].lstrip("#").strip()
        if ":" in body:
            key, value = body.split(":", 1)
            meta[key.strip().lower()] = value.strip()
        start += 1

    reader = csv.DictReader(io.StringIO("\n".join(lines[start:])))
    fields = reader.fieldnames or []
    for col in ("mutant", "DMS_score"):
        if col not in fields:
            raise DmsParseError(f"missing column {col!r} (have {fields})")

    sequence = meta.get("sequence", "").upper() or None
    records = []
    skipped = 0
    for row in reader:
        rowno = start + reader.line_num
        token = (row.get("mutant") or "").strip()
        if ":" in token:
            skipped += 1
            continue
        wt, pos, mut = parse_mutant(token, rowno)
        try:
            fitness = float(row["DMS_score"])
        except (TypeError, ValueError):
            raise DmsParseError(f"bad DMS_score {row['DMS_score']!r}", rowno) from None
        if sequence is None and row.get("mutated_sequence"):
            mseq = row["mutated_sequence"].strip().upper()
            sequence = mseq[: pos - 1] + wt + mseq[pos:]
        if sequence is not None and (pos > len(sequence) or sequence[pos - 1] != wt):
            raise DmsConsistencyError(
                f"row {rowno}: {token} disagrees with the wildtype sequence"
                + (f" ({sequence[pos - 1]} at {pos})" if pos <= len(sequence) else "")
            )
        records.append(MutationRecord(pos, wt, mut, fitness))

    if sequence is None:
        raise DmsParseError("no wildtype sequence: add a '# sequence:' line or a mutated_sequence column")
    if skipped:
        log.info("skipped %d multi-substitution rows", skipped)
    if wt_fitness is None:
        wt_fitness = float(meta.get("wt_fitness", 0.0))
    return DmsAssay(
        assay_id=assay_id or meta.get("id", "assay"),
        sequence=sequence,
        records=tuple(records),
        wt_fitness=wt_fitness,
        taxon=meta.get("taxon", "unknown").lower(),
        skipped_multi=skipped,
    )


def format_dms(assay: DmsAssay) -> str:
    out = [
        f"# id: {assay.assay_id}",
        f"# sequence: {assay.sequence}",
        f"# wt_fitness: {assay.wt_fitness!r}",
        f"# taxon: {assay.taxon}",
        "mutant,DMS_score",
    ]
    out += [f"{r.token},{r.fitness!r}" for r in assay.records]
    return "\n".join(out) + "\n"

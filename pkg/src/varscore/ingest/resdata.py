"""On-disk RES dataset: structure files plus a targets CSV.

The targets file ``targets.csv`` has the columns
``structure_file,chain,residue_index,label`` where ``label`` is a one- or
three-letter amino-acid code that must match the residue in the structure.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..aa import AminoAcid
from ..structio import (
    DEFAULT_CUTOFF,
    AtomicGraph,
    MaskedGraph,
    StructureError,
    build_atomic_graph,
    format_pdb,
    mask_residue,
    parse_structure,
)

log = logging.getLogger(__name__)

TARGETS_FILE = "targets.csv"
TARGET_COLUMNS = ["structure_file", "chain", "residue_index", "label"]


class ResDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RowError:
    row: int            # 1-based data row (header excluded)
    kind: str           # "missing_structure" | "bad_structure" | "bad_residue" | "bad_row" | "consistency"
    message: str


@dataclass
class ResDataset:
    graphs: list[MaskedGraph]
    errors: list[RowError] = field(default_factory=list)

    def __len__(self):
        return len(self.graphs)

    def summary(self) -> str:
        counts: dict[str, int] = {}
        for e in self.errors:
            counts[e.kind] = counts.get(e.kind, 0) + 1
        detail = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
        return f"{len(self.graphs)} targets loaded, {len(self.errors)} rows failed" + (
            f" ({detail})" if detail else ""
        )

    def raise_on_error(self) -> None:
        if self.errors:
            lines = [f"row {e.row} [{e.kind}]: {e.message}" for e in self.errors]
            raise ResDatasetError(self.summary() + "\n" + "\n".join(lines))


def _label(text: str) -> AminoAcid:
    text = text.strip()
    if len(text) == 1:
        return AminoAcid.from_code(text.upper())
    return AminoAcid.from_three(text.upper())


def load_res_dataset(directory: str | os.PathLike, cutoff: float = DEFAULT_CUTOFF) -> ResDataset:
    """Parse every target row, collecting per-row failures instead of stopping.

    Each structure file is parsed once per chain and the resulting graph is
    shared by all rows that point at it.
    """
    root = Path(directory)
    targets = root / TARGETS_FILE
    if not targets.exists():
        raise ResDatasetError(f"{root} has no {TARGETS_FILE}")
    reader = csv.DictReader(io.StringIO(targets.read_text()))
    if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != TARGET_COLUMNS:
        raise ResDatasetError(f"{targets}: header must be {','.join(TARGET_COLUMNS)}")

    graphs: dict[tuple[str, str], AtomicGraph | RowError] = {}
    out = ResDataset(graphs=[])
    for row_no, rec in enumerate(reader, start=1):
        try:
            fname, chain = rec["structure_file"].strip(), rec["chain"].strip()
            position = int(rec["residue_index"])
            label = _label(rec["label"])
        except (KeyError, ValueError, AttributeError) as exc:
            out.errors.append(RowError(row_no, "bad_row", str(exc)))
            continue

        key = (fname, chain)
        if key not in graphs:
            path = root / fname
            if not path.exists():
                graphs[key] = RowError(row_no, "missing_structure", f"{fname} not found")
            else:
                try:
                    atoms = parse_structure(path.read_bytes())
                    graphs[key] = build_atomic_graph(atoms, cutoff=cutoff, chain=chain or None)
                except StructureError as exc:
                    graphs[key] = RowError(row_no, "bad_structure", f"{fname}: {exc}")
        graph = graphs[key]
        if isinstance(graph, RowError):
            out.errors.append(RowError(row_no, graph.kind, graph.message))
            continue

        if position not in graph.ca_map:
            out.errors.append(
                RowError(row_no, "bad_residue", f"{fname} chain {chain!r} has no residue {position}")
            )
            continue
        actual = graph.residue_type(position)
        if actual != label:
            out.errors.append(
                RowError(
                    row_no,
                    "consistency",
                    f"{fname} residue {position} is {actual.three}, targets file says {label.three}",
                )
            )
            continue
        masked = mask_residue(graph, position)
        masked.meta.update(structure_file=fname, chain=chain, row=row_no)
        out.graphs.append(masked)

    if out.errors:
        log.warning("%s: %s", root, out.summary())
    return out


def write_res_dataset(samples: Sequence[MaskedGraph], directory: str | os.PathLike) -> Path:
    """Write one PDB file per sample and a matching targets CSV.

    The masked graph is written as is, so the target residue keeps only its
    backbone atoms; reloading masks it again, which is a no-op.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(samples))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TARGET_COLUMNS)
    for k, sample in enumerate(samples):
        if sample.position is None:
            raise ValueError(f"sample {k} has no residue position")
        fname = f"sample_{k:0{width}d}.pdb"
        (root / fname).write_text(format_pdb(sample.graph.atoms))
        target = sample.graph.atoms[sample.target_node]
        w.writerow([fname, target.chain_id, sample.position, sample.true_label.code])
    (root / TARGETS_FILE).write_text(buf.getvalue())
    return root

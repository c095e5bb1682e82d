"""Structure parsing and point-cloud atomic graphs.

A structure becomes an :class:`AtomicGraph`: every heavy atom is a node and
two atoms are joined when they sit strictly closer than the cutoff (4.5 A by
default).  Residues are addressed by their chain position; ``ca_map`` sends a
position to the node index of its alpha carbon.
"""

from __future__ import annotations

import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aa import AminoAcid, is_standard_residue

log = logging.getLogger(__name__)

DEFAULT_CUTOFF = 4.5
BACKBONE_NAMES = frozenset({"N", "CA", "C", "O"})


class StructureError(ValueError):
    pass


class ParseError(StructureError):
    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EmptyStructureError(StructureError):
    pass


class UnknownPositionError(StructureError, KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class Atom:
    element: str
    name: str
    coords: tuple[float, float, float]
    residue_index: int
    chain_id: str
    residue_type: AminoAcid
    insertion_code: str = ""

    @property
    def residue_key(self) -> tuple[str, int, str]:
        return (self.chain_id, self.residue_index, self.insertion_code)

    @property
    def is_backbone(self) -> bool:
        return self.name in BACKBONE_NAMES


# ---------------------------------------------------------------------------
# parsing


def _element_from_name(name: str) -> str:
    stripped = name.strip().lstrip("0123456789")
    return stripped[:1].upper() if stripped else ""


def parse_structure(content: bytes | str, format: str = "pdb") -> list[Atom]:
    """Parse fixed-column ATOM records into a list of heavy atoms.

    Only the first MODEL is read.  HETATM records (ligands, water), hydrogens
    and non-standard residues are skipped; for alternate locations the first
    occurrence of each atom wins.
    """
    if format != "pdb":
        raise ValueError(f"unsupported structure format: {format!r}")
    if isinstance(content, bytes):
        content = content.decode("utf-8", errors="replace")

    atoms: list[Atom] = []
    seen: set[tuple] = set()
    n_altloc = 0
    for lineno, line in enumerate(io.StringIO(content), start=1):
        record = line[:6]
        if record.startswith("ENDMDL"):
            break
        if not record.startswith("ATOM  ") and record.rstrip() != "ATOM":
            continue
        line = line.rstrip("\r\n")
        if len(line) < 54:
            raise ParseError(f"ATOM record too short ({len(line)} columns)", lineno)
        name = line[12:16].strip()
        res_name = line[17:20].strip()
        chain_id = line[21]
        insertion_code = line[26].strip()
        try:
            residue_index = int(line[22:26])
        except ValueError:
            raise ParseError(f"bad residue number {line[22:26]!r}", lineno) from None
        try:
            x, y, z = float(line[30:38]), float(line[38:46]), float(line[46:54])
        except ValueError:
            raise ParseError(f"bad coordinates {line[30:54]!r}", lineno) from None
        if not all(math.isfinite(v) for v in (x, y, z)):
            raise ParseError("non-finite coordinate", lineno)
        if not name:
            raise ParseError("empty atom name", lineno)
        if not is_standard_residue(res_name):
            continue
        element = line[76:78].strip().upper() if len(line) >= 78 else ""
        if not element:
            element = _element_from_name(name)
        if element in ("H", "D"):
            continue
        key = (chain_id, residue_index, insertion_code, name)
        if key in seen:
            n_altloc += 1
            log.debug("line %d: alternate location of %s ignored", lineno, key)
            continue
        seen.add(key)
        atoms.append(
            Atom(
                element=element,
                name=name,
                coords=(x, y, z),
                residue_index=residue_index,
                chain_id=chain_id,
                residue_type=AminoAcid.from_three(res_name),
                insertion_code=insertion_code,
            )
        )
    if n_altloc:
        log.info("kept first of %d alternate-location duplicates", n_altloc)
    if not atoms:
        raise EmptyStructureError("no standard amino-acid ATOM records found")
    return atoms


def format_pdb(atoms: Iterable[Atom]) -> str:
    """Write atoms back out as fixed-column ATOM records."""
    out = []
    for serial, atom in enumerate(atoms, start=1):
        name = atom.name if len(atom.name) == 4 or len(atom.element) == 2 else f" {atom.name}"
        x, y, z = atom.coords
        out.append(
            f"ATOM  {serial % 100000:5d} {name:<4s} {atom.residue_type.three:>3s} "
            f"{atom.chain_id:1s}{atom.residue_index:4d}{atom.insertion_code or ' ':1s}   "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {atom.element:>2s}"
        )
    out.append("END")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# neighbour search

_HALF_SHELL = [
    off for off in itertools.product((-1, 0, 1), repeat=3) if off > (0, 0, 0)
]


def radius_pairs(coords: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unordered pairs ``i < j`` with ``|x_i - x_j| < cutoff``, via a uniform grid.

    Cells have side ``cutoff`` so any qualifying pair lies in the same or an
    adjacent cell; each cell is compared with itself and its 13 "forward"
    neighbours, which visits every adjacent pair of cells once.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    empty = (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64))
    if n < 2:
        return empty
    cells = np.floor((coords - coords.min(axis=0)) / cutoff).astype(np.int64)
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    keys, starts, counts = np.unique(cells[order], axis=0, return_index=True, return_counts=True)
    members = {
        tuple(k): order[s : s + c] for k, s, c in zip(keys.tolist(), starts, counts)
    }

    ii, jj = [], []
    for key, a in members.items():
        if len(a) > 1:
            r, c = np.triu_indices(len(a), k=1)
            ii.append(a[r])
            jj.append(a[c])
        for off in _HALF_SHELL:
            b = members.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if b is None:
                continue
            ii.append(np.repeat(a, len(b)))
            jj.append(np.tile(b, len(a)))
    if not ii:
        return empty
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    d = np.sqrt(((coords[i] - coords[j]) ** 2).sum(axis=1))
    keep = d < cutoff
    i, j, d = i[keep], j[keep], d[keep]
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    return lo, hi, d


# ---------------------------------------------------------------------------
# graphs


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AtomicGraph:
    """Atoms plus symmetric radius edges.

    Edges are stored as parallel arrays ``src``, ``dst``, ``dist`` holding both
    directions of every pair, sorted by ``(src, dst)``.
    """

    atoms: tuple[Atom, ...]
    coords: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    ca_map: Mapping[int, int]
    cutoff: float = DEFAULT_CUTOFF
    chain_id: str | None = None

    def __len__(self):
        return len(self.atoms)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.dist.tolist()))

    @property
    def positions(self) -> list[int]:
        return list(self.ca_map)

    def residue_type(self, position: int) -> AminoAcid:
        return self.atoms[self._ca(position)].residue_type

    def sequence(self) -> dict[int, AminoAcid]:
        return {p: self.atoms[i].residue_type for p, i in self.ca_map.items()}

    def _ca(self, position: int) -> int:
        try:
            return self.ca_map[position]
        except KeyError:
            raise UnknownPositionError(f"position {position} has no mapped CA") from None

    def subgraph(self, keep: np.ndarray) -> "AtomicGraph":
        """Induced subgraph on the boolean node mask ``keep`` (order preserved)."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.full(len(self.atoms), -1, dtype=np.int64)
        new_index[keep] = np.arange(int(keep.sum()))
        edge_keep = keep[self.src] & keep[self.dst]
        ca_map = {
            p: int(new_index[i]) for p, i in self.ca_map.items() if keep[i]
        }
        return AtomicGraph(
            atoms=tuple(a for a, k in zip(self.atoms, keep) if k),
            coords=_frozen(self.coords[keep].copy()),
            src=_frozen(new_index[self.src[edge_keep]]),
            dst=_frozen(new_index[self.dst[edge_keep]]),
            dist=_frozen(self.dist[edge_keep].copy()),
            ca_map=ca_map,
            cutoff=self.cutoff,
            chain_id=self.chain_id,
        )

    def with_coords(self, coords: np.ndarray) -> "AtomicGraph":
        """Same topology, new coordinates (only valid for distance-preserving maps)."""
        coords = np.asarray(coords, dtype=np.float64)
        atoms = tuple(
            Atom(a.element, a.name, tuple(map(float, x)), a.residue_index, a.chain_id,
                 a.residue_type, a.insertion_code)
            for a, x in zip(self.atoms, coords)
        )
        return build_atomic_graph(atoms, self.cutoff, chain=self.chain_id)

    def to_json(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "chain_id": self.chain_id,
            "atoms": [
                {
                    "element": a.element,
                    "name": a.name,
                    "coords": list(a.coords),
                    "residue_index": a.residue_index,
                    "insertion_code": a.insertion_code,
                    "chain_id": a.chain_id,
                    "residue_type": a.residue_type.code,
                }
                for a in self.atoms
            ],
            "edges": [[i, j, d] for i, j, d in self.edges],
            "ca_map": {str(p): i for p, i in self.ca_map.items()},
        }


def build_atomic_graph(
    atoms: Sequence[Atom], cutoff: float = DEFAULT_CUTOFF, chain: str | None = None
) -> AtomicGraph:
    """Connect every pair of atoms closer than ``cutoff``.

    ``ca_map`` covers the residues of ``chain`` (default: the chain of the first
    atom); other chains stay in the graph as environment.  Residues carrying an
    insertion code are kept as environment but get no position.
    """
    if not atoms:
        raise EmptyStructureError("cannot build a graph from zero atoms")
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    atoms = tuple(atoms)
    coords = np.array([a.coords for a in atoms], dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(coords).all():
        bad = int(np.argwhere(~np.isfinite(coords).all(axis=1))[0, 0])
        raise StructureError(f"atom {bad} ({atoms[bad].name}) has a non-finite coordinate")

    if chain is None:
        chain = atoms[0].chain_id
    ca_nodes: dict[int, int] = {}
    for idx, atom in enumerate(atoms):
        if atom.name != "CA" or atom.chain_id != chain or atom.insertion_code:
            continue
        if atom.residue_index in ca_nodes:
            raise StructureError(
                f"duplicate CA for chain {chain!r} residue {atom.residue_index}"
            )
        ca_nodes[atom.residue_index] = idx
    ca_map = {p: ca_nodes[p] for p in sorted(ca_nodes)}

    i, j, d = radius_pairs(coords, cutoff)
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    dist = np.concatenate([d, d])
    order = np.lexsort((dst, src))
    return AtomicGraph(
        atoms=atoms,
        coords=_frozen(coords),
        src=_frozen(src[order]),
        dst=_frozen(dst[order]),
        dist=_frozen(dist[order]),
        ca_map=ca_map,
        cutoff=float(cutoff),
        chain_id=chain,
    )


@dataclass(frozen=True, eq=False)
class MaskedGraph:
    """A graph with one residue's side chain removed and its CA marked as target."""

    graph: AtomicGraph
    target_node: int
    true_label: AminoAcid
    position: int | None = None
    meta: dict = field(default_factory=dict, compare=False)


def mask_residue(graph: AtomicGraph, position: int) -> MaskedGraph:
    ca = graph._ca(position)
    target = graph.atoms[ca]
    key = target.residue_key
    keep = np.array(
        [not (a.residue_key == key and a.name not in BACKBONE_NAMES) for a in graph.atoms],
        dtype=bool,
    )
    masked = graph.subgraph(keep)
    return MaskedGraph(
        graph=masked,
        target_node=masked.ca_map[position],
        true_label=target.residue_type,
        position=position,
    )


def extract_local_environment(graph: AtomicGraph, position: int, radius: float) -> AtomicGraph:
    """Atoms within ``radius`` (inclusive) of the CA at ``position``."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    ca = graph._ca(position)
    d = np.sqrt(((graph.coords - graph.coords[ca]) ** 2).sum(axis=1))
    return graph.subgraph(d <= radius)

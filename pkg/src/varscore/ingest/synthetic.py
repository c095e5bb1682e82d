"""Synthetic stand-ins for the RES training set and for protein structures.

``generate_synthetic_res`` emits small masked environments whose label is a
rotation-invariant function of geometry: a target residue (backbone only)
surrounded by ``k`` foreign atoms of a single element within 4.5 A of its
alpha carbon, plus a few distractor atoms further out.  The class index is
``4 * (k - 1) + element`` with ``k`` in 1..5 and element in C, N, O, S.
"""

from __future__ import annotations

import numpy as np

from ..aa import ALPHABET, AminoAcid
from ..structio import (
    DEFAULT_CUTOFF,
    Atom,
    MaskedGraph,
    build_atomic_graph,
    mask_residue,
)

SHELL_ELEMENTS = ("C", "N", "O", "S")
_SHELL_NAMES = {"C": "CG", "N": "NZ", "O": "OG", "S": "SD"}
MAX_SHELL = 5

# target backbone with CA at the origin (A)
_BACKBONE = {
    "N": (1.458, 0.0, 0.0),
    "CA": (0.0, 0.0, 0.0),
    "C": (-0.547, 1.424, 0.0),
    "O": (-0.547, 2.654, 0.0),
}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _place(rng, placed, r_lo, r_hi, min_sep, tries=2000):
    for _ in range(tries):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        p = direction * rng.uniform(r_lo, r_hi)
        if all(np.linalg.norm(p - q) >= min_sep for q in placed):
            return p
    return None


def label_for(count: int, element: str) -> AminoAcid:
    return ALPHABET[4 * (count - 1) + SHELL_ELEMENTS.index(element)]


def _sample(rng: np.random.Generator, label: int) -> MaskedGraph:
    count, element = label // 4 + 1, SHELL_ELEMENTS[label % 4]
    while True:
        placed = [np.array(x) for x in _BACKBONE.values()]
        shell = []
        for _ in range(count):
            p = _place(rng, placed, 2.9, 4.2, 2.2)
            if p is None:
                break
            placed.append(p)
            shell.append(p)
        if len(shell) < count:
            continue
        distractors = []
        for _ in range(rng.integers(0, 4)):
            p = _place(rng, placed, 5.0, 7.5, 2.2)
            if p is not None:
                placed.append(p)
                distractors.append((p, SHELL_ELEMENTS[rng.integers(0, 4)]))
        break

    rot = random_rotation(rng)
    shift = rng.uniform(-10.0, 10.0, size=3)
    move = lambda p: tuple(float(x) for x in (np.asarray(p) @ rot.T + shift))

    target_aa = ALPHABET[label]
    atoms = [
        Atom(name[0], name, move(xyz), 1, "A", target_aa) for name, xyz in _BACKBONE.items()
    ]
    filler = AminoAcid.from_code("G")
    for k, p in enumerate(shell):
        atoms.append(Atom(element, _SHELL_NAMES[element], move(p), 2 + k, "A", filler))
    for k, (p, el) in enumerate(distractors):
        atoms.append(Atom(el, _SHELL_NAMES[el], move(p), 2 + len(shell) + k, "A", filler))
    return mask_residue(build_atomic_graph(atoms), 1)


def generate_synthetic_res(n_samples: int, seed: int = 0) -> list[MaskedGraph]:
    """Class-balanced synthetic RES samples, bit-identical for a given seed."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % len(ALPHABET))
    return [_sample(rng, int(label)) for label in labels]


def decode_synthetic_label(masked: MaskedGraph, cutoff: float = DEFAULT_CUTOFF) -> AminoAcid | None:
    """Rule-based reading of the label from geometry alone (None if not decodable)."""
    graph = masked.graph
    target = graph.atoms[masked.target_node]
    centre = graph.coords[masked.target_node]
    d = np.sqrt(((graph.coords - centre) ** 2).sum(axis=1))
    shell = [
        a.element
        for a, di in zip(graph.atoms, d)
        if di < cutoff and a.residue_key != target.residue_key
    ]
    if not 1 <= len(shell) <= MAX_SHELL or len(set(shell)) != 1 or shell[0] not in SHELL_ELEMENTS:
        return None
    return label_for(len(shell), shell[0])


# ---------------------------------------------------------------------------
# synthetic protein-like structures


def synthetic_structure(
    n_residues: int, seed: int = 0, chain: str = "A", sequence: str | None = None
) -> list[Atom]:
    """A compact random-walk chain with N, CA, C, O and CB atoms per residue.

    Not physically realistic; it only needs sensible spacing so radius graphs
    have protein-like density.
    """
    rng = np.random.default_rng(seed)
    if sequence is None:
        sequence = "".join(rng.choice(list("ACDEFHIKLMNPQRSTVWY"), size=n_residues))
    if len(sequence) != n_residues:
        raise ValueError("sequence length must equal n_residues")
    cas = [np.zeros(3)]
    misses = 0
    while len(cas) < n_residues:
        # random direction pulled gently towards the origin keeps the walk compact
        step = rng.normal(size=3) - 0.1 * cas[-1]
        cand = cas[-1] + 3.8 * step / np.linalg.norm(step)
        if all(np.linalg.norm(cand - c) > 4.0 for c in cas[:-1]):
            cas.append(cand)
            misses = 0
        else:
            misses += 1
            if misses > 200 and len(cas) > 1:
                # boxed in: back off one residue
                cas.pop()
                misses = 0

    atoms = []
    for i, (ca, code) in enumerate(zip(cas, sequence), start=1):
        aa = AminoAcid.from_code(code)
        rot = random_rotation(rng)
        local = {k: np.asarray(v) for k, v in _BACKBONE.items() if k != "CA"}
        local["CB"] = np.array([-0.53, -0.76, 1.21])
        atoms.append(Atom("N", "N", tuple(map(float, ca + rot @ local["N"])), i, chain, aa))
        atoms.append(Atom("C", "CA", tuple(map(float, ca)), i, chain, aa))
        atoms.append(Atom("C", "C", tuple(map(float, ca + rot @ local["C"])), i, chain, aa))
        atoms.append(Atom("O", "O", tuple(map(float, ca + rot @ local["O"])), i, chain, aa))
        if code != "G":
            atoms.append(Atom("C", "CB", tuple(map(float, ca + rot @ local["CB"])), i, chain, aa))
    return atoms

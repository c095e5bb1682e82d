"""The 20-letter amino-acid alphabet and the BLOSUM62 substitution table.

Every 20-vector in the package (score rows, one-hot blocks, confusion
matrices) is indexed in the alphabetical single-letter order of ``CODES``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CODES = "ACDEFGHIKLMNPQRSTVWY"

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items()}

_INDEX = {c: i for i, c in enumerate(CODES)}


@dataclass(frozen=True, order=True)
class AminoAcid:
    index: int
    code: str

    def __post_init__(self):
        if not (0 <= self.index < 20) or CODES[self.index] != self.code:
            raise ValueError(f"inconsistent amino acid ({self.code!r}, {self.index})")

    @classmethod
    def from_code(cls, code: str) -> "AminoAcid":
        try:
            return _BY_CODE[code.upper()]
        except KeyError:
            raise ValueError(f"not a canonical amino acid: {code!r}") from None

    @classmethod
    def from_index(cls, index: int) -> "AminoAcid":
        if not 0 <= index < 20:
            raise ValueError(f"amino-acid index out of range: {index}")
        return _ALPHABET[index]

    @classmethod
    def from_three(cls, name: str) -> "AminoAcid":
        try:
            return _BY_CODE[THREE_TO_ONE[name.upper()]]
        except KeyError:
            raise ValueError(f"not a standard residue name: {name!r}") from None

    @property
    def three(self) -> str:
        return ONE_TO_THREE[self.code]

    def __str__(self):
        return self.code


_ALPHABET = tuple(AminoAcid(i, c) for i, c in enumerate(CODES))
_BY_CODE = {a.code: a for a in _ALPHABET}
ALPHABET = _ALPHABET


def index_of(code: str) -> int:
    try:
        return _INDEX[code.upper()]
    except KeyError:
        raise ValueError(f"not a canonical amino acid: {code!r}") from None


def is_standard_residue(name: str) -> bool:
    return name.upper() in THREE_TO_ONE


# Henikoff & Henikoff BLOSUM62, as distributed by NCBI (row/column order below).
_BLOSUM_ORDER = "ARNDCQEGHILKMFPSTWYV"
_BLOSUM_ROWS = """
 4 -1 -2 -2  0 -1 -1  0 -2 -1 -1 -1 -1 -2 -1  1  0 -3 -2  0
-1  5  0 -2 -3  1  0 -2  0 -3 -2  2 -1 -3 -2 -1 -1 -3 -2 -3
-2  0  6  1 -3  0  0  0  1 -3 -3  0 -2 -3 -2  1  0 -4 -2 -3
-2 -2  1  6 -3  0  2 -1 -1 -3 -4 -1 -3 -3 -1  0 -1 -4 -3 -3
 0 -3 -3 -3  9 -3 -4 -3 -3 -1 -1 -3 -1 -2 -3 -1 -1 -2 -2 -1
-1  1  0  0 -3  5  2 -2  0 -3 -2  1  0 -3 -1  0 -1 -2 -1 -2
-1  0  0  2 -4  2  5 -2  0 -3 -3  1 -2 -3 -1  0 -1 -3 -2 -2
 0 -2  0 -1 -3 -2 -2  6 -2 -4 -4 -2 -3 -3 -2  0 -2 -2 -3 -3
-2  0  1 -1 -3  0  0 -2  8 -3 -3 -1 -2 -1 -2 -1 -2 -2  2 -3
-1 -3 -3 -3 -1 -3 -3 -4 -3  4  2 -3  1  0 -3 -2 -1 -3 -1  3
-1 -2 -3 -4 -1 -2 -3 -4 -3  2  4 -2  2  0 -3 -2 -1 -2 -1  1
-1  2  0 -1 -3  1  1 -2 -1 -3 -2  5 -1 -3 -1  0 -1 -3 -2 -2
-1 -1 -2 -3 -1  0 -2 -3 -2  1  2 -1  5  0 -2 -1 -1 -1 -1  1
-2 -3 -3 -3 -2 -3 -3 -3 -1  0  0 -3  0  6 -4 -2 -2  1  3 -1
-1 -2 -2 -1 -3 -1 -1 -2 -2 -3 -3 -1 -2 -4  7 -1 -1 -4 -3 -2
 1 -1  1  0 -1  0  0  0 -1 -2 -2  0 -1 -2 -1  4  1 -3 -2 -2
 0 -1  0 -1 -1 -1 -1 -2 -2 -1 -1 -1 -1 -2 -1  1  5 -2 -2  0
-3 -3 -4 -4 -2 -2 -3 -2 -2 -3 -2 -3 -1  1 -4 -3 -2 11  2 -3
-2 -2 -2 -3 -2 -1 -2 -3  2 -1 -1 -2 -1  3 -3 -2 -2  2  7 -1
 0 -3 -3 -3 -1 -2 -2 -3 -3  3  1 -2  1 -1 -2 -2  0 -3 -1  4
"""


def _blosum62() -> np.ndarray:
    raw = np.array([[int(v) for v in row.split()] for row in _BLOSUM_ROWS.strip().splitlines()])
    perm = [_BLOSUM_ORDER.index(c) for c in CODES]
    table = raw[np.ix_(perm, perm)]
    table.setflags(write=False)
    return table


BLOSUM62 = _blosum62()

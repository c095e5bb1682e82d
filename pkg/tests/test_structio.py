import json

import numpy as np
import pytest

from oracles import brute_pairs
from varscore.aa import AminoAcid
from varscore.ingest import synthetic_structure
from varscore.structio import (
    Atom,
    EmptyStructureError,
    ParseError,
    StructureError,
    UnknownPositionError,
    build_atomic_graph,
    extract_local_environment,
    format_pdb,
    mask_residue,
    parse_structure,
    radius_pairs,
)


def atom_line(serial, name, res, chain, resseq, x, y, z, element="", record="ATOM  ", icode=" ", altloc=" "):
    name_field = f" {name:<3s}" if len(name) < 4 else name
    return (
        f"{record}{serial:5d} {name_field}{altloc}{res:>3s} {chain}{resseq:4d}{icode}   "
        f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {element:>2s}"
    )


SMALL_PDB = "\n".join(
    [
        "HEADER    TEST",
        "MODEL        1",
        atom_line(1, "N", "ALA", "A", 1, 0.0, 0.0, 0.0, "N"),
        atom_line(2, "CA", "ALA", "A", 1, 1.458, 0.0, 0.0, "C"),
        atom_line(3, "C", "ALA", "A", 1, 2.0, 1.4, 0.0, "C"),
        atom_line(4, "O", "ALA", "A", 1, 1.3, 2.4, 0.0, "O"),
        atom_line(5, "CB", "ALA", "A", 1, 2.0, -0.8, 1.2, "C"),
        atom_line(6, "H", "ALA", "A", 1, -0.5, 0.5, 0.0, "H"),
        atom_line(7, "N", "GLY", "A", 2, 3.3, 1.5, 0.0, "N"),
        atom_line(8, "CA", "GLY", "A", 2, 4.0, 2.7, 0.0, "C", altloc="A"),
        atom_line(9, "CA", "GLY", "A", 2, 4.1, 2.8, 0.1, "C", altloc="B"),
        atom_line(10, "C", "GLY", "A", 2, 5.5, 2.5, 0.0, "C"),
        atom_line(11, "O", "GLY", "A", 2, 6.1, 1.5, 0.0, "O"),
        atom_line(12, "CA", "SER", "A", 2, 7.0, 0.0, 0.0, "C", icode="A"),
        atom_line(13, "O", "HOH", "A", 100, 9.0, 9.0, 9.0, "O", record="HETATM"),
        atom_line(14, "CA", "MSE", "A", 3, 8.0, 8.0, 8.0, "C"),
        "TER",
        "ENDMDL",
        "MODEL        2",
        atom_line(1, "N", "ALA", "A", 1, 50.0, 0.0, 0.0, "N"),
        "ENDMDL",
    ]
)


def test_parse_filters_records():
    atoms = parse_structure(SMALL_PDB)
    names = [(a.residue_index, a.insertion_code, a.name) for a in atoms]
    assert names == [
        (1, "", "N"), (1, "", "CA"), (1, "", "C"), (1, "", "O"), (1, "", "CB"),
        (2, "", "N"), (2, "", "CA"), (2, "", "C"), (2, "", "O"),
        (2, "A", "CA"),
    ]
    gly_ca = atoms[6]
    assert gly_ca.coords == (4.0, 2.7, 0.0)  # first altloc wins
    assert gly_ca.residue_type == AminoAcid.from_code("G")
    assert atoms[4].is_backbone is False and atoms[1].is_backbone


def test_element_falls_back_to_atom_name():
    line = atom_line(1, "CA", "ALA", "A", 1, 0.0, 0.0, 0.0)[:66]
    (atom,) = parse_structure(line)
    assert atom.element == "C"


@pytest.mark.parametrize(
    "bad,lineno",
    [
        ("ATOM      1  CA  ALA A   1       0.000   0.000", 1),
        ("REMARK\n" + atom_line(1, "CA", "ALA", "A", 1, 0.0, 0.0, 0.0).replace("   0.000", "   x.000", 1), 2),
    ],
)
def test_parse_errors_carry_line_number(bad, lineno):
    with pytest.raises(ParseError) as info:
        parse_structure(bad)
    assert info.value.line_number == lineno


def test_empty_structure():
    with pytest.raises(EmptyStructureError):
        parse_structure("HEADER only\nEND\n")


def test_format_roundtrip_and_line_count():
    atoms = synthetic_structure(25, seed=7)
    text = format_pdb(atoms)
    # one ATOM line per heavy atom, plus END
    assert sum(1 for ln in text.splitlines() if ln.startswith("ATOM")) == len(atoms)
    back = parse_structure(text)
    assert len(back) == len(atoms)
    for a, b in zip(atoms, back):
        assert (a.name, a.residue_index, a.residue_type, a.element) == (b.name, b.residue_index, b.residue_type, b.element)
        assert np.allclose(a.coords, b.coords, atol=5e-4)


def _two_atoms(d):
    aa = AminoAcid.from_code("A")
    return [
        Atom("C", "CA", (0.0, 0.0, 0.0), 1, "A", aa),
        Atom("C", "CA", (d, 0.0, 0.0), 2, "A", aa),
    ]


def test_cutoff_is_strict():
    assert build_atomic_graph(_two_atoms(4.5)).num_edges == 0
    g = build_atomic_graph(_two_atoms(4.4999))
    assert g.edges == [(0, 1, pytest.approx(4.4999)), (1, 0, pytest.approx(4.4999))]


@pytest.mark.parametrize("seed", range(5))
def test_grid_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 500))
    coords = rng.uniform(-15, 15, size=(n, 3))
    # put some points exactly on cell boundaries and at exact cutoff distance
    coords[: n // 10] = np.round(coords[: n // 10] / 4.5) * 4.5
    lo, hi, d = radius_pairs(coords, 4.5)
    assert set(zip(lo.tolist(), hi.tolist())) == brute_pairs(coords, 4.5)
    assert np.allclose(d, np.linalg.norm(coords[lo] - coords[hi], axis=1))


def test_graph_edges_symmetric_and_sorted(small_graph):
    src, dst = small_graph.src, small_graph.dst
    pairs = list(zip(src.tolist(), dst.tolist()))
    assert pairs == sorted(pairs)
    assert set(pairs) == {(b, a) for a, b in pairs}
    assert (small_graph.dist < 4.5).all()


def test_permutation_consistency(small_graph):
    atoms = list(small_graph.atoms)
    perm = np.random.default_rng(0).permutation(len(atoms))
    g2 = build_atomic_graph([atoms[i] for i in perm])
    # node k of g2 is node perm[k] of the original graph
    mapped = {(int(perm[a]), int(perm[b])) for a, b in zip(g2.src, g2.dst)}
    assert mapped == set(zip(small_graph.src.tolist(), small_graph.dst.tolist()))
    assert {p: int(perm[i]) for p, i in g2.ca_map.items()} == dict(small_graph.ca_map)


def test_ca_map_and_chain_selection():
    a = synthetic_structure(4, seed=1, chain="A")
    b = synthetic_structure(3, seed=2, chain="B")
    b = [Atom(x.element, x.name, tuple(c + 30 for c in x.coords), x.residue_index, "B", x.residue_type) for x in b]
    g = build_atomic_graph(a + b)
    assert list(g.ca_map) == [1, 2, 3, 4]
    gb = build_atomic_graph(a + b, chain="B")
    assert list(gb.ca_map) == [1, 2, 3]
    assert all(gb.atoms[i].chain_id == "B" for i in gb.ca_map.values())


def test_duplicate_ca_and_nonfinite_rejected():
    atoms = _two_atoms(3.0)
    dup = [atoms[0], Atom("C", "CA", (1.0, 0, 0), 1, "A", atoms[0].residue_type)]
    with pytest.raises(StructureError):
        build_atomic_graph(dup)
    with pytest.raises(StructureError):
        build_atomic_graph([Atom("C", "CA", (np.nan, 0.0, 0.0), 1, "A", atoms[0].residue_type)])


def test_insertion_code_residue_has_no_position():
    g = build_atomic_graph(parse_structure(SMALL_PDB))
    assert list(g.ca_map) == [1, 2]
    assert len(g) == 10


def test_mask_removes_only_target_side_chain(small_graph):
    for pos in small_graph.positions:
        masked = mask_residue(small_graph, pos)
        target = small_graph.atoms[small_graph.ca_map[pos]]
        removed = [a for a in small_graph.atoms if a.residue_key == target.residue_key and not a.is_backbone]
        assert len(masked.graph) == len(small_graph) - len(removed)
        assert masked.graph.atoms[masked.target_node].name == "CA"
        assert masked.true_label == target.residue_type
        if target.residue_type.code == "G":
            assert len(masked.graph) == len(small_graph)
        if target.residue_type.code == "A":
            assert len(removed) == 1 and removed[0].name == "CB"


def test_mask_edges_are_induced_subgraph(small_graph):
    masked = mask_residue(small_graph, small_graph.positions[5]).graph
    rebuilt = build_atomic_graph(list(masked.atoms))
    assert np.array_equal(masked.src, rebuilt.src) and np.array_equal(masked.dst, rebuilt.dst)
    assert dict(masked.ca_map) == dict(rebuilt.ca_map)


def test_unknown_position(small_graph):
    with pytest.raises(UnknownPositionError):
        mask_residue(small_graph, 999)


def test_local_environment_radius_inclusive():
    aa = AminoAcid.from_code("A")
    atoms = [
        Atom("C", "CA", (0.0, 0.0, 0.0), 1, "A", aa),
        Atom("C", "CA", (6.0, 0.0, 0.0), 2, "A", aa),
        Atom("C", "CA", (6.5, 0.0, 0.0), 3, "A", aa),
    ]
    g = build_atomic_graph(atoms)
    env = extract_local_environment(g, 1, 6.0)
    assert [a.residue_index for a in env.atoms] == [1, 2]
    with pytest.raises(ValueError):
        extract_local_environment(g, 1, 0.0)


def test_graph_json(small_graph):
    dumped = json.loads(json.dumps(small_graph.to_json()))
    assert len(dumped["atoms"]) == len(small_graph)
    assert len(dumped["edges"]) == small_graph.num_edges
    assert {int(k): v for k, v in dumped["ca_map"].items()} == dict(small_graph.ca_map)


def test_with_coords_rigid_motion_keeps_edges(small_graph):
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = small_graph.with_coords(small_graph.coords @ q.T + rng.normal(size=3))
    # rounding at the cutoff could flip a borderline edge; none are that close here
    assert np.abs(small_graph.dist - 4.5).min() > 1e-6
    assert np.array_equal(moved.src, small_graph.src) and np.array_equal(moved.dst, small_graph.dst)

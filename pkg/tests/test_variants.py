import io

import numpy as np
import pytest

from conftest import TOY_SPEC
from oracles import AA, candidates_oracle, global_oracle, positional_oracle, random_case
from varscore.ingest import DmsAssay, MutationRecord
from varscore.scorer import build_scorer
from varscore.variants import (
    AlignmentError,
    Candidate,
    ScoreMatrix,
    check_alignment,
    generate_mutations,
    rank_global,
    rank_positional,
    read_ranked,
    score_structure,
    write_ranked,
)


def build(seq, rows, records, offset):
    positions = sorted(rows)
    matrix = ScoreMatrix(
        positions=np.array(positions),
        wildtype="".join(seq[p - offset - 1] for p in positions),
        scores=np.array([rows[p] for p in positions]),
    )
    assay = DmsAssay("rand", seq, tuple(MutationRecord(*r) for r in records))
    return matrix, assay


def as_tuples(ranked):
    return [(m.position, m.wt, m.mut, m.score, m.self_score) for m in ranked]


@pytest.mark.parametrize("seed", range(40))
@pytest.mark.parametrize("filter_wrong", [True, False])
def test_rankings_match_comparator_oracles(seed, filter_wrong):
    rng = np.random.default_rng(seed)
    case = random_case(rng, quantize=seed % 2 == 1)
    matrix, assay = build(*case)
    cands = generate_mutations(matrix, assay, filter_wrong=filter_wrong, offset=case[3])
    expected = candidates_oracle(*case, filter_wrong=filter_wrong)
    assert sorted(cands) == sorted(expected)
    if not cands:
        return
    assert as_tuples(rank_global(cands)) == global_oracle(expected)
    assert as_tuples(rank_positional(cands)) == positional_oracle(expected)


def test_ranks_are_consecutive():
    rng = np.random.default_rng(0)
    case = random_case(rng)
    matrix, assay = build(*case)
    ranked = rank_positional(generate_mutations(matrix, assay, filter_wrong=False, offset=case[3]))
    assert [m.rank for m in ranked] == list(range(1, len(ranked) + 1))


def test_positional_keeps_at_most_three_per_position():
    rng = np.random.default_rng(1)
    case = random_case(rng)
    matrix, assay = build(*case)
    ranked = rank_positional(generate_mutations(matrix, assay, filter_wrong=False, offset=case[3]))
    counts = {}
    for m in ranked:
        counts[m.position] = counts.get(m.position, 0) + 1
    assert max(counts.values()) <= 3


def test_filter_drops_exactly_wrong_positions():
    rng = np.random.default_rng(2)
    for _ in range(10):
        case = random_case(rng)
        matrix, assay = build(*case)
        kept = generate_mutations(matrix, assay, filter_wrong=True, offset=case[3])
        everything = generate_mutations(matrix, assay, filter_wrong=False, offset=case[3])
        assert set(kept) <= set(everything)
        wrong = {int(p) - case[3] for p, ok in zip(matrix.positions, matrix.correct) if not ok}
        assert {c.position for c in set(everything) - set(kept)} == wrong & {c.position for c in everything}


def test_constant_shift_invariance():
    rng = np.random.default_rng(3)
    case = random_case(rng)
    matrix, assay = build(*case)
    shifted = ScoreMatrix(matrix.positions, matrix.wildtype, matrix.scores + 7.25)
    a = generate_mutations(matrix, assay, offset=case[3])
    b = generate_mutations(shifted, assay, offset=case[3])
    for ranker in (rank_global, rank_positional):
        ka = [(m.position, m.mut) for m in ranker(a)]
        kb = [(m.position, m.mut) for m in ranker(b)]
        assert ka == kb


def test_epsilon_merges_close_wildtype_scores():
    c = [
        Candidate(1, "A", "C", 0.9, 0.50),
        Candidate(1, "A", "D", 0.1, 0.50),
        Candidate(2, "G", "C", 0.8, 0.51),
    ]
    exact = [(m.position, m.mut) for m in rank_positional(c)]
    assert exact == [(1, "C"), (1, "D"), (2, "C")]
    loose = [(m.position, m.mut) for m in rank_positional(c, epsilon=0.02)]
    assert loose == [(1, "C"), (2, "C"), (1, "D")]


def test_empty_candidates_rejected():
    with pytest.raises(ValueError):
        rank_global([])
    with pytest.raises(ValueError):
        rank_positional([])


def test_alignment_error_lists_positions():
    matrix = ScoreMatrix(np.array([1, 2, 3]), "ACD", np.zeros((3, 20)))
    assay = DmsAssay("x", "ACE", (MutationRecord(1, "A", "C", 0.0),))
    with pytest.raises(AlignmentError) as info:
        check_alignment(matrix, assay)
    assert info.value.positions == [3]
    check_alignment(matrix, DmsAssay("y", "GACD", ()), offset=-1)


def test_score_matrix_csv_roundtrip():
    rng = np.random.default_rng(4)
    m = ScoreMatrix(np.array([3, 5, 9]), "KLW", rng.normal(size=(3, 20)))
    text = m.to_csv_string()
    assert text.splitlines()[0] == "position,wt_aa," + ",".join(AA)
    back = ScoreMatrix.from_csv(text)
    assert np.array_equal(back.scores, m.scores)
    assert np.array_equal(back.positions, m.positions) and back.wildtype == m.wildtype
    assert back.to_csv_string() == text


def test_ranked_tsv_roundtrip():
    ranked = rank_global([Candidate(1, "A", "C", 0.123456789012345, -1.5), Candidate(2, "G", "W", 2.0, 0.0)])
    buf = io.StringIO()
    write_ranked(ranked, buf)
    assert buf.getvalue().splitlines()[0] == "rank\tposition\twt\tmut\tscore\tself_score"
    assert read_ranked(buf.getvalue()) == ranked


def test_score_structure_full_and_local(small_graph):
    model = build_scorer(TOY_SPEC, seed=0)
    full = score_structure(model, small_graph)
    assert full.scores.shape == (len(small_graph.ca_map), 20)
    assert full.wildtype == "".join(small_graph.residue_type(p).code for p in small_graph.positions)
    assert full.provenance["environment"] == "full"
    # two hops of 4.5 A never leave a 9 A sphere, so a 10 A cut changes nothing
    local = score_structure(model, small_graph, mode="local", radius=10.0)
    assert np.allclose(local.scores, full.scores, rtol=1e-10, atol=1e-12)
    tight = score_structure(model, small_graph, mode="local", radius=5.0)
    assert not np.allclose(tight.scores, full.scores)
    with pytest.raises(ValueError):
        score_structure(model, small_graph, mode="local")

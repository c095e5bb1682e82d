import csv
import json

import numpy as np
import pytest
import torch

from varscore.cli import RunConfig, load_config, main
from varscore.fitness import METRICS
from varscore.ingest import StructureSource, synthetic_structure
from varscore.ingest.fetch import cache_path
from varscore.scorer import FeatureSpec, build_scorer
from varscore.scorer.checkpoint import load_checkpoint
from varscore.structio import format_pdb
from varscore.variants import ScoreMatrix, read_ranked
from workspace import make_workspace


@pytest.fixture
def ws(tmp_path):
    return make_workspace(tmp_path)


def rows(path, delimiter=","):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter=delimiter))


# ---------------------------------------------------------------------------
# fetch


def test_fetch_empty_list(tmp_path):
    out = tmp_path / "out"
    assert main(["fetch", "--out-dir", str(out), "--cache-dir", str(tmp_path / "c")]) == 0
    text = (out / "manifest.csv").read_text()
    assert text.splitlines() == ["id,kind,identifier,status,source,path,sha256,message"]
    assert (out / "manifest.csv.provenance.json").exists()


def test_fetch_cached_local_and_unknown(tmp_path):
    cache = tmp_path / "cache"
    cached = cache_path(StructureSource.experimental("1abc"), cache)
    cached.parent.mkdir(parents=True)
    cached.write_text(format_pdb(synthetic_structure(6, seed=0)))
    local = tmp_path / "mine.pdb"
    local.write_text(format_pdb(synthetic_structure(6, seed=1)))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"endpoints": {"experimental": "file:///nonexistent/{id}.pdb"}}))

    code = main(["fetch", "pdb:1abc", str(local), "pdb:9zzz", "--config", str(cfg),
                 "--cache-dir", str(cache), "--out-dir", str(tmp_path / "out")])
    assert code == 1
    manifest = {r["id"]: r for r in rows(tmp_path / "out" / "manifest.csv")}
    assert manifest["pdb:1abc"]["source"] == "cache" and manifest["pdb:1abc"]["status"] == "ok"
    assert manifest[str(local)]["source"] == "local"
    assert manifest["pdb:9zzz"]["status"] == "failed" and manifest["pdb:9zzz"]["message"]


# ---------------------------------------------------------------------------
# graph and scoring


def test_graph_command(ws):
    assert main(["graph", str(ws.structure), "--out-dir", str(ws.out("g"))]) == 0
    data = json.loads(ws.out("g").joinpath("graph.json").read_text())
    assert isinstance(data, dict)


def test_score_command(ws):
    assert main(["score", str(ws.structure), "--checkpoint", str(ws.checkpoint), "--out-dir", str(ws.out("s"))]) == 0
    matrix = ScoreMatrix.from_csv(ws.out("s").joinpath("scores.csv").read_text())
    assert len(matrix) == len(ws.sequence) and matrix.wildtype == ws.sequence
    prov = json.loads(ws.out("s").joinpath("scores.csv.provenance.json").read_text())
    assert set(prov) >= {"command", "config_hash", "seed", "checkpoint_sha256", "version"}


def test_local_environment_requires_radius(ws):
    args = ["score", str(ws.structure), "--checkpoint", str(ws.checkpoint), "--out-dir", str(ws.out("s"))]
    assert main(args + ["--environment", "local"]) == 1
    assert main(args + ["--environment", "local", "--radius", "12"]) == 0


# ---------------------------------------------------------------------------
# ranking


def rank(ws, name, *extra):
    args = ["rank", str(ws.structure), str(ws.assay), "--checkpoint", str(ws.checkpoint),
            "--out-dir", str(ws.out(name)), *extra]
    assert main(args) == 0
    return read_ranked(ws.out(name).joinpath("ranked.tsv").read_text())


def test_rank_positional_default(ws):
    ranked = rank(ws, "r", "--keep-intermediates")
    counts = {}
    for m in ranked:
        counts[m.position] = counts.get(m.position, 0) + 1
    assert max(counts.values()) <= 3
    report = json.loads(ws.out("r").joinpath("report.json").read_text())
    assert report["provenance"]["strategy"] == "positional"
    assert ws.out("r").joinpath("scores.csv").exists() and ws.out("r").joinpath("candidates.csv").exists()


def test_filter_flag_differs_by_wrong_positions(ws):
    kept = rank(ws, "a", "--strategy", "global", "--keep-intermediates")
    everything = rank(ws, "b", "--strategy", "global", "--no-filter-wrong")
    matrix = ScoreMatrix.from_csv(ws.out("a").joinpath("scores.csv").read_text())
    wrong = {int(p) for p, ok in zip(matrix.positions, matrix.correct) if not ok}
    assert wrong, "fixture should leave some positions mispredicted"
    assert {m.position for m in everything} - {m.position for m in kept} == wrong
    assert len(everything) == len(kept) + 19 * len(wrong)


def test_rank_from_scores_and_evaluate_agree(ws):
    assert main(["score", str(ws.structure), "--checkpoint", str(ws.checkpoint), "--out-dir", str(ws.out("s"))]) == 0
    scores = ws.out("s") / "scores.csv"
    assert main(["rank", str(ws.assay), "--scores", str(scores), "--out-dir", str(ws.out("r"))]) == 0
    direct = rank(ws, "d")
    assert read_ranked(ws.out("r").joinpath("ranked.tsv").read_text()) == direct
    ranked = ws.out("r") / "ranked.tsv"
    assert main(["evaluate", str(ws.assay), str(ranked), "--out-dir", str(ws.out("e"))]) == 0
    a = json.loads(ws.out("r").joinpath("report.json").read_text())
    b = json.loads(ws.out("e").joinpath("report.json").read_text())
    a.pop("provenance"), b.pop("provenance")
    assert a == b

    manifest = ws.root / "manifest.csv"
    manifest.write_text(f"model,strategy,assay,ranked\ntoy,positional,{ws.assay},{ranked}\n")
    assert main(["evaluate", "--manifest", str(manifest), "--out-dir", str(ws.out("m"))]) == 0
    summary = rows(ws.out("m") / "summary.csv")
    assert len(summary) == 1 and float(summary[0]["top10_precision"]) == a["top10_precision"]


def test_alignment_error_reports_positions(ws, capsys):
    text = ws.assay.read_text().replace(f"# sequence: {ws.sequence}", f"# sequence: W{ws.sequence[1:]}")
    bad = ws.root / "bad.csv"
    bad.write_text("\n".join(line for line in text.splitlines() if not line.startswith(f"{ws.sequence[0]}1")) + "\n")
    code = main(["rank", str(ws.structure), str(bad), "--checkpoint", str(ws.checkpoint), "--out-dir", str(ws.out("x"))])
    assert code == 1
    assert "positions: [1]" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["rank", "missing.csv", "--scores", "nope.csv"],
        ["score", "protein.pdb"],  # no checkpoint
        ["score", "protein.pdb", "--checkpoint", "absent.npz"],
        ["regress", "assay.csv", "absent.csv"],
        ["train-res"],
    ],
)
def test_error_exit_codes(ws, monkeypatch, argv):
    monkeypatch.chdir(ws.root)
    assert main(argv + ["--out-dir", str(ws.out("err"))]) == 1


# ---------------------------------------------------------------------------
# regression


def regress(ws, name, *extra):
    assert main(["score", str(ws.structure), "--checkpoint", str(ws.checkpoint), "--out-dir", str(ws.out("s"))]) == 0
    args = ["regress", str(ws.assay), str(ws.out("s") / "scores.csv"), "--sizes", "24,48", "--no-plots",
            "--out-dir", str(ws.out(name)), *extra]
    assert main(args) == 0
    return ws.out(name)


def test_regress_outputs(ws):
    out = regress(ws, "g", "--repeats", "2")
    for variant in ("augmented", "baseline"):
        assert len(rows(out / f"curve_one_hot_{variant}.csv")) == 2 * 2 * len(METRICS)
        assert len(rows(out / f"aggregate_one_hot_{variant}.csv")) == 2 * len(METRICS)
    assert not (out / "curve_aa_index_augmented.csv").exists()


def test_regress_is_deterministic(ws):
    a = regress(ws, "a", "--repeats", "2")
    b = regress(ws, "b", "--repeats", "2", "--workers", "2")
    for path in sorted(a.glob("*.csv")):
        assert path.read_bytes() == (b / path.name).read_bytes()


def test_flags_override_config_file(ws):
    cfg = ws.root / "cfg.json"
    cfg.write_text(json.dumps({"repeats": 3, "lam": 0.5}))
    out = regress(ws, "c", "--config", str(cfg), "--repeats", "1")
    assert len(rows(out / "curve_one_hot_augmented.csv")) == 2 * 1 * len(METRICS)
    config = load_config(str(cfg), {"repeats": 1})
    assert config.lam == 0.5 and config.repeats == 1
    assert config.digest() == RunConfig(lam=0.5, repeats=1, out_dir="elsewhere").digest()
    assert config.digest() != RunConfig(lam=0.5, repeats=2).digest()


def test_unknown_config_key(ws):
    cfg = ws.root / "cfg.json"
    cfg.write_text(json.dumps({"repeat": 3}))
    assert main(["regress", str(ws.assay), "x.csv", "--config", str(cfg)]) == 1


# ---------------------------------------------------------------------------
# training and confusion


def test_train_zero_epochs_keeps_initialization(tmp_path):
    out = tmp_path / "t"
    assert main(["train-res", "--synthetic", "30", "--epochs", "0", "--seed", "4", "--out-dir", str(out)]) == 0
    model, meta = load_checkpoint(out / "checkpoint.npz")
    init = build_scorer(FeatureSpec(), seed=4)
    for name, tensor in init.state_dict().items():
        assert torch.equal(model.state_dict()[name], tensor), name
    assert (out / "train_metrics.csv").read_text().splitlines() == ["epoch,train_loss,val_loss,val_accuracy,learning_rate"]
    assert meta["extra"] == {"n_train": 24, "n_val": 6}


def test_train_reruns_are_identical(tmp_path):
    common = ["train-res", "--synthetic", "40", "--epochs", "2", "--batch-size", "8"]
    assert main(common + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(common + ["--out-dir", str(tmp_path / "b")]) == 0
    for name in ("train_metrics.csv", "checkpoint.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(rows(tmp_path / "a" / "train_metrics.csv")) == 2


def test_train_from_directory_reports_bad_rows(tmp_path):
    from varscore.ingest import generate_synthetic_res, write_res_dataset

    data = tmp_path / "res"
    write_res_dataset(generate_synthetic_res(12, seed=0), data)
    with open(data / "targets.csv", "a") as fh:
        fh.write("missing.pdb,A,5,ALA\n")
    code = main(["train-res", "--data", str(data), "--epochs", "1", "--out-dir", str(tmp_path / "o")])
    assert code == 1 and (tmp_path / "o" / "checkpoint.npz").exists()


def test_confusion_command(ws):
    out = ws.out("cm")
    assert main(["confusion", "--synthetic", "40", "--checkpoint", str(ws.checkpoint), "--out-dir", str(out)]) == 0
    cm = np.array([[int(v) for k, v in r.items() if k != "true"] for r in rows(out / "confusion.csv")])
    assert cm.shape == (20, 20) and cm.sum() == 40
    info = json.loads((out / "blosum62.json").read_text())
    assert info["n"] == 40 and info["accuracy"] == pytest.approx(np.trace(cm) / 40)

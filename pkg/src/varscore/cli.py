"""Command-line entry point: ``varscore <command> [options]``.

Every run is driven by a :class:`RunConfig` assembled from built-in
defaults, an optional JSON ``--config`` file and command-line flags, in
increasing order of precedence.  Outputs are written atomically and each is
accompanied by a ``<name>.provenance.json`` sidecar holding the config hash,
seed, checkpoint hash and package version.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aa import CODES
from .fitness import EMBEDDING_KINDS, VARIANTS, learning_curve, plot_curves, read_aaindex_csv, reduce_aaindex, scores_for
from .ingest import (
    DmsAssay,
    FetchError,
    StructureSource,
    fetch_structure,
    generate_synthetic_res,
    load_res_dataset,
    parse_dms,
)
from .ingest.fetch import endpoints_from_env
from .metrics import (
    UndefinedCorrelationError,
    compare_to_blosum62,
    confusion_matrix,
    evaluate_ranking,
    summarize,
    write_summary,
)
from .scorer import ConfigurationError, FeatureSpec, TrainConfig, build_scorer, train_res
from .scorer.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .structio import StructureError, build_atomic_graph, parse_structure
from .variants import (
    RANKERS,
    AlignmentError,
    ScoreMatrix,
    generate_mutations,
    read_ranked,
    score_structure,
    write_ranked,
)

log = logging.getLogger("varscore")

DEFAULT_CACHE = os.path.join(os.path.expanduser("~"), ".cache", "varscore")


class CliError(Exception):
    """A user-facing failure; reported without a traceback."""


@dataclass
class RunConfig:
    seed: int = 0
    cache_dir: str = field(default_factory=lambda: os.environ.get("VARSCORE_CACHE", DEFAULT_CACHE))
    checkpoint: str | None = None
    environment: str = "full"
    radius: float | None = None
    strategy: str = "positional"
    filter_wrong: bool = True
    top_k: int = 3
    epsilon: float = 0.0
    recall_denominator: str = "assay"
    lam: float = 1.0
    sizes: list[int] = field(default_factory=lambda: [24, 48, 96, 144, 192])
    repeats: int = 20
    embeddings: list[str] = field(default_factory=lambda: list(EMBEDDING_KINDS))
    aaindex: str | None = None
    out_dir: str = "."
    keep_intermediates: bool = False
    workers: int = 1
    offset: int = 0
    chain: str | None = None
    wt_reference: float | None = None
    coverage_threshold: float = 0.95
    endpoints: dict = field(default_factory=dict)
    # scorer training
    epochs: int = 40
    learning_rate: float = 1e-4
    batch_size: int = 64
    dropout: float = 0.1
    scheduler_patience: int = 10
    decay_rate: float = 0.75
    optimizer: str = "adam"
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.environment not in ("full", "local"):
            raise CliError(f"environment must be 'full' or 'local', got {self.environment!r}")
        if self.environment == "local" and not (self.radius and self.radius > 0):
            raise CliError("local environment needs a positive --radius")
        if self.strategy not in RANKERS:
            raise CliError(f"strategy must be one of {sorted(RANKERS)}, got {self.strategy!r}")
        if self.recall_denominator not in ("assay", "candidates"):
            raise CliError(f"unknown recall denominator {self.recall_denominator!r}")
        bad = [k for k in self.embeddings if k not in EMBEDDING_KINDS]
        if bad:
            raise CliError(f"unknown embedding kinds {bad}")
        if self.workers < 1:
            raise CliError("--workers must be at least 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise CliError("--val-fraction must be in [0, 1)")
        for name in ("checkpoint", "aaindex"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise CliError(f"{name} file {path} does not exist")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            scheduler_patience=self.scheduler_patience,
            decay_rate=self.decay_rate,
            dropout=self.dropout,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            optimizer=self.optimizer,
        )

    def digest(self) -> str:
        """Hash of the settings that can change results (not where files go)."""
        values = dataclasses.asdict(self)
        for key in ("out_dir", "cache_dir", "workers"):
            values.pop(key)
        blob = json.dumps(values, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise CliError(f"config {path} must hold a JSON object")
        unknown = set(values) - _CONFIG_FIELDS
        if unknown:
            raise CliError(f"unknown config keys {sorted(unknown)}")
    values.update(overrides)
    config = RunConfig(**values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# output helpers


class Run:
    """Per-invocation output writer."""

    def __init__(self, config: RunConfig, command: str):
        self.config = config
        self.command = command
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.checkpoint_hash = file_sha256(config.checkpoint) if config.checkpoint else None

    def provenance(self, **extra) -> dict:
        prov = {
            "command": self.command,
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "checkpoint_sha256": self.checkpoint_hash,
            "version": __version__,
        }
        prov.update(extra)
        return prov

    def write(self, name: str, content: str | bytes, **extra) -> Path:
        path = self.out / name
        write_atomic(path, content)
        write_atomic(Path(f"{path}.provenance.json"), _dumps(self.provenance(**extra)))
        return path


def write_atomic(path: Path, content: str | bytes) -> None:
    data = content.encode() if isinstance(content, str) else content
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# shared loaders


def _endpoints(config: RunConfig) -> dict:
    return endpoints_from_env(config.endpoints)


def _resolve_structure(spec: str, config: RunConfig) -> tuple[Path, str]:
    source = StructureSource.parse(spec)
    resolved = fetch_structure(
        source, config.cache_dir, endpoints=_endpoints(config), coverage_threshold=config.coverage_threshold
    )
    return resolved.path, source.identifier


def _load_graph(spec: str, config: RunConfig):
    path, ident = _resolve_structure(spec, config)
    return build_atomic_graph(parse_structure(path.read_bytes()), chain=config.chain), ident


def _load_assay(path: str, config: RunConfig) -> DmsAssay:
    p = Path(path)
    if not p.exists():
        raise CliError(f"assay file {path} does not exist")
    return parse_dms(p.read_bytes(), assay_id=None, wt_fitness=config.wt_reference)


def _load_model(config: RunConfig):
    if config.checkpoint is None:
        raise CliError("this command needs --checkpoint")
    model, _ = load_checkpoint(config.checkpoint)
    return model


def _dataset(args, config: RunConfig):
    if args.synthetic is not None:
        if args.synthetic <= 0:
            raise CliError("--synthetic needs a positive sample count")
        return generate_synthetic_res(args.synthetic, seed=config.seed)
    if args.data is None:
        raise CliError("give --data DIR or --synthetic N")
    dataset = load_res_dataset(args.data)
    for err in dataset.errors:
        log.error("targets row %d [%s]: %s", err.row, err.kind, err.message)
    if not dataset.graphs:
        raise CliError(f"no usable targets in {args.data}: {dataset.summary()}")
    if dataset.errors:
        args._errors = True
    return dataset.graphs


# ---------------------------------------------------------------------------
# commands


def cmd_fetch(args, config: RunConfig) -> int:
    run = Run(config, "fetch")
    endpoints = _endpoints(config)

    def one(spec: str):
        primary, _, fallback = spec.partition("=")
        source = StructureSource.parse(primary)
        fb = StructureSource.parse(fallback) if fallback else None
        try:
            positions = []
            if args.assay:
                assay = _load_assay(args.assay, config)
                positions = sorted({r.position + config.offset for r in assay.records})
            res = fetch_structure(
                source,
                config.cache_dir,
                fallback=fb,
                required_positions=positions,
                chain=config.chain,
                coverage_threshold=config.coverage_threshold,
                endpoints=endpoints,
            )
            origin = "fallback" if res.note else ("cache" if res.from_cache else ("local" if res.kind == "local" else "network"))
            return [spec, res.kind, res.identifier, "ok", origin, str(res.path), file_sha256(res.path), res.note]
        except (FetchError, StructureError, CliError, OSError, ValueError) as exc:
            log.error("%s: %s", spec, exc)
            return [spec, source.kind, source.identifier, "failed", "", "", "", str(exc).replace("\n", " ")]

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        rows = list(pool.map(one, args.ids))
    header = ["id", "kind", "identifier", "status", "source", "path", "sha256", "message"]
    run.write("manifest.csv", _csv(rows, header))
    return 1 if any(r[3] != "ok" for r in rows) else 0


def cmd_graph(args, config: RunConfig) -> int:
    run = Run(config, "graph")
    graph, ident = _load_graph(args.structure, config)
    run.write(args.output, json.dumps(graph.to_json()) + "\n", structure=ident)
    print(f"{ident}: {len(graph)} atoms, {graph.num_edges} edges, {len(graph.ca_map)} residues")
    return 0


def cmd_train_res(args, config: RunConfig) -> int:
    run = Run(config, "train-res")
    args._errors = False
    data = _dataset(args, config)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    n_val = int(round(config.val_fraction * len(data)))
    val = [data[i] for i in order[:n_val]]
    train = [data[i] for i in order[n_val:]]
    train_cfg = config.train_config()
    spec = FeatureSpec(aggregation=args.aggregation) if args.aggregation else FeatureSpec()
    model = build_scorer(spec, seed=config.seed)
    model, history = train_res(train, val, train_cfg, model=model)

    ckpt = run.out / args.output
    save_checkpoint(model, ckpt, train_cfg, extra={"n_train": len(train), "n_val": len(val)})
    write_atomic(Path(f"{ckpt}.provenance.json"), _dumps(run.provenance()))
    rows = [[m.epoch, repr(m.train_loss), repr(m.val_loss), repr(m.val_accuracy), repr(m.learning_rate)] for m in history]
    run.write("train_metrics.csv", _csv(rows, ["epoch", "train_loss", "val_loss", "val_accuracy", "learning_rate"]))

    summary = {"checkpoint": str(ckpt), "epochs": len(history), "n_train": len(train), "n_val": len(val)}
    if history:
        best = min(history, key=lambda m: m.val_loss)
        summary.update(best_epoch=best.epoch, val_loss=best.val_loss, val_accuracy=best.val_accuracy)
    print(json.dumps(summary, sort_keys=True))
    return 1 if args._errors else 0


def _score(structure: str, config: RunConfig, run: Run) -> ScoreMatrix:
    model = _load_model(config)
    graph, ident = _load_graph(structure, config)
    prov = {"structure": ident, "checkpoint_sha256": run.checkpoint_hash}
    return score_structure(model, graph, config.environment, config.radius, provenance=prov)


def cmd_score(args, config: RunConfig) -> int:
    run = Run(config, "score")
    matrix = _score(args.structure, config, run)
    run.write(args.output, matrix.to_csv_string(), **matrix.provenance)
    print(f"scored {len(matrix)} positions, wildtype recovered at {int(matrix.correct.sum())}")
    return 0


def _report_dict(report, run: Run, **extra) -> dict:
    out = report.to_dict()
    out["provenance"] = run.provenance(**extra)
    return out


def cmd_rank(args, config: RunConfig) -> int:
    run = Run(config, "rank")
    assay = _load_assay(args.assay, config)
    if args.scores:
        matrix = ScoreMatrix.from_csv(Path(args.scores).read_text())
    else:
        matrix = _score(args.structure, config, run)
        if config.keep_intermediates:
            run.write("scores.csv", matrix.to_csv_string(), **matrix.provenance)
    candidates = generate_mutations(matrix, assay, filter_wrong=config.filter_wrong, offset=config.offset)
    if not candidates:
        raise CliError(f"{assay.assay_id}: no measured mutations left to rank")
    if config.keep_intermediates:
        rows = [[c.position, c.wt, c.mut, repr(c.score), repr(c.self_score)] for c in candidates]
        run.write("candidates.csv", _csv(rows, ["position", "wt", "mut", "score", "self_score"]))
    if config.strategy == "positional":
        ranked = RANKERS["positional"](candidates, top_k=config.top_k, epsilon=config.epsilon)
    else:
        ranked = RANKERS["global"](candidates)

    buf = io.StringIO()
    write_ranked(ranked, buf)
    run.write("ranked.tsv", buf.getvalue(), assay=assay.assay_id, strategy=config.strategy)
    report = evaluate_ranking(ranked, assay, recall_denominator=config.recall_denominator)
    run.write("report.json", _dumps(_report_dict(report, run, assay=assay.assay_id, strategy=config.strategy)))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_evaluate(args, config: RunConfig) -> int:
    run = Run(config, "evaluate")
    if args.manifest:
        entries = []
        with open(args.manifest, newline="") as fh:
            for rec in csv.DictReader(fh):
                assay = _load_assay(rec["assay"], config)
                ranked = read_ranked(Path(rec["ranked"]).read_text())
                entries.append((rec["model"], rec["strategy"], evaluate_ranking(ranked, assay, config.recall_denominator)))
        buf = io.StringIO()
        write_summary(summarize(entries), buf)
        run.write("summary.csv", buf.getvalue())
        return 0
    if not (args.assay and args.ranked):
        raise CliError("evaluate needs ASSAY RANKED or --manifest")
    assay = _load_assay(args.assay, config)
    ranked = read_ranked(Path(args.ranked).read_text())
    report = evaluate_ranking(ranked, assay, recall_denominator=config.recall_denominator)
    run.write("report.json", _dumps(_report_dict(report, run, assay=assay.assay_id)))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_regress(args, config: RunConfig) -> int:
    run = Run(config, "regress")
    assay = _load_assay(args.assay, config)
    matrix = ScoreMatrix.from_csv(Path(args.scores).read_text())
    scores = scores_for(assay, matrix, config.offset)

    table = None
    kinds = list(config.embeddings)
    if "aa_index" in kinds:
        if config.aaindex is None:
            log.warning("no --aaindex table given; skipping the aa_index embedding")
            kinds.remove("aa_index")
        else:
            table = reduce_aaindex(read_aaindex_csv(Path(config.aaindex).read_text()))
    if not kinds:
        raise CliError("no embedding kinds left to fit")

    def fit(kind):
        return learning_curve(
            assay, scores, kind=kind, sizes=config.sizes, repeats=config.repeats,
            lam=config.lam, seed=config.seed, table=table,
        )

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        curves = list(pool.map(fit, kinds))

    for curve in curves:
        for variant in VARIANTS:
            for name, writer in (("curve", curve.write_rows), ("aggregate", curve.write_aggregate)):
                buf = io.StringIO()
                writer(variant, buf)
                run.write(f"{name}_{curve.kind}_{variant}.csv", buf.getvalue(), assay=assay.assay_id)
    if not args.no_plots:
        try:
            plot_curves(curves, str(run.out / "curve"))
        except Exception as exc:  # plots are best effort
            log.warning("could not render plots: %s", exc)
    return 0


def cmd_confusion(args, config: RunConfig) -> int:
    run = Run(config, "confusion")
    args._errors = False
    model = _load_model(config)
    data = _dataset(args, config)
    cm = confusion_matrix(model, data)
    rows = [[code, *map(int, row)] for code, row in zip(CODES, cm)]
    run.write("confusion.csv", _csv(rows, ["true", *CODES]))
    try:
        rho = compare_to_blosum62(cm)
    except UndefinedCorrelationError as exc:
        log.warning("BLOSUM62 comparison undefined: %s", exc)
        rho = None
    accuracy = float(np.trace(cm) / cm.sum())
    run.write("blosum62.json", _dumps({"spearman_vs_blosum62": rho, "accuracy": accuracy, "n": int(cm.sum())}))
    print(json.dumps({"accuracy": accuracy, "spearman_vs_blosum62": rho}))
    return 1 if args._errors else 0


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _config_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", default=None, help="JSON file with RunConfig keys")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--cache-dir", dest="cache_dir", default=S)
    g.add_argument("--checkpoint", default=S)
    g.add_argument("--environment", choices=["full", "local"], default=S)
    g.add_argument("--radius", type=float, default=S)
    g.add_argument("--strategy", choices=sorted(RANKERS), default=S)
    g.add_argument("--filter-wrong", dest="filter_wrong", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--top-k", dest="top_k", type=int, default=S)
    g.add_argument("--epsilon", type=float, default=S)
    g.add_argument("--recall-denominator", dest="recall_denominator", choices=["assay", "candidates"], default=S)
    g.add_argument("--lam", "--lambda", dest="lam", type=float, default=S)
    g.add_argument("--sizes", type=_int_list, default=S)
    g.add_argument("--repeats", type=int, default=S)
    g.add_argument("--embeddings", type=_str_list, default=S)
    g.add_argument("--aaindex", default=S)
    g.add_argument("--out-dir", dest="out_dir", default=S)
    g.add_argument("--keep-intermediates", dest="keep_intermediates", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--workers", type=int, default=S)
    g.add_argument("--offset", type=int, default=S)
    g.add_argument("--chain", default=S)
    g.add_argument("--wt-reference", dest="wt_reference", type=float, default=S)
    g.add_argument("--coverage-threshold", dest="coverage_threshold", type=float, default=S)
    g.add_argument("--epochs", type=int, default=S)
    g.add_argument("--learning-rate", dest="learning_rate", type=float, default=S)
    g.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    g.add_argument("--dropout", type=float, default=S)
    g.add_argument("--scheduler-patience", dest="scheduler_patience", type=int, default=S)
    g.add_argument("--decay-rate", dest="decay_rate", type=float, default=S)
    g.add_argument("--optimizer", choices=["adam", "sgd"], default=S)
    g.add_argument("--val-fraction", dest="val_fraction", type=float, default=S)
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_parser()
    parser = argparse.ArgumentParser(prog="varscore", description="Structure-based variant scoring and ranking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", parents=[common], help="download structures into the cache")
    p.add_argument("ids", nargs="*", help="pdb:ID[:ASSEMBLY], af:UNIPROT or a path; append =af:ID for a fallback")
    p.add_argument("--assay", help="DMS file whose positions the structure must cover")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("graph", parents=[common], help="dump the atomic graph of a structure as JSON")
    p.add_argument("structure")
    p.add_argument("--output", default="graph.json")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train-res", parents=[common], help="train the residue-identity scorer")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="RES dataset directory")
    src.add_argument("--synthetic", type=int, help="generate N synthetic samples")
    p.add_argument("--aggregation", choices=["mean", "sum"])
    p.add_argument("--output", default="checkpoint.npz")
    p.set_defaults(func=cmd_train_res)

    p = sub.add_parser("score", parents=[common], help="write the per-position score matrix")
    p.add_argument("structure")
    p.add_argument("--output", default="scores.csv")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("rank", parents=[common], help="rank an assay's mutations and evaluate the ranking")
    p.add_argument("structure", nargs="?")
    p.add_argument("assay")
    p.add_argument("--scores", help="use an existing score matrix instead of running the scorer")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate ranked TSVs against assays")
    p.add_argument("assay", nargs="?")
    p.add_argument("ranked", nargs="?")
    p.add_argument("--manifest", help="CSV with columns model,strategy,assay,ranked")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("regress", parents=[common], help="ridge learning curves with and without scores")
    p.add_argument("assay")
    p.add_argument("scores")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("confusion", parents=[common], help="confusion matrix and BLOSUM62 comparison")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--synthetic", type=int)
    p.set_defaults(func=cmd_confusion)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_FIELDS}
    try:
        config = load_config(args.config, overrides)
        if args.command == "rank" and not args.scores and args.structure is None:
            raise CliError("rank needs a STRUCTURE or --scores")
        return args.func(args, config)
    except AlignmentError as exc:
        print(f"error: {exc} (positions: {exc.positions})", file=sys.stderr)
    except (CliError, FetchError, StructureError, ConfigurationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

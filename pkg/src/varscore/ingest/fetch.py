"""Structure retrieval with an on-disk cache and a predicted-structure fallback.

Cache layout::

    <cache_dir>/<kind>/<id>.pdb        structure file
    <cache_dir>/<kind>/<id>.pdb.json   {"url", "fetched_at", "sha256"}
    <cache_dir>/<kind>/<id>.pdb.lock   held while fetching

Endpoints are URL templates with ``{id}`` and ``{assembly}`` fields; they
default to RCSB biological-assembly files and AlphaFold DB models and can be
overridden with ``VARSCORE_ENDPOINT_PDB`` / ``VARSCORE_ENDPOINT_AF``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

from filelock import FileLock

from ..structio import StructureError, build_atomic_graph, parse_structure

log = logging.getLogger(__name__)

DEFAULT_ENDPOINTS = {
    "experimental": "https://files.rcsb.org/download/{id}.pdb{assembly}",
    "predicted": "https://alphafold.ebi.ac.uk/files/AF-{id}-F1-model_v4.pdb",
}
ENV_ENDPOINTS = {"experimental": "VARSCORE_ENDPOINT_PDB", "predicted": "VARSCORE_ENDPOINT_AF"}
DEFAULT_COVERAGE = 0.95
KINDS = ("experimental", "predicted", "local")


class FetchError(RuntimeError):
    pass


class NetworkError(FetchError):
    """Transient failure; the request may be retried."""


class NotFoundError(FetchError):
    pass


class CorruptDownloadError(FetchError):
    pass


class CoverageError(FetchError):
    pass


@dataclass(frozen=True)
class StructureSource:
    kind: str
    identifier: str
    assembly_id: int = 1
    path: Path | None = None
    from_cache: bool = False
    note: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown structure source kind {self.kind!r}")

    @classmethod
    def experimental(cls, pdb_id: str, assembly_id: int = 1) -> "StructureSource":
        return cls("experimental", pdb_id.upper(), assembly_id)

    @classmethod
    def predicted(cls, uniprot_id: str) -> "StructureSource":
        return cls("predicted", uniprot_id.upper())

    @classmethod
    def local(cls, path: str | os.PathLike) -> "StructureSource":
        return cls("local", str(path), path=Path(path))

    @classmethod
    def parse(cls, spec: str) -> "StructureSource":
        """``pdb:1ABC[:2]``, ``af:P12345`` or a file path."""
        kind, _, rest = spec.partition(":")
        if kind.lower() == "pdb" and rest:
            ident, _, assembly = rest.partition(":")
            return cls.experimental(ident, int(assembly) if assembly else 1)
        if kind.lower() == "af" and rest:
            return cls.predicted(rest)
        return cls.local(spec)


def endpoints_from_env(overrides: dict | None = None) -> dict[str, str]:
    endpoints = dict(DEFAULT_ENDPOINTS)
    for kind, var in ENV_ENDPOINTS.items():
        if os.environ.get(var):
            endpoints[kind] = os.environ[var]
    endpoints.update(overrides or {})
    return endpoints


def http_get(url: str, timeout: float = 30.0) -> bytes:
    """GET ``url``; 404 raises NotFoundError, anything else transient NetworkError."""
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise NotFoundError(f"{url}: 404 not found") from exc
        raise NetworkError(f"{url}: HTTP {exc.code}") from exc
    except (urllib.error.URLError, OSError) as exc:
        raise NetworkError(f"{url}: {exc}") from exc


def _download(url, getter, attempts, backoff, sleep) -> bytes:
    last: FetchError | None = None
    for attempt in range(attempts):
        try:
            return getter(url)
        except (NetworkError, NotFoundError) as exc:
            last = exc
            log.warning("attempt %d/%d for %s failed: %s", attempt + 1, attempts, url, exc)
            if attempt + 1 < attempts:
                sleep(backoff * 2**attempt)
    assert last is not None
    raise last


def cache_path(source: StructureSource, cache_dir: str | os.PathLike) -> Path:
    name = source.identifier
    if source.kind == "experimental":
        name = f"{name}-{source.assembly_id}"
    return Path(cache_dir) / source.kind / f"{name}.pdb"


def _write_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _coverage(path: Path, positions: Iterable[int], chain: str | None) -> float:
    positions = list(positions)
    if not positions:
        return 1.0
    graph = build_atomic_graph(parse_structure(path.read_bytes()), chain=chain)
    return sum(1 for p in positions if p in graph.ca_map) / len(positions)


def _fetch_one(source, cache_dir, endpoints, getter, attempts, backoff, sleep) -> StructureSource:
    if source.kind == "local":
        if source.path is None or not source.path.exists():
            raise NotFoundError(f"local structure {source.identifier} does not exist")
        try:
            parse_structure(source.path.read_bytes())
        except StructureError as exc:
            raise CorruptDownloadError(f"{source.path}: {exc}") from exc
        return source

    path = cache_path(source, cache_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        if path.exists():
            return replace(source, path=path, from_cache=True)
        url = endpoints[source.kind].format(id=source.identifier, assembly=source.assembly_id)
        data = _download(url, getter, attempts, backoff, sleep)
        try:
            parse_structure(data)
        except StructureError as exc:
            raise CorruptDownloadError(f"{url}: downloaded file does not parse ({exc})") from exc
        _write_atomic(path, data)
        sidecar = {"url": url, "fetched_at": time.time(), "sha256": hashlib.sha256(data).hexdigest()}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
        return replace(source, path=path, from_cache=False)


def fetch_structure(
    source: StructureSource,
    cache_dir: str | os.PathLike,
    *,
    fallback: StructureSource | None = None,
    required_positions: Iterable[int] = (),
    chain: str | None = None,
    coverage_threshold: float = DEFAULT_COVERAGE,
    endpoints: dict[str, str] | None = None,
    getter: Callable[[str], bytes] = http_get,
    attempts: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> StructureSource:
    """Resolve ``source`` to a parsed local file, downloading it if not cached.

    An experimental structure whose alpha carbons cover less than
    ``coverage_threshold`` of ``required_positions`` is replaced by
    ``fallback`` (typically the AlphaFold model); without a fallback that is
    a CoverageError.
    """
    endpoints = endpoints or endpoints_from_env()
    args = (cache_dir, endpoints, getter, attempts, backoff, sleep)
    resolved = _fetch_one(source, *args)
    required = list(required_positions)
    if not required or source.kind == "predicted":
        return resolved
    cov = _coverage(resolved.path, required, chain)
    if cov >= coverage_threshold:
        return resolved
    if fallback is None:
        raise CoverageError(
            f"{source.identifier} covers {cov:.0%} of assay positions "
            f"(< {coverage_threshold:.0%}) and no fallback is configured"
        )
    log.info(
        "%s covers %.0f%% of assay positions; using %s %s instead",
        source.identifier, 100 * cov, fallback.kind, fallback.identifier,
    )
    chosen = _fetch_one(fallback, *args)
    return replace(chosen, note=f"fallback from {source.identifier} (coverage {cov:.3f})")

"""Assay files, structure retrieval and RES datasets."""

from .dms import (
    TAXA,
    DmsAssay,
    DmsConsistencyError,
    DmsError,
    DmsParseError,
    MutationRecord,
    format_dms,
    parse_dms,
)
from .fetch import (
    CorruptDownloadError,
    CoverageError,
    FetchError,
    NetworkError,
    NotFoundError,
    StructureSource,
    fetch_structure,
)
from .resdata import ResDataset, RowError, load_res_dataset, write_res_dataset
from .synthetic import decode_synthetic_label, generate_synthetic_res, synthetic_structure

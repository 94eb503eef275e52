"""GQS layer: storage layout, file format and footprint accounting."""

from .fileformat import (
    BadMagicError,
    ChecksumError,
    FormatError,
    TruncatedError,
    VersionError,
    deserialize,
    payload_nbytes,
    payload_sections,
    read_file,
    serialize,
    write_file,
)
from .footprint import FootprintReport, footprint, footprint_for
from .layer import (
    GQSLayer,
    LayerValidationError,
    build_gqs,
    decompress,
    from_groups,
    snap_f16,
    storage_qparams,
)

__all__ = [
    "BadMagicError", "ChecksumError", "FormatError", "TruncatedError", "VersionError",
    "deserialize", "payload_nbytes", "payload_sections", "read_file", "serialize", "write_file",
    "FootprintReport", "footprint", "footprint_for",
    "GQSLayer", "LayerValidationError", "build_gqs", "decompress", "from_groups",
    "snap_f16", "storage_qparams",
]

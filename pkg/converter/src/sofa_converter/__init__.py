"""Convert SOFA (HDF5, SimpleFreeFieldHRIR) measurement files into the raw
HRIR bundle format consumed by the upsampling toolkit.

The converter talks to the toolkit only through files: it reads SOFA and
writes ``manifest.json`` plus per-subject float32 payloads.  It never
imports the toolkit.
"""

__version__ = "0.1.0"

from .convert import (
    DEFAULT_EXCLUSIONS,
    GRID_TOLERANCE_RAD,
    ConvertOptions,
    convert,
)
from .sofa import SofaFormatError, SofaSummary, read_sofa, read_summary, subject_id_for

__all__ = [
    "ConvertOptions",
    "DEFAULT_EXCLUSIONS",
    "GRID_TOLERANCE_RAD",
    "SofaFormatError",
    "SofaSummary",
    "convert",
    "read_sofa",
    "read_summary",
    "subject_id_for",
    "__version__",
]

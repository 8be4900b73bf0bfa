"""Keras checkpoint conversion to the MDLW weight format."""

__version__ = "0.1.0"

from .export import (
    ExportError,
    UnsupportedLayer,
    export_model,
    export_traces,
    map_model,
    read_trace_file,
)

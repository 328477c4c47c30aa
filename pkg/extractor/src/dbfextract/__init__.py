"""CNN feature-map export for the masked-face pipeline."""

__version__ = "0.1.0"

from .extract import extract, list_inputs, preprocess, write_dbf
from .models import EXPECTED_SHAPES, ExtractorSpec, build_backbone

__all__ = [
    "EXPECTED_SHAPES",
    "ExtractorSpec",
    "build_backbone",
    "extract",
    "list_inputs",
    "preprocess",
    "write_dbf",
]

"""Fine-grained bounding-box citations for chart question answering."""

from .core import BBox, CellRef, Citation, Claim, DataTable, parse_table_html, serialize_table_html, validate_citation
from .gateway import Gateway, Prompt, complete_structured

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "CellRef",
    "Citation",
    "Claim",
    "DataTable",
    "Gateway",
    "Prompt",
    "complete_structured",
    "parse_table_html",
    "serialize_table_html",
    "validate_citation",
]

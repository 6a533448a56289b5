"""calcquant: quantification and validation of intracranial calcification.

Subpackages and modules are imported lazily by consumers; the top level
re-exports the grid data model most callers need.
"""

from .volgrid import (
    Grid3,
    GridFileError,
    Mask,
    ProbMap,
    Volume,
    read_grid_file,
    sample_at,
    write_grid_file,
)

__all__ = [
    "Grid3",
    "GridFileError",
    "Mask",
    "ProbMap",
    "Volume",
    "read_grid_file",
    "sample_at",
    "write_grid_file",
]

__version__ = "0.1.0"

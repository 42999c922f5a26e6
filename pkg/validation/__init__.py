"""Validation of external input.

Reads observation files and parses the list-valued command-line flags.
"""

from validation.csv_reader import CsvFormatError, read_dataset, read_rows
from validation.flags import (
    FlagError,
    parse_count_grid,
    parse_fixed_blocks,
    parse_matrix,
    parse_positive_grid,
    parse_vector,
)

__all__ = [
    "CsvFormatError",
    "FlagError",
    "parse_count_grid",
    "parse_fixed_blocks",
    "parse_matrix",
    "parse_positive_grid",
    "parse_vector",
    "read_dataset",
    "read_rows",
]

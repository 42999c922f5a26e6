"""Reading observation files.

One observation per row, d comma-separated columns, '.' as the decimal mark.
An optional single header row can be skipped. Blank lines are ignored.
"""

import csv
import logging
import math

import numpy as np

from vg_model import Dataset

logger = logging.getLogger(__name__)


class CsvFormatError(ValueError):
    """Raised when an observation file is ragged, non-numeric or empty."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _parse_value(text: str, line: int, column: int) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise CsvFormatError(
            f"column {column} is not a number: {text.strip()!r}", line
        ) from None
    if not math.isfinite(value):
        raise CsvFormatError(f"column {column} is not finite: {text.strip()!r}", line)
    return value


def read_rows(path: str, skip_header: bool = False) -> list[list[float]]:
    """Parse the numeric rows of a CSV file.

    Raises:
        CsvFormatError: On a ragged or non-numeric row, with its 1-based line.
        OSError: If the file cannot be opened.
    """
    rows: list[list[float]] = []
    width = None
    with open(path, encoding="utf-8", newline="") as f:
        for line, fields in enumerate(csv.reader(f), start=1):
            if line == 1 and skip_header:
                continue
            if not fields or all(not cell.strip() for cell in fields):
                continue
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise CsvFormatError(
                    f"expected {width} columns, got {len(fields)}", line
                )
            rows.append(
                [_parse_value(cell, line, col) for col, cell in enumerate(fields, 1)]
            )
    logger.debug("read %d rows of width %s from %s", len(rows), width, path)
    return rows


def read_dataset(path: str, skip_header: bool = False) -> Dataset:
    """Read an observation file into a Dataset.

    Raises:
        CsvFormatError: If the file is malformed or holds no observations.
        OSError: If the file cannot be opened.
    """
    rows = read_rows(path, skip_header)
    if not rows:
        raise CsvFormatError(f"{path} contains no observations")
    return Dataset(np.array(rows, dtype=float))

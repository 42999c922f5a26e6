"""Parsing of list-valued command-line flags.

Grids and vectors are comma lists ("0.2,0.5,1"), matrices are rows of comma
lists separated by semicolons ("2,1;1,2").
"""

import math
import re

import numpy as np

from ecm_fitter import BLOCKS


class FlagError(ValueError):
    """Raised when a flag value cannot be parsed."""


_SEPARATOR = re.compile(r"\s*,\s*")
_ROW_SEPARATOR = re.compile(r"\s*;\s*")


def _split(text: str, flag: str) -> list[str]:
    text = text.strip()
    if not text:
        raise FlagError(f"{flag}: empty value")
    items = _SEPARATOR.split(text)
    if any(not item for item in items):
        raise FlagError(f"{flag}: empty entry in {text!r}")
    return items


def _number(item: str, flag: str) -> float:
    try:
        value = float(item)
    except ValueError:
        raise FlagError(f"{flag}: {item!r} is not a number") from None
    if not math.isfinite(value):
        raise FlagError(f"{flag}: {item!r} is not finite")
    return value


def parse_vector(text: str, flag: str = "vector") -> np.ndarray:
    """'1,2.5,-3' -> array([1.0, 2.5, -3.0])."""
    return np.array([_number(item, flag) for item in _split(text, flag)])


def parse_matrix(text: str, flag: str = "matrix") -> np.ndarray:
    """'2,1;1,2' -> 2x2 array. A single number gives a 1x1 matrix."""
    rows = [parse_vector(row, flag) for row in _ROW_SEPARATOR.split(text.strip())]
    widths = {row.shape[0] for row in rows}
    if len(widths) != 1:
        raise FlagError(f"{flag}: rows have different lengths")
    return np.vstack(rows)


def parse_positive_grid(text: str, flag: str = "grid") -> tuple[float, ...]:
    """Comma list of strictly positive numbers."""
    values = tuple(_number(item, flag) for item in _split(text, flag))
    for v in values:
        if v <= 0:
            raise FlagError(f"{flag}: every value must be positive, got {v:g}")
    return values


def parse_count_grid(text: str, flag: str = "grid", minimum: int = 1) -> tuple[int, ...]:
    """Comma list of integers, each at least ``minimum``."""
    values = []
    for item in _split(text, flag):
        try:
            count = int(item)
        except ValueError:
            raise FlagError(f"{flag}: {item!r} is not an integer") from None
        if count < minimum:
            raise FlagError(f"{flag}: every value must be at least {minimum}, got {count}")
        values.append(count)
    return tuple(values)


def parse_fixed_blocks(text: str | None, flag: str = "--fix") -> frozenset[str]:
    """'nu,gamma' -> frozenset({'nu', 'gamma'}); None or '' -> empty set."""
    if text is None or not text.strip():
        return frozenset()
    names = [item.lower() for item in _split(text, flag)]
    unknown = sorted(set(names) - set(BLOCKS))
    if unknown:
        raise FlagError(
            f"{flag}: unknown parameter block(s) {', '.join(unknown)}; "
            f"choose from {', '.join(BLOCKS)}"
        )
    return frozenset(names)

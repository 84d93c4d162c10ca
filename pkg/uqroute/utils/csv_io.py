"""Deterministic CSV writer for run reports.

Floats are written with 9 significant digits and rows keep their given
order, so identical runs produce byte-identical files (wall-time columns
aside).
"""

import csv
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

logger = logging.getLogger(__name__)

FLOAT_FORMAT = ".9g"


def format_value(value: Any) -> str:
    """Render one cell."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) or (hasattr(value, "dtype") and getattr(value.dtype, "kind", "") == "f"):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return format(value, FLOAT_FORMAT)
    if value is None:
        return ""
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a header and rows to ``path`` atomically.

    Raises:
        ValueError: If a row's width differs from the header.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    count = 0
    with open(tmp_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
            writer.writerow([format_value(v) for v in row])
            count += 1
    tmp_path.replace(path)
    logger.info("Wrote %s (%d rows)", path, count)
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    """Read a report back as a list of dicts keyed by header."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))

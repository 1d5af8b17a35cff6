"""
Fixed-column CSV output. Floats are written with 17 significant digits so the
files compare bit-for-bit across runs.
"""
import csv
import logging
import math
import os

logger = logging.getLogger("CsvUtil")


def format_value(value):
    """Render one cell; floats use repr-exact 17 significant digits."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return 'nan'
        return f"{value:.17g}"
    if hasattr(value, 'item'):
        return format_value(value.item())
    if value is None:
        return ''
    return str(value)


def write_rows(path, columns, rows):
    """
    Write rows under a fixed header.
    Args:
        path (str): Output file path; parent directories are created.
        columns (list[str]): Header in output order.
        rows (iterable): Sequences aligned with columns.
    Returns:
        str: The path written.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"Row has {len(row)} cells, header has {len(columns)}")
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return path


class CsvAppender:
    """
    Streaming writer used by the training loop: one row per step, flushed as it goes.
    """
    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._file = open(path, 'w', newline='', encoding='utf-8')
        self._writer = csv.writer(self._file, lineterminator='\n')
        self._writer.writerow(self.columns)

    def append(self, row):
        self._writer.writerow([format_value(v) for v in row])

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

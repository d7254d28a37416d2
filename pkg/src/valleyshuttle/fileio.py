"""Shared file conventions: 17-significant-digit CSV bodies with a JSON header.

A "headed CSV" file starts with a single line ``# {json}`` followed by a plain
CSV table. Numbers are written with ``%.17g`` so that every float64 survives a
write/read cycle bit-exactly.
"""

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"
FORMAT_VERSION = "1"


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % float(value)
    return str(value)


def write_csv(path, columns, rows, header=None):
    """Write ``rows`` (iterable of sequences) under ``columns``.

    ``header`` is an optional JSON-serializable dict written as the first line.
    Returns the sha256 hex digest of the bytes written.
    """
    buf = io.StringIO()
    if header is not None:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    data = buf.getvalue().encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def write_columns(path, named_arrays, header=None):
    """Write equal-length 1D arrays as columns, keyed by name (insertion order)."""
    names = list(named_arrays)
    arrays = [np.asarray(named_arrays[n]) for n in names]
    n = {len(a) for a in arrays}
    if len(n) > 1:
        raise ValueError("columns must have equal length")
    return write_csv(path, names, zip(*arrays), header=header)


def read_csv(path):
    """Read a headed CSV. Returns (header dict or None, column names, rows of str)."""
    text = Path(path).read_text(encoding="utf-8")
    header = None
    if text.startswith("#"):
        first, text = text.split("\n", 1)
        header = json.loads(first[1:].strip())
    reader = csv.reader(io.StringIO(text))
    columns = next(reader)
    rows = [r for r in reader if r]
    return header, columns, rows


def read_columns(path):
    """Read a headed CSV into a dict of float arrays."""
    header, columns, rows = read_csv(path)
    data = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, len(columns))
    return header, {c: data[:, i] for i, c in enumerate(columns)}


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)!r}")

"""Dataset / embedding export: CSV manifest plus a flat little-endian f64 file.

Binary layout (all little-endian)::

    bytes 0-7    magic b"CLABF64\\x01"
    bytes 8-11   uint32 dim0   (image height, or 1 for feature rows)
    bytes 12-15  uint32 dim1   (image width, or feature dimension)
    bytes 16-23  uint64 count
    bytes 24-    count * dim0 * dim1 float64 values, row-major
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError
from .domains import Dataset

MAGIC = b"CLABF64\x01"
_HEADER = struct.Struct("<8sIIQ")


def write_array_file(path, rows: np.ndarray, dims: tuple[int, int]) -> Path:
    rows = np.ascontiguousarray(rows, dtype="<f8")
    if rows.ndim != 2 or rows.shape[1] != dims[0] * dims[1]:
        raise ContractError(f"rows {rows.shape} do not match dims {dims}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, dims[0], dims[1], rows.shape[0]))
        fh.write(rows.tobytes())
    return path


def read_array_file(path) -> tuple[np.ndarray, tuple[int, int]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError(f"{path}: file shorter than header")
    magic, d0, d1, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * d0 * d1 * count
    if len(raw) != expected:
        raise ContractError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return data.reshape(count, d0 * d1), (d0, d1)


def export_dataset(dataset: Dataset, directory, stem: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (one row per sample) and ``<stem>.bin`` (images)."""
    directory = Path(directory)
    stem = stem or dataset.domain_id
    bin_path = write_array_file(directory / f"{stem}.bin", dataset.images, (dataset.image_size, dataset.image_size))
    csv_path = directory / f"{stem}.csv"
    factor_names = sorted(dataset.factors)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "sample_id", "split", "label", *factor_names])
        for i in range(len(dataset)):
            w.writerow(
                [i, int(dataset.sample_ids[i]), dataset.splits[i], int(dataset.labels[i])]
                + [repr(float(dataset.factors[f][i])) for f in factor_names]
            )
    return csv_path, bin_path


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

"""Dataset CSV, gradient-embedding (FISHGRAD) files and report persistence."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .embedding import Dataset
from .errors import DataFormatError

MAX_DUMP = 10000


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def load_dataset(path) -> Dataset:
    """Read a CSV with a header row, a ``label`` column (0/1) and numeric feature columns.

    An optional ``id`` column supplies example identifiers; otherwise rows are
    numbered from 0. Feature columns keep their header order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if "label" not in header:
            raise DataFormatError(f"{path}: no 'label' column in header {header}")
        li = header.index("label")
        ii = header.index("id") if "id" in header else None
        fcols = [c for c in range(len(header)) if c not in (li, ii)]
        if not fcols:
            raise DataFormatError(f"{path}: no feature columns")
        feats, labels, ids = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {rownum} has {len(row)} fields, header has {len(header)}")
            try:
                lab = float(row[li])
            except ValueError:
                raise DataFormatError(f"{path}: row {rownum}, column 'label': non-numeric {row[li]!r}") from None
            if lab not in (0.0, 1.0):
                raise DataFormatError(f"{path}: row {rownum}, column 'label': value {row[li]!r} is not 0/1")
            vals = []
            for c in fcols:
                try:
                    v = float(row[c])
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {rownum}, column {header[c]!r}: non-numeric {row[c]!r}") from None
                if not np.isfinite(v):
                    raise DataFormatError(f"{path}: row {rownum}, column {header[c]!r}: non-finite {row[c]!r}")
                vals.append(v)
            feats.append(vals)
            labels.append(int(lab))
            ids.append(row[ii] if ii is not None else str(len(ids)))
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels), ids, [header[c] for c in fcols])


def save_dataset(data: Dataset, path, with_ids: bool = False) -> None:
    names = data.feature_names or [f"f{i + 1}" for i in range(data.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["id"] if with_ids else []) + ["label"] + list(names))
        for i in range(data.n):
            row = [str(int(data.labels[i]))] + [_fmt(v) for v in data.features[i]]
            w.writerow(([data.ids[i]] if with_ids else []) + row)


def save_embeddings(grads: np.ndarray, path) -> None:
    G = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    n, p = G.shape
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"FISHGRAD 1 {n} {p}\n")
        for row in G:
            fh.write(" ".join(_fmt(v) for v in row))
            fh.write("\n")


def load_embeddings(path) -> np.ndarray:
    """Parse a ``FISHGRAD 1 <n> <p>`` file into an ``n x p`` matrix."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "FISHGRAD" or head[1] != "1":
        raise DataFormatError(f"{path}: bad header {lines[0]!r}; expected 'FISHGRAD 1 <n> <p>'")
    try:
        n, p = int(head[2]), int(head[3])
    except ValueError:
        raise DataFormatError(f"{path}: non-integer shape in header {lines[0]!r}") from None
    if n < 1 or p < 1:
        raise DataFormatError(f"{path}: shape {n}x{p} must be positive")
    body = lines[1:]
    if len(body) != n:
        raise DataFormatError(f"{path}: header declares {n} rows, found {len(body)}")
    out = np.empty((n, p))
    for i, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != p:
            raise DataFormatError(f"{path}: row {i + 1} has {len(toks)} values, expected {p}")
        try:
            out[i] = [float(t) for t in toks]
        except ValueError:
            raise DataFormatError(f"{path}: row {i + 1} has a non-numeric value") from None
        if not np.all(np.isfinite(out[i])):
            raise DataFormatError(f"{path}: row {i + 1} has NaN or Inf")
    return out


def write_json(obj, path) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def dump_kernel_csv(oracle, path) -> None:
    """Write the full train x train kernel matrix as CSV (diagnostics only)."""
    t = oracle.n_train
    if t > MAX_DUMP:
        raise DataFormatError(f"refusing to dump a {t}x{t} kernel matrix (limit {MAX_DUMP})")
    K = oracle.gram()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in K:
            w.writerow([_fmt(v) for v in row])


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)

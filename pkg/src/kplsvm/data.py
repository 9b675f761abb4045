"""Dataset loading, label mapping, normalization, and splitting."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = [
    "Dataset",
    "NormalizationTransform",
    "load_csv",
    "load_libsvm",
    "load_dataset",
    "fit_normalizer",
    "split_dataset",
    "class_ratio",
    "default_seed",
]


def default_seed() -> int:
    """Split seed, overridable through the KPLSVM_SEED variable."""
    raw = os.environ.get("KPLSVM_SEED", "")
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise DataError(f"KPLSVM_SEED must be an integer, got {raw!r}") from exc


@dataclass
class Dataset:
    """Feature matrix with +-1 labels and the original-label mapping."""

    X: np.ndarray
    y: np.ndarray
    name: str = ""
    label_map: dict | None = None   # original label -> -1.0 / +1.0
    split: tuple | None = None      # optional (train_idx, test_idx)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.y.ndim != 1:
            raise DataError("X must be 2-d and y 1-d")
        if self.X.shape[0] != self.y.size:
            raise DataError("X and y row counts differ")
        if not np.isfinite(self.X).all():
            raise DataError("non-finite feature values")
        labels = set(np.unique(self.y))
        if not labels <= {-1.0, 1.0}:
            raise DataError(f"labels must be +-1 after mapping, got {labels}")
        if self.split is not None:
            tr, te = (np.asarray(s, dtype=int) for s in self.split)
            l = self.y.size
            if set(tr) & set(te):
                raise DataError("split indices overlap")
            if tr.size and (tr.min() < 0 or tr.max() >= l):
                raise DataError("train indices out of range")
            if te.size and (te.min() < 0 or te.max() >= l):
                raise DataError("test indices out of range")
            self.split = (tr, te)

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx, name_suffix: str = "") -> "Dataset":
        return Dataset(self.X[idx], self.y[idx],
                       name=self.name + name_suffix,
                       label_map=self.label_map)


def _map_labels(raw_labels: list) -> tuple[np.ndarray, dict]:
    """Deterministically remap two raw label values onto -1/+1.

    The numerically (or, failing that, lexicographically) smaller
    original label becomes -1.  Covers 0/1, 1/2, and +-1 conventions.
    """
    uniq = sorted(set(raw_labels), key=_label_sort_key)
    if len(uniq) != 2:
        raise DataError(
            f"expected exactly 2 label values, found {len(uniq)}: {uniq[:5]}")
    mapping = {uniq[0]: -1.0, uniq[1]: 1.0}
    return np.array([mapping[v] for v in raw_labels]), mapping


def _label_sort_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def _parse_label(tok: str):
    try:
        f = float(tok)
        return int(f) if f.is_integer() else f
    except ValueError:
        return tok


def load_csv(path, label_col: int = 0, header: str = "auto",
             name: str | None = None) -> Dataset:
    """Load a delimited text file.

    ``header`` is "auto" (skip the first row when any field of it is
    non-numeric), "none", or "skip".  Malformed rows raise DataError
    with the offending line number.
    """
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln]
    if not lines:
        raise DataError(f"{path}: empty file")
    start = 0
    if header == "skip":
        start = 1
    elif header == "auto":
        first = [t.strip() for t in lines[0][1].split(",")]
        lc0 = label_col % len(first) if -len(first) <= label_col < len(first) \
            else None
        if any(not _is_number(tok) for j, tok in enumerate(first) if j != lc0):
            start = 1
    width = None
    labels, feats = [], []
    for lineno, ln in lines[start:]:
        toks = [t.strip() for t in ln.split(",")]
        if width is None:
            width = len(toks)
            if not -width <= label_col < width:
                raise DataError(
                    f"{path}: label column {label_col} out of range "
                    f"for width {width}")
        elif len(toks) != width:
            raise DataError(
                f"{path}:{lineno}: expected {width} fields, got {len(toks)}")
        lc = label_col % width
        labels.append(_parse_label(toks[lc]))
        try:
            feats.append([float(t) for j, t in enumerate(toks) if j != lc])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric feature") from exc
    y, mapping = _map_labels(labels)
    ds_name = name if name is not None else os.path.basename(path)
    return Dataset(np.array(feats, dtype=float), y, name=ds_name,
                   label_map=mapping)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def load_libsvm(path, name: str | None = None) -> Dataset:
    """Load sparse index:value rows; indices are 1-based, output dense."""
    labels, entries = [], []
    max_idx = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, ln in enumerate(fh, 1):
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            toks = ln.split()
            labels.append(_parse_label(toks[0]))
            row = {}
            for tok in toks[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                    if idx < 1:
                        raise ValueError
                except ValueError as exc:
                    raise DataError(
                        f"{path}:{lineno}: bad feature token {tok!r}"
                    ) from exc
                row[idx - 1] = val
                max_idx = max(max_idx, idx)
            entries.append(row)
    if not labels:
        raise DataError(f"{path}: empty file")
    X = np.zeros((len(labels), max_idx))
    for i, row in enumerate(entries):
        for j, v in row.items():
            X[i, j] = v
    y, mapping = _map_labels(labels)
    ds_name = name if name is not None else os.path.basename(path)
    return Dataset(X, y, name=ds_name, label_map=mapping)


def load_dataset(path, fmt: str = "csv", label_col: int = 0,
                 name: str | None = None) -> Dataset:
    if fmt == "csv":
        return load_csv(path, label_col=label_col, name=name)
    if fmt == "libsvm":
        return load_libsvm(path, name=name)
    raise DataError(f"unknown dataset format {fmt!r}")


@dataclass
class NormalizationTransform:
    """Per-feature affine map onto [-1, 1] fitted on training data.

    x' = 2 (x - min) / (max - min) - 1.  Constant features map to 0.
    Applied to unseen data the output may leave [-1, 1]; it is not
    clipped.
    """

    mins: np.ndarray
    maxs: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.mins.size:
            raise DataError(
                f"normalizer fitted on {self.mins.size} features, "
                f"got {X.shape[1]}")
        span = self.maxs - self.mins
        out = np.zeros_like(X)
        nz = span > 0
        out[:, nz] = 2.0 * (X[:, nz] - self.mins[nz]) / span[nz] - 1.0
        return out


def fit_normalizer(X) -> NormalizationTransform:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("normalizer needs a nonempty 2-d sample block")
    return NormalizationTransform(mins=X.min(axis=0), maxs=X.max(axis=0))


def split_dataset(dataset: Dataset, n_train: int, seed: int | None = 0,
                  predefined: bool = False):
    """(train_idx, test_idx) partition of the dataset rows.

    Predefined splits take the first ``n_train`` rows in file order
    (for corpora whose files already encode the official split);
    otherwise rows are permuted by a seeded generator first.
    """
    l = len(dataset)
    if not 0 < n_train < l:
        raise DataError(f"n_train must be in (0, {l}), got {n_train}")
    if predefined:
        idx = np.arange(l)
    else:
        idx = np.random.default_rng(
            default_seed() if seed is None else seed).permutation(l)
    return idx[:n_train], idx[n_train:]


def class_ratio(y) -> float:
    """n_positive / n_negative, the cap multiplier for the minority side."""
    y = np.asarray(y)
    pos = int((y > 0).sum())
    neg = int((y < 0).sum())
    if pos == 0 or neg == 0:
        raise DataError("both classes must be present")
    return pos / neg

"""
File formats used by the experiment harness.

Dense matrices and vectors are header-less CSV. Sparse classification data uses
one example per line, "label idx:val idx:val ...", with 1-based feature
indices. Traces are CSV with the header k,gamma,lambda,f_gap,h_gap,elapsed_ms
written at full precision so a written trace reads back bit for bit.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from core.errors import ConfigError


logger = logging.getLogger(__name__)

TRACE_HEADER = ["k", "gamma", "lambda", "f_gap", "h_gap", "elapsed_ms"]
AGGREGATE_HEADER = ["k", "f_gap_mean", "f_gap_se", "h_gap_mean", "h_gap_se", "paths"]
FLOAT_FORMAT = "%.17g"


def _require_file(path: str | Path) -> Path:
    file_path = Path(path)
    if not file_path.is_file():
        raise FileNotFoundError(f"Data file {file_path} does not exist.")
    return file_path


def load_dense_matrix(path: str | Path) -> np.ndarray:
    file_path = _require_file(path)
    try:
        frame = pd.read_csv(file_path, header=None, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"Matrix file {file_path} is not a numeric CSV.") from exc
    try:
        matrix = frame.to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"Matrix file {file_path} has non-numeric entries.") from exc
    if not np.all(np.isfinite(matrix)):
        raise ConfigError(f"Matrix file {file_path} contains non-finite entries.")
    return matrix


def load_vector(path: str | Path) -> np.ndarray:
    return load_dense_matrix(path).ravel()


def write_dense_matrix(matrix: np.ndarray, path: str | Path) -> None:
    pd.DataFrame(np.atleast_2d(matrix)).to_csv(path, header=False, index=False, float_format=FLOAT_FORMAT)


def write_vector(vector: np.ndarray, path: str | Path) -> None:
    pd.DataFrame(np.asarray(vector).reshape(-1, 1)).to_csv(path, header=False, index=False, float_format=FLOAT_FORMAT)


def load_sparse_labeled(path: str | Path, n_features: int | None = None) -> tuple[sp.csr_matrix, np.ndarray]:
    """Read "label idx:val ..." lines into a CSR matrix and a label vector."""
    file_path = _require_file(path)
    labels, rows, cols, values = [], [], [], []
    with file_path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            try:
                label = int(float(tokens[0]))
                entries = [token.split(":", 1) for token in tokens[1:]]
                indices = [int(index) - 1 for index, _ in entries]
                data = [float(value) for _, value in entries]
            except ValueError as exc:
                raise ConfigError(f"{file_path}:{line_number}: malformed example.") from exc
            if label not in (-1, 1):
                raise ConfigError(f"{file_path}:{line_number}: label must be -1 or +1.")
            if any(index < 0 for index in indices):
                raise ConfigError(f"{file_path}:{line_number}: feature indices are 1-based.")
            row = len(labels)
            labels.append(label)
            rows.extend([row] * len(indices))
            cols.extend(indices)
            values.extend(data)
    if not labels:
        raise ConfigError(f"{file_path} contains no examples.")
    width = max(cols, default=-1) + 1
    if n_features is not None:
        if width > n_features:
            raise ConfigError(f"{file_path} uses feature {width}, beyond n_features = {n_features}.")
        width = n_features
    matrix = sp.csr_matrix((values, (rows, cols)), shape=(len(labels), width), dtype=np.float64)
    logger.debug("Loaded %d examples with %d features from %s.", matrix.shape[0], width, file_path)
    return matrix, np.asarray(labels, dtype=np.float64)


def write_sparse_labeled(matrix, labels, path: str | Path) -> None:
    csr = sp.csr_matrix(matrix)
    with Path(path).open("w", encoding="utf-8") as handle:
        for row, label in enumerate(labels):
            start, stop = csr.indptr[row], csr.indptr[row + 1]
            features = " ".join(
                f"{index + 1}:{value:.17g}" for index, value in zip(csr.indices[start:stop], csr.data[start:stop])
            )
            handle.write(f"{int(label):+d} {features}".rstrip() + "\n")


def write_trace(frame: pd.DataFrame, path: str | Path) -> None:
    missing = [column for column in TRACE_HEADER if column not in frame.columns]
    if missing:
        raise ValueError(f"Trace is missing columns: {', '.join(missing)}.")
    frame[TRACE_HEADER].to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_trace(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(_require_file(path), float_precision="round_trip")
    if list(frame.columns) != TRACE_HEADER:
        raise ConfigError(f"{path} does not have the trace header {','.join(TRACE_HEADER)}.")
    return frame


def write_aggregate(frame: pd.DataFrame, path: str | Path) -> None:
    frame[AGGREGATE_HEADER].to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_aggregate(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(_require_file(path), float_precision="round_trip")


def write_summary(values: dict, path: str | Path) -> None:
    """One "key = value" line per entry, in insertion order."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for key, value in values.items():
            if isinstance(value, float):
                value = f"{value:.17g}"
            handle.write(f"{key} = {value}\n")


def read_summary(path: str | Path) -> dict[str, str]:
    values = {}
    for line in _require_file(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"Summary line {line!r} is not key = value.")
        values[key.strip()] = value.strip()
    return values


def write_plot_data(ks, values, path: str | Path) -> None:
    """Two whitespace-separated columns for gnuplot-style tools."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for k, value in zip(ks, values):
            handle.write(f"{int(k)} {float(value):.17g}\n")

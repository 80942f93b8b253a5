"""Sparse count-matrix container plus on-disk formats.

Two interchange formats are supported:

* Matrix Market coordinate files (``%%MatrixMarket matrix coordinate real
  general``).  Row/column names are carried in ``%gene_names`` /
  ``%cell_names`` comment lines (tab separated) so a matrix round-trips
  through a single file; foreign readers simply ignore the comments.
* Dense delimited text with a header row of cell names and a first column
  of gene names.  Tab or comma is autodetected from the header.

Values are formatted with ``repr`` so every double round-trips exactly and
a read-write-read cycle is byte stable.  Matrices are desk scale: dense
G*C intermediates are assumed to fit in memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import (
    DegenerateCellError,
    DimensionError,
    ParseError,
    ShapeMismatchError,
)

MODE_NONE = "none"
MODE_LIBRARY_SIZE = "library_size"
MODE_LIBRARY_SIZE_LOG2 = "library_size_log2"
NORMALIZE_MODES = (MODE_NONE, MODE_LIBRARY_SIZE, MODE_LIBRARY_SIZE_LOG2)

FORMAT_MATRIX_MARKET = "matrix_market"
FORMAT_DENSE = "dense_delimited"

_MM_REAL_HEADER = "%%MatrixMarket matrix coordinate real general"
_MM_PATTERN_HEADER = "%%MatrixMarket matrix coordinate pattern general"


def default_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}_{i + 1}" for i in range(n)]


@dataclass
class CountMatrix:
    """Genes x cells nonnegative count matrix in canonical sparse form.

    ``values`` is CSR float64 with no explicit zeros.  Instances are
    treated as immutable after construction and are safe to share across
    threads.
    """

    values: sp.csr_matrix
    gene_names: list[str]
    cell_names: list[str]

    @property
    def n_genes(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    @property
    def nnz(self) -> int:
        return self.values.nnz

    def zero_fraction(self) -> float:
        total = self.n_genes * self.n_cells
        return 1.0 - self.nnz / total if total else 0.0

    def to_dense(self) -> np.ndarray:
        return self.values.toarray()

    def cell_totals(self) -> np.ndarray:
        return np.asarray(self.values.sum(axis=0)).ravel()

    @classmethod
    def from_dense(
        cls,
        array,
        gene_names: list[str] | None = None,
        cell_names: list[str] | None = None,
    ) -> "CountMatrix":
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got ndim={arr.ndim}")
        g, c = arr.shape
        m = cls(
            values=sp.csr_matrix(arr),
            gene_names=list(gene_names) if gene_names is not None else default_names("gene", g),
            cell_names=list(cell_names) if cell_names is not None else default_names("cell", c),
        )
        m.validate()
        return m

    def validate(self) -> None:
        g, c = self.values.shape
        if len(self.gene_names) != g:
            raise ValueError(f"{len(self.gene_names)} gene names for {g} rows")
        if len(self.cell_names) != c:
            raise ValueError(f"{len(self.cell_names)} cell names for {c} columns")
        if len(set(self.gene_names)) != g:
            raise ValueError("gene names are not unique")
        if len(set(self.cell_names)) != c:
            raise ValueError("cell names are not unique")
        data = self.values.data
        if data.size:
            if not np.all(np.isfinite(data)):
                i, j = _first_offender(self.values, ~np.isfinite(self.values.data))
                raise ValueError(f"non-finite entry at gene {i}, cell {j}")
            if np.any(data < 0):
                i, j = _first_offender(self.values, self.values.data < 0)
                raise ValueError(f"negative entry at gene {i}, cell {j}")
        # canonical form: no stored zeros
        self.values.eliminate_zeros()
        self.values.sort_indices()


def _first_offender(matrix: sp.csr_matrix, flag: np.ndarray) -> tuple[int, int]:
    coo = matrix.tocoo()
    k = int(np.flatnonzero(flag)[0])
    return int(coo.row[k]), int(coo.col[k])


@dataclass
class NormalizationRecord:
    """How a matrix was rescaled, sufficient to invert the transform."""

    mode: str
    size_factors: np.ndarray
    applied_log: bool


def normalize(m: CountMatrix, mode: str) -> tuple[CountMatrix, NormalizationRecord]:
    """Library-size scale each cell to the median total, optionally log2(x+1).

    Zeros are preserved exactly; raises :class:`DegenerateCellError` for a
    cell with zero total count under a library-size mode.
    """
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if mode == MODE_NONE:
        rec = NormalizationRecord(MODE_NONE, np.ones(m.n_cells), applied_log=False)
        out = CountMatrix(m.values.copy(), list(m.gene_names), list(m.cell_names))
        return out, rec

    totals = m.cell_totals()
    if np.any(totals <= 0):
        bad = int(np.flatnonzero(totals <= 0)[0])
        raise DegenerateCellError(f"cell {m.cell_names[bad]!r} has zero total count")
    factors = np.median(totals) / totals

    csc = m.values.tocsc(copy=True)
    for j in range(m.n_cells):
        csc.data[csc.indptr[j]:csc.indptr[j + 1]] *= factors[j]
    if mode == MODE_LIBRARY_SIZE_LOG2:
        csc.data = np.log2(csc.data + 1.0)
    out = CountMatrix(csc.tocsr(), list(m.gene_names), list(m.cell_names))
    out.validate()
    rec = NormalizationRecord(mode, factors, applied_log=(mode == MODE_LIBRARY_SIZE_LOG2))
    return out, rec


def denormalize(m: CountMatrix, rec: NormalizationRecord) -> CountMatrix:
    """Invert :func:`normalize`; exact for mode ``none``."""
    if rec.mode == MODE_NONE:
        return CountMatrix(m.values.copy(), list(m.gene_names), list(m.cell_names))
    if rec.size_factors.shape[0] != m.n_cells:
        raise ShapeMismatchError(
            f"record covers {rec.size_factors.shape[0]} cells, matrix has {m.n_cells}"
        )
    csc = m.values.tocsc(copy=True)
    if rec.applied_log:
        csc.data = np.exp2(csc.data) - 1.0
    for j in range(m.n_cells):
        csc.data[csc.indptr[j]:csc.indptr[j + 1]] /= rec.size_factors[j]
    out = CountMatrix(csc.tocsr(), list(m.gene_names), list(m.cell_names))
    out.validate()
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def sniff_format(path: str) -> str:
    """Guess the matrix format from the file extension."""
    return FORMAT_MATRIX_MARKET if str(path).endswith((".mtx", ".mm")) else FORMAT_DENSE


def read_matrix(path: str, format: str) -> CountMatrix:
    """Read a count matrix; rejects negative and non-finite values."""
    if format == FORMAT_MATRIX_MARKET:
        return _read_matrix_market(path)
    if format == FORMAT_DENSE:
        return _read_dense(path)
    raise ValueError(f"unknown matrix format {format!r}")


def write_matrix(m: CountMatrix, path: str, format: str) -> None:
    if format == FORMAT_MATRIX_MARKET:
        _write_matrix_market(m, path)
    elif format == FORMAT_DENSE:
        _write_dense(m, path)
    else:
        raise ValueError(f"unknown matrix format {format!r}")


def _parse_value(token: str, path: str, line_no: int) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"unparseable value {token!r}", path, line_no) from None
    return v


def _read_matrix_market(path: str) -> CountMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        tokens = header.lower().split()
        if tokens[:1] != ["%%matrixmarket"]:
            raise ParseError("missing MatrixMarket banner", path, 1)
        if tokens[1:5] != ["matrix", "coordinate", "real", "general"]:
            raise ParseError(f"unsupported MatrixMarket type {header!r}", path, 1)

        gene_names: list[str] | None = None
        cell_names: list[str] | None = None
        line_no = 1
        dims_line = None
        for raw in fh:
            line_no += 1
            line = raw.rstrip("\n")
            if line.startswith("%"):
                if line.startswith("%gene_names\t"):
                    gene_names = line.split("\t")[1:]
                elif line.startswith("%cell_names\t"):
                    cell_names = line.split("\t")[1:]
                continue
            if not line.strip():
                continue
            dims_line = (line, line_no)
            break
        if dims_line is None:
            raise ParseError("missing size line", path, line_no)
        parts = dims_line[0].split()
        if len(parts) != 3:
            raise ParseError(f"expected 'rows cols nnz', got {dims_line[0]!r}", path, dims_line[1])
        try:
            g, c, nnz = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"non-integer size line {dims_line[0]!r}", path, dims_line[1]) from None
        if g <= 0 or c <= 0 or nnz < 0:
            raise DimensionError(f"invalid dimensions {g} x {c} ({nnz} entries)", path, dims_line[1])

        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for raw in fh:
            line_no += 1
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 'i j value', got {line!r}", path, line_no)
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer coordinate in {line!r}", path, line_no) from None
            if not (1 <= i <= g and 1 <= j <= c):
                raise DimensionError(f"coordinate ({i},{j}) outside {g} x {c}", path, line_no)
            if k >= nnz:
                raise ParseError(f"more than the declared {nnz} entries", path, line_no)
            v = _parse_value(parts[2], path, line_no)
            if math.isnan(v) or math.isinf(v):
                raise ValueError(f"non-finite entry at gene {i}, cell {j} ({path}:{line_no})")
            if v < 0:
                raise ValueError(f"negative entry at gene {i}, cell {j} ({path}:{line_no})")
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
            k += 1
        if k != nnz:
            raise ParseError(f"declared {nnz} entries but found {k}", path, line_no)

    if len(np.unique(rows * c + cols)) != nnz:
        raise ParseError("duplicate coordinates", path)
    if gene_names is not None and len(gene_names) != g:
        raise ParseError(f"{len(gene_names)} gene names for {g} rows", path)
    if cell_names is not None and len(cell_names) != c:
        raise ParseError(f"{len(cell_names)} cell names for {c} columns", path)

    values = sp.csr_matrix((vals, (rows, cols)), shape=(g, c))
    m = CountMatrix(
        values,
        gene_names if gene_names is not None else default_names("gene", g),
        cell_names if cell_names is not None else default_names("cell", c),
    )
    m.validate()
    return m


def _write_matrix_market(m: CountMatrix, path: str) -> None:
    coo = m.values.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_MM_REAL_HEADER + "\n")
        fh.write("%gene_names\t" + "\t".join(m.gene_names) + "\n")
        fh.write("%cell_names\t" + "\t".join(m.cell_names) + "\n")
        fh.write(f"{m.n_genes} {m.n_cells} {m.nnz}\n")
        for k in order:
            fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {float(coo.data[k])!r}\n")


def _split_header(line: str) -> tuple[str, list[str]]:
    delim = "\t" if "\t" in line else ","
    return delim, line.rstrip("\n").split(delim)


def _read_dense(path: str) -> CountMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise ParseError("empty file", path, 1)
        delim, head = _split_header(header)

        gene_names: list[str] = []
        data_rows: list[np.ndarray] = []
        width = None
        line_no = 1
        for raw in fh:
            line_no += 1
            if not raw.strip():
                continue
            parts = raw.rstrip("\n").split(delim)
            if width is None:
                width = len(parts)
                if width < 2:
                    raise ParseError("data row has no value columns", path, line_no)
            elif len(parts) != width:
                raise DimensionError(
                    f"row has {len(parts)} fields, expected {width}", path, line_no
                )
            gene_names.append(parts[0])
            row = np.empty(width - 1, dtype=np.float64)
            for j, tok in enumerate(parts[1:]):
                v = _parse_value(tok, path, line_no)
                if math.isnan(v) or math.isinf(v):
                    raise ValueError(
                        f"non-finite entry at gene {parts[0]!r}, column {j + 1} ({path}:{line_no})"
                    )
                if v < 0:
                    raise ValueError(
                        f"negative entry at gene {parts[0]!r}, column {j + 1} ({path}:{line_no})"
                    )
                row[j] = v
            data_rows.append(row)

    if width is None:
        raise ParseError("no data rows", path)
    n_cells = width - 1
    # header may or may not carry a corner label above the gene-name column
    if len(head) == n_cells + 1:
        cell_names = head[1:]
    elif len(head) == n_cells:
        cell_names = head
    else:
        raise DimensionError(
            f"header has {len(head)} fields for {n_cells} value columns", path, 1
        )
    if len(set(gene_names)) != len(gene_names):
        raise ParseError("duplicate gene names", path)
    if len(set(cell_names)) != len(cell_names):
        raise ParseError("duplicate cell names", path)

    dense = np.vstack(data_rows) if data_rows else np.zeros((0, n_cells))
    return CountMatrix.from_dense(dense, gene_names, cell_names)


def _write_dense(m: CountMatrix, path: str) -> None:
    dense = m.to_dense()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t" + "\t".join(m.cell_names) + "\n")
        for i, name in enumerate(m.gene_names):
            fh.write(name + "\t" + "\t".join(repr(float(v)) for v in dense[i]) + "\n")


# ---------------------------------------------------------------------------
# labels and masks
# ---------------------------------------------------------------------------


def read_labels(path: str) -> np.ndarray:
    """One integer label per line, aligned with cell order."""
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            tok = raw.strip()
            if not tok:
                continue
            try:
                labels.append(int(tok))
            except ValueError:
                raise ParseError(f"unparseable label {tok!r}", path, line_no) from None
    return np.asarray(labels, dtype=np.int64)


def write_labels(labels, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in np.asarray(labels).ravel():
            fh.write(f"{int(lab)}\n")


def read_mask(path: str) -> np.ndarray:
    """Read a pattern Matrix Market file into a dense boolean matrix."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.lower().split() != _MM_PATTERN_HEADER.lower().split():
            raise ParseError(f"expected pattern header, got {header!r}", path, 1)
        line_no = 1
        dims = None
        for raw in fh:
            line_no += 1
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            if dims is None:
                parts = line.split()
                if len(parts) != 3:
                    raise ParseError(f"expected 'rows cols nnz', got {line!r}", path, line_no)
                g, c, nnz = (int(p) for p in parts)
                dims = (g, c)
                mask = np.zeros((g, c), dtype=bool)
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'i j', got {line!r}", path, line_no)
            i, j = int(parts[0]), int(parts[1])
            if not (1 <= i <= dims[0] and 1 <= j <= dims[1]):
                raise DimensionError(f"coordinate ({i},{j}) outside {dims[0]} x {dims[1]}", path, line_no)
            mask[i - 1, j - 1] = True
    if dims is None:
        raise ParseError("missing size line", path)
    return mask


def write_mask(mask: np.ndarray, path: str) -> None:
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_MM_PATTERN_HEADER + "\n")
        fh.write(f"{mask.shape[0]} {mask.shape[1]} {rows.size}\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i + 1} {j + 1}\n")

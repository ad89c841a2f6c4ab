"""Core domain types and their line-oriented text formats.

Voxel index i is the position of the voxel in the mask file; every label
vector, profile row and graph node downstream uses that index.
"""
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.sparse as sp

log = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"
SYMMETRY_RTOL = 1e-9
BINARY_MAGIC = b"CONNBIN1"


# --- 1. ERRORS ---
class ConparcError(RuntimeError):
    """Base class for every failure raised by this project."""


class ValidationError(ConparcError, ValueError):
    """Inputs or parameters violate a precondition."""


class FormatError(ValidationError):
    """A file does not conform to its format."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        if line is not None:
            message = f"{message} at line {line}"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class NumericalError(ConparcError):
    """A numerical routine failed."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residuals=None):
        self.residuals = None if residuals is None else np.asarray(residuals)
        if self.residuals is not None and self.residuals.size:
            message = f"{message} (best residual {self.residuals.max():.3e})"
        super().__init__(message)


# --- 2. TYPES ---
def _frozen(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class BrainMask:
    coords: np.ndarray
    dims: tuple

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.int64).reshape(-1, 3)
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValidationError(f"invalid mask dims {dims}")
        if len(coords) == 0:
            raise ValidationError("empty mask")
        if (coords < 0).any() or (coords >= np.array(dims)).any():
            raise ValidationError("coordinate out of bounds")
        keys = np.ravel_multi_index(coords.T, dims)
        if np.unique(keys).size != keys.size:
            raise ValidationError("duplicate coordinate")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "dims", dims)

    @property
    def n(self):
        return len(self.coords)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, BrainMask):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.coords, other.coords)

    @cached_property
    def index_volume(self):
        """Grid of voxel indices; -1 outside the mask."""
        volume = np.full(self.dims, -1, dtype=np.int64)
        volume[tuple(self.coords.T)] = np.arange(self.n)
        return _frozen(volume)

    @classmethod
    def full(cls, dims):
        grid = np.indices(dims).reshape(3, -1).T
        return cls(grid, dims)


class SparseConnectivity:
    """Symmetric nonnegative voxel-by-voxel streamline strengths.

    Stored once as the upper triangle (i <= j, diagonal holds self-loops);
    `matrix` expands it to the full symmetric form on access.
    """

    def __init__(self, n, rows, cols, weights, _lines=None, _path=None):
        self.n = int(n)
        if self.n < 1:
            raise ValidationError("connectivity needs n >= 1")
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if not (rows.size == cols.size == weights.size):
            raise ValidationError("rows, cols and weights differ in length")

        def fail(message, pos):
            line = None if _lines is None else int(_lines[pos])
            if _lines is None:
                raise ValidationError(f"{message} (entry {int(pos)})")
            raise FormatError(message, _path, line)

        bad = np.flatnonzero((rows < 0) | (cols < 0) | (rows >= self.n) | (cols >= self.n))
        if bad.size:
            fail("index out of range", bad[0])
        bad = np.flatnonzero(~np.isfinite(weights) | (weights < 0))
        if bad.size:
            fail("negative weight", bad[0])

        upper = rows <= cols
        a = np.where(upper, rows, cols)
        b = np.where(upper, cols, rows)
        keys = a * self.n + b
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
        counts = np.diff(np.r_[starts, sorted_keys.size])
        if (counts > 2).any():
            fail("duplicate entry", order[starts[np.argmax(counts > 2)] + 2])
        pairs = starts[counts == 2]
        first, second = order[pairs], order[pairs + 1]
        same = np.flatnonzero(upper[first] == upper[second])
        if same.size:
            fail("duplicate entry", second[same[0]])
        w1, w2 = weights[first], weights[second]
        skew = np.flatnonzero(np.abs(w1 - w2) > SYMMETRY_RTOL * np.maximum(w1, w2))
        if skew.size:
            fail("asymmetric entry", second[skew[0]])
        keep = order[starts]
        keep = keep[weights[keep] > 0]

        self.upper = sp.csr_matrix((weights[keep], (a[keep], b[keep])), shape=(self.n, self.n))
        self.upper.sort_indices()

    @classmethod
    def empty(cls, n):
        return cls(n, [], [], [])

    @property
    def nnz(self):
        return self.upper.nnz

    @cached_property
    def matrix(self):
        full = (self.upper + self.upper.T - sp.diags(self.upper.diagonal())).tocsr()
        full.sort_indices()
        return full

    def entries(self):
        """(i, j, w) arrays with i <= j, sorted by (i, j)."""
        coo = self.upper.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data

    def strengths(self):
        """Total connectivity strength of every voxel (row sums)."""
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def total_strength(self):
        return float(self.upper.sum())

    def __eq__(self, other):
        if not isinstance(other, SparseConnectivity):
            return NotImplemented
        return self.n == other.n and (self.upper != other.upper).nnz == 0


@dataclass(frozen=True, eq=False)
class Parcellation:
    """Label per voxel in 1..k."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64).ravel()
        k = int(self.k)
        if k < 1:
            raise ValidationError("k must be >= 1")
        if labels.size == 0:
            raise ValidationError("parcellation has no voxels")
        if labels.min() < 1 or labels.max() > k:
            raise ValidationError(f"label outside [1, {k}]")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "k", k)

    @classmethod
    def from_labels(cls, labels, k=None):
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels, int(labels.max()) if k is None else k)

    @property
    def n(self):
        return self.labels.size

    @property
    def m(self):
        return self.k

    def __len__(self):
        return self.n

    @cached_property
    def sizes(self):
        return _frozen(np.bincount(self.labels, minlength=self.k + 1)[1:])

    @property
    def degenerate(self):
        """True when some label in [1, k] is unused."""
        return bool((self.sizes == 0).any())

    def indicator(self):
        """n x k sparse 0/1 membership matrix."""
        return sp.csr_matrix(
            (np.ones(self.n), (np.arange(self.n), self.labels - 1)), shape=(self.n, self.k)
        )

    def canonical(self):
        """Relabel regions in order of first appearance along the voxel index."""
        _, first = np.unique(self.labels, return_index=True)
        used = self.labels[np.sort(first)]
        mapping = np.zeros(self.k + 1, dtype=np.int64)
        mapping[used] = np.arange(1, used.size + 1)
        return Parcellation(mapping[self.labels], self.k)

    def __eq__(self, other):
        if not isinstance(other, Parcellation):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.labels, other.labels)

    def __repr__(self):
        flag = ", degenerate" if self.degenerate else ""
        return f"Parcellation(n={self.n}, k={self.k}{flag})"


# A segmentation only defines connectivity profiles; its m is unrelated to k.
Segmentation = Parcellation


@dataclass(frozen=True, eq=False)
class ProfileMatrix:
    """n x m cumulative strengths of each voxel to each segmentation region."""

    values: sp.csr_matrix

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]

    def row_totals(self):
        return np.asarray(self.values.sum(axis=1)).ravel()

    def to_dense(self):
        return self.values.toarray()

    def to_frame(self):
        return pd.DataFrame(
            self.to_dense(), columns=[f"region_{c}" for c in range(1, self.m + 1)]
        )


# --- 3. SEEDS ---
def derive_seed(seed, *keys):
    """Child SeedSequence keyed by `keys`; independent of worker count and call order."""
    keys = tuple(int(k) for k in keys)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + keys)
    return np.random.SeedSequence(0 if seed is None else int(seed), spawn_key=keys)


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, np.random.SeedSequence):
        return np.random.default_rng(rng)
    return np.random.default_rng(0 if rng is None else int(rng))


# --- 4. TEXT FORMATS ---
def _records(path):
    """Yield (line_number, tokens) for non-blank, non-comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield lineno, text.split()


def _header(records, path, tag, fields):
    try:
        lineno, tokens = next(records)
    except StopIteration:
        raise FormatError(f"missing {tag} header", path, 1)
    if tokens[0] != tag or len(tokens) != fields + 1:
        raise FormatError(f"expected '{tag}' header with {fields} fields", path, lineno)
    try:
        return [int(t) for t in tokens[1:]]
    except ValueError:
        raise FormatError("non-integer header field", path, lineno)


def read_mask(path):
    records = _records(path)
    nx, ny, nz, n = _header(records, path, "MASK", 4)
    dims = (nx, ny, nz)
    if min(dims) < 1:
        raise FormatError("invalid dims", path, 1)
    coords = []
    seen = set()
    for lineno, tokens in records:
        if len(tokens) != 3:
            raise FormatError("expected 'x y z'", path, lineno)
        try:
            xyz = tuple(int(t) for t in tokens)
        except ValueError:
            raise FormatError("non-integer coordinate", path, lineno)
        if any(c < 0 or c >= d for c, d in zip(xyz, dims)):
            raise FormatError("coordinate out of bounds", path, lineno)
        if xyz in seen:
            raise FormatError("duplicate coordinate", path, lineno)
        seen.add(xyz)
        coords.append(xyz)
    if not coords:
        raise FormatError("empty mask", path)
    if len(coords) != n:
        raise FormatError(f"header declares {n} voxels but file has {len(coords)}", path)
    return BrainMask(np.array(coords, dtype=np.int64), dims)


def write_mask(mask, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("MASK %d %d %d %d\n" % (*mask.dims, mask.n))
        np.savetxt(fh, mask.coords, fmt="%d")


def read_connectivity(path, mask):
    records = _records(path)
    n, nnz = _header(records, path, "CONN", 2)
    if n != mask.n:
        raise FormatError(f"connectivity has n={n} but mask has {mask.n} voxels", path, 1)
    rows, cols, weights, lines = [], [], [], []
    for lineno, tokens in records:
        if len(tokens) != 3:
            raise FormatError("expected 'i j w'", path, lineno)
        try:
            rows.append(int(tokens[0]))
            cols.append(int(tokens[1]))
            weights.append(float(tokens[2]))
        except ValueError:
            raise FormatError("malformed entry", path, lineno)
        lines.append(lineno)
    if len(rows) != nnz:
        raise FormatError(f"header declares {nnz} entries but file has {len(rows)}", path)
    return SparseConnectivity(n, rows, cols, weights, _lines=np.array(lines), _path=path)


def write_connectivity(conn, path):
    i, j, w = conn.entries()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("CONN %d %d\n" % (conn.n, conn.nnz))
        pd.DataFrame({"i": i, "j": j, "w": w}).to_csv(
            fh, sep=" ", header=False, index=False, float_format=FLOAT_FMT
        )


def write_connectivity_binary(conn, path):
    i, j, w = conn.entries()
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(np.array([conn.n, conn.nnz], dtype="<i8").tobytes())
        fh.write(i.astype("<i8").tobytes())
        fh.write(j.astype("<i8").tobytes())
        fh.write(w.astype("<f8").tobytes())


def read_connectivity_binary(path, mask):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != BINARY_MAGIC:
        raise FormatError("not a binary connectivity file", path)
    if len(blob) < 24:
        raise FormatError(f"truncated header: {len(blob)} bytes, expected at least 24", path)
    n, nnz = (int(v) for v in np.frombuffer(blob, dtype="<i8", count=2, offset=8))
    if nnz < 0:
        raise FormatError(f"negative entry count {nnz}", path)
    if n != mask.n:
        raise FormatError(f"connectivity has n={n} but mask has {mask.n} voxels", path)
    expected = 24 + 24 * nnz
    if len(blob) != expected:
        raise FormatError(f"truncated file: {len(blob)} bytes, expected {expected}", path)
    offset = 24
    i = np.frombuffer(blob, dtype="<i8", count=nnz, offset=offset)
    j = np.frombuffer(blob, dtype="<i8", count=nnz, offset=offset + 8 * nnz)
    w = np.frombuffer(blob, dtype="<f8", count=nnz, offset=offset + 16 * nnz)
    return SparseConnectivity(n, i, j, w)


def write_parcellation(parc, mask, path):
    if mask is not None and parc.n != mask.n:
        raise ValidationError(f"voxel count mismatch: parcellation {parc.n}, mask {mask.n}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("PARC %d %d\n" % (parc.n, parc.k))
        np.savetxt(fh, parc.labels, fmt="%d")


def read_parcellation(path, mask=None):
    """Labels from a PARC file; with a mask the voxel count must match it."""
    records = _records(path)
    n, k = _header(records, path, "PARC", 2)
    if mask is not None and n != mask.n:
        raise FormatError(f"voxel count mismatch: file {n}, mask {mask.n}", path, 1)
    if k < 1:
        raise FormatError("k must be >= 1", path, 1)
    labels = []
    for lineno, tokens in records:
        if len(tokens) != 1:
            raise FormatError("expected one label", path, lineno)
        try:
            label = int(tokens[0])
        except ValueError:
            raise FormatError("non-integer label", path, lineno)
        if label < 1 or label > k:
            raise FormatError(f"label {label} outside [1, {k}]", path, lineno)
        labels.append(label)
    if len(labels) != n:
        raise FormatError(f"header declares {n} labels but file has {len(labels)}", path)
    parc = Parcellation(np.array(labels, dtype=np.int64), k)
    if parc.degenerate:
        log.warning("%s: %d of %d labels unused", path, int((parc.sizes == 0).sum()), k)
    return parc


# Segmentation files share the PARC format.
read_segmentation = read_parcellation
write_segmentation = write_parcellation


def write_confidence(values, path):
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("CONF %d\n" % values.size)
        np.savetxt(fh, values, fmt=FLOAT_FMT)


def read_confidence(path):
    records = _records(path)
    (n,) = _header(records, path, "CONF", 1)
    values = []
    for lineno, tokens in records:
        try:
            values.append(float(tokens[0]))
        except (ValueError, IndexError):
            raise FormatError("malformed confidence", path, lineno)
    if len(values) != n:
        raise FormatError(f"header declares {n} values but file has {len(values)}", path)
    return np.array(values)

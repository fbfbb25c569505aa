"""Structure matrices of intrinsic CAR fields and their normalizing pieces.

The structure matrix R carries node degrees on the diagonal and -1 for each
neighbour pair; it equals the field's precision matrix at unit precision.
R is positive semi-definite with one null direction (the constant vector)
per connected component of size > 1, plus one all-zero row per singleton.

The normalizing constant of the field factorizes into a kappa-free
generalized determinant and a power of kappa; both parts are exposed
separately because MCMC only needs the kappa-dependent exponent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from .graphs import ComponentPartition, Graph

if TYPE_CHECKING:  # pragma: no cover
    from .scaling import ScaledCarModel

#: relative factor of the scale-aware null-space eigenvalue threshold
NULL_SPACE_RTOL = 1e-12


class NumericalError(RuntimeError):
    """A matrix computation violated its numerical preconditions."""


@dataclass(frozen=True)
class SparseSymmetric:
    """Symmetric sparse matrix stored as upper-triangle COO (row <= col).

    Explicit zeros are kept (singleton rows of a structure matrix store a
    zero diagonal entry) so the dimension always matches the owning graph.
    Arrays are read-only after construction.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols, vals must have identical shapes")
        if rows.size and (rows.min() < 0 or cols.max() >= self.n):
            raise ValueError("index out of range")
        if np.any(rows > cols):
            raise ValueError("entries must satisfy row <= col")
        key = np.lexsort((cols, rows))
        object.__setattr__(self, "rows", rows[key])
        object.__setattr__(self, "cols", cols[key])
        object.__setattr__(self, "vals", vals[key])
        pairs = self.rows * self.n + self.cols
        if np.unique(pairs).size != pairs.size:
            raise ValueError("duplicate entries")
        for a in (self.rows, self.cols, self.vals):
            a.flags.writeable = False

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return sp.csr_matrix((v, (r, c)), shape=(self.n, self.n))

    def to_csr(self) -> sp.csr_matrix:
        """Full (mirrored) symmetric matrix in CSR form."""
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def diag(self) -> np.ndarray:
        """Diagonal as a dense vector (explicit zeros included, absent -> 0)."""
        d = np.zeros(self.n)
        on = self.rows == self.cols
        d[self.rows[on]] = self.vals[on]
        return d

    def quad_form(self, x: np.ndarray) -> float:
        """x' M x."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {x.shape}")
        return float(x @ (self._csr @ x))

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()


def write_mtx(m: SparseSymmetric, path: str | Path) -> None:
    """Write in Matrix Market coordinate format (symmetric, real, 1-based).

    The lower triangle is stored, per the symmetric MM convention; values are
    rendered with 17 significant digits so they round-trip bit-exactly.
    """
    lines = ["%%MatrixMarket matrix coordinate real symmetric"]
    lines.append(f"{m.n} {m.n} {m.nnz}")
    for r, c, v in zip(m.rows, m.cols, m.vals):
        lines.append(f"{c + 1} {r + 1} {v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mtx(path: str | Path) -> SparseSymmetric:
    """Read a symmetric real Matrix Market coordinate file."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise ValueError(f"{path}: not a Matrix Market file")
    header = lines[0].lower().split()
    if "coordinate" not in header or "symmetric" not in header:
        raise ValueError(f"{path}: expected coordinate symmetric format")
    body = [ln for ln in lines[1:] if ln.strip() and not ln.startswith("%")]
    nr, nc, nnz = (int(t) for t in body[0].split())
    if nr != nc:
        raise ValueError(f"{path}: matrix is not square")
    rows, cols, vals = [], [], []
    for ln in body[1 : 1 + nnz]:
        i_s, j_s, v_s = ln.split()
        i, j = int(i_s) - 1, int(j_s) - 1
        rows.append(min(i, j))
        cols.append(max(i, j))
        vals.append(float(v_s))
    return SparseSymmetric(
        n=nr,
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.asarray(vals),
    )


@dataclass(frozen=True)
class NormalizingInfo:
    """Kappa-free ingredients of the field's normalizing constant.

    `kappa_exponent` is the power of kappa (1/2 per singleton, (m-1)/2 per
    component of size m > 1); `gen_log_det` is the log of the product of
    non-zero eigenvalues of the scaled structure matrix.
    """

    kappa_exponent: Fraction
    gen_log_det: float


def structure_matrix(g: Graph) -> SparseSymmetric:
    """Assemble the structure matrix: degree diagonal, -1 per neighbour pair.

    Singleton rows keep an explicit zero diagonal entry.
    """
    deg = g.degrees
    rows = list(range(g.n)) + [i for i, _ in g.edges]
    cols = list(range(g.n)) + [j for _, j in g.edges]
    vals = [float(deg[i]) for i in range(g.n)] + [-1.0] * len(g.edges)
    return SparseSymmetric(
        n=g.n,
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.asarray(vals),
    )


def kappa_exponent(partition: ComponentPartition) -> Fraction:
    """Power of kappa in the normalizing constant of the scaled field."""
    total = Fraction(0)
    for size in partition.sizes:
        m = int(size)
        total += Fraction(1, 2) if m == 1 else Fraction(m - 1, 2)
    return total


def null_space_threshold(eigenvalues: np.ndarray, dim: int) -> float:
    """Scale-aware cutoff below which an eigenvalue counts as zero."""
    lam_max = float(eigenvalues.max(initial=0.0))
    return dim * lam_max * NULL_SPACE_RTOL


def generalized_log_determinant(m: SparseSymmetric, partition: ComponentPartition) -> float:
    """Log of the product of non-zero eigenvalues of a PSD matrix.

    The expected rank deficiency is one per component of size > 1 plus one
    per singleton whose stored diagonal is zero (i.e. unscaled structure
    rows); a mismatch with the observed null-space dimension is an error, as
    is any eigenvalue below the negative tolerance.
    """
    if m.n != partition.n:
        raise ValueError("matrix dimension does not match partition")
    lam = np.linalg.eigvalsh(m.to_dense())
    tol = null_space_threshold(lam, m.n)
    if lam[0] < -max(tol, NULL_SPACE_RTOL):
        raise NumericalError(f"matrix is not PSD: smallest eigenvalue {lam[0]:.3e}")
    diag = m.diag()
    expected = len(partition.non_singleton_components)
    expected += sum(1 for i in partition.singleton_ids if diag[i] == 0.0)
    observed = int(np.sum(lam <= tol))
    if observed != expected:
        raise NumericalError(
            f"rank deficiency {observed} inconsistent with partition (expected {expected})"
        )
    return float(np.sum(np.log(lam[lam > tol])))


def log_density_parts(
    x: np.ndarray, kappa: float, matrix: SparseSymmetric, exponent: Fraction | float
) -> float:
    """kappa-dependent log-density: exponent*log(kappa) - (kappa/2) x'Mx."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return float(exponent) * math.log(kappa) - 0.5 * kappa * matrix.quad_form(x)


def log_density(x: np.ndarray, kappa: float, model: "ScaledCarModel") -> float:
    """Unnormalized log-density of the scaled field (kappa-dependent part only).

    Constant terms (the generalized determinant and powers of 2*pi) are
    omitted; they never vary with kappa or x.
    """
    return log_density_parts(x, kappa, model.scaled_R, model.norm_info.kappa_exponent)

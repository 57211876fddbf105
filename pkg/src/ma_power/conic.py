"""Real conic programs over zero, nonnegative, second-order and PSD cones.

Programs are stored as ``A x + s = b, s ∈ K`` and minimize ``cᵀx + c0``. The cone
product K is an ordered list of blocks. A PSD block of order r occupies r(r+1)/2
rows holding the scaled lower triangle of a symmetric matrix (column-major,
off-diagonal entries multiplied by √2), so the row inner product matches the
trace inner product.

Complex constraints reach a program only through :func:`embed_hermitian_psd`
and :func:`embed_complex_soc`. Solving is delegated to cvxopt's primal-dual
interior-point method after presolve and Ruiz equilibration.
"""

import logging
import math
from pathlib import Path
from typing import Any

import cvxopt
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from cvxopt import solvers
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import InvalidInputError
from .models import ConeKind, SolveStatus, ToleranceConfig

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


def _pad(mat: sp.spmatrix, n_cols: int) -> sp.csr_matrix:
    mat = sp.csr_matrix(mat)
    if mat.shape[1] == n_cols:
        return mat
    if mat.shape[1] > n_cols:
        raise InvalidInputError("expression refers to more variables than requested")
    coo = mat.tocoo()
    return sp.csr_matrix((coo.data, (coo.row, coo.col)), shape=(mat.shape[0], n_cols))


def _shape_size(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape, dtype=int)) if shape else 1


# Expressions


class Affine:
    """Real affine expression with an array shape.

    Entry i (row-major) is ``coeffs[i] @ x + const[i]``. ``coeffs`` may have fewer
    columns than the final program; the missing columns are zero.
    """

    __array_ufunc__ = None  # numpy defers to the reflected operators

    def __init__(self, coeffs: sp.spmatrix, const: np.ndarray, shape: tuple[int, ...]):
        self.coeffs = sp.csr_matrix(coeffs)
        self.const = np.asarray(const, dtype=float).ravel()
        self.shape = tuple(int(s) for s in shape)
        if self.coeffs.shape[0] != self.size or self.const.shape[0] != self.size:
            raise InvalidInputError(
                f"affine data with {self.coeffs.shape[0]} rows does not fit shape {self.shape}"
            )

    @classmethod
    def constant(cls, value: Any) -> "Affine":
        v = np.asarray(value, dtype=float)
        return cls(sp.csr_matrix((v.size, 0)), v.ravel(), v.shape)

    @property
    def size(self) -> int:
        return _shape_size(self.shape)

    @property
    def n_cols(self) -> int:
        return self.coeffs.shape[1]

    @property
    def is_constant(self) -> bool:
        return self.coeffs.nnz == 0

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        vals = self.coeffs @ x[: self.n_cols] + self.const
        return vals.reshape(self.shape) if self.shape else vals[0]

    # structure

    def _take(self, idx: np.ndarray, shape: tuple[int, ...]) -> "Affine":
        idx = np.asarray(idx, dtype=int).ravel()
        return Affine(self.coeffs[idx], self.const[idx], shape)

    def __getitem__(self, key) -> "Affine":
        idx = np.arange(self.size).reshape(self.shape)[key]
        return self._take(idx, np.shape(idx))

    def reshape(self, *shape) -> "Affine":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Affine(self.coeffs, self.const, np.empty(self.size).reshape(shape).shape)

    def ravel(self) -> "Affine":
        return self.reshape(self.size)

    @property
    def T(self) -> "Affine":
        if len(self.shape) < 2:
            return self
        idx = np.arange(self.size).reshape(self.shape).T
        return self._take(idx, idx.shape)

    def sum(self) -> "Affine":
        ones = sp.csr_matrix(np.ones((1, self.size)))
        return Affine(ones @ self.coeffs, [self.const.sum()], ())

    def trace(self) -> "Affine":
        n = min(self.shape)
        idx = np.arange(n) * self.shape[1] + np.arange(n)
        return self._take(idx, (n,)).sum()

    # arithmetic

    def _coerce(self, other) -> "Affine":
        if isinstance(other, Affine):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise InvalidInputError(f"shape mismatch {self.shape} vs {other.shape}")
            return other
        return Affine.constant(np.broadcast_to(np.asarray(other, dtype=float), self.shape))

    def __add__(self, other):
        if isinstance(other, ComplexAffine) or (
            not isinstance(other, Affine) and np.iscomplexobj(other)
        ):
            return ComplexAffine.from_real(self) + other
        other = self._coerce(other)
        a, b = self, other
        if a.size == 1 and b.size > 1:
            a = a._broadcast(b.shape)
        elif b.size == 1 and a.size > 1:
            b = b._broadcast(a.shape)
        n = max(a.n_cols, b.n_cols)
        return Affine(_pad(a.coeffs, n) + _pad(b.coeffs, n), a.const + b.const, a.shape)

    __radd__ = __add__

    def _broadcast(self, shape: tuple[int, ...]) -> "Affine":
        return self._take(np.zeros(_shape_size(shape), dtype=int), shape)

    def __neg__(self) -> "Affine":
        return Affine(-self.coeffs, -self.const, self.shape)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Affine | ComplexAffine):
            raise InvalidInputError("product of two expressions is not affine")
        if np.iscomplexobj(other):
            return ComplexAffine.from_real(self) * other
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0:
            return Affine(self.coeffs * float(arr), self.const * float(arr), self.shape)
        scale = np.broadcast_to(arr, self.shape).ravel()
        return Affine(sp.diags(scale) @ self.coeffs, scale * self.const, self.shape)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / np.asarray(other, dtype=float))

    def lmul(self, mat: np.ndarray) -> "Affine":
        """mat @ self for a real constant matrix."""
        mat = np.asarray(mat, dtype=float)
        if mat.ndim == 1:
            out = self.lmul(mat.reshape(1, -1))
            return out.reshape(out.shape[1:]) if len(out.shape) == 2 else out.reshape(())
        if len(self.shape) == 1:
            return Affine(sp.csr_matrix(mat) @ self.coeffs, mat @ self.const, (mat.shape[0],))
        p, q = self.shape
        lift = sp.kron(sp.csr_matrix(mat), sp.identity(q, format="csr"), format="csr")
        const = (mat @ self.const.reshape(p, q)).ravel()
        return Affine(lift @ self.coeffs, const, (mat.shape[0], q))

    def rmul(self, mat: np.ndarray) -> "Affine":
        """self @ mat for a real constant matrix."""
        mat = np.asarray(mat, dtype=float)
        if len(self.shape) == 1:
            out = (mat.shape[1],) if mat.ndim == 2 else ()
            mt = mat.T if mat.ndim == 2 else mat.reshape(1, -1)
            return Affine(sp.csr_matrix(mt) @ self.coeffs, mt @ self.const, out)
        if mat.ndim == 1:
            return self.rmul(mat.reshape(-1, 1)).reshape(self.shape[0])
        p, q = self.shape
        lift = sp.kron(sp.identity(p, format="csr"), sp.csr_matrix(mat.T), format="csr")
        const = (self.const.reshape(p, q) @ mat).ravel()
        return Affine(lift @ self.coeffs, const, (p, mat.shape[1]))

    def __matmul__(self, other):
        if isinstance(other, Affine | ComplexAffine):
            raise InvalidInputError("product of two expressions is not affine")
        if np.iscomplexobj(other):
            return ComplexAffine.from_real(self) @ other
        return self.rmul(other)

    def __rmatmul__(self, other):
        if np.iscomplexobj(other):
            return other @ ComplexAffine.from_real(self)
        return self.lmul(other)


class ComplexAffine:
    """Complex affine expression kept as a pair of real expressions."""

    __array_ufunc__ = None

    def __init__(self, re: Affine, im: Affine):
        if re.shape != im.shape:
            raise InvalidInputError("real and imaginary parts must share a shape")
        self.re = re
        self.im = im

    @classmethod
    def from_real(cls, re: Affine) -> "ComplexAffine":
        return cls(re, Affine.constant(np.zeros(re.shape)))

    @classmethod
    def constant(cls, value: Any) -> "ComplexAffine":
        v = np.asarray(value, dtype=complex)
        return cls(Affine.constant(v.real), Affine.constant(v.imag))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def real(self) -> Affine:
        return self.re

    @property
    def imag(self) -> Affine:
        return self.im

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.re.evaluate(x) + 1j * self.im.evaluate(x)

    def __getitem__(self, key) -> "ComplexAffine":
        return ComplexAffine(self.re[key], self.im[key])

    def reshape(self, *shape) -> "ComplexAffine":
        return ComplexAffine(self.re.reshape(*shape), self.im.reshape(*shape))

    def ravel(self) -> "ComplexAffine":
        return ComplexAffine(self.re.ravel(), self.im.ravel())

    @property
    def T(self) -> "ComplexAffine":
        return ComplexAffine(self.re.T, self.im.T)

    @property
    def H(self) -> "ComplexAffine":
        return ComplexAffine(self.re.T, -self.im.T)

    def conj(self) -> "ComplexAffine":
        return ComplexAffine(self.re, -self.im)

    def sum(self) -> "ComplexAffine":
        return ComplexAffine(self.re.sum(), self.im.sum())

    def trace(self) -> "ComplexAffine":
        return ComplexAffine(self.re.trace(), self.im.trace())

    def _coerce(self, other) -> "ComplexAffine":
        if isinstance(other, ComplexAffine):
            return other
        if isinstance(other, Affine):
            return ComplexAffine.from_real(other)
        return ComplexAffine.constant(np.broadcast_to(np.asarray(other, dtype=complex), self.shape))

    def __add__(self, other):
        other = self._coerce(other)
        return ComplexAffine(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __neg__(self) -> "ComplexAffine":
        return ComplexAffine(-self.re, -self.im)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Affine | ComplexAffine):
            raise InvalidInputError("product of two expressions is not affine")
        z = np.asarray(other, dtype=complex)
        a, b = z.real, z.imag
        if not np.any(b):
            return ComplexAffine(self.re * a, self.im * a)
        return ComplexAffine(self.re * a - self.im * b, self.im * a + self.re * b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / np.asarray(other, dtype=complex))

    def lmul(self, mat: np.ndarray) -> "ComplexAffine":
        mat = np.asarray(mat, dtype=complex)
        cr, ci = mat.real, mat.imag
        if not np.any(ci):
            return ComplexAffine(self.re.lmul(cr), self.im.lmul(cr))
        return ComplexAffine(
            self.re.lmul(cr) - self.im.lmul(ci), self.im.lmul(cr) + self.re.lmul(ci)
        )

    def rmul(self, mat: np.ndarray) -> "ComplexAffine":
        mat = np.asarray(mat, dtype=complex)
        cr, ci = mat.real, mat.imag
        if not np.any(ci):
            return ComplexAffine(self.re.rmul(cr), self.im.rmul(cr))
        return ComplexAffine(
            self.re.rmul(cr) - self.im.rmul(ci), self.im.rmul(cr) + self.re.rmul(ci)
        )

    def __matmul__(self, other):
        if isinstance(other, Affine | ComplexAffine):
            raise InvalidInputError("product of two expressions is not affine")
        return self.rmul(other)

    def __rmatmul__(self, other):
        return self.lmul(other)


Expr = Affine | ComplexAffine


def as_affine(value: Any) -> Affine:
    if isinstance(value, Affine):
        return value
    if isinstance(value, ComplexAffine):
        raise InvalidInputError("expected a real expression")
    return Affine.constant(value)


def concat(items: list[Any]) -> Affine:
    """Stack real expressions (flattened) into one vector."""
    parts = [as_affine(item).ravel() for item in items]
    n = max(p.n_cols for p in parts)
    coeffs = sp.vstack([_pad(p.coeffs, n) for p in parts], format="csr")
    const = np.concatenate([p.const for p in parts])
    return Affine(coeffs, const, (const.shape[0],))


def _bmat_real(blocks: list[list[Affine]]) -> Affine:
    heights = [row[0].shape[0] for row in blocks]
    widths = [blk.shape[1] for blk in blocks[0]]
    n_rows, n_cols = sum(heights), sum(widths)
    n = max(blk.n_cols for row in blocks for blk in row)
    coeffs, consts, targets = [], [], []
    r0 = 0
    for i, row in enumerate(blocks):
        c0 = 0
        for j, blk in enumerate(row):
            if blk.shape != (heights[i], widths[j]):
                raise InvalidInputError(
                    f"block ({i}, {j}) has shape {blk.shape}, expected {(heights[i], widths[j])}"
                )
            rows = r0 + np.arange(heights[i])
            cols = c0 + np.arange(widths[j])
            targets.append((rows[:, None] * n_cols + cols[None, :]).ravel())
            coeffs.append(_pad(blk.coeffs, n))
            consts.append(blk.const)
            c0 += widths[j]
        r0 += heights[i]
    order = np.argsort(np.concatenate(targets), kind="stable")
    stacked = sp.vstack(coeffs, format="csr")[order]
    return Affine(stacked, np.concatenate(consts)[order], (n_rows, n_cols))


def bmat(blocks: list[list[Any]]) -> Expr:
    """Block matrix from expressions and constant arrays (all 2-D)."""
    complex_mode = any(
        isinstance(b, ComplexAffine) or (not isinstance(b, Affine) and np.iscomplexobj(b))
        for row in blocks
        for b in row
    )
    if not complex_mode:
        return _bmat_real([[as_affine(np.atleast_2d(b)) if not isinstance(b, Affine) else b
                            for b in row] for row in blocks])
    cplx = [[_coerce_any(b) for b in row] for row in blocks]
    re = _bmat_real([[b.re for b in row] for row in cplx])
    im = _bmat_real([[b.im for b in row] for row in cplx])
    return ComplexAffine(re, im)


def _coerce_any(value: Any) -> ComplexAffine:
    if isinstance(value, ComplexAffine):
        return value
    if isinstance(value, Affine):
        return ComplexAffine.from_real(value)
    return ComplexAffine.constant(np.atleast_2d(value))


# Embeddings


def _hermitian_defect(h: ComplexAffine) -> float:
    d = h - h.H
    vals = [abs(d.re.const).max(initial=0.0), abs(d.im.const).max(initial=0.0)]
    for part in (d.re.coeffs, d.im.coeffs):
        if part.nnz:
            vals.append(abs(part.data).max())
    return max(vals)


def embed_hermitian_psd(h: Any, tol: float = 1e-10) -> Any:
    """Real embedding [[Re H, −Im H], [Im H, Re H]] of a Hermitian matrix.

    Works on constant arrays (returns an array) and on complex expressions
    (returns a real expression). H ⪰ 0 iff the embedding is PSD.
    """
    if isinstance(h, ComplexAffine | Affine):
        h = _coerce_any(h)
        if len(h.shape) != 2 or h.shape[0] != h.shape[1]:
            raise InvalidInputError(f"Hermitian block must be square, got {h.shape}")
        if _hermitian_defect(h) > tol:
            raise InvalidInputError("matrix expression is not Hermitian")
        return _bmat_real([[h.re, -h.im], [h.im, h.re]])
    arr = np.asarray(h, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"Hermitian block must be square, got {arr.shape}")
    scale = max(1.0, float(np.abs(arr).max(initial=0.0)))
    if np.abs(arr - arr.conj().T).max(initial=0.0) > tol * scale:
        raise InvalidInputError("matrix is not Hermitian")
    return np.block([[arr.real, -arr.imag], [arr.imag, arr.real]])


def embed_complex_soc(u: Any, t: Any) -> Any:
    """Stack (t, Re u, Im u) so that the real SOC encodes ‖u‖ ≤ t."""
    if isinstance(u, ComplexAffine | Affine) or isinstance(t, Affine):
        u = _coerce_any(u).ravel() if not isinstance(u, ComplexAffine) else u.ravel()
        return concat([as_affine(t).ravel(), u.re, u.im])
    u = np.asarray(u, dtype=complex).ravel()
    return np.concatenate([[float(t)], u.real, u.imag])


def svec(mat: np.ndarray) -> np.ndarray:
    """Scaled lower triangle, column-major, √2 on off-diagonals."""
    mat = np.asarray(mat, dtype=float)
    rows, cols = np.tril_indices(mat.shape[0])
    order = np.lexsort((rows, cols))
    rows, cols = rows[order], cols[order]
    return np.where(rows == cols, 1.0, SQRT2) * mat[rows, cols]


def smat(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    order = int(round((math.sqrt(8 * len(vec) + 1) - 1) / 2))
    rows, cols = np.tril_indices(order)
    sort = np.lexsort((rows, cols))
    rows, cols = rows[sort], cols[sort]
    vals = np.where(rows == cols, 1.0, 1.0 / SQRT2) * vec
    out = np.zeros((order, order))
    out[rows, cols] = vals
    out[cols, rows] = vals
    return out


def _svec_index(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat (row-major) entry index and scale of each svec row."""
    rows, cols = np.tril_indices(order)
    sort = np.lexsort((rows, cols))
    rows, cols = rows[sort], cols[sort]
    return rows * order + cols, np.where(rows == cols, 1.0, SQRT2)


# Programs


class VariableSpec(BaseModel):
    name: str
    kind: str  # "real", "complex" or "hermitian"
    shape: tuple[int, ...]
    offset: int
    size: int


class ConeBlock(BaseModel):
    kind: ConeKind
    dim: int = Field(ge=0)  # matrix order for PSD blocks, row count otherwise
    tag: str = ""

    @field_validator("tag")
    @classmethod
    def tag_is_one_token(cls, v: str) -> str:
        # dumped programs store the tag as a single whitespace-delimited field
        if v == "-" or any(ch.isspace() for ch in v):
            raise ValueError(f"cone tag must be a single token other than '-', got {v!r}")
        return v

    @property
    def rows(self) -> int:
        if self.kind == ConeKind.PSD:
            return self.dim * (self.dim + 1) // 2
        return self.dim


class ConicProgram(BaseModel):
    """minimize cᵀx + c0 subject to A x + s = b, s in the listed cone product."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = "program"
    c: np.ndarray
    c0: float = 0.0
    A: sp.csr_matrix
    b: np.ndarray
    cones: list[ConeBlock]
    variables: dict[str, VariableSpec] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        rows = sum(block.rows for block in self.cones)
        if rows != self.A.shape[0] or rows != self.b.shape[0]:
            raise InvalidInputError(f"cone blocks cover {rows} rows, matrix has {self.A.shape[0]}")
        if self.A.shape[1] != self.c.shape[0]:
            raise InvalidInputError("objective length differs from variable count")
        if not np.all(np.isfinite(self.c)) or not math.isfinite(self.c0):
            raise InvalidInputError("objective must be finite")
        return self

    @property
    def variable_count(self) -> int:
        return int(self.c.shape[0])

    @property
    def row_count(self) -> int:
        return int(self.A.shape[0])

    def block_rows(self) -> list[tuple[ConeBlock, int, int]]:
        out, start = [], 0
        for block in self.cones:
            out.append((block, start, start + block.rows))
            start += block.rows
        return out

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.c0)

    def value(self, x: np.ndarray, name: str) -> np.ndarray:
        """Reconstruct the named variable from a primal vector."""
        spec = self.variables[name]
        raw = np.asarray(x, dtype=float)[spec.offset : spec.offset + spec.size]
        if spec.kind == "real":
            return raw.reshape(spec.shape) if spec.shape else raw[0]
        if spec.kind == "complex":
            half = spec.size // 2
            return (raw[:half] + 1j * raw[half:]).reshape(spec.shape)
        order = spec.shape[0]
        out = np.diag(raw[:order]).astype(complex)
        iu = np.triu_indices(order, 1)
        n_off = len(iu[0])
        upper = raw[order : order + n_off] + 1j * raw[order + n_off :]
        out[iu] = upper
        out[(iu[1], iu[0])] = upper.conj()
        return out


class ProgramBuilder:
    """Declares variables and tagged cone constraints, then builds a ConicProgram."""

    def __init__(self, name: str = "program"):
        self.name = name
        self.n = 0
        self.variables: dict[str, VariableSpec] = {}
        self._rows: list[tuple[ConeBlock, Affine]] = []
        self._objective: Affine = Affine.constant(0.0)

    def _allocate(self, name: str, kind: str, shape: tuple[int, ...], size: int) -> int:
        if name in self.variables:
            raise InvalidInputError(f"variable {name!r} declared twice")
        offset = self.n
        self.n += size
        self.variables[name] = VariableSpec(
            name=name, kind=kind, shape=shape, offset=offset, size=size
        )
        return offset

    def _unit(self, offset: int, size: int, shape: tuple[int, ...]) -> Affine:
        coeffs = sp.csr_matrix(
            (np.ones(size), (np.arange(size), offset + np.arange(size))), shape=(size, self.n)
        )
        return Affine(coeffs, np.zeros(size), shape)

    def real(self, name: str, shape: tuple[int, ...] | int = ()) -> Affine:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        size = _shape_size(shape)
        offset = self._allocate(name, "real", shape, size)
        return self._unit(offset, size, shape)

    def complex(self, name: str, shape: tuple[int, ...] | int) -> ComplexAffine:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        size = _shape_size(shape)
        offset = self._allocate(name, "complex", shape, 2 * size)
        return ComplexAffine(self._unit(offset, size, shape), self._unit(offset + size, size, shape))

    def hermitian(self, name: str, order: int) -> ComplexAffine:
        """Hermitian matrix parameterized by its diagonal and strict upper triangle."""
        offset = self._allocate(name, "hermitian", (order, order), order * order)
        iu = np.triu_indices(order, 1)
        n_off = len(iu[0])
        diag_flat = np.arange(order) * order + np.arange(order)
        upper_flat = iu[0] * order + iu[1]
        lower_flat = iu[1] * order + iu[0]
        diag_cols = offset + np.arange(order)
        re_cols = offset + order + np.arange(n_off)
        im_cols = offset + order + n_off + np.arange(n_off)
        size = order * order
        re = sp.csr_matrix(
            (
                np.ones(order + 2 * n_off),
                (
                    np.concatenate([diag_flat, upper_flat, lower_flat]),
                    np.concatenate([diag_cols, re_cols, re_cols]),
                ),
            ),
            shape=(size, self.n),
        )
        im = sp.csr_matrix(
            (
                np.concatenate([np.ones(n_off), -np.ones(n_off)]),
                (np.concatenate([upper_flat, lower_flat]), np.concatenate([im_cols, im_cols])),
            ),
            shape=(size, self.n),
        )
        zeros = np.zeros(size)
        return ComplexAffine(Affine(re, zeros, (order, order)), Affine(im, zeros, (order, order)))

    # constraints

    def _add(self, kind: ConeKind, dim: int, expr: Affine, tag: str) -> None:
        self._rows.append((ConeBlock(kind=kind, dim=dim, tag=tag), expr))

    def add_zero(self, expr: Any, tag: str = "") -> None:
        expr = as_affine(expr).ravel()
        if expr.size:
            self._add(ConeKind.ZERO, expr.size, expr, tag)

    def add_nonneg(self, expr: Any, tag: str = "") -> None:
        """expr ≥ 0 entrywise."""
        expr = as_affine(expr).ravel()
        if expr.size:
            self._add(ConeKind.NONNEG, expr.size, expr, tag)

    def add_le(self, lhs: Any, rhs: Any, tag: str = "") -> None:
        """lhs ≤ rhs entrywise."""
        self.add_nonneg(as_affine(rhs) - as_affine(lhs), tag)

    def add_soc(self, t: Any, x: Any, tag: str = "") -> None:
        """‖x‖₂ ≤ t."""
        stacked = concat([t, x])
        self._add(ConeKind.SOC, stacked.size, stacked, tag)

    def add_complex_soc(self, u: Any, t: Any, tag: str = "") -> None:
        stacked = embed_complex_soc(u, t)
        self._add(ConeKind.SOC, stacked.size, as_affine(stacked), tag)

    def add_quad_epigraph(self, x: Any, t: Any, tag: str = "") -> None:
        """‖x‖² ≤ t as the SOC ‖(x, (t − 1)/2)‖ ≤ (t + 1)/2."""
        t = as_affine(t).ravel()
        self.add_soc(t * 0.5 + 0.5, concat([x, t * 0.5 - 0.5]), tag)

    def add_psd(self, mat: Any, tag: str = "", tol: float = 1e-10) -> None:
        mat = as_affine(mat)
        if len(mat.shape) != 2 or mat.shape[0] != mat.shape[1]:
            raise InvalidInputError(f"PSD block must be square, got {mat.shape}")
        asym = mat - mat.T
        defect = max(abs(asym.const).max(initial=0.0),
                     abs(asym.coeffs.data).max(initial=0.0) if asym.coeffs.nnz else 0.0)
        if defect > tol:
            raise InvalidInputError("PSD block is not symmetric")
        flat, scale = _svec_index(mat.shape[0])
        rows = mat.ravel()._take(flat, (len(flat),)) * scale
        self._add(ConeKind.PSD, mat.shape[0], rows, tag)

    def add_hermitian_psd(self, mat: Any, tag: str = "") -> None:
        self.add_psd(embed_hermitian_psd(mat), tag)

    def minimize(self, expr: Any) -> None:
        expr = as_affine(expr)
        if expr.size != 1:
            raise InvalidInputError("objective must be scalar")
        self._objective = expr.ravel()

    def build(self) -> ConicProgram:
        n = self.n
        if self._rows:
            exprs = [expr for _, expr in self._rows]
            # slack s = F x + f  ⇒  A = −F, b = f
            a = -sp.vstack([_pad(e.coeffs, n) for e in exprs], format="csr")
            b = np.concatenate([e.const for e in exprs])
        else:
            a, b = sp.csr_matrix((0, n)), np.zeros(0)
        c = np.zeros(n)
        obj = _pad(self._objective.coeffs, n).toarray().ravel()
        c[: len(obj)] = obj
        return ConicProgram(
            name=self.name,
            c=c,
            c0=float(self._objective.const[0]),
            A=a,
            b=b,
            cones=[block for block, _ in self._rows],
            variables=dict(self.variables),
        )


# Solving


class SolverSettings(BaseModel):
    tol_abs: float = Field(default=1e-8, gt=0)
    tol_rel: float = Field(default=1e-8, gt=0)
    tol_feas: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=200, ge=1)
    refinement: int = Field(default=1, ge=0)
    equilibrate: bool = True
    ruiz_iterations: int = Field(default=15, ge=0)
    accept_tol: float = Field(default=1e-6, gt=0)

    @classmethod
    def from_tolerances(cls, tolerances: ToleranceConfig) -> "SolverSettings":
        return cls(
            tol_abs=tolerances.solver_tol_abs,
            tol_rel=tolerances.solver_tol_rel,
            max_iter=tolerances.solver_max_iter,
        )

    def tightened(self) -> "SolverSettings":
        """Settings for the single retry after a failed solve."""
        return self.model_copy(
            update={
                "tol_abs": self.tol_abs / 10,
                "tol_rel": self.tol_rel / 10,
                "tol_feas": self.tol_feas / 10,
                "max_iter": self.max_iter * 2,
                "refinement": max(2, self.refinement),
                "accept_tol": self.accept_tol * 10,
            }
        )


class SolveResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: SolveStatus
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    objective: float = float("nan")
    dual_objective: float = float("nan")
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    gap: float = float("nan")
    iterations: int = 0
    message: str = ""

    @property
    def lower_bound(self) -> float:
        """Objective value safe to use as a bound: the smaller of primal and dual."""
        if not self.status.usable:
            return float("-inf")
        if math.isfinite(self.dual_objective):
            return min(self.objective, self.dual_objective)
        return self.objective


class _Reduced(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    cones: list[ConeBlock]
    keep_rows: np.ndarray
    keep_cols: np.ndarray


def _presolve(program: ConicProgram) -> _Reduced | SolveStatus:
    """Drop empty and dependent equality rows and unused columns."""
    a, b, c = program.A.tocsr(), program.b, program.c
    keep_rows: list[np.ndarray] = []
    cones: list[ConeBlock] = []
    for block, start, stop in program.block_rows():
        rows = np.arange(start, stop)
        if block.kind != ConeKind.ZERO:
            keep_rows.append(rows)
            cones.append(block)
            continue
        sub = a[rows]
        nnz = np.diff(sub.indptr)
        empty = nnz == 0
        if np.any(np.abs(b[rows[empty]]) > 1e-9 * (1.0 + np.abs(b).max(initial=0.0))):
            return SolveStatus.PRIMAL_INFEASIBLE
        rows = rows[~empty]
        if len(rows):
            keep_rows.append(rows)
            cones.append(ConeBlock(kind=ConeKind.ZERO, dim=len(rows), tag=block.tag))
    keep = np.concatenate(keep_rows) if keep_rows else np.zeros(0, dtype=int)

    # dependent equality rows (across all zero blocks)
    kinds = np.concatenate([[blk.kind == ConeKind.ZERO] * blk.rows for blk in cones]) if cones else np.zeros(0, bool)
    eq = keep[kinds]
    if len(eq) > 1:
        dense = a[eq].toarray()
        _, r, piv = scipy.linalg.qr(dense.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > 1e-10 * max(1.0, diag.max(initial=0.0))))
        if rank < len(eq):
            chosen = np.sort(piv[:rank])
            x0 = np.linalg.lstsq(dense[chosen], b[eq][chosen], rcond=None)[0]
            if np.abs(dense @ x0 - b[eq]).max() > 1e-8 * (1.0 + np.abs(b[eq]).max()):
                return SolveStatus.PRIMAL_INFEASIBLE
            dropped = set(eq[np.setdiff1d(np.arange(len(eq)), chosen)].tolist())
            new_keep, new_cones, pos = [], [], 0
            for blk in cones:
                rows = keep[pos : pos + blk.rows]
                pos += blk.rows
                if blk.kind == ConeKind.ZERO:
                    rows = np.array([r_ for r_ in rows if r_ not in dropped], dtype=int)
                    if not len(rows):
                        continue
                    blk = ConeBlock(kind=ConeKind.ZERO, dim=len(rows), tag=blk.tag)
                new_keep.append(rows)
                new_cones.append(blk)
            keep = np.concatenate(new_keep) if new_keep else np.zeros(0, dtype=int)
            cones = new_cones
            logger.debug("presolve dropped %d dependent equality rows", len(dropped))

    reduced_a = a[keep]
    used = np.diff(reduced_a.tocsc().indptr) > 0
    if np.any(np.abs(c[~used]) > 0):
        return SolveStatus.DUAL_INFEASIBLE
    cols = np.flatnonzero(used)
    return _Reduced(
        A=sp.csr_matrix(reduced_a[:, cols]),
        b=b[keep],
        c=c[cols],
        cones=cones,
        keep_rows=keep,
        keep_cols=cols,
    )


def _ruiz(a: sp.csr_matrix, cones: list[ConeBlock], iterations: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column scalings; SOC and PSD blocks share one row factor."""
    m, n = a.shape
    d, e = np.ones(n), np.ones(m)
    groups, start = [], 0
    for blk in cones:
        if blk.kind in (ConeKind.SOC, ConeKind.PSD) and blk.rows:
            groups.append((start, start + blk.rows))
        start += blk.rows
    abs_a = abs(a)
    for _ in range(iterations):
        scaled = sp.diags(e) @ abs_a @ sp.diags(d)
        col = np.asarray(scaled.max(axis=0).todense()).ravel()
        row = np.asarray(scaled.max(axis=1).todense()).ravel()
        col[col == 0] = 1.0
        row[row == 0] = 1.0
        for lo, hi in groups:
            row[lo:hi] = row[lo:hi].max()
        d = np.clip(d / np.sqrt(col), 1e-6, 1e6)
        e = np.clip(e / np.sqrt(row), 1e-6, 1e6)
    return d, e


def _to_spmatrix(mat: sp.spmatrix) -> cvxopt.spmatrix:
    coo = sp.coo_matrix(mat)
    return cvxopt.spmatrix(
        coo.data.tolist(), coo.row.tolist(), coo.col.tolist(), size=(coo.shape[0], coo.shape[1])
    )


def _cvxopt_layout(red: _Reduced, a: sp.csr_matrix, b: np.ndarray):
    """Split rows into cvxopt's (G, h, dims) and (A, b), PSD blocks in full storage."""
    eq_rows, l_rows, q_blocks, s_blocks = [], [], [], []
    start = 0
    for blk in red.cones:
        rows = np.arange(start, start + blk.rows)
        start += blk.rows
        if blk.kind == ConeKind.ZERO:
            eq_rows.append(rows)
        elif blk.kind == ConeKind.NONNEG:
            l_rows.append(rows)
        elif blk.kind == ConeKind.SOC:
            q_blocks.append(rows)
        else:
            s_blocks.append((blk.dim, rows))

    g_parts, h_parts, dual_map = [], [], []
    n = a.shape[1]
    for rows in l_rows + q_blocks:
        g_parts.append(a[rows])
        h_parts.append(b[rows])
        dual_map.append(("direct", rows))
    for order, rows in s_blocks:
        i, j = np.meshgrid(np.arange(order), np.arange(order), indexing="ij")
        lo, hi = np.maximum(i, j), np.minimum(i, j)
        # column-major over (i, j)
        lo, hi = lo.T.ravel(), hi.T.ravel()
        offsets = hi * order - hi * (hi - 1) // 2 + (lo - hi)
        scale = np.where(lo == hi, 1.0, 1.0 / SQRT2)
        g_parts.append(sp.diags(scale) @ a[rows[offsets]])
        h_parts.append(scale * b[rows[offsets]])
        dual_map.append(("psd", rows, order))

    if not g_parts:
        # cvxopt needs at least one inequality; 0·x ≤ 1 is always slack
        g_parts.append(sp.csr_matrix((1, n)))
        h_parts.append(np.ones(1))
        l_rows.append(np.zeros(0, dtype=int))
        l_count = 1
    else:
        l_count = sum(len(r) for r in l_rows)
    dims = {"l": l_count, "q": [len(r) for r in q_blocks], "s": [o for o, _ in s_blocks]}
    g = sp.vstack(g_parts, format="csr")
    h = np.concatenate(h_parts)
    eq = np.concatenate(eq_rows) if eq_rows else np.zeros(0, dtype=int)
    return g, h, dims, eq, dual_map


def _dual_back(z: np.ndarray, dual_map, m: int) -> np.ndarray:
    y = np.zeros(m)
    pos = 0
    for entry in dual_map:
        if entry[0] == "direct":
            rows = entry[1]
            y[rows] = z[pos : pos + len(rows)]
            pos += len(rows)
        else:
            _, rows, order = entry
            full = z[pos : pos + order * order].reshape(order, order, order="F")
            pos += order * order
            sym = np.tril(full) + np.tril(full, -1).T
            y[rows] = svec(sym)
    return y


def solve(program: ConicProgram, settings: SolverSettings | None = None, **overrides) -> SolveResult:
    """Solve with cvxopt's interior-point method; deterministic for identical input."""
    settings = settings or SolverSettings()
    if overrides:
        settings = settings.model_copy(update=overrides)

    reduced = _presolve(program)
    if isinstance(reduced, SolveStatus):
        logger.debug("%s: presolve verdict %s", program.name, reduced.value)
        return SolveResult(status=reduced, message="presolve")

    a, b, c = reduced.A, reduced.b, reduced.c
    if settings.equilibrate and a.shape[0] and a.shape[1]:
        d, e = _ruiz(a, reduced.cones, settings.ruiz_iterations)
    else:
        d, e = np.ones(a.shape[1]), np.ones(a.shape[0])
    a_s = sp.csr_matrix(sp.diags(e) @ a @ sp.diags(d))
    b_s = e * b
    c_s = d * c

    g, h, dims, eq, dual_map = _cvxopt_layout(reduced, a_s, b_s)
    n = a_s.shape[1]
    options = {
        "show_progress": False,
        "abstol": settings.tol_abs,
        "reltol": settings.tol_rel,
        "feastol": settings.tol_feas,
        "maxiters": settings.max_iter,
        "refinement": settings.refinement,
    }
    a_eq = _to_spmatrix(a_s[eq]) if len(eq) else cvxopt.spmatrix([], [], [], (0, n))
    b_eq = cvxopt.matrix(b_s[eq].astype(float)) if len(eq) else cvxopt.matrix(0.0, (0, 1))
    try:
        sol = solvers.conelp(
            cvxopt.matrix(c_s.astype(float)),
            _to_spmatrix(g),
            cvxopt.matrix(h.astype(float)),
            dims,
            a_eq,
            b_eq,
            options=options,
        )
    except (ArithmeticError, ValueError) as e_:
        logger.warning("%s: interior-point failure: %s", program.name, e_)
        return SolveResult(status=SolveStatus.MAX_ITER, message=str(e_))

    raw = sol["status"]
    iterations = int(sol.get("iterations", 0) or 0)
    pinf = sol.get("primal infeasibility")
    dinf = sol.get("dual infeasibility")
    gap = sol.get("gap")
    rgap = sol.get("relative gap")
    if raw == "primal infeasible":
        return SolveResult(status=SolveStatus.PRIMAL_INFEASIBLE, iterations=iterations)
    if raw == "dual infeasible":
        return SolveResult(status=SolveStatus.DUAL_INFEASIBLE, iterations=iterations)

    x_red = np.array(sol["x"]).ravel() * d
    x = np.zeros(program.variable_count)
    x[reduced.keep_cols] = x_red
    y_red = _dual_back(np.array(sol["z"]).ravel(), dual_map, a_s.shape[0])
    if len(eq):
        y_red[eq] = np.array(sol["y"]).ravel()
    y_red *= e
    y = np.zeros(program.row_count)
    y[reduced.keep_rows] = y_red

    status = SolveStatus.OPTIMAL
    if raw != "optimal":
        tol = settings.accept_tol
        close = (
            pinf is not None
            and dinf is not None
            and max(pinf, dinf) <= tol
            and (
                (gap is not None and gap <= tol * max(1.0, abs(sol["primal objective"] or 0.0)))
                or (rgap is not None and rgap <= tol)
            )
        )
        status = SolveStatus.INACCURATE if close else SolveStatus.MAX_ITER
        logger.debug("%s: stopped with status %s (%s)", program.name, raw, status.value)

    objective = float(program.c @ x + program.c0)
    dual_obj = sol.get("dual objective")
    return SolveResult(
        status=status,
        x=x,
        y=y,
        objective=objective,
        dual_objective=float(dual_obj) + program.c0 if dual_obj is not None else float("nan"),
        primal_residual=float(pinf) if pinf is not None else float("nan"),
        dual_residual=float(dinf) if dinf is not None else float("nan"),
        gap=float(gap) if gap is not None else float("nan"),
        iterations=iterations,
        message=raw,
    )


# Debug dump


def dump_program(program: ConicProgram, path: Path | str) -> None:
    """Write the program as plain text.

    Header lines, then one ``cone <kind> <dim> <tag>`` line per block, then the
    sections ``[c]`` (col value), ``[b]`` (row value) and ``[A]`` (row col value)
    with zero-based indices.
    """
    lines = [
        f"# conic program {program.name}",
        "# A x + s = b, s in K, minimize c'x + c0; psd rows are scaled lower triangles",
        f"variables {program.variable_count}",
        f"rows {program.row_count}",
        f"objective_offset {float(program.c0)!r}",
    ]
    for block in program.cones:
        lines.append(f"cone {block.kind.value} {block.dim} {block.tag or '-'}")
    lines.append("[c]")
    lines.extend(f"{j} {float(program.c[j])!r}" for j in np.flatnonzero(program.c))
    lines.append("[b]")
    lines.extend(f"{i} {float(program.b[i])!r}" for i in np.flatnonzero(program.b))
    lines.append("[A]")
    coo = program.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines.extend(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}" for k in order)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_program(path: Path | str) -> ConicProgram:
    """Read a program written by :func:`dump_program` (variable names are not kept)."""
    n = m = 0
    c0 = 0.0
    cones: list[ConeBlock] = []
    section = None
    c_entries, b_entries, a_entries = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        parts = line.split()
        if section is None:
            if parts[0] == "variables":
                n = int(parts[1])
            elif parts[0] == "rows":
                m = int(parts[1])
            elif parts[0] == "objective_offset":
                c0 = float(parts[1])
            elif parts[0] == "cone":
                tag = "" if parts[3] == "-" else parts[3]
                cones.append(ConeBlock(kind=ConeKind(parts[1]), dim=int(parts[2]), tag=tag))
        elif section == "c":
            c_entries.append((int(parts[0]), float(parts[1])))
        elif section == "b":
            b_entries.append((int(parts[0]), float(parts[1])))
        elif section == "A":
            a_entries.append((int(parts[0]), int(parts[1]), float(parts[2])))
    c = np.zeros(n)
    for j, v in c_entries:
        c[j] = v
    b = np.zeros(m)
    for i, v in b_entries:
        b[i] = v
    rows, cols, vals = zip(*a_entries, strict=True) if a_entries else ((), (), ())
    a = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    return ConicProgram(name=Path(path).stem, c=c, c0=c0, A=a, b=b, cones=cones)

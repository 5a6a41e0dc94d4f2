"""Standard-form conic programs and cone arithmetic.

A program is ``min c'x  s.t.  A x + s = b,  s in K`` where K is an ordered
product of zero, nonnegative, second-order and rotated second-order cones.
The dual reads ``max -b'y  s.t.  A'y + c = 0,  y in K*``; all nontrivial
cones here are self-dual, the dual of the zero cone is free.

Conventions:
- second-order cone, dim d:      {(t, w) in R^d : ||w||_2 <= t}
- rotated second-order, dim d:   {(u, v, w) in R^d : ||w||^2 <= 2 u v, u, v >= 0}

The factor-2 rotated form is the single internal convention; template
builders that start from a ``u*v >= ||w||^2`` style constraint scale into it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

FEAS_TOL_DEFAULT = 1e-8
GAP_TOL_DEFAULT = 1e-8


class ConeKind(enum.Enum):
    ZERO = "zero"
    NONNEGATIVE = "nonnegative"
    SECOND_ORDER = "second_order"
    ROTATED_SECOND_ORDER = "rotated_second_order"


@dataclass(frozen=True)
class Cone:
    """One cone block of dimension ``dim`` within the product cone."""

    kind: ConeKind
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"cone dim must be >= 1, got {self.dim}")
        if self.kind is ConeKind.ROTATED_SECOND_ORDER and self.dim < 3:
            raise ValueError(f"rotated SOC needs dim >= 3, got {self.dim}")


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    ITERATION_LIMIT = "iteration_limit"
    NUMERICAL_ERROR = "numerical_error"


def _as_csc(matrix, shape) -> sp.csc_matrix:
    m = sp.csc_matrix(matrix, shape=shape, dtype=float)
    m.sum_duplicates()
    return m


@dataclass
class ConicProgram:
    """Immutable standard-form conic program.

    ``constraint_matrix`` is m x num_vars with m the sum of cone dims;
    slack of row block k is ``b - A x`` restricted to that block.
    ``objective_constant`` is added to reported objective values only.
    """

    num_vars: int
    objective: np.ndarray
    constraint_matrix: sp.csc_matrix
    constraint_offset: np.ndarray
    cones: list[Cone]
    var_names: list[str] | None = None
    row_names: list[str] | None = None
    objective_constant: float = 0.0

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).ravel()
        self.constraint_offset = np.asarray(self.constraint_offset, dtype=float).ravel()
        m = int(sum(c.dim for c in self.cones))
        self.constraint_matrix = _as_csc(self.constraint_matrix, (m, self.num_vars))
        if self.objective.shape[0] != self.num_vars:
            raise ValueError("objective length != num_vars")
        if self.constraint_offset.shape[0] != m:
            raise ValueError("offset length != total cone dimension")
        if self.var_names is not None and len(self.var_names) != self.num_vars:
            raise ValueError("var_names length mismatch")
        if self.row_names is not None and len(self.row_names) != m:
            raise ValueError("row_names length mismatch")

    @property
    def num_rows(self) -> int:
        return self.constraint_offset.shape[0]

    def cone_slices(self) -> list[slice]:
        out, start = [], 0
        for c in self.cones:
            out.append(slice(start, start + c.dim))
            start += c.dim
        return out

    def slack(self, x: np.ndarray) -> np.ndarray:
        return self.constraint_offset - self.constraint_matrix @ x

    def dump_text(self, path: str) -> None:
        """Plain-text dump: header, cone list, c, b, then A as COO triplets."""
        coo = self.constraint_matrix.tocoo()
        with open(path, "w") as f:
            f.write(f"conicprogram {self.num_vars} {self.num_rows} {len(self.cones)} {coo.nnz}\n")
            for c in self.cones:
                f.write(f"cone {c.kind.value} {c.dim}\n")
            for j, v in enumerate(self.objective):
                f.write(f"c {j} {float(v)!r}\n")
            for i, v in enumerate(self.constraint_offset):
                f.write(f"b {i} {float(v)!r}\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                f.write(f"A {int(i)} {int(j)} {float(v)!r}\n")


@dataclass
class SolveResult:
    status: SolveStatus
    primal: np.ndarray
    slack: np.ndarray
    dual: np.ndarray
    primal_objective: float
    dual_objective: float
    gap: float
    iterations: int
    info: dict = field(default_factory=dict)

    def dual_block(self, program: ConicProgram, index: int) -> np.ndarray:
        return self.dual[program.cone_slices()[index]]


def in_cone(v: np.ndarray, cone: Cone, tol: float = FEAS_TOL_DEFAULT) -> bool:
    """Membership of ``v`` in ``cone`` up to absolute tolerance ``tol``."""
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != cone.dim:
        raise ValueError(f"vector length {v.shape[0]} != cone dim {cone.dim}")
    if cone.kind is ConeKind.ZERO:
        return bool(np.max(np.abs(v), initial=0.0) <= tol)
    if cone.kind is ConeKind.NONNEGATIVE:
        return bool(np.min(v, initial=0.0) >= -tol)
    if cone.kind is ConeKind.SECOND_ORDER:
        return bool(np.linalg.norm(v[1:]) <= v[0] + tol)
    if cone.kind is ConeKind.ROTATED_SECOND_ORDER:
        if v[0] < -tol or v[1] < -tol:
            return False
        return bool(np.dot(v[2:], v[2:]) <= 2.0 * v[0] * v[1] + tol)
    raise ValueError(f"unknown cone kind {cone.kind}")


def project_onto_soc(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the second-order cone (closed form).

    Three cases: interior/boundary point maps to itself, polar-cone points
    map to the origin, otherwise the scaled boundary point
    ((t + ||w||)/2) * (1, w/||w||).
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] < 1:
        raise ValueError("need at least the cone head")
    t, w = v[0], v[1:]
    nw = np.linalg.norm(w)
    if nw <= t:
        return v.copy()
    if nw <= -t:
        return np.zeros_like(v)
    beta = 0.5 * (t + nw)
    out = np.empty_like(v)
    out[0] = beta
    out[1:] = beta * w / nw
    return out


# --- assembly helper -------------------------------------------------------

class ProgramBuilder:
    """Appends triplets and cone blocks; duplicates are summed on finalize."""

    def __init__(self, num_vars: int, var_names: list[str] | None = None):
        self.num_vars = num_vars
        self.var_names = var_names
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self._offsets: list[float] = []
        self._cones: list[Cone] = []
        self._row_names: list[str] = []
        self._m = 0

    @property
    def num_rows(self) -> int:
        return self._m

    @property
    def num_cones(self) -> int:
        return len(self._cones)

    def add_row(self, cols, vals, offset: float, name: str = "") -> int:
        """One affine row ``offset - sum(vals * x[cols])``; returns row index."""
        i = self._m
        for c, v in zip(cols, vals):
            if v != 0.0:
                self._rows.append(i)
                self._cols.append(int(c))
                self._vals.append(float(v))
        self._offsets.append(float(offset))
        self._row_names.append(name)
        self._m += 1
        return i

    def add_cone(self, kind: ConeKind, dim: int) -> int:
        """Declares the next ``dim`` rows as one cone block; returns cone index."""
        self._cones.append(Cone(kind, dim))
        return len(self._cones) - 1

    def add_zero_row(self, cols, vals, rhs: float, name: str = "") -> tuple[int, int]:
        r = self.add_row(cols, vals, rhs, name)
        k = self.add_cone(ConeKind.ZERO, 1)
        return r, k

    def add_nonneg_row(self, cols, vals, offset: float, name: str = "") -> tuple[int, int]:
        r = self.add_row(cols, vals, offset, name)
        k = self.add_cone(ConeKind.NONNEGATIVE, 1)
        return r, k

    def build(self, objective, objective_constant: float = 0.0) -> ConicProgram:
        a = sp.coo_matrix(
            (self._vals, (self._rows, self._cols)), shape=(self._m, self.num_vars)
        )
        return ConicProgram(
            num_vars=self.num_vars,
            objective=np.asarray(objective, dtype=float),
            constraint_matrix=a,
            constraint_offset=np.asarray(self._offsets, dtype=float),
            cones=list(self._cones),
            var_names=self.var_names,
            row_names=self._row_names,
            objective_constant=objective_constant,
        )

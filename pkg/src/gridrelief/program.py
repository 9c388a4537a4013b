"""Solver-neutral linear/second-order-cone program and its solver adapters."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SOCRow:
    """``|| x[cols] || <= bound``."""

    cols: tuple[int, ...]
    bound: float


@dataclass
class ConicProgram:
    """min c.x + c0  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lb <= x <= ub,  cones.

    ``blocks`` maps a variable family (``v_re``, ``i_g_im``, ...) to its
    column indices.
    """

    names: list[str] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    c: dict[int, float] = field(default_factory=dict)
    c0: float = 0.0
    _eq: list[tuple[dict[int, float], float]] = field(default_factory=list)
    _ub: list[tuple[dict[int, float], float]] = field(default_factory=list)
    cones: list[SOCRow] = field(default_factory=list)
    eq_tags: list[str] = field(default_factory=list)
    ub_tags: list[str] = field(default_factory=list)
    cone_tags: list[str] = field(default_factory=list)

    # -- construction -------------------------------------------------------
    @property
    def n_var(self) -> int:
        return len(self.names)

    def add_block(self, name: str, size: int, lb=-np.inf, ub=np.inf) -> np.ndarray:
        if name in self.blocks:
            raise ValueError(f"duplicate variable block {name}")
        start = self.n_var
        lb = np.broadcast_to(np.asarray(lb, float), (size,))
        ub = np.broadcast_to(np.asarray(ub, float), (size,))
        self.names += [f"{name}[{k}]" for k in range(size)]
        self.lb += list(lb)
        self.ub += list(ub)
        cols = np.arange(start, start + size)
        self.blocks[name] = cols
        return cols

    def fix(self, col: int, value: float = 0.0) -> None:
        self.lb[col] = value
        self.ub[col] = value

    def _check(self, row: dict[int, float]):
        for col in row:
            if not 0 <= col < self.n_var:
                raise ValueError(f"constraint references undeclared column {col}")

    def add_eq(self, row: dict[int, float], rhs: float, tag: str = "") -> None:
        self._check(row)
        self._eq.append((row, float(rhs)))
        self.eq_tags.append(tag)

    def add_leq(self, row: dict[int, float], rhs: float, tag: str = "") -> None:
        self._check(row)
        self._ub.append((row, float(rhs)))
        self.ub_tags.append(tag)

    def add_geq(self, row: dict[int, float], rhs: float, tag: str = "") -> None:
        self.add_leq({k: -v for k, v in row.items()}, -rhs, tag)

    def add_soc(self, cols, bound: float, tag: str = "") -> None:
        cols = tuple(int(c) for c in cols)
        self._check({c: 1.0 for c in cols})
        if bound < 0:
            raise ValueError("cone bound must be nonnegative")
        self.cones.append(SOCRow(cols, float(bound)))
        self.cone_tags.append(tag)

    def add_objective(self, row: dict[int, float], constant: float = 0.0) -> None:
        self._check(row)
        for k, v in row.items():
            self.c[k] = self.c.get(k, 0.0) + v
        self.c0 += constant

    # -- matrix views -------------------------------------------------------
    @staticmethod
    def _matrix(rows, n):
        data, ii, jj = [], [], []
        for r, (row, _) in enumerate(rows):
            for col, val in row.items():
                if val != 0.0:
                    ii.append(r)
                    jj.append(col)
                    data.append(val)
        a = sp.csr_matrix((data, (ii, jj)), shape=(len(rows), n))
        b = np.array([rhs for _, rhs in rows], float)
        return a, b

    @property
    def n_eq(self) -> int:
        return len(self._eq)

    @property
    def n_ub(self) -> int:
        return len(self._ub)

    def equality_matrix(self):
        return self._matrix(self._eq, self.n_var)

    def inequality_matrix(self):
        return self._matrix(self._ub, self.n_var)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_var)
        for k, v in self.c.items():
            c[k] = v
        return c

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.objective_vector() @ x + self.c0)

    def max_violation(self, x: np.ndarray) -> float:
        """Largest primal residual over every constraint family."""
        x = np.asarray(x, float)
        worst = 0.0
        if self.n_eq:
            a, b = self.equality_matrix()
            worst = max(worst, float(np.max(np.abs(a @ x - b))))
        if self.n_ub:
            a, b = self.inequality_matrix()
            worst = max(worst, float(np.max(a @ x - b)))
        lb, ub = np.array(self.lb), np.array(self.ub)
        worst = max(worst, float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
        for cone in self.cones:
            worst = max(worst, float(np.linalg.norm(x[list(cone.cols)]) - cone.bound))
        return worst


@dataclass(frozen=True)
class SolverOptions:
    engine: str = "auto"
    tolerance: float = 1e-12
    max_iter: int = 200
    verbose: bool = False


@dataclass(frozen=True)
class SolverResult:
    status: str
    x: np.ndarray | None
    objective: float
    wall_time: float
    engine: str = ""
    max_violation: float = float("nan")
    message: str = ""


def solve_program(program: ConicProgram, options: SolverOptions = SolverOptions()) -> SolverResult:
    """Solve with HiGHS (pure LPs) or Clarabel (anything with cones).

    Status is one of ``optimal``, ``infeasible`` or ``numeric-failure``.
    """
    engine = options.engine
    if engine == "auto":
        engine = "clarabel" if program.cones else "highs"
    if engine == "highs" and program.cones:
        raise SolverError("HiGHS cannot handle second-order cones")
    t0 = time.perf_counter()
    if engine == "highs":
        status, x, msg = _solve_highs(program, options)
    elif engine == "clarabel":
        status, x, msg = _solve_clarabel(program, options)
    else:
        raise SolverError(f"unknown engine {engine!r}")
    wall = time.perf_counter() - t0
    if status != "optimal" or x is None:
        return SolverResult(status, None, float("nan"), wall, engine, message=msg)
    viol = program.max_violation(x)
    if viol > 1e-7:
        return SolverResult("numeric-failure", x, program.objective_value(x), wall, engine, viol,
                            f"solution violates constraints by {viol:.2e}")
    return SolverResult("optimal", x, program.objective_value(x), wall, engine, viol, msg)


def _solve_highs(program: ConicProgram, options: SolverOptions):
    from scipy.optimize import linprog

    # HiGHS refuses feasibility tolerances below 1e-10
    tol = max(options.tolerance, 1e-10)
    a_eq, b_eq = program.equality_matrix()
    a_ub, b_ub = program.inequality_matrix()
    res = linprog(
        program.objective_vector(),
        A_ub=a_ub if program.n_ub else None, b_ub=b_ub if program.n_ub else None,
        A_eq=a_eq if program.n_eq else None, b_eq=b_eq if program.n_eq else None,
        bounds=list(zip(program.lb, program.ub)), method="highs",
        options={"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol, "presolve": True},
    )
    if res.status == 0:
        return "optimal", np.asarray(res.x), res.message
    if res.status == 2:
        return "infeasible", None, res.message
    return "numeric-failure", None, res.message


def _solve_clarabel(program: ConicProgram, options: SolverOptions):
    import clarabel

    n = program.n_var
    blocks_a, blocks_b, cones = [], [], []
    lb, ub = np.array(program.lb), np.array(program.ub)
    fixed = np.flatnonzero(lb == ub)
    a_eq, b_eq = program.equality_matrix()
    if fixed.size:
        a_fix = sp.csr_matrix((np.ones(fixed.size), (np.arange(fixed.size), fixed)), shape=(fixed.size, n))
        a_eq = sp.vstack([a_eq, a_fix])
        b_eq = np.r_[b_eq, lb[fixed]]
    if a_eq.shape[0]:
        blocks_a.append(a_eq)
        blocks_b.append(b_eq)
        cones.append(clarabel.ZeroConeT(a_eq.shape[0]))

    a_ub, b_ub = program.inequality_matrix()
    free = lb != ub
    lo = np.flatnonzero(free & np.isfinite(lb))
    hi = np.flatnonzero(free & np.isfinite(ub))
    parts_a = [a_ub,
               sp.csr_matrix((-np.ones(lo.size), (np.arange(lo.size), lo)), shape=(lo.size, n)),
               sp.csr_matrix((np.ones(hi.size), (np.arange(hi.size), hi)), shape=(hi.size, n))]
    parts_b = [b_ub, -lb[lo], ub[hi]]
    a_nn = sp.vstack(parts_a)
    if a_nn.shape[0]:
        blocks_a.append(a_nn)
        blocks_b.append(np.concatenate(parts_b))
        cones.append(clarabel.NonnegativeConeT(a_nn.shape[0]))

    for cone in program.cones:
        k = len(cone.cols)
        rows = np.arange(1, k + 1)
        a = sp.csr_matrix((-np.ones(k), (rows, list(cone.cols))), shape=(k + 1, n))
        b = np.zeros(k + 1)
        b[0] = cone.bound
        blocks_a.append(a)
        blocks_b.append(b)
        cones.append(clarabel.SecondOrderConeT(k + 1))

    a_all = sp.vstack(blocks_a).tocsc()
    b_all = np.concatenate(blocks_b)
    settings = clarabel.DefaultSettings()
    settings.verbose = options.verbose
    settings.max_iter = options.max_iter
    settings.tol_feas = options.tolerance
    settings.tol_gap_abs = options.tolerance
    settings.tol_gap_rel = options.tolerance
    solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), program.objective_vector(), a_all, b_all, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        return "optimal", np.asarray(sol.x), status
    if "Infeasible" in status:
        return "infeasible", None, status
    return "numeric-failure", None, status

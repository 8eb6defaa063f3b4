"""Consensus ADMM and accelerated ADMM over per-area least-squares problems.

Each iteration is a three-stage barrier loop:

1. every area solves its local regularized least-squares problem (the
   stage is embarrassingly parallel);
2. each coupling averages the two copies of its shared bus;
3. duals take an ascent step with the owner's copy (and, for the
   accelerated method, consensus and dual variables are extrapolated).

Notes on fidelity to the method as published:

* the momentum sequence is ``alpha_i = (1 + sqrt(1 + alpha_{i-1}**2)) / 2``.
  The classical Nesterov rule has ``4 * alpha**2`` under the root; with the
  ``1 + alpha**2`` form the sequence rises from 1 to the fixed point 4/3, so
  the momentum coefficient stays below 1/4.
* the dual residual is the raw change of the consensus variables, without
  the usual penalty scaling.
* termination compares *squared* global residual norms against the
  tolerances: ``||r||**2 < eps_primal and ||s||**2 < eps_dual``.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from dsse_admm.grid import AreaProblem, ParseError, SharedBusRegistry


class SingularLocalSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SolverParams:
    penalty: float = 1.0
    eps_primal: float = 1e-3
    eps_dual: float = 1e-4
    max_iter: int = 1000

    def validate(self) -> None:
        if not self.penalty > 0:
            raise ValueError("penalty must be positive")
        if not (self.eps_primal > 0 and self.eps_dual > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


class LocalSystem:
    """Cached Cholesky factor of ``H'H + penalty * S'S`` for one area.

    The matrix does not change between iterations, so it is factored once.
    """

    def __init__(self, problem: AreaProblem, penalty: float):
        self.problem = problem
        self.penalty = float(penalty)
        G = problem.H.T @ problem.H
        d = np.zeros(problem.n)
        np.add.at(d, problem.coupling_pos, self.penalty)
        G[np.diag_indices_from(G)] += d
        try:
            self._factor = cho_factor(G, lower=True)
        except LinAlgError as exc:
            raise SingularLocalSystem(
                f"area {problem.area}: local system is not positive definite "
                "(an internal bus is unobservable)"
            ) from exc
        self._q = problem.H.T @ problem.z

    def solve(self, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Minimize ``f(v) + sum sign*y*(v[l]-u) + penalty/2 * sum (v[l]-u)**2``."""
        p = self.problem
        rhs = self._q.copy()
        np.add.at(rhs, p.coupling_pos, self.penalty * u - p.coupling_sign * y)
        return cho_solve(self._factor, rhs)


def local_update(problem: AreaProblem, y: np.ndarray, u: np.ndarray, penalty: float) -> np.ndarray:
    """One-shot local minimization; ``y`` and ``u`` are this area's coupling slices."""
    return LocalSystem(problem, penalty).solve(np.asarray(y, float), np.asarray(u, float))


def consensus_update(own: np.ndarray, other: np.ndarray) -> np.ndarray:
    return 0.5 * (own + other)


def dual_update(y_prev: np.ndarray, own: np.ndarray, u: np.ndarray, penalty: float) -> np.ndarray:
    return y_prev + penalty * (own - u)


def next_alpha(alpha_prev: float) -> float:
    return (1.0 + np.sqrt(1.0 + alpha_prev * alpha_prev)) / 2.0


def extrapolate(x: np.ndarray, x_prev: np.ndarray, coef: float) -> np.ndarray:
    return x + coef * (x - x_prev)


def momentum_update(u, u_prev, y, y_prev, alpha_prev: float):
    """Return ``(u_hat, y_hat, alpha)`` for the next accelerated step."""
    alpha = next_alpha(alpha_prev)
    coef = (alpha_prev - 1.0) / alpha
    return extrapolate(u, u_prev, coef), extrapolate(y, y_prev, coef), alpha


def residuals(own: np.ndarray, other: np.ndarray, u: np.ndarray, u_prev: np.ndarray) -> tuple[float, float]:
    """Global primal and dual residual norms.

    The primal residual stacks both copies of every coupling against the
    consensus value; the dual residual is the change of the consensus vector.
    """
    r = np.concatenate([own - u, other - u])
    return float(np.linalg.norm(r)), float(np.linalg.norm(u - u_prev))


@dataclass
class CopyMap:
    """Where each coupling's two copies live: ``(area, local position)`` pairs."""

    own_area: np.ndarray
    own_pos: np.ndarray
    other_area: np.ndarray
    other_pos: np.ndarray

    @classmethod
    def build(cls, problems: Sequence[AreaProblem], num_couplings: int) -> "CopyMap":
        own = np.full((num_couplings, 2), -1)
        other = np.full((num_couplings, 2), -1)
        for k, p in enumerate(problems):
            if p.area != k:
                raise ValueError(f"problem {k} belongs to area {p.area}; list must be ordered by area")
            for c, pos, s in zip(p.coupling_index, p.coupling_pos, p.coupling_sign):
                slot = own if s > 0 else other
                if slot[c, 0] != -1:
                    raise ValueError(f"coupling {c} claimed twice with the same sign")
                slot[c] = (k, pos)
        if (own < 0).any() or (other < 0).any():
            raise ValueError("every coupling needs exactly one owner and one partner copy")
        return cls(own[:, 0], own[:, 1], other[:, 0], other[:, 1])

    def gather(self, v: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        own = np.array([v[k][i] for k, i in zip(self.own_area, self.own_pos)], dtype=float)
        other = np.array([v[k][i] for k, i in zip(self.other_area, self.other_pos)], dtype=float)
        return own, other


@dataclass
class IterateState:
    v: list[np.ndarray]
    u: np.ndarray
    y: np.ndarray
    u_hat: np.ndarray
    y_hat: np.ndarray
    alpha: float = 1.0
    sum_v: list[np.ndarray] = field(default_factory=list)
    sum_u: np.ndarray | None = None
    sum_y: np.ndarray | None = None
    iter: int = 0

    @classmethod
    def initial(cls, problems: Sequence[AreaProblem], num_couplings: int,
                u0: np.ndarray | None = None) -> "IterateState":
        u = np.zeros(num_couplings) if u0 is None else np.asarray(u0, dtype=float).copy()
        if u.shape != (num_couplings,):
            raise ValueError("u0 has the wrong length")
        y = np.zeros(num_couplings)
        return cls(
            v=[np.zeros(p.n) for p in problems],
            u=u, y=y, u_hat=u.copy(), y_hat=y.copy(),
            sum_v=[np.zeros(p.n) for p in problems],
            sum_u=np.zeros(num_couplings), sum_y=np.zeros(num_couplings),
        )

    def accumulate(self) -> None:
        self.iter += 1
        for s, x in zip(self.sum_v, self.v):
            s += x
        self.sum_u += self.u
        self.sum_y += self.y


def ergodic_point(state: IterateState) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Running means of ``v``, ``u`` and ``y`` over iterations ``1..iter``."""
    if state.iter < 1:
        raise ValueError("no iterates accumulated yet")
    n = state.iter
    return [s / n for s in state.sum_v], state.sum_u / n, state.sum_y / n


@dataclass
class RunReport:
    method: str
    penalty: float
    iterations: int
    converged: bool
    primal_history: np.ndarray
    dual_history: np.ndarray
    v: list[np.ndarray]
    v_bar: list[np.ndarray]
    u: np.ndarray
    y: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray
    u0: np.ndarray
    history: list[tuple[list[np.ndarray], np.ndarray, np.ndarray]] | None = None

    def summary(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations, "penalty": self.penalty}

    def to_csv(self, path: str | Path) -> None:
        write_residual_csv(path, self.primal_history, self.dual_history)


def write_residual_csv(path, primal, dual) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "primal_residual", "dual_residual"])
        for i, (r, s) in enumerate(zip(primal, dual), start=1):
            w.writerow([i, repr(float(r)), repr(float(s))])


def read_residual_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    if rows[0] != ["iter", "primal_residual", "dual_residual"]:
        raise ParseError(f"{path}:1: unexpected header {rows[0]}")
    if len(rows) < 2:
        raise ParseError(f"{path}: no data rows")
    r, s = [], []
    for n, row in enumerate(rows[1:], start=2):
        try:
            r.append(float(row[1]))
            s.append(float(row[2]))
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{n}: {exc}") from exc
    return np.array(r), np.array(s)


def _check_inputs(problems, registry, params):
    params.validate()
    m = len(registry) if isinstance(registry, SharedBusRegistry) else int(registry)
    return m, CopyMap.build(problems, m)


def _run(problems: Sequence[AreaProblem], registry, params: SolverParams, accelerated: bool,
         u0=None, keep_history: bool = False, workers: int = 1) -> RunReport:
    m, cmap = _check_inputs(problems, registry, params)
    p = params.penalty
    systems = [LocalSystem(pr, p) for pr in problems]
    st = IterateState.initial(problems, m, u0)
    u_init = st.u.copy()
    prim, dual = [], []
    history = [] if keep_history else None
    converged = False
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def solve_one(k):
        pr = problems[k]
        idx = pr.coupling_index
        return systems[k].solve(st.y_hat[idx], st.u_hat[idx])

    try:
        for _ in range(params.max_iter):
            if pool is None:
                st.v = [solve_one(k) for k in range(len(problems))]
            else:
                st.v = list(pool.map(solve_one, range(len(problems))))
            own, other = cmap.gather(st.v)
            u_prev, y_prev = st.u, st.y
            st.u = consensus_update(own, other)
            st.y = dual_update(st.y_hat, own, st.u, p)
            if accelerated:
                st.u_hat, st.y_hat, st.alpha = momentum_update(st.u, u_prev, st.y, y_prev, st.alpha)
            else:
                st.u_hat, st.y_hat = st.u, st.y
            st.accumulate()
            r, s = residuals(own, other, st.u, u_prev)
            prim.append(r)
            dual.append(s)
            if history is not None:
                history.append(([x.copy() for x in st.v], st.u.copy(), st.y.copy()))
            if r * r < params.eps_primal and s * s < params.eps_dual:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    v_bar, u_bar, y_bar = ergodic_point(st)
    return RunReport(
        method="aadmm" if accelerated else "admm",
        penalty=p,
        iterations=st.iter,
        converged=converged,
        primal_history=np.array(prim),
        dual_history=np.array(dual),
        v=st.v, v_bar=v_bar, u=st.u, y=st.y, u_bar=u_bar, y_bar=y_bar,
        u0=u_init, history=history,
    )


def solve_admm(problems, registry, params: SolverParams, *, u0=None, keep_history=False,
               workers: int = 1) -> RunReport:
    """Ergodic consensus ADMM starting from ``u = u0`` (default 0) and ``y = 0``."""
    return _run(problems, registry, params, False, u0, keep_history, workers)


def solve_aadmm(problems, registry, params: SolverParams, *, u0=None, keep_history=False,
                workers: int = 1) -> RunReport:
    """Accelerated ADMM: local and dual steps read the extrapolated ``u_hat, y_hat``."""
    return _run(problems, registry, params, True, u0, keep_history, workers)


def solve(method: str, problems, registry, params: SolverParams, **kw) -> RunReport:
    if method == "admm":
        return solve_admm(problems, registry, params, **kw)
    if method == "aadmm":
        return solve_aadmm(problems, registry, params, **kw)
    raise ValueError(f"unknown method {method!r}")


def assemble_state(problems: Sequence[AreaProblem], v: Sequence[np.ndarray], num_buses: int) -> np.ndarray:
    """Global state from per-area estimates, averaging copies of shared buses."""
    acc = np.zeros(num_buses)
    cnt = np.zeros(num_buses)
    for pr, x in zip(problems, v):
        idx = list(pr.buses)
        np.add.at(acc, idx, x)
        np.add.at(cnt, idx, 1.0)
    return acc / np.maximum(cnt, 1.0)

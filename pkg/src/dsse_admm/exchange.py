"""Area-as-actor simulation of the ADMM iterations.

Every area runs as an :class:`AreaActor` that holds only its own
measurements and the consensus/dual scalars of its couplings.  Actors talk
exclusively through :class:`BoundaryMessage` values naming a shared bus.
Per round and per coupling ``(k, l, bus)``:

* the partner ``l`` sends its copy of the bus angle to the owner ``k``;
* the owner averages the two copies, takes the dual step, and sends the
  new consensus and dual values back.

That is three messages per coupling per round.  Rounds are barrier
synchronized; the default scheduler is single threaded and visits areas in
id order.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dsse_admm.grid import AreaProblem, SharedBusRegistry
from dsse_admm.solver import (
    LocalSystem,
    RunReport,
    SolverParams,
    consensus_update,
    dual_update,
    extrapolate,
    next_alpha,
    residuals,
)

V_COPY = "v-copy"
U_VALUE = "u-value"
Y_VALUE = "y-value"


class PrivacyViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundaryMessage:
    from_area: int
    to_area: int
    bus: int
    value: float
    kind: str
    iteration: int


class AreaActor:
    def __init__(self, problem: AreaProblem, registry: SharedBusRegistry, penalty: float, accelerated: bool):
        self.area = problem.area
        self.problem = problem
        self.penalty = penalty
        self.accelerated = accelerated
        self.system = LocalSystem(problem, penalty)
        self.idx = [int(c) for c in problem.coupling_index]
        self.pos = [int(p) for p in problem.coupling_pos]
        self.owner = [s > 0 for s in problem.coupling_sign]
        self.links = [registry.couplings[c] for c in self.idx]
        m = len(self.idx)
        self.u = np.zeros(m)
        self.y = np.zeros(m)
        self.u_hat = np.zeros(m)
        self.y_hat = np.zeros(m)
        self.u_prev = np.zeros(m)
        self.y_prev = np.zeros(m)
        self.alpha = 1.0
        self.v = np.zeros(problem.n)
        self.sum_v = np.zeros(problem.n)
        self.inbox: list[BoundaryMessage] = []

    def partner(self, j: int) -> int:
        c = self.links[j]
        return c.l if c.k == self.area else c.k

    def local_step(self, it: int) -> list[BoundaryMessage]:
        self.v = self.system.solve(self.y_hat, self.u_hat)
        self.sum_v += self.v
        return [
            BoundaryMessage(self.area, self.partner(j), self.links[j].bus, float(self.v[self.pos[j]]), V_COPY, it)
            for j in range(len(self.idx))
            if not self.owner[j]
        ]

    def _take(self, kind: str) -> dict[tuple[int, int], float]:
        got = {(m.from_area, m.bus): m.value for m in self.inbox if m.kind == kind}
        self.inbox = [m for m in self.inbox if m.kind != kind]
        return got

    def consensus_step(self, it: int):
        """Owner side: returns outgoing messages and ``(coupling, own, other, u, u_prev)`` records."""
        copies = self._take(V_COPY)
        out, records = [], []
        for j, c in enumerate(self.idx):
            if not self.owner[j]:
                continue
            other_area = self.partner(j)
            own = np.array([self.v[self.pos[j]]])
            other = np.array([copies[(other_area, self.links[j].bus)]])
            u = consensus_update(own, other)
            y = dual_update(self.y_hat[j:j + 1], own, u, self.penalty)
            records.append((c, own[0], other[0], u[0], self.u[j]))
            self._advance(j, u[0], y[0])
            bus = self.links[j].bus
            out.append(BoundaryMessage(self.area, other_area, bus, float(u[0]), U_VALUE, it))
            out.append(BoundaryMessage(self.area, other_area, bus, float(y[0]), Y_VALUE, it))
        return out, records

    def receive_step(self) -> None:
        us, ys = self._take(U_VALUE), self._take(Y_VALUE)
        for j in range(len(self.idx)):
            if self.owner[j]:
                continue
            key = (self.partner(j), self.links[j].bus)
            self._advance(j, us[key], ys[key])

    def _advance(self, j: int, u: float, y: float) -> None:
        self.u_prev[j], self.y_prev[j] = self.u[j], self.y[j]
        self.u[j], self.y[j] = u, y

    def momentum_step(self) -> None:
        if not self.idx:
            if self.accelerated:
                self.alpha = next_alpha(self.alpha)
            return
        if self.accelerated:
            alpha = next_alpha(self.alpha)
            coef = (self.alpha - 1.0) / alpha
            self.u_hat = extrapolate(self.u, self.u_prev, coef)
            self.y_hat = extrapolate(self.y, self.y_prev, coef)
            self.alpha = alpha
        else:
            self.u_hat, self.y_hat = self.u.copy(), self.y.copy()


class Network:
    """Delivers messages between actors after checking they name a coupled bus."""

    def __init__(self, registry: SharedBusRegistry, actors: Sequence[AreaActor], keep_log: bool):
        self.allowed = {(c.k, c.l, c.bus) for c in registry}
        self.actors = actors
        self.log: list[BoundaryMessage] | None = [] if keep_log else None
        self.count = 0

    def deliver(self, messages: Sequence[BoundaryMessage]) -> None:
        for m in messages:
            key = (min(m.from_area, m.to_area), max(m.from_area, m.to_area), m.bus)
            if key not in self.allowed:
                raise PrivacyViolation(f"message {m} names a bus that is not a coupling")
            self.actors[m.to_area].inbox.append(m)
            self.count += 1
            if self.log is not None:
                self.log.append(m)


@dataclass
class DistributedRun:
    report: RunReport
    messages_per_iteration: list[int]
    log: list[BoundaryMessage] | None

    def write_log(self, path: str | Path) -> None:
        if self.log is None:
            raise ValueError("run was made without keep_log=True")
        write_message_log(self.log, path)


def write_message_log(log: Sequence[BoundaryMessage], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "from", "to", "bus", "kind", "value"])
        for m in log:
            w.writerow([m.iteration, m.from_area, m.to_area, m.bus, m.kind, repr(m.value)])


def run_distributed(problems: Sequence[AreaProblem], registry: SharedBusRegistry, params: SolverParams,
                    method: str = "admm", *, workers: int = 1, keep_log: bool = False,
                    keep_history: bool = False) -> DistributedRun:
    """Run ADMM (``method="admm"``) or A-ADMM (``"aadmm"``) over actors.

    Produces the same report as the monolithic solver, bit for bit.
    """
    if method not in ("admm", "aadmm"):
        raise ValueError(f"unknown method {method!r}")
    params.validate()
    accelerated = method == "aadmm"
    m = len(registry)
    actors = [AreaActor(p, registry, params.penalty, accelerated) for p in problems]
    net = Network(registry, actors, keep_log)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    prim, dual, per_iter = [], [], []
    history = [] if keep_history else None
    sum_u = np.zeros(m)
    sum_y = np.zeros(m)
    u_all = np.zeros(m)
    y_all = np.zeros(m)
    converged = False
    it = 0
    try:
        for it in range(1, params.max_iter + 1):
            before = net.count
            if pool is None:
                outs = [a.local_step(it) for a in actors]
            else:
                outs = list(pool.map(lambda a: a.local_step(it), actors))
            for o in outs:
                net.deliver(o)
            own = np.zeros(m)
            other = np.zeros(m)
            u = np.zeros(m)
            u_prev = np.zeros(m)
            for a in actors:
                msgs, records = a.consensus_step(it)
                net.deliver(msgs)
                for c, ow, ot, uc, up in records:
                    own[c], other[c], u[c], u_prev[c] = ow, ot, uc, up
            for a in actors:
                a.receive_step()
                a.momentum_step()
            for a in actors:
                for j, c in enumerate(a.idx):
                    if a.owner[j]:
                        y_all[c] = a.y[j]
            u_all = u
            sum_u += u_all
            sum_y += y_all
            r, s = residuals(own, other, u, u_prev)
            prim.append(r)
            dual.append(s)
            per_iter.append(net.count - before)
            if history is not None:
                history.append(([a.v.copy() for a in actors], u_all.copy(), y_all.copy()))
            if r * r < params.eps_primal and s * s < params.eps_dual:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    report = RunReport(
        method=method,
        penalty=params.penalty,
        iterations=it,
        converged=converged,
        primal_history=np.array(prim),
        dual_history=np.array(dual),
        v=[a.v for a in actors],
        v_bar=[a.sum_v / it for a in actors],
        u=u_all.copy(), y=y_all.copy(),
        u_bar=sum_u / it, y_bar=sum_y / it,
        u0=np.zeros(m),
        history=history,
    )
    return DistributedRun(report, per_iter, net.log)

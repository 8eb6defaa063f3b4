"""Experiment runner: ``dsse-admm {run,sweep,plot,verify}``.

run     residual histories for ADMM / A-ADMM on a ring or chain grid
sweep   best-parameter iteration table over several area counts
plot    log-scale primal/dual residual figures from residual CSVs
verify  ergodic-bound and oracle checks on a small instance (<= 8 areas)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dsse_admm import analysis, fixtures
from dsse_admm.grid import (
    GridConfig,
    InvalidConfig,
    ParseError,
    build_measurements,
    grid_for_areas,
    load_grid,
    make_instance,
    true_state,
    write_measurements,
)
from dsse_admm.solver import SolverParams, read_residual_csv, solve

log = logging.getLogger("dsse_admm")

DEFAULT_GRID = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0)


@dataclass
class ExperimentSpec:
    topology: str = "ring"
    blocks: int = 10
    method: str = "both"
    mu: list[float] = field(default_factory=lambda: [1.0])
    rho: list[float] = field(default_factory=lambda: [2.0])
    eps_primal: float = 1e-3
    eps_dual: float = 1e-4
    max_iter: int = 1000
    seed: int = 0
    noise_std: float = 0.01
    out: str = "out"
    areas: list[int] = field(default_factory=lambda: [4, 20, 40])
    workers: int = 1
    grid: str | None = None

    def methods(self) -> list[tuple[str, list[float]]]:
        if self.method not in ("admm", "aadmm", "both"):
            raise InvalidConfig(f"unknown method {self.method!r}")
        out = []
        if self.method in ("admm", "both"):
            out.append(("admm", list(self.mu)))
        if self.method in ("aadmm", "both"):
            out.append(("aadmm", list(self.rho)))
        for name, params in out:
            if not params:
                raise InvalidConfig(f"empty parameter list for {name}")
        return out

    def grid_config(self) -> GridConfig:
        return GridConfig(self.topology, self.blocks, self.noise_std, self.seed)

    def params(self, penalty: float) -> SolverParams:
        return SolverParams(penalty, self.eps_primal, self.eps_dual, self.max_iter)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def load_spec(path: str | Path) -> dict:
    """Experiment spec file: a JSON object whose keys mirror the long flags."""
    text = Path(path).read_text()
    if not text.strip():
        raise ParseError(f"{path}: empty file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: spec must be an object")
    known = set(ExperimentSpec.__dataclass_fields__)
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    unknown = set(doc) - known
    if unknown:
        raise ParseError(f"{path}: unknown fields {sorted(unknown)}")
    return doc


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    spec = ExperimentSpec()
    if getattr(args, "spec", None):
        spec = replace(spec, **load_spec(args.spec))
    for name in ExperimentSpec.__dataclass_fields__:
        val = getattr(args, name, None)
        if val is not None:
            spec = replace(spec, **{name: val})
    return spec


def _fmt(p: float) -> str:
    return f"{p:g}"


def _instance(spec: ExperimentSpec, num_areas: int | None = None):
    cfg = spec.grid_config()
    if spec.grid and num_areas is None:
        grid = load_grid(spec.grid)
        return grid, build_measurements(grid, true_state(grid, spec.seed), cfg)
    grid, problems, _ = make_instance(cfg, num_areas)
    return grid, problems


def _label(spec: ExperimentSpec) -> str:
    return Path(spec.grid).stem if spec.grid else f"{spec.topology}{spec.blocks}"


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(spec: ExperimentSpec) -> int:
    grid, problems = _instance(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    label = _label(spec)
    write_measurements(problems, out / f"{label}_measurements.csv")
    rows = []
    ok = True
    for method, values in spec.methods():
        for p in values:
            rep = solve(method, problems, grid.registry, spec.params(p), workers=spec.workers)
            rep.to_csv(out / f"{label}_{method}_p{_fmt(p)}.csv")
            rows.append([method, _fmt(p), rep.converged, rep.iterations])
            log.info("%s %s p=%g: %s after %d iterations", label, method, p,
                     "converged" if rep.converged else "NOT converged", rep.iterations)
            ok &= rep.converged
    with open(out / f"{label}_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "penalty", "converged", "iterations"])
        w.writerows(rows)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    areas: int
    method: str
    penalty: float
    iterations: int
    converged: bool


def best_cell(cells: Sequence[SweepCell]) -> SweepCell | None:
    """Fewest iterations among converged cells; ties go to the smaller parameter."""
    good = [c for c in cells if c.converged]
    if not good:
        return None
    return min(good, key=lambda c: (c.iterations, c.penalty))


def run_sweep(spec: ExperimentSpec) -> tuple[list[SweepCell], list[dict]]:
    methods = spec.methods()
    instances = {n: _instance(spec, n) for n in sorted(set(spec.areas))}
    jobs = [(n, m, p) for n in sorted(instances) for m, ps in methods for p in ps]

    def one(job):
        n, m, p = job
        grid, problems = instances[n]
        rep = solve(m, problems, grid.registry, spec.params(p))
        return SweepCell(n, m, p, rep.iterations, rep.converged)

    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            cells = list(pool.map(one, jobs))
    else:
        cells = [one(j) for j in jobs]
    cells.sort(key=lambda c: (c.areas, c.method, c.penalty))
    table = []
    for n in sorted(instances):
        row = {"areas": n}
        for m, key in (("admm", "mu"), ("aadmm", "rho")):
            b = best_cell([c for c in cells if c.areas == n and c.method == m])
            row[key] = _fmt(b.penalty) if b else ""
            row[f"{m}_iterations"] = b.iterations if b else ""
        table.append(row)
    return cells, table


def cmd_sweep(spec: ExperimentSpec) -> int:
    cells, table = run_sweep(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"sweep_{spec.topology}_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["areas", "method", "penalty", "iterations", "converged"])
        for c in cells:
            w.writerow([c.areas, c.method, _fmt(c.penalty), c.iterations, c.converged])
    with open(out / f"sweep_{spec.topology}_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["areas", "mu", "admm_iterations", "rho", "aadmm_iterations"],
                           extrasaction="ignore")
        w.writeheader()
        w.writerows(table)
    for row in table:
        log.info("areas=%s  ADMM mu=%s: %s   A-ADMM rho=%s: %s", row["areas"], row.get("mu"),
                 row.get("admm_iterations"), row.get("rho"), row.get("aadmm_iterations"))
    # success iff every (size, method) has at least one converged parameter
    found = all(row[f"{m}_iterations"] != "" for row in table for m, _ in spec.methods())
    return 0 if found else 1


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def plot_residuals(paths: Sequence[str | Path], out: str | Path, title: str | None = None) -> Path:
    """One figure, primal and dual panels, one log-scale curve per CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = [(Path(p).stem, *read_residual_csv(p)) for p in paths]
    fig, (ax_r, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    for name, r, s in data:
        it = np.arange(1, len(r) + 1)
        ax_r.semilogy(it, r, label=name)
        ax_s.semilogy(it, s, label=name)
    ax_r.set_title("primal residual")
    ax_s.set_title("dual residual")
    for ax in (ax_r, ax_s):
        ax.set_xlabel("iteration")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def cmd_plot(csvs: Sequence[str], out: str, title: str | None = None) -> int:
    plot_residuals(csvs, out, title)
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


@dataclass
class VerifyOutcome:
    results: dict[float, analysis.ErgodicBoundResult]
    oracle_error: float
    messages: list[str]

    @property
    def ok(self) -> bool:
        return not self.messages


def run_verify(num_areas: int, mus: Sequence[float], n_iter: int = 200, seed: int = 0,
               history_hook: Callable[[list], None] | None = None, out: str | Path | None = None) -> VerifyOutcome:
    """Check the ergodic bounds for every N <= ``n_iter`` and the oracle agreement."""
    if num_areas > 8:
        raise InvalidConfig("verify is limited to instances with at most 8 areas")
    grid, problems, _ = fixtures.instance(num_areas, seed=seed)
    ref = analysis.kkt_reference(grid, problems)
    x = analysis.centralized_solve(grid, problems)
    oracle = max(float(np.abs(v - x[list(p.buses)]).max()) for v, p in zip(ref.v_star, problems))
    msgs = []
    if oracle > 1e-9:
        msgs.append(f"KKT reference and centralized solve differ by {oracle:.3e}")
    results = {}
    for mu in mus:
        params = SolverParams(mu, eps_primal=1e-300, eps_dual=1e-300, max_iter=n_iter)
        rep = solve("admm", problems, grid.registry, params, keep_history=True)
        if history_hook is not None:
            history_hook(rep.history)
        res = analysis.check_ergodic_bounds(rep, ref, mu, problems)
        results[mu] = res
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            res.to_csv(Path(out) / f"ergodic_bounds_{num_areas}areas_mu{_fmt(mu)}.csv")
        for n, k, kind in res.failures():
            msgs.append(f"mu={mu:g} N={n} area={k}: {kind} bound violated")
    return VerifyOutcome(results, oracle, msgs)


def cmd_verify(num_areas: int, mus: Sequence[float], n_iter: int = 200, seed: int = 0,
               out: str | None = None, history_hook=None) -> int:
    res = run_verify(num_areas, mus, n_iter, seed, history_hook, out)
    for m in res.messages[:50]:
        print(m, file=sys.stderr)
    if len(res.messages) > 50:
        print(f"... {len(res.messages) - 50} more violations", file=sys.stderr)
    print(f"verify: {num_areas} areas, mu={list(mus)}: "
          f"{'all bounds hold' if res.ok else f'{len(res.messages)} violations'}")
    return 0 if res.ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", help="JSON experiment spec; flags override its fields")
    p.add_argument("--topology", choices=["ring", "chain"])
    p.add_argument("--blocks", type=int)
    p.add_argument("--method", choices=["admm", "aadmm", "both"])
    p.add_argument("--mu", type=_floats, help="ADMM penalties, e.g. 1,2,4")
    p.add_argument("--rho", type=_floats, help="A-ADMM penalties")
    p.add_argument("--eps-primal", dest="eps_primal", type=float)
    p.add_argument("--eps-dual", dest="eps_dual", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsse-admm", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="residual histories for one grid")
    _common(run)
    run.add_argument("--grid", help="grid file to use instead of a generated ring/chain")

    sw = sub.add_parser("sweep", help="best-parameter table over area counts")
    _common(sw)
    sw.add_argument("--areas", type=_ints, help="area counts, multiples of 4 (default 4,20,40)")

    pl = sub.add_parser("plot", help="plot residual CSVs")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", default="residuals.png")
    pl.add_argument("--title")

    ve = sub.add_parser("verify", help="ergodic-bound and oracle checks")
    ve.add_argument("--areas", type=int, default=2, choices=[2, 4, 8])
    ve.add_argument("--mu", type=_floats, default=[0.5, 1.0, 4.0])
    ve.add_argument("--iterations", type=int, default=200)
    ve.add_argument("--seed", type=int, default=0)
    ve.add_argument("--out")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(spec_from_args(args))
        if args.command == "sweep":
            spec = spec_from_args(args)
            if args.mu is None and "mu" not in (load_spec(args.spec) if args.spec else {}):
                spec = replace(spec, mu=list(DEFAULT_GRID))
            if args.rho is None and "rho" not in (load_spec(args.spec) if args.spec else {}):
                spec = replace(spec, rho=list(DEFAULT_GRID))
            return cmd_sweep(spec)
        if args.command == "plot":
            return cmd_plot(args.csv, args.out, args.title)
        if args.command == "verify":
            return cmd_verify(args.areas, args.mu, args.iterations, args.seed, args.out)
    except (ParseError, InvalidConfig, np.linalg.LinAlgError, ValueError, OSError) as exc:
        print(f"dsse-admm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())

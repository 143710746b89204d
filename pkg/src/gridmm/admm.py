"""One-level consensus ADMM over regional AC-OPF subproblems.

The coordinator keeps, per region, a copy of the consensus values and the
region's multipliers for each of its coupling arcs. Regions solve their
augmented Lagrangian subproblems independently; the coordinator then applies
the dual and consensus updates and records residuals.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grid import RegionView
from .nlp import FAILURE, NlpSolution, solve as nlp_solve
from .opf import ONE_LEVEL, CouplingTargets, RegionalModel

log = logging.getLogger(__name__)

CONSENSUS_MEAN = "mean"          # mean of the region-side (S^C + S^f)/2 updates
CONSENSUS_AVERAGE = "average"    # plain average of the regional values
CONSENSUS_LITERAL = "literal"    # each region keeps its own (S^C_k + S^f_k)/2 copy
CONSENSUS_DUAL = "dual"          # mean of S^f + lam / rho (multiplier-aware, engine only)
TRACE_COLUMNS = ("iter", "region", "objective", "rp_inf", "rd_inf", "rp_l2", "rd_l2", "wall_ms")


@dataclass
class AdmmConfig:
    rho0: float = 10.0
    rho_policy: str = "constant"        # or "balancing"
    tau: float = 2.0
    mu: float = 10.0
    consensus: str = CONSENSUS_MEAN
    rho_free_dual: bool = True          # unit dual step; False scales it by rho
    early_stop: bool = False
    eps: float = 1e-4
    norm: str = "inf"                   # residual summary used by filters
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_iter: int = 200
    warm_multipliers: bool = True

    def __post_init__(self):
        if self.rho_policy not in ("constant", "balancing"):
            raise ValueError(f"unknown rho policy {self.rho_policy!r}")
        if self.consensus not in (CONSENSUS_MEAN, CONSENSUS_AVERAGE, CONSENSUS_LITERAL,
                                  CONSENSUS_DUAL):
            raise ValueError(f"unknown consensus rule {self.consensus!r}")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")


@dataclass
class ConsensusState:
    """Coordinator state: per-region consensus copies and multipliers.

    ``xC[k]`` and ``lam[k]`` have shape ``(len(arcs[k]), 4)`` with columns
    ``p, q, v, th``.
    """

    arcs: dict
    xC: dict
    lam: dict
    rho: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        for k, arcs in self.arcs.items():
            for name in ("xC", "lam"):
                if getattr(self, name)[k].shape != (len(arcs), 4):
                    raise ValueError(f"{name}[{k}] does not cover region {k}'s arcs")

    @property
    def regions(self) -> list:
        return list(self.arcs)

    def targets(self, k) -> CouplingTargets:
        return CouplingTargets(self.arcs[k], self.xC[k], self.lam[k])

    def copy(self):
        return ConsensusState(dict(self.arcs), {k: v.copy() for k, v in self.xC.items()},
                              {k: v.copy() for k, v in self.lam.items()}, self.rho)

    def global_arcs(self) -> list:
        return sorted({a for arcs in self.arcs.values() for a in arcs})

    def owners(self) -> dict:
        own = {}
        for k in sorted(self.arcs):
            for a in self.arcs[k]:
                own.setdefault(a, []).append(k)
        return own


# ------------------------------------------------------------------ init


def cold_start(views: Sequence[RegionView], rho0: float = 10.0) -> ConsensusState:
    """Flows and angles at 0, magnitudes at 1, multipliers at 0."""
    arcs = {v.region: tuple(v.arcs) for v in views}
    xC, lam = {}, {}
    for k, a in arcs.items():
        xC[k] = np.zeros((len(a), 4))
        xC[k][:, 2] = 1.0
        lam[k] = np.zeros((len(a), 4))
    return ConsensusState(arcs, xC, lam, rho0)


def warm_start(views: Sequence[RegionView], predictions: dict, rho0: float = 10.0) -> ConsensusState:
    """State whose consensus copies and multipliers are the predictions verbatim."""
    arcs = {v.region: tuple(v.arcs) for v in views}
    xC, lam = {}, {}
    for k, a in arcs.items():
        if k not in predictions:
            raise KeyError(f"no prediction for region {k}")
        pred = predictions[k]
        if tuple(pred.arcs) != a:
            missing = sorted(set(a) - set(pred.arcs))
            raise KeyError(f"prediction for region {k} misses arcs {missing}")
        xC[k] = np.array(pred.xC, float)
        lam[k] = np.array(pred.lam, float)
    return ConsensusState(arcs, xC, lam, rho0)


# --------------------------------------------------------------- updates


def dual_update(lam, rho, local, consensus, rho_free=False):
    """``lam + rho * (local - consensus)``; the step is 1 when ``rho_free``."""
    step = 1.0 if rho_free else rho
    return lam + step * (local - consensus)


def region_consensus_update(consensus, local):
    """One region's view of the new consensus: ``(S^C + S^f) / 2``."""
    return (consensus + local) / 2.0


def consensus_update(state: ConsensusState, values: dict, rule: str = CONSENSUS_MEAN,
                     dual_step: Optional[float] = None) -> dict:
    """New per-region consensus copies from the regions' coupling values.

    ``dual_step`` is the multiplier step size the "dual" rule divides by
    (defaults to rho).
    """
    if rule == CONSENSUS_LITERAL:
        return {k: region_consensus_update(state.xC[k], values[k]) for k in state.arcs}
    pos = {k: {a: i for i, a in enumerate(state.arcs[k])} for k in state.arcs}
    merged = {}
    for a, owners in state.owners().items():
        if rule == CONSENSUS_MEAN:
            parts = [region_consensus_update(state.xC[k][pos[k][a]], values[k][pos[k][a]]) for k in owners]
        elif rule == CONSENSUS_DUAL:
            # uses the freshly updated multipliers, so the fixed point satisfies sum(lam) = 0
            step = state.rho if dual_step is None else dual_step
            parts = [values[k][pos[k][a]] + state.lam[k][pos[k][a]] / step for k in owners]
        else:
            parts = [values[k][pos[k][a]] for k in owners]
        acc = parts[0]
        for p in parts[1:]:
            acc = acc + p
        merged[a] = acc / len(parts)
    out = {}
    for k, arcs in state.arcs.items():
        out[k] = np.array([merged[a] for a in arcs]).reshape(len(arcs), 4)
    return out


def primal_residual(state: ConsensusState, values: dict) -> np.ndarray:
    """Per global arc and component: value of the first owner minus the second."""
    pos = {k: {a: i for i, a in enumerate(state.arcs[k])} for k in state.arcs}
    rows = []
    for a, owners in sorted(state.owners().items()):
        ka, kb = owners[0], owners[-1]
        rows.append(values[ka][pos[ka][a]] - values[kb][pos[kb][a]])
    return np.array(rows, float).ravel()


def dual_residual(state: ConsensusState, current: dict, previous: dict, rho: float) -> np.ndarray:
    """``rho * A^T B (x2_t - x2_{t-1})`` with ``A = I``, ``B = -I`` per region copy."""
    parts = [-rho * (current[k] - previous[k]).ravel() for k in sorted(state.arcs)]
    return np.concatenate(parts) if parts else np.zeros(0)


def update_rho(rho: float, rp: np.ndarray, rd: np.ndarray, policy: str = "constant",
               tau: float = 2.0, mu: float = 10.0) -> float:
    if policy == "constant":
        return rho
    if policy != "balancing":
        raise ValueError(f"unknown rho policy {policy!r}")
    np_, nd = float(np.linalg.norm(rp)), float(np.linalg.norm(rd))
    if np_ > mu * nd:
        return rho * tau
    if nd > mu * np_:
        return rho / tau
    return rho


def _norms(vec):
    if vec.size == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(vec))), float(np.linalg.norm(vec))


# ----------------------------------------------------------------- trace


@dataclass
class IterationRecord:
    iter: int
    objectives: dict
    rp: np.ndarray
    rd: np.ndarray
    rp_inf: float
    rd_inf: float
    rp_l2: float
    rd_l2: float
    rho: float
    wall_ms: dict
    consensus: dict
    z_inf: Optional[float] = None
    z_l2: Optional[float] = None
    s_z: Optional[float] = None
    beta: Optional[float] = None
    rho_next: Optional[float] = None
    unconverged: tuple = ()

    @property
    def objective(self) -> float:
        return float(sum(self.objectives[k] for k in sorted(self.objectives)))


@dataclass
class AdmmTrace:
    records: list = field(default_factory=list)
    status: str = "completed"
    error: str = ""
    two_level: bool = False
    state: object = None
    solutions: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def last(self) -> IterationRecord:
        return self.records[-1]

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], float)

    def to_csv(self, path=None, deterministic: bool = False) -> str:
        """CSV text (also written to ``path``); ``deterministic`` blanks wall_ms."""
        cols = list(TRACE_COLUMNS) + (["z_inf", "z_l2", "beta"] if self.two_level else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            regions = sorted(r.objectives)
            for k in regions + ["total"]:
                obj = r.objective if k == "total" else r.objectives[k]
                wall = "" if deterministic else f"{r.wall_ms.get(k, 0.0):.3f}"
                row = [r.iter, k, repr(obj), repr(r.rp_inf), repr(r.rd_inf), repr(r.rp_l2),
                       repr(r.rd_l2), wall]
                if self.two_level:
                    row += [repr(r.z_inf), repr(r.z_l2), repr(r.beta)]
                w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------- regions


class RegionSolver:
    """A region's private side: model, last primal point and solver multipliers."""

    def __init__(self, view: RegionView, pd=None, qd=None, config: Optional[AdmmConfig] = None,
                 solver: Optional[Callable] = None):
        self.view = view
        self.region = view.region
        self.model = RegionalModel(view, pd, qd)
        self.config = config or AdmmConfig()
        self.solver = solver
        self.x = None
        self.warm = None
        self.last: Optional[NlpSolution] = None

    def solve(self, targets: CouplingTargets, rho: float, mode: str = ONE_LEVEL,
              beta: Optional[float] = None):
        cfg = self.config
        prob = self.model.problem(targets if self.model.arcs else None, rho, x0=self.x, mode=mode,
                                  beta=beta)
        t0 = time.perf_counter()
        if self.solver is not None:
            sol = self.solver(prob, self.warm)
        else:
            sol = nlp_solve(prob, cfg.feas_tol, cfg.opt_tol, cfg.max_iter,
                            warm=self.warm if cfg.warm_multipliers else None)
        wall = 1000.0 * (time.perf_counter() - t0)
        self.last = sol
        if sol.status != FAILURE:
            self.x = sol.x
            self.warm = sol.warm()
        return RegionResult(self.region, self.model.coupling_values(sol.x) if sol.status != FAILURE
                            else None, self.model.cost(sol.x) if sol.status != FAILURE else float("nan"),
                            sol.status, wall)


@dataclass
class RegionResult:
    region: str
    values: Optional[np.ndarray]
    cost: float
    status: str
    wall_ms: float


def make_solvers(views, pd=None, qd=None, config=None, solver=None) -> dict:
    return {v.region: RegionSolver(v, pd, qd, config, solver) for v in views}


# ------------------------------------------------------------------ loop


def solve_all(solvers: dict, state, rho, mode=ONE_LEVEL, beta=None, map_fn=map) -> dict:
    """Run every region's solve; ``map_fn`` may run them concurrently."""
    regions = sorted(solvers)

    def one(k):
        return solvers[k].solve(_targets_for(state, k, mode), rho, mode, beta)

    return dict(zip(regions, map_fn(one, regions)))


def _targets_for(state, k, mode):
    if mode == ONE_LEVEL:
        return state.targets(k)
    return CouplingTargets(state.arcs[k], state.xC[k], state.lam[k], state.z[k], state.Lam[k])


def one_level_step(state: ConsensusState, results: dict, config: AdmmConfig):
    """Dual and consensus updates after all regional solves; returns residual vectors."""
    values = {k: results[k].values for k in state.arcs}
    rho = state.rho
    prev = {k: v.copy() for k, v in state.xC.items()}
    for k in state.arcs:
        state.lam[k] = dual_update(state.lam[k], rho, values[k], state.xC[k], config.rho_free_dual)
    state.xC = consensus_update(state, values, config.consensus,
                                1.0 if config.rho_free_dual else rho)
    rp = primal_residual(state, values)
    rd = dual_residual(state, state.xC, prev, rho)
    return rp, rd


def make_record(t, state, results, rp, rd, wall_total, **extra) -> IterationRecord:
    rp_inf, rp_l2 = _norms(rp)
    rd_inf, rd_l2 = _norms(rd)
    wall = {k: r.wall_ms for k, r in results.items()}
    wall["total"] = wall_total
    return IterationRecord(
        iter=t, objectives={k: results[k].cost for k in sorted(results)}, rp=rp, rd=rd,
        rp_inf=rp_inf, rd_inf=rd_inf, rp_l2=rp_l2, rd_l2=rd_l2, rho=state.rho, wall_ms=wall,
        consensus={k: v.copy() for k, v in state.xC.items()},
        unconverged=tuple(k for k in sorted(results) if results[k].status != "converged"), **extra)


def admm_iterate(state: ConsensusState, views: Sequence[RegionView], pd=None, qd=None,
                 t_max: int = 500, config: Optional[AdmmConfig] = None, solver=None,
                 solvers: Optional[dict] = None, map_fn=map,
                 on_iteration: Optional[Callable] = None) -> AdmmTrace:
    """Run up to ``t_max`` one-level iterations, mutating ``state``.

    ``on_iteration(record)`` may return True to stop early (used for
    cooperative termination).
    """
    config = config or AdmmConfig(rho0=state.rho)
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    solvers = solvers or make_solvers(views, pd, qd, config, solver)
    trace = AdmmTrace(state=state, solutions=solvers)
    for t in range(1, t_max + 1):
        t0 = time.perf_counter()
        results = solve_all(solvers, state, state.rho, ONE_LEVEL, map_fn=map_fn)
        failed = [k for k, r in results.items() if r.status == FAILURE]
        if failed:
            trace.status = "failure"
            trace.error = f"iteration {t}: subproblem failure in region(s) {', '.join(failed)}"
            log.warning(trace.error)
            break
        rp, rd = one_level_step(state, results, config)
        rec = make_record(t, state, results, rp, rd, 1000.0 * (time.perf_counter() - t0))
        trace.records.append(rec)
        state.rho = update_rho(state.rho, rp, rd, config.rho_policy, config.tau, config.mu)
        rec.rho_next = state.rho
        if on_iteration is not None and on_iteration(rec):
            trace.status = "terminated"
            break
        if config.early_stop and max(rec.rp_inf, rec.rd_inf) < config.eps:
            trace.status = "converged"
            break
    return trace


def explicit_residual_matrices(state: ConsensusState):
    """Selection matrices ``A`` and ``B`` with ``r_p = A x1 + B x2``.

    ``x1`` stacks the first owners' values and ``x2`` the second owners',
    both in global-arc order; used as an independent oracle in tests.
    """
    arcs = state.global_arcs()
    n = 4 * len(arcs)
    return np.eye(n), -np.eye(n)

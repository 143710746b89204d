"""Two-level ADMM: slack variables on the coupling constraints, outer multipliers
and a growing outer penalty."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .admm import (CONSENSUS_DUAL, AdmmConfig, AdmmTrace, ConsensusState, consensus_update,
                   make_record, make_solvers, primal_residual, dual_residual, solve_all)
from .grid import RegionView
from .nlp import FAILURE
from .opf import TWO_LEVEL

log = logging.getLogger(__name__)


@dataclass
class TwoLevelState(ConsensusState):
    z: dict = None
    Lam: dict = None
    beta: float = 500.0
    c_beta: float = 2.0
    outer_period: int = 10
    eta0: float = 1.0
    gamma: float = 0.8

    def __post_init__(self):
        super().__post_init__()
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.c_beta > 1:
            raise ValueError("c_beta must exceed 1")
        if self.outer_period < 1:
            raise ValueError("outer_period must be at least 1")
        for k, arcs in self.arcs.items():
            for name in ("z", "Lam"):
                d = getattr(self, name)
                if d is None or d[k].shape != (len(arcs), 4):
                    raise ValueError(f"{name}[{k}] does not cover region {k}'s arcs")

    def eta(self, t: int, t_max: Optional[int] = None) -> float:
        """Slack tolerance for the outer test at iteration ``t``."""
        return self.eta0 * self.gamma ** (t / self.outer_period)

    def outer_due(self, t: int) -> bool:
        return t % self.outer_period == 0

    def copy(self):
        return TwoLevelState(dict(self.arcs), {k: v.copy() for k, v in self.xC.items()},
                             {k: v.copy() for k, v in self.lam.items()}, self.rho,
                             {k: v.copy() for k, v in self.z.items()},
                             {k: v.copy() for k, v in self.Lam.items()}, self.beta, self.c_beta,
                             self.outer_period, self.eta0, self.gamma)

    def slack_score(self) -> float:
        """Sum over the four quantity types of the largest absolute slack."""
        return z_metrics({k: z_summary(self.z[k]) for k in self.z})[2]


def z_summary(z) -> tuple:
    """Per-region slack summary: column-wise max |z| and the sum of squares."""
    z = np.asarray(z, float).reshape(-1, 4)
    absmax = np.max(np.abs(z), axis=0) if len(z) else np.zeros(4)
    return absmax, float(np.sum(z * z))


def z_metrics(summaries: dict) -> tuple:
    """``(z_inf, z_l2, s_z)`` from per-region summaries, combined in region order."""
    if not summaries:
        return 0.0, 0.0, 0.0
    keys = sorted(summaries)
    colmax = summaries[keys[0]][0].copy()
    sumsq = 0.0
    for k in keys:
        colmax = np.maximum(colmax, summaries[k][0])
        sumsq += summaries[k][1]
    return float(np.max(colmax)), float(np.sqrt(sumsq)), float(np.sum(colmax))


def _zeros_like(arcs):
    return {k: np.zeros((len(a), 4)) for k, a in arcs.items()}


def two_level_cold_start(views: Sequence[RegionView], rho0: float = 1000.0, **kw) -> TwoLevelState:
    arcs = {v.region: tuple(v.arcs) for v in views}
    xC = _zeros_like(arcs)
    for k in xC:
        xC[k][:, 2] = 1.0
    return TwoLevelState(arcs, xC, _zeros_like(arcs), rho0, _zeros_like(arcs), _zeros_like(arcs),
                         beta=0.5 * rho0, **kw)


def two_level_warm_start(views: Sequence[RegionView], predictions: dict, rho0: float = 1000.0,
                         **kw) -> TwoLevelState:
    """State set verbatim from predicted consensus, multipliers, slacks and outer multipliers."""
    arcs = {v.region: tuple(v.arcs) for v in views}
    fields = {"xC": {}, "lam": {}, "z": {}, "Lam": {}}
    for k, a in arcs.items():
        if k not in predictions:
            raise KeyError(f"no prediction for region {k}")
        pred = predictions[k]
        if tuple(pred.arcs) != a:
            raise KeyError(f"prediction for region {k} does not cover its coupling arcs")
        for name in fields:
            val = getattr(pred, name)
            if val is None:
                raise KeyError(f"prediction for region {k} lacks {name}")
            fields[name][k] = np.array(val, float)
    return TwoLevelState(arcs, fields["xC"], fields["lam"], rho0, fields["z"], fields["Lam"],
                         beta=0.5 * rho0, **kw)


def slack_update(Lam, lam, rho, beta, local_minus_consensus):
    """Minimizer in ``z`` of ``Lam z + beta/2 z^2 + lam z + rho/2 (d + z)^2``."""
    return (-Lam - lam - rho * local_minus_consensus) / (beta + rho)


def two_level_dual_update(lam, rho, local, consensus, z):
    return lam + rho * (local - consensus + z)


def outer_update(state: TwoLevelState, t: int, t_max: Optional[int] = None) -> list:
    """Outer step for every region in order; returns the regions whose test failed."""
    failed = []
    eta = state.eta(t, t_max)
    for k in sorted(state.arcs):
        if float(np.sqrt(z_summary(state.z[k])[1])) <= eta:
            state.Lam[k] = state.Lam[k] + state.beta * state.z[k]
        else:
            state.beta = state.c_beta * state.beta
            state.rho = 2.0 * state.beta
            failed.append(k)
    return failed


def two_level_step(state: TwoLevelState, results: dict, config: AdmmConfig,
                   freeze_slack: bool = False):
    values = {k: results[k].values for k in state.arcs}
    rho, beta = state.rho, state.beta
    prev = {k: v.copy() for k, v in state.xC.items()}
    for k in state.arcs:
        d = values[k] - state.xC[k]
        if not freeze_slack:
            state.z[k] = slack_update(state.Lam[k], state.lam[k], rho, beta, d)
        state.lam[k] = two_level_dual_update(state.lam[k], rho, values[k], state.xC[k], state.z[k])
    state.xC = consensus_update(state, values, config.consensus)
    rp = primal_residual(state, values)
    rd = dual_residual(state, state.xC, prev, rho)
    return rp, rd


def two_level_iterate(state: TwoLevelState, views: Sequence[RegionView], pd=None, qd=None,
                      t_max: int = 300, config: Optional[AdmmConfig] = None, solver=None,
                      solvers: Optional[dict] = None, map_fn=map, freeze: bool = False,
                      on_iteration: Optional[Callable] = None) -> AdmmTrace:
    """Run up to ``t_max`` two-level iterations, mutating ``state``.

    With ``freeze`` the slacks and outer multipliers are held at their
    current values and no outer updates happen.
    """
    config = config or AdmmConfig(rho0=state.rho)
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    if config.consensus == CONSENSUS_DUAL:
        raise ValueError("the multiplier-aware consensus rule is one-level only")
    solvers = solvers or make_solvers(views, pd, qd, config, solver)
    trace = AdmmTrace(two_level=True, state=state, solutions=solvers)
    for t in range(1, t_max + 1):
        t0 = time.perf_counter()
        results = solve_all(solvers, state, state.rho, TWO_LEVEL, beta=state.beta, map_fn=map_fn)
        failed = [k for k, r in results.items() if r.status == FAILURE]
        if failed:
            trace.status = "failure"
            trace.error = f"iteration {t}: subproblem failure in region(s) {', '.join(failed)}"
            log.warning(trace.error)
            break
        rp, rd = two_level_step(state, results, config, freeze_slack=freeze)
        z_inf, z_l2, s_z = z_metrics({k: z_summary(state.z[k]) for k in state.z})
        rec = make_record(t, state, results, rp, rd, 1000.0 * (time.perf_counter() - t0),
                          z_inf=z_inf, z_l2=z_l2, s_z=s_z, beta=state.beta)
        if not freeze and state.outer_due(t):
            outer_update(state, t, t_max)
        rec.beta, rec.rho_next = state.beta, state.rho
        trace.records.append(rec)
        if on_iteration is not None and on_iteration(rec):
            trace.status = "terminated"
            break
        if config.early_stop and max(rec.rp_inf, rec.rd_inf, rec.s_z) < config.eps:
            trace.status = "converged"
            break
    return trace

"""In-process multi-agent execution of the ADMM engines.

Each region is an agent that owns its model, its multipliers and (two-level)
its slacks. A coordinator owns only the consensus copies and the penalties.
Every cross-boundary exchange is an :class:`AgentMessage` recorded in a log,
so runs can be replayed and audited.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .admm import (CONSENSUS_DUAL, AdmmConfig, AdmmTrace, IterationRecord, RegionSolver, _norms,
                   cold_start, consensus_update, dual_residual, dual_update, primal_residual,
                   update_rho, warm_start)
from .grid import PowerNetwork, partition
from .nlp import FAILURE
from .opf import ONE_LEVEL, TWO_LEVEL, CouplingTargets
from .twolevel import (slack_update, two_level_cold_start, two_level_dual_update,
                       two_level_warm_start, z_metrics, z_summary)

log = logging.getLogger(__name__)

SOLVE_REQUEST = "SolveRequest"
SOLVE_RESULT = "SolveResult"
CONSENSUS_BROADCAST = "ConsensusBroadcast"
TERMINATE = "Terminate"
KINDS = (SOLVE_REQUEST, SOLVE_RESULT, CONSENSUS_BROADCAST, TERMINATE)

# payload keys allowed to cross a region boundary, per message kind
ALLOWED_KEYS = {
    SOLVE_REQUEST: {"rho", "beta"},
    SOLVE_RESULT: {"arcs", "values", "objective", "status", "z_absmax", "z_sumsq"},
    CONSENSUS_BROADCAST: {"arcs", "consensus", "rho", "beta", "outer_beta"},
    TERMINATE: {"reason"},
}


class AgentError(RuntimeError):
    def __init__(self, region, message):
        super().__init__(f"region {region}: {message}")
        self.region = region


@dataclass
class AgentMessage:
    msg_id: int
    kind: str
    iteration: int
    region: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"msg_id": self.msg_id, "kind": self.kind, "iteration": self.iteration,
                "region": self.region, "payload": _jsonable(self.payload)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentMessage":
        return cls(int(d["msg_id"]), d["kind"], int(d["iteration"]), str(d["region"]),
                   dict(d.get("payload", {})))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_message_log(messages, path) -> None:
    with open(path, "w") as fh:
        for m in messages:
            fh.write(m.to_json() + "\n")


def read_message_log(path) -> list:
    with open(path) as fh:
        return [AgentMessage.from_dict(json.loads(line)) for line in fh if line.strip()]


class _Log:
    def __init__(self):
        self.messages = []

    def post(self, kind, iteration, region, payload):
        msg = AgentMessage(len(self.messages), kind, iteration, region, payload)
        self.messages.append(msg)
        return msg


class RegionAgent:
    """Private side of one region: model, multipliers, slacks and consensus copy."""

    def __init__(self, view, pd, qd, config: AdmmConfig, two_level: bool, init):
        self.view = view
        self.region = view.region
        self.arcs = tuple(view.arcs)
        self.solver = RegionSolver(view, pd, qd, config)
        self.config = config
        self.two_level = two_level
        self.xC = np.array(init.xC[self.region], float)
        self.lam = np.array(init.lam[self.region], float)
        if two_level:
            self.z = np.array(init.z[self.region], float)
            self.Lam = np.array(init.Lam[self.region], float)
        self.rho = init.rho
        self.beta = getattr(init, "beta", None)
        self.freeze = False

    def handle_request(self, msg: AgentMessage) -> dict:
        rho = msg.payload["rho"]
        beta = msg.payload.get("beta")
        if self.two_level:
            tg = CouplingTargets(self.arcs, self.xC, self.lam, self.z, self.Lam)
            res = self.solver.solve(tg, rho, TWO_LEVEL, beta)
        else:
            res = self.solver.solve(CouplingTargets(self.arcs, self.xC, self.lam), rho, ONE_LEVEL)
        payload = {"arcs": [list(a) for a in self.arcs], "status": res.status,
                   "objective": res.cost}
        if res.status == FAILURE:
            payload["values"] = None
            return {"payload": payload, "values": None, "wall_ms": res.wall_ms}
        values = res.values
        if self.two_level:
            if not self.freeze:
                self.z = slack_update(self.Lam, self.lam, rho, beta, values - self.xC)
            self.lam = two_level_dual_update(self.lam, rho, values, self.xC, self.z)
            absmax, sumsq = z_summary(self.z)
            payload["z_absmax"] = absmax
            payload["z_sumsq"] = sumsq
        else:
            self.lam = dual_update(self.lam, rho, values, self.xC, self.config.rho_free_dual)
        payload["values"] = values
        return {"payload": payload, "values": values, "wall_ms": res.wall_ms}

    def handle_broadcast(self, msg: AgentMessage) -> None:
        self.xC = np.array(msg.payload["consensus"], float).reshape(len(self.arcs), 4)
        ob = msg.payload.get("outer_beta")
        if ob is not None:
            self.Lam = self.Lam + ob * self.z


class Coordinator:
    """Holds consensus copies and penalties; never sees regional interiors."""

    def __init__(self, init, config: AdmmConfig, two_level: bool):
        self.arcs = dict(init.arcs)
        self.xC = {k: np.array(v, float) for k, v in init.xC.items()}
        self.rho = init.rho
        self.config = config
        self.two_level = two_level
        if two_level:
            self.beta = init.beta
            self.c_beta = init.c_beta
            self.outer_period = init.outer_period
            self.eta0, self.gamma = init.eta0, init.gamma

    def owners(self) -> dict:
        own = {}
        for k in sorted(self.arcs):
            for a in self.arcs[k]:
                own.setdefault(a, []).append(k)
        return own

    def eta(self, t):
        return self.eta0 * self.gamma ** (t / self.outer_period)


def run_decentralized(net: PowerNetwork, engine: str = ONE_LEVEL, init="cold", t_max: int = 100,
                      workers: int = 1, pd=None, qd=None, config: Optional[AdmmConfig] = None,
                      rho0: Optional[float] = None, freeze: bool = False,
                      should_terminate: Optional[Callable] = None, log_path=None,
                      two_level_options: Optional[dict] = None) -> AdmmTrace:
    """Run one- or two-level ADMM with one agent per region.

    ``init`` is ``"cold"`` or a dict of per-region predicted CouplingTargets.
    ``should_terminate(record)`` returning True sends Terminate to every agent
    and ends the run after the current iteration.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if engine not in (ONE_LEVEL, TWO_LEVEL):
        raise ValueError(f"unknown engine {engine!r}")
    two = engine == TWO_LEVEL
    if rho0 is None:
        rho0 = config.rho0 if config is not None else (1000.0 if two else 10.0)
    config = config or AdmmConfig(rho0=rho0)
    if config.consensus == CONSENSUS_DUAL:
        # the coordinator never holds regional multipliers
        raise ValueError("the multiplier-aware consensus rule is not available to agents")
    views = partition(net)
    opts = two_level_options or {}
    if init == "cold":
        state = two_level_cold_start(views, rho0, **opts) if two else cold_start(views, rho0)
    elif isinstance(init, dict):
        state = (two_level_warm_start(views, init, rho0, **opts) if two
                 else warm_start(views, init, rho0))
    else:
        raise ValueError("init must be 'cold' or a dict of predictions")

    agents = {v.region: RegionAgent(v, pd, qd, config, two, state) for v in views}
    for a in agents.values():
        a.freeze = freeze
    coord = Coordinator(state, config, two)
    mlog = _Log()
    trace = AdmmTrace(two_level=two, solutions={k: a.solver for k, a in agents.items()})
    regions = sorted(agents)

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="region") as pool:
        for t in range(1, t_max + 1):
            t0 = time.perf_counter()
            requests = {}
            for k in regions:
                payload = {"rho": coord.rho}
                if two:
                    payload["beta"] = coord.beta
                requests[k] = mlog.post(SOLVE_REQUEST, t, k, payload)
            replies = list(pool.map(lambda k: agents[k].handle_request(requests[k]), regions))
            replies = dict(zip(regions, replies))
            for k in regions:
                mlog.post(SOLVE_RESULT, t, k, replies[k]["payload"])
            failed = [k for k in regions if replies[k]["values"] is None]
            if failed:
                trace.status = "failure"
                trace.error = f"iteration {t}: subproblem failure in region(s) {', '.join(failed)}"
                log.warning(trace.error)
                break
            values = {k: replies[k]["values"] for k in regions}
            rho = coord.rho
            prev = {k: v.copy() for k, v in coord.xC.items()}
            coord.xC = consensus_update(coord, values, config.consensus)
            rp = primal_residual(coord, values)
            rd = dual_residual(coord, coord.xC, prev, rho)
            rp_inf, rp_l2 = _norms(rp)
            rd_inf, rd_l2 = _norms(rd)
            wall = {k: replies[k]["wall_ms"] for k in regions}
            extra = {}
            outer_beta = {k: None for k in regions}
            if two:
                summaries = {k: (np.asarray(replies[k]["payload"]["z_absmax"]),
                                 replies[k]["payload"]["z_sumsq"]) for k in regions}
                z_inf, z_l2, s_z = z_metrics(summaries)
                extra = {"z_inf": z_inf, "z_l2": z_l2, "s_z": s_z, "beta": coord.beta}
                if not freeze and t % coord.outer_period == 0:
                    eta = coord.eta(t)
                    for k in regions:
                        if float(np.sqrt(summaries[k][1])) <= eta:
                            outer_beta[k] = coord.beta
                        else:
                            coord.beta = coord.c_beta * coord.beta
                            coord.rho = 2.0 * coord.beta
            wall["total"] = 1000.0 * (time.perf_counter() - t0)
            rec = IterationRecord(
                iter=t, objectives={k: replies[k]["payload"]["objective"] for k in regions},
                rp=rp, rd=rd, rp_inf=rp_inf, rd_inf=rd_inf, rp_l2=rp_l2, rd_l2=rd_l2, rho=rho,
                wall_ms=wall, consensus={k: v.copy() for k, v in coord.xC.items()},
                unconverged=tuple(k for k in regions if replies[k]["payload"]["status"] != "converged"),
                **extra)
            if two:
                rec.beta = coord.beta
            else:
                coord.rho = update_rho(coord.rho, rp, rd, config.rho_policy, config.tau, config.mu)
            rec.rho_next = coord.rho
            trace.records.append(rec)
            for k in regions:
                payload = {"arcs": [list(a) for a in coord.arcs[k]], "consensus": coord.xC[k],
                           "rho": coord.rho}
                if two:
                    payload["beta"] = coord.beta
                    payload["outer_beta"] = outer_beta[k]
                msg = mlog.post(CONSENSUS_BROADCAST, t, k, payload)
                agents[k].handle_broadcast(msg)
            if should_terminate is not None and should_terminate(rec):
                for k in regions:
                    mlog.post(TERMINATE, t, k, {"reason": "requested"})
                trace.status = "terminated"
                break
            if config.early_stop and max(rec.rp_inf, rec.rd_inf, rec.s_z or 0.0) < config.eps:
                trace.status = "converged"
                break
    trace.messages = mlog.messages
    if log_path is not None:
        write_message_log(mlog.messages, log_path)
    return trace


# ------------------------------------------------------------------ audit


@dataclass
class AuditReport:
    passed: bool
    offending: list
    field_counts: dict
    reasons: dict

    def __bool__(self):
        return self.passed


def privacy_audit(messages, net: PowerNetwork) -> AuditReport:
    """Check that messages carry only coupling-arc and border/neighbor-bus data."""
    views = {v.region: v for v in partition(net)}
    offending, reasons = [], {}
    counts: dict = {}

    def flag(m, why):
        if m.msg_id not in reasons:
            offending.append(m.msg_id)
            reasons[m.msg_id] = why

    for m in messages:
        kc = counts.setdefault(m.kind, {})
        for key in m.payload:
            kc[key] = kc.get(key, 0) + 1
        view = views.get(m.region)
        if view is None:
            flag(m, f"unknown region {m.region!r}")
            continue
        extra = set(m.payload) - ALLOWED_KEYS.get(m.kind, set())
        if extra:
            flag(m, f"disallowed fields {sorted(extra)}")
            continue
        allowed_arcs = set(view.arcs)
        arcs = [tuple(a) for a in m.payload.get("arcs", [])]
        if any(a not in allowed_arcs for a in arcs):
            flag(m, "arc outside the region's coupling set")
            continue
        for key in ("values", "consensus"):
            val = m.payload.get(key)
            if val is None:
                continue
            if np.asarray(val, float).shape != (len(arcs), 4):
                flag(m, f"{key} does not match the declared coupling arcs")
    return AuditReport(not offending, offending, counts, reasons)

"""AC-OPF assembly in polar coordinates: centralized and regional problems.

A regional model owns the voltages of its local buses plus copies of the
neighbor buses reached through coupling branches, the dispatch of its local
generators, and derives every branch flow from the voltages. Coupling
quantities are exchanged per directed arc ``(branch, direction)`` as the
4-vector ``(p, q, v, theta)``: the arc's flow and the voltage at the arc's
sending bus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import NetworkError, PowerNetwork, RegionView, whole_view
from .nlp import NlpProblem

log = logging.getLogger(__name__)

QUANTITIES = ("p", "q", "v", "th")
ONE_LEVEL, TWO_LEVEL = "one-level", "two-level"


def branch_flow(vi, thi, vj, thj, g, b):
    """Sending-end flow ``conj(Y)|Vi|^2 - conj(Y) Vi conj(Vj)`` as ``(p, q)``."""
    d = np.subtract(thi, thj)
    c, s = np.cos(d), np.sin(d)
    p = g * vi * vi - vi * vj * (g * c + b * s)
    q = -b * vi * vi - vi * vj * (g * s - b * c)
    return p, q


def centralized_objective(pg, net: PowerNetwork) -> float:
    pg = np.asarray(pg, float)
    c = np.array([gen.cost for gen in net.generators], float).reshape(-1, 3)
    return float(np.sum(c[:, 0] * pg * pg + c[:, 1] * pg + c[:, 2]))


@dataclass(frozen=True)
class ComplexSplit:
    """A complex quantity held in rectangular and/or polar form."""

    rect: Optional[tuple[float, float]] = None
    polar: Optional[tuple[float, float]] = None
    tag: str = "rect"

    def __post_init__(self):
        if self.tag not in ("rect", "polar"):
            raise ValueError("tag must be 'rect' or 'polar'")
        if (self.rect if self.tag == "rect" else self.polar) is None:
            raise ValueError("canonical representation missing")
        if self.rect is not None and self.polar is not None:
            m, a = self.polar
            if abs(self.rect[0] - m * np.cos(a)) > 1e-12 or abs(self.rect[1] - m * np.sin(a)) > 1e-12:
                raise ValueError("rect and polar forms disagree")

    @property
    def value(self) -> complex:
        if self.tag == "rect":
            return complex(*self.rect)
        m, a = self.polar
        return complex(m * np.cos(a), m * np.sin(a))


@dataclass
class CouplingTargets:
    """Consensus values and multipliers for one region's coupling arcs.

    Every array has shape ``(len(arcs), 4)`` with columns ``p, q, v, th``.
    ``z`` and ``Lam`` are only set in two-level mode.
    """

    arcs: tuple
    xC: np.ndarray
    lam: np.ndarray
    z: Optional[np.ndarray] = None
    Lam: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = (len(self.arcs), 4)
        for name in ("xC", "lam", "z", "Lam"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, float).reshape(shape)
            if not np.all(np.isfinite(val)):
                raise ValueError(f"non-finite {name}")
            setattr(self, name, val)
        if (self.z is None) != (self.Lam is None):
            raise ValueError("z and Lam must be given together")

    @property
    def two_level(self) -> bool:
        return self.z is not None

    @classmethod
    def empty(cls, arcs, two_level=False):
        n = len(arcs)
        xC = np.zeros((n, 4))
        xC[:, 2] = 1.0
        zeros = np.zeros((n, 4)) if two_level else None
        return cls(tuple(arcs), xC, np.zeros((n, 4)), zeros, None if zeros is None else zeros.copy())


@dataclass
class RegionalPrimal:
    """Primal values of a regional model, indexed like the model."""

    buses: tuple
    v: np.ndarray
    theta: np.ndarray
    generators: tuple
    pg: np.ndarray
    qg: np.ndarray
    flow_arcs: tuple
    pf: np.ndarray
    qf: np.ndarray

    def __post_init__(self):
        if not (len(self.v) == len(self.theta) == len(self.buses)):
            raise ValueError("voltage arrays do not match buses")
        if not (len(self.pg) == len(self.qg) == len(self.generators)):
            raise ValueError("dispatch arrays do not match generators")
        if not (len(self.pf) == len(self.qf) == len(self.flow_arcs)):
            raise ValueError("flow arrays do not match arcs")


def _flow_derivatives(vi, vj, d, g, b):
    """Values, gradients and Hessians of (p, q) per arc over (vi, vj, thi, thj)."""
    c, s = np.cos(d), np.sin(d)
    A = g * c + b * s
    B = g * s - b * c
    vv = vi * vj
    p = g * vi * vi - vv * A
    q = -b * vi * vi - vv * B
    n = len(vi)
    Gp = np.stack([2 * g * vi - vj * A, -vi * A, vv * B, -vv * B], axis=1)
    Gq = np.stack([-2 * b * vi - vj * B, -vi * B, -vv * A, vv * A], axis=1)
    Hp = np.zeros((n, 4, 4))
    Hq = np.zeros((n, 4, 4))
    Hp[:, 0, 0] = 2 * g
    Hp[:, 0, 1] = Hp[:, 1, 0] = -A
    Hp[:, 0, 2] = Hp[:, 2, 0] = vj * B
    Hp[:, 0, 3] = Hp[:, 3, 0] = -vj * B
    Hp[:, 1, 2] = Hp[:, 2, 1] = vi * B
    Hp[:, 1, 3] = Hp[:, 3, 1] = -vi * B
    Hp[:, 2, 2] = Hp[:, 3, 3] = vv * A
    Hp[:, 2, 3] = Hp[:, 3, 2] = -vv * A
    Hq[:, 0, 0] = -2 * b
    Hq[:, 0, 1] = Hq[:, 1, 0] = -B
    Hq[:, 0, 2] = Hq[:, 2, 0] = -vj * A
    Hq[:, 0, 3] = Hq[:, 3, 0] = vj * A
    Hq[:, 1, 2] = Hq[:, 2, 1] = -vi * A
    Hq[:, 1, 3] = Hq[:, 3, 1] = vi * A
    Hq[:, 2, 2] = Hq[:, 3, 3] = vv * B
    Hq[:, 2, 3] = Hq[:, 3, 2] = -vv * B
    return p, q, Gp, Gq, Hp, Hq


class RegionalModel:
    """Index bookkeeping and callbacks for one region's AC-OPF.

    Variable layout: ``v`` then ``theta`` over ``buses`` (local buses first,
    then neighbor copies), then ``pg`` and ``qg`` over local generators.
    """

    def __init__(self, view: RegionView, pd=None, qd=None):
        net = view.net
        self.view = view
        self.net = net
        self.buses = tuple(view.local_buses) + tuple(view.neighbor_buses)
        self.nb = len(self.buses)
        self.n_local = len(view.local_buses)
        self.bus_ix = {bid: i for i, bid in enumerate(self.buses)}
        self.gens = tuple(view.local_generators)
        self.ng = len(self.gens)
        self.n = 2 * self.nb + 2 * self.ng

        pd = np.array(net.nominal_pd if pd is None else pd, float)
        qd = np.array(net.nominal_qd if qd is None else qd, float)
        if pd.shape != (len(net.loads),) or qd.shape != (len(net.loads),):
            raise ValueError("load vectors must cover every network load")
        self.pd_bus = np.zeros(self.n_local)
        self.qd_bus = np.zeros(self.n_local)
        for li in view.local_loads:
            k = self.bus_ix[net.loads[li].bus]
            self.pd_bus[k] += pd[li]
            self.qd_bus[k] += qd[li]

        # directed flow arcs over local and coupling branches
        self.branches = tuple(view.local_branches) + tuple(view.coupling_branches)
        fr, to, g, b, smax = [], [], [], [], []
        for e in self.branches:
            br = net.branches[e]
            i, j = self.bus_ix[br.from_bus], self.bus_ix[br.to_bus]
            for a, c in ((i, j), (j, i)):
                fr.append(a)
                to.append(c)
                g.append(br.g)
                b.append(br.b)
                smax.append(br.smax)
        self.flow_arcs = tuple((e, d) for e in self.branches for d in (0, 1))
        self.arc_pos = {a: k for k, a in enumerate(self.flow_arcs)}
        self.fr = np.array(fr, int)
        self.to = np.array(to, int)
        self.g = np.array(g, float)
        self.b = np.array(b, float)
        self.smax2 = np.array(smax, float) ** 2
        self.na = len(self.flow_arcs)
        nb = self.nb
        # variable indices of (vi, vj, thi, thj) per arc
        self.arc_vars = np.stack([self.fr, self.to, nb + self.fr, nb + self.to], axis=1)

        # KCL rows; buses with nothing attached are degenerate
        attached = np.zeros(self.n_local, bool)
        attached[self.fr[self.fr < self.n_local]] = True
        self.gen_bus = np.array([self.bus_ix[net.generators[k].bus] for k in self.gens], int)
        attached[self.gen_bus] = True
        keep = []
        for i in range(self.n_local):
            if attached[i]:
                keep.append(i)
            elif self.pd_bus[i] != 0 or self.qd_bus[i] != 0:
                raise NetworkError(f"bus {self.buses[i]} has load but no branch or generator")
            else:
                log.warning("bus %s is isolated with zero load; dropping its balance rows", self.buses[i])
        self.kcl_buses = np.array(keep, int)
        row_of = -np.ones(self.n_local, int)
        row_of[self.kcl_buses] = np.arange(len(keep))
        nk = len(keep)
        # incidence: arcs leaving a balanced bus
        self.inc = np.zeros((nk, self.na))
        for a in range(self.na):
            if self.fr[a] < self.n_local and row_of[self.fr[a]] >= 0:
                self.inc[row_of[self.fr[a]], a] = 1.0
        self.gen_inc = np.zeros((nk, self.ng))
        for k, i in enumerate(self.gen_bus):
            self.gen_inc[row_of[i], k] = 1.0
        self.ref_ix = self.bus_ix[net.reference_bus] if view.has_reference else None
        self.m_eq = 2 * nk + (1 if self.ref_ix is not None else 0)
        self.m_ineq = self.na

        cost = np.array([net.generators[k].cost for k in self.gens], float).reshape(-1, 3)
        self.c2, self.c1, self.c0 = cost[:, 0], cost[:, 1], cost[:, 2]

        # coupling quantity selectors
        self.arcs = tuple(view.arcs)
        self.c_flow = np.array([self.arc_pos[a] for a in self.arcs], int)
        self.c_bus = np.array([self.bus_ix[view.arc_bus(a)] for a in self.arcs], int)

        lo = np.empty(self.n)
        hi = np.empty(self.n)
        for i, bid in enumerate(self.buses):
            bus = net.bus(bid)
            lo[i], hi[i] = bus.vmin, bus.vmax
        lo[nb:2 * nb] = -np.pi
        hi[nb:2 * nb] = np.pi
        for k, gi in enumerate(self.gens):
            gen = net.generators[gi]
            lo[2 * nb + k], hi[2 * nb + k] = gen.pmin, gen.pmax
            lo[2 * nb + self.ng + k], hi[2 * nb + self.ng + k] = gen.qmin, gen.qmax
        # fixed dispatch is widened by a hair so the box keeps an interior
        tight = hi - lo < 1e-9
        lo[tight] -= 5e-10
        hi[tight] += 5e-10
        self.lo, self.hi = lo, hi
        self._memo = None
        self._flow_memo = None

    # ------------------------------------------------------------ slices
    def split(self, x):
        nb, ng = self.nb, self.ng
        return x[:nb], x[nb:2 * nb], x[2 * nb:2 * nb + ng], x[2 * nb + ng:]

    def flat_start(self) -> np.ndarray:
        x = np.empty(self.n)
        x[:self.nb] = np.clip(1.0, self.lo[:self.nb], self.hi[:self.nb])
        x[self.nb:2 * self.nb] = 0.0
        x[2 * self.nb:] = 0.5 * (self.lo[2 * self.nb:] + self.hi[2 * self.nb:])
        return x

    def _derivs(self, x):
        key = x.tobytes()
        if self._memo is not None and self._memo[0] == key:
            return self._memo[1]
        v, th, _, _ = self.split(x)
        out = _flow_derivatives(v[self.fr], v[self.to], th[self.fr] - th[self.to], self.g, self.b)
        self._memo = (key, out)
        return out

    def flows(self, x):
        key = x.tobytes()
        if self._flow_memo is not None and self._flow_memo[0] == key:
            return self._flow_memo[1]
        v, th, _, _ = self.split(x)
        out = branch_flow(v[self.fr], th[self.fr], v[self.to], th[self.to], self.g, self.b)
        self._flow_memo = (key, out)
        return out

    def _flow_jac(self, G):
        J = np.zeros((self.na, self.n))
        rows = np.repeat(np.arange(self.na), 4)
        np.add.at(J, (rows, self.arc_vars.ravel()), G.ravel())
        return J

    def _scatter_hess(self, H, blocks):
        idx = self.arc_vars
        np.add.at(H, (idx[:, :, None], idx[:, None, :]), blocks)

    def coupling_values(self, x) -> np.ndarray:
        """(len(arcs), 4) array of the coupling quantities at ``x``."""
        p, q = self.flows(x)
        v, th, _, _ = self.split(x)
        return np.stack([p[self.c_flow], q[self.c_flow], v[self.c_bus], th[self.c_bus]], axis=1)

    def primal(self, x) -> RegionalPrimal:
        v, th, pg, qg = self.split(np.asarray(x, float))
        p, q = self.flows(x)
        return RegionalPrimal(self.buses, v.copy(), th.copy(), self.gens, pg.copy(), qg.copy(),
                              self.flow_arcs, p, q)

    def cost(self, x) -> float:
        pg = self.split(x)[2]
        return float(np.sum(self.c2 * pg * pg + self.c1 * pg + self.c0))

    # ------------------------------------------------------------ problem
    def problem(self, targets: Optional[CouplingTargets] = None, rho: float = 0.0,
                x0=None, mode: str = ONE_LEVEL, beta: Optional[float] = None,
                name: str = "") -> NlpProblem:
        """Augmented Lagrangian subproblem for the given coupling targets."""
        if mode not in (ONE_LEVEL, TWO_LEVEL):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == TWO_LEVEL and beta is None:
            raise ValueError("two-level mode needs beta")
        if mode == ONE_LEVEL and beta is not None:
            raise ValueError("beta is only meaningful in two-level mode")
        ncp = len(self.arcs)
        if targets is None:
            if ncp:
                raise ValueError(f"region {self.view.region} has coupling arcs; targets required")
            xC = lam = shift = np.zeros((0, 4))
        else:
            if tuple(targets.arcs) != self.arcs:
                raise ValueError(f"targets do not match the coupling arcs of region {self.view.region}")
            if mode == TWO_LEVEL and not targets.two_level:
                raise ValueError("two-level mode needs slack targets")
            xC, lam = targets.xC, targets.lam
            shift = targets.z if mode == TWO_LEVEL else np.zeros_like(xC)
        if ncp and not rho > 0:
            raise ValueError("rho must be positive")

        nb, ng = self.nb, self.ng
        ipg = 2 * nb + np.arange(ng)
        cf, cb = self.c_flow, self.c_bus
        c2, c1, c0 = self.c2, self.c1, self.c0
        kcl, inc, ginc = self.kcl_buses, self.inc, self.gen_inc
        nk = len(kcl)

        def dev(x, p, q):
            v, th, _, _ = self.split(x)
            vals = np.stack([p[cf], q[cf], v[cb], th[cb]], axis=1)
            return vals - xC + shift

        def f(x):
            pg = x[ipg]
            val = float(np.sum(c2 * pg * pg + c1 * pg + c0))
            if ncp:
                p, q = self.flows(x)
                d = dev(x, p, q)
                val += float(np.sum(lam * d) + 0.5 * rho * np.sum(d * d))
            return val

        def grad(x):
            gr = np.zeros(self.n)
            gr[ipg] = 2 * c2 * x[ipg] + c1
            if ncp:
                p, q, Gp, Gq, _, _ = self._derivs(x)
                w = lam + rho * dev(x, p, q)
                np.add.at(gr, self.arc_vars[cf].ravel(), (w[:, :1] * Gp[cf] + w[:, 1:2] * Gq[cf]).ravel())
                np.add.at(gr, cb, w[:, 2])
                np.add.at(gr, nb + cb, w[:, 3])
            return gr

        def c_eq(x):
            v, th, pg, qg = self.split(x)
            p, q = self.flows(x)
            rows = [ginc @ pg - self.pd_bus[kcl] - inc @ p, ginc @ qg - self.qd_bus[kcl] - inc @ q]
            if self.ref_ix is not None:
                rows.append(th[[self.ref_ix]])
            return np.concatenate(rows)

        def jac_eq(x):
            _, _, Gp, Gq, _, _ = self._derivs(x)
            J = np.zeros((self.m_eq, self.n))
            J[:nk] = -inc @ self._flow_jac(Gp)
            J[nk:2 * nk] = -inc @ self._flow_jac(Gq)
            J[:nk, ipg] = ginc
            J[nk:2 * nk, ipg + ng] = ginc
            if self.ref_ix is not None:
                J[2 * nk, nb + self.ref_ix] = 1.0
            return J

        def c_ineq(x):
            p, q = self.flows(x)
            return (p * p + q * q) / self.smax2 - 1.0

        def jac_ineq(x):
            p, q, Gp, Gq, _, _ = self._derivs(x)
            G = (2 * p[:, None] * Gp + 2 * q[:, None] * Gq) / self.smax2[:, None]
            return self._flow_jac(G)

        def hess(x, y_eq, y_ineq):
            H = np.zeros((self.n, self.n))
            H[ipg, ipg] = 2 * c2
            p, q, Gp, Gq, Hp, Hq = self._derivs(x)
            ap = -(inc.T @ y_eq[:nk])
            aq = -(inc.T @ y_eq[nk:2 * nk])
            u = y_ineq / self.smax2
            ap = ap + 2 * u * p
            aq = aq + 2 * u * q
            cp = 2 * u
            cq = 2 * u
            if ncp:
                w = lam + rho * dev(x, p, q)
                ap = ap.copy()
                aq = aq.copy()
                cp = cp.copy()
                cq = cq.copy()
                np.add.at(ap, cf, w[:, 0])
                np.add.at(aq, cf, w[:, 1])
                np.add.at(cp, cf, rho)
                np.add.at(cq, cf, rho)
                np.add.at(H, (cb, cb), rho)
                np.add.at(H, (nb + cb, nb + cb), rho)
            blocks = (ap[:, None, None] * Hp + aq[:, None, None] * Hq
                      + cp[:, None, None] * Gp[:, :, None] * Gp[:, None, :]
                      + cq[:, None, None] * Gq[:, :, None] * Gq[:, None, :])
            self._scatter_hess(H, blocks)
            return H

        if x0 is None:
            x0 = self.flat_start()
        x0 = np.clip(np.asarray(x0, float), self.lo, self.hi)
        return NlpProblem(self.n, self.lo, self.hi, x0, f=f, grad=grad, c_eq=c_eq, jac_eq=jac_eq,
                          c_ineq=c_ineq, jac_ineq=jac_ineq, hess=hess, m_eq=self.m_eq,
                          m_ineq=self.m_ineq, name=name or f"region-{self.view.region}")


def assemble_regional_problem(view: RegionView, pd, qd, targets: Optional[CouplingTargets],
                              rho: float, mode: str = ONE_LEVEL, beta: Optional[float] = None,
                              x0=None) -> NlpProblem:
    return RegionalModel(view, pd, qd).problem(targets, rho, x0=x0, mode=mode, beta=beta)


def centralized_model(net: PowerNetwork, pd=None, qd=None) -> RegionalModel:
    return RegionalModel(whole_view(net), pd, qd)


def evaluate_kcl_residual(primal: RegionalPrimal, view: RegionView, pd=None, qd=None) -> np.ndarray:
    """Complex power mismatch per local bus: generation - load - outgoing flows."""
    net = view.net
    pd = np.array(net.nominal_pd if pd is None else pd, float)
    qd = np.array(net.nominal_qd if qd is None else qd, float)
    ix = {b: i for i, b in enumerate(view.local_buses)}
    mis = np.zeros(len(ix), complex)
    for k, gi in enumerate(primal.generators):
        bus = net.generators[gi].bus
        if bus in ix:
            mis[ix[bus]] += complex(primal.pg[k], primal.qg[k])
    for li in view.local_loads:
        mis[ix[net.loads[li].bus]] -= complex(pd[li], qd[li])
    for k, (e, d) in enumerate(primal.flow_arcs):
        br = net.branches[e]
        src = br.from_bus if d == 0 else br.to_bus
        if src in ix:
            mis[ix[src]] -= complex(primal.pf[k], primal.qf[k])
    return mis


def total_cost(models: Sequence[RegionalModel], xs: Sequence[np.ndarray]) -> float:
    return float(sum(m.cost(x) for m, x in zip(models, xs)))

"""Dense primal-dual interior-point solver for small smooth NLPs.

Problems have the form::

    min f(x)  s.t.  c_eq(x) = 0,  c_ineq(x) <= 0,  lo <= x <= hi

Inequalities get slack variables, bounds and slacks get a log barrier, and the
barrier parameter is reduced monotonically (Fiacco-McCormick). Steps come from
the condensed primal-dual KKT system with inertia correction and are accepted
by an l1-merit backtracking line search with one second-order correction.
When the KKT matrix cannot be regularized, or the line search stalls, a
quadratic-penalty damped-Newton method takes over from the current iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)

CONVERGED = "converged"
ITERATION_LIMIT = "iteration-limit"
FAILURE = "failure"

_EMPTY = np.zeros(0)


@dataclass
class NlpProblem:
    """Callback bundle describing one NLP instance.

    ``hess(x, y_eq, y_ineq)`` must return the Hessian of
    ``f + y_eq . c_eq + y_ineq . c_ineq``. When it is omitted the solver falls
    back to central differences of the Lagrangian gradient.
    """

    n: int
    lo: np.ndarray
    hi: np.ndarray
    x0: np.ndarray
    f: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    c_eq: Optional[Callable] = None
    jac_eq: Optional[Callable] = None
    c_ineq: Optional[Callable] = None
    jac_ineq: Optional[Callable] = None
    hess: Optional[Callable] = None
    m_eq: int = 0
    m_ineq: int = 0
    name: str = ""

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if not (self.lo.shape == self.hi.shape == self.x0.shape == (self.n,)):
            raise ValueError("bound/initial-point shapes do not match n")
        if np.any(self.lo >= self.hi):
            raise ValueError("need lo < hi elementwise (fix variables through equalities)")

    def eval_eq(self, x):
        if self.m_eq == 0:
            return _EMPTY, np.zeros((0, self.n))
        return np.asarray(self.c_eq(x), float), np.asarray(self.jac_eq(x), float)

    def eval_ineq(self, x):
        if self.m_ineq == 0:
            return _EMPTY, np.zeros((0, self.n))
        return np.asarray(self.c_ineq(x), float), np.asarray(self.jac_ineq(x), float)

    def lagrangian_hessian(self, x, y_eq, y_ineq):
        if self.hess is not None:
            return np.asarray(self.hess(x, y_eq, y_ineq), float)
        return _fd_hessian(self, x, y_eq, y_ineq)


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    max_violation: float
    stationarity: float
    status: str
    iterations: int
    y_eq: np.ndarray = field(default_factory=lambda: _EMPTY)
    y_ineq: np.ndarray = field(default_factory=lambda: _EMPTY)
    z_lo: np.ndarray = field(default_factory=lambda: _EMPTY)
    z_hi: np.ndarray = field(default_factory=lambda: _EMPTY)
    slack: np.ndarray = field(default_factory=lambda: _EMPTY)
    merit_history: list = field(default_factory=list)
    used_fallback: bool = False

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def warm(self) -> dict:
        """Multipliers to seed a subsequent solve of a nearby problem."""
        return {"y_eq": self.y_eq, "y_ineq": self.y_ineq, "z_lo": self.z_lo,
                "z_hi": self.z_hi, "slack": self.slack}


@dataclass
class SolverOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_iter: int = 200
    mu0: float = 0.1
    warm_mu0: float = 1e-4
    bound_push: float = 1e-2
    warm_bound_push: float = 1e-6


def _fd_hessian(P: NlpProblem, x, y_eq, y_ineq):
    def lag_grad(z):
        g = np.asarray(P.grad(z), float)
        if P.m_eq:
            g = g + np.asarray(P.jac_eq(z)).T @ y_eq
        if P.m_ineq:
            g = g + np.asarray(P.jac_ineq(z)).T @ y_ineq
        return g

    H = np.empty((P.n, P.n))
    for i in range(P.n):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        H[:, i] = (lag_grad(xp) - lag_grad(xm)) / (2 * h)
    return 0.5 * (H + H.T)


def _push_inside(x0, lo, hi, push):
    x = np.array(x0, dtype=float)
    hl, hu = np.isfinite(lo), np.isfinite(hi)
    width = np.where(hl & hu, hi - lo, np.inf)
    pl = np.minimum(push * np.maximum(1.0, np.abs(np.where(hl, lo, 0.0))), 0.5 * width)
    pu = np.minimum(push * np.maximum(1.0, np.abs(np.where(hu, hi, 0.0))), 0.5 * width)
    x = np.where(hl, np.maximum(x, lo + pl), x)
    x = np.where(hu, np.minimum(x, hi - pu), x)
    return x


def _frac_to_boundary(v, dv, tau):
    """Largest alpha in (0, 1] keeping v + alpha*dv >= (1 - tau) * v for v > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


class _Iterate:
    __slots__ = ("x", "s", "y_eq", "y_ineq", "z_lo", "z_hi")

    def __init__(self, x, s, y_eq, y_ineq, z_lo, z_hi):
        self.x, self.s, self.y_eq, self.y_ineq, self.z_lo, self.z_hi = x, s, y_eq, y_ineq, z_lo, z_hi


def solve(problem: NlpProblem, feas_tol: float = 1e-6, opt_tol: float = 1e-6,
          max_iter: int = 200, *, warm: Optional[dict] = None,
          options: Optional[SolverOptions] = None) -> NlpSolution:
    """Find a local KKT point of ``problem``.

    ``warm`` may carry multipliers from a previous solve (see
    :meth:`NlpSolution.warm`); the barrier then starts at ``warm_mu0``.
    Never raises on numerical trouble; the returned status says what happened.
    """
    opts = options or SolverOptions()
    try:
        return _ipm(problem, feas_tol, opt_tol, max_iter, warm, opts)
    except FloatingPointError as exc:  # pragma: no cover - guarded by isfinite checks
        log.warning("solver aborted: %s", exc)
        x = problem.x0.copy()
        return NlpSolution(x, float("nan"), float("inf"), float("inf"), FAILURE, 0)


def _ipm(P: NlpProblem, feas_tol, opt_tol, max_iter, warm, opts):
    n, lo, hi = P.n, P.lo, P.hi
    hl, hu = np.isfinite(lo), np.isfinite(hi)
    loF, hiF = np.where(hl, lo, 0.0), np.where(hu, hi, 0.0)
    mu_min = min(feas_tol, opt_tol) / 10.0
    is_warm = warm is not None
    mu = opts.warm_mu0 if is_warm else opts.mu0
    push = opts.warm_bound_push if is_warm else opts.bound_push

    x = _push_inside(P.x0, lo, hi, push)
    cI, _ = P.eval_ineq(x)
    s = np.maximum(-cI, max(push, mu) * np.maximum(1.0, np.abs(cI)))
    dl = np.where(hl, x - loF, 1.0)
    du = np.where(hu, hiF - x, 1.0)
    z_lo = np.where(hl, mu / dl, 0.0)
    z_hi = np.where(hu, mu / du, 0.0)
    y_ineq = mu / s
    y_eq = np.zeros(P.m_eq)
    if is_warm:
        if len(warm.get("y_eq", _EMPTY)) == P.m_eq:
            y_eq = np.array(warm["y_eq"], float)
        if len(warm.get("y_ineq", _EMPTY)) == P.m_ineq and P.m_ineq:
            y_ineq = np.maximum(np.array(warm["y_ineq"], float), mu / s)
        if len(warm.get("z_lo", _EMPTY)) == n:
            z_lo = np.where(hl, np.maximum(warm["z_lo"], mu / dl), 0.0)
            z_hi = np.where(hu, np.maximum(warm["z_hi"], mu / du), 0.0)
    elif P.m_eq:
        g = np.asarray(P.grad(x), float)
        _, JE = P.eval_eq(x)
        _, JI = P.eval_ineq(x)
        r = g + JI.T @ y_ineq - z_lo + z_hi
        y_eq, *_ = np.linalg.lstsq(JE.T, -r, rcond=None)
        if not np.all(np.isfinite(y_eq)) or np.max(np.abs(y_eq), initial=0) > 1e3 * max(1.0, np.max(np.abs(g))):
            y_eq = np.zeros(P.m_eq)

    it = _Iterate(x, s, y_eq, y_ineq, z_lo, z_hi)
    nu = 1.0
    delta_w_last = 0.0
    merit_history = []
    status = ITERATION_LIMIT
    k = 0
    stat = viol = float("inf")

    for k in range(max_iter + 1):
        x, s = it.x, it.s
        fx = float(P.f(x))
        g = np.asarray(P.grad(x), float)
        cE, JE = P.eval_eq(x)
        cI, JI = P.eval_ineq(x)
        if not (np.isfinite(fx) and np.all(np.isfinite(g)) and np.all(np.isfinite(cE))
                and np.all(np.isfinite(cI)) and np.all(np.isfinite(JE)) and np.all(np.isfinite(JI))):
            status = FAILURE
            break
        dl = np.where(hl, x - loF, 1.0)
        du = np.where(hu, hiF - x, 1.0)
        grad_lag = g + JE.T @ it.y_eq + JI.T @ it.y_ineq - it.z_lo + it.z_hi
        stat = float(np.max(np.abs(grad_lag), initial=0.0))
        viol = max(float(np.max(np.abs(cE), initial=0.0)), float(np.max(cI, initial=0.0)), 0.0)
        slack_res = float(np.max(np.abs(cI + s), initial=0.0))
        compl0 = max(float(np.max(s * it.y_ineq, initial=0.0)),
                     float(np.max(np.where(hl, dl * it.z_lo, 0.0), initial=0.0)),
                     float(np.max(np.where(hu, du * it.z_hi, 0.0), initial=0.0)))
        if stat <= opt_tol and viol <= feas_tol and slack_res <= feas_tol and compl0 <= opt_tol:
            status = CONVERGED
            break
        if k == max_iter:
            break

        # barrier update
        while mu > mu_min:
            compl_mu = max(float(np.max(np.abs(s * it.y_ineq - mu), initial=0.0)),
                           float(np.max(np.where(hl, np.abs(dl * it.z_lo - mu), 0.0), initial=0.0)),
                           float(np.max(np.where(hu, np.abs(du * it.z_hi - mu), 0.0), initial=0.0)))
            err_mu = max(stat, max(viol, slack_res), compl_mu)
            if err_mu > 10.0 * mu:
                break
            mu = max(mu_min, min(0.2 * mu, mu ** 1.5))

        W = P.lagrangian_hessian(x, it.y_eq, it.y_ineq)
        sig_x = np.where(hl, it.z_lo / dl, 0.0) + np.where(hu, it.z_hi / du, 0.0)
        sig_s = it.y_ineq / s
        Hred = W + np.diag(sig_x)
        if P.m_ineq:
            Hred = Hred + JI.T @ (sig_s[:, None] * JI)
        grad_bar = g - np.where(hl, mu / dl, 0.0) + np.where(hu, mu / du, 0.0)

        fact = _factor_kkt(Hred, JE, delta_w_last)
        if fact is None:
            log.info("%s: KKT regularization failed, switching to penalty fallback", P.name)
            return _penalty_fallback(P, x, feas_tol, opt_tol, max_iter - k, k, merit_history)
        Q, lam, delta_w, delta_c = fact
        delta_w_last = delta_w

        def direction(rE, rI):
            r1 = -(grad_bar + JE.T @ it.y_eq)
            if P.m_ineq:
                r1 = r1 - JI.T @ (mu / s + sig_s * rI)
            rhs = np.concatenate([r1, -rE])
            sol = Q @ ((Q.T @ rhs) / lam)
            dx, dyE = sol[:n], sol[n:]
            JIdx = JI @ dx
            ds = -rI - JIdx
            dyI = mu / s - it.y_ineq + sig_s * (rI + JIdx)
            return dx, ds, dyE, dyI

        rI = cI + s
        dx, ds, dyE, dyI = direction(cE, rI)
        dzl = np.where(hl, mu / dl - it.z_lo - (it.z_lo / dl) * dx, 0.0)
        dzu = np.where(hu, mu / du - it.z_hi + (it.z_hi / du) * dx, 0.0)

        tau = max(0.99, 1.0 - mu)
        a_max = min(_frac_to_boundary(s, ds, tau),
                    _frac_to_boundary(dl[hl], dx[hl], tau),
                    _frac_to_boundary(du[hu], -dx[hu], tau))
        a_dual = min(_frac_to_boundary(it.y_ineq, dyI, tau),
                     _frac_to_boundary(it.z_lo[hl], dzl[hl], tau),
                     _frac_to_boundary(it.z_hi[hu], dzu[hu], tau))

        theta = float(np.sum(np.abs(cE)) + np.sum(np.abs(rI)))
        gdir = float(grad_bar @ dx - mu * np.sum(ds / s)) if P.m_ineq else float(grad_bar @ dx)
        curv = float(dx @ Hred @ dx + ds @ (sig_s * ds)) if not P.m_ineq else float(dx @ (W + np.diag(sig_x)) @ dx + ds @ (sig_s * ds))
        if theta > 0:
            nu_req = (gdir + 0.5 * max(curv, 0.0)) / (0.9 * theta)
            if nu < nu_req:
                nu = nu_req + 1.0
        D = gdir - nu * theta

        def merit(xt, st):
            if np.any(hl & (xt <= loF)) or np.any(hu & (xt >= hiF)) or np.any(st <= 0):
                return float("inf"), None
            ft = float(P.f(xt))
            cEt, _ = _eq_values(P, xt)
            cIt = _ineq_values(P, xt)
            val = (ft - mu * np.sum(np.log(st))
                   - mu * np.sum(np.log(xt[hl] - loF[hl])) - mu * np.sum(np.log(hiF[hu] - xt[hu]))
                   + nu * (np.sum(np.abs(cEt)) + np.sum(np.abs(cIt + st))))
            return (float(val) if np.isfinite(val) else float("inf")), (cEt, cIt)

        phi0, _ = merit(x, s)
        alpha = a_max
        accepted = None
        for trial in range(60):
            xt, st = x + alpha * dx, s + alpha * ds
            phit, cons = merit(xt, st)
            if phit <= phi0 + 1e-4 * alpha * D:
                accepted = (xt, st, alpha)
                break
            if trial == 0 and cons is not None:
                # second-order correction against the Maratos effect
                cEt, cIt = cons
                sdx, sds, _, _ = direction(alpha * cE + cEt, alpha * rI + cIt + st)
                a_soc = min(_frac_to_boundary(s, sds, tau),
                            _frac_to_boundary(dl[hl], sdx[hl], tau),
                            _frac_to_boundary(du[hu], -sdx[hu], tau))
                xs, ss = x + a_soc * sdx, s + a_soc * sds
                phis, _ = merit(xs, ss)
                if phis <= phi0 + 1e-4 * alpha * D:
                    phit = phis
                    accepted = (xs, ss, alpha)
                    break
            alpha *= 0.5
            if alpha * np.max(np.abs(dx), initial=0.0) < 1e-15 * (1 + np.max(np.abs(x))) and alpha < 1e-8:
                break

        if accepted is None:
            step_tiny = np.max(np.abs(dx), initial=0.0) <= 1e-9 * (1 + np.max(np.abs(x), initial=0.0))
            if step_tiny:
                xt, st = x + a_max * dx, s + a_max * ds
                phit, _ = merit(xt, st)
                accepted = (xt, st, a_max)
            else:
                log.info("%s: line search failed at iteration %d, switching to penalty fallback",
                         P.name, k)
                return _penalty_fallback(P, x, feas_tol, opt_tol, max_iter - k, k, merit_history)

        xt, st, alpha = accepted
        log.debug("it %d mu %.1e f %.6g stat %.2e viol %.2e dw %.1e alpha %.2e/%.2e nu %.2e",
                  k, mu, fx, stat, viol, delta_w, alpha, a_max, nu)
        merit_history.append((phi0, phit))
        it.x, it.s = xt, st
        it.y_eq = it.y_eq + dyE
        it.y_ineq = it.y_ineq + a_dual * dyI
        it.z_lo = it.z_lo + a_dual * dzl
        it.z_hi = it.z_hi + a_dual * dzu
        # keep bound multipliers within a factor of the central path
        dl = np.where(hl, xt - loF, 1.0)
        du = np.where(hu, hiF - xt, 1.0)
        kap = 1e10
        it.z_lo = np.where(hl, np.clip(it.z_lo, mu / (kap * dl), kap * mu / dl), 0.0)
        it.z_hi = np.where(hu, np.clip(it.z_hi, mu / (kap * du), kap * mu / du), 0.0)
        if P.m_ineq:
            it.y_ineq = np.clip(it.y_ineq, mu / (kap * st), kap * mu / st)

    x = it.x
    fx = float(P.f(x)) if np.all(np.isfinite(x)) else float("nan")
    if not np.isfinite(fx):
        status = FAILURE
    return NlpSolution(x=x, objective=fx, max_violation=viol, stationarity=stat, status=status,
                       iterations=k, y_eq=it.y_eq, y_ineq=it.y_ineq, z_lo=it.z_lo,
                       z_hi=it.z_hi, slack=it.s, merit_history=merit_history)


def _eq_values(P, x):
    if P.m_eq == 0:
        return _EMPTY, None
    return np.asarray(P.c_eq(x), float), None


def _ineq_values(P, x):
    if P.m_ineq == 0:
        return _EMPTY
    return np.asarray(P.c_ineq(x), float)


def _factor_kkt(H, JE, delta_w_last):
    """Eigen-factor the KKT matrix, regularizing until its inertia is (n, m, 0).

    Returns ``(Q, eigenvalues, delta_w, delta_c)`` or None when no
    regularization up to 1e40 works.
    """
    n, m = H.shape[0], JE.shape[0]
    delta_c = 0.0
    delta_w = 0.0

    def factor(dw, dc):
        K = np.empty((n + m, n + m))
        K[:n, :n] = H + dw * np.eye(n)
        K[:n, n:] = JE.T
        K[n:, :n] = JE
        K[n:, n:] = -dc * np.eye(m)
        lam, Q = np.linalg.eigh(K)
        return lam, Q

    if not np.all(np.isfinite(H)):
        return None
    lam, Q = factor(0.0, 0.0)
    scale = max(1.0, float(np.max(np.abs(lam), initial=1.0)))
    tiny = 1e-13 * scale
    npos, nneg = int(np.sum(lam > tiny)), int(np.sum(lam < -tiny))
    if npos == n and nneg == m:
        return Q, lam, 0.0, 0.0
    if n + m - npos - nneg > 0 and m > 0:
        delta_c = 1e-8
        lam, Q = factor(0.0, delta_c)
        npos, nneg = int(np.sum(lam > tiny)), int(np.sum(lam < -tiny))
        if npos == n and nneg == m:
            return Q, lam, 0.0, delta_c
    delta_w = 1e-4 if delta_w_last == 0 else max(1e-20, delta_w_last / 3)
    while delta_w <= 1e40:
        lam, Q = factor(delta_w, delta_c)
        npos, nneg = int(np.sum(lam > tiny)), int(np.sum(lam < -tiny))
        if npos == n and nneg == m:
            return Q, lam, delta_w, delta_c
        delta_w *= 100 if delta_w_last == 0 else 8
    return None


# --------------------------------------------------------------- fallback


def _penalty_fallback(P: NlpProblem, x, feas_tol, opt_tol, max_iter, k0, merit_history):
    """Quadratic penalty on constraints, log barrier on bounds, damped Newton."""
    lo, hi = P.lo, P.hi
    hl, hu = np.isfinite(lo), np.isfinite(hi)
    loF, hiF = np.where(hl, lo, 0.0), np.where(hu, hi, 0.0)
    x = _push_inside(x, lo, hi, 1e-8)
    kappa, mu_b = 1e2, 1e-3
    status = ITERATION_LIMIT
    stat = viol = float("inf")
    iters = 0
    y_eq = np.zeros(P.m_eq)
    y_in = np.zeros(P.m_ineq)

    def phi(z):
        if np.any(hl & (z <= loF)) or np.any(hu & (z >= hiF)):
            return float("inf")
        cE = _eq_values(P, z)[0]
        cI = _ineq_values(P, z)
        v = (P.f(z) + 0.5 * kappa * (cE @ cE + np.sum(np.maximum(cI, 0) ** 2))
             - mu_b * np.sum(np.log(z[hl] - loF[hl])) - mu_b * np.sum(np.log(hiF[hu] - z[hu])))
        return float(v) if np.isfinite(v) else float("inf")

    for iters in range(max(max_iter, 50)):
        g = np.asarray(P.grad(x), float)
        cE, JE = P.eval_eq(x)
        cI, JI = P.eval_ineq(x)
        y_eq = kappa * cE
        y_in = kappa * np.maximum(cI, 0)
        dl = np.where(hl, x - loF, 1.0)
        du = np.where(hu, hiF - x, 1.0)
        zl = np.where(hl, mu_b / dl, 0.0)
        zu = np.where(hu, mu_b / du, 0.0)
        gphi = g + JE.T @ y_eq + JI.T @ y_in - zl + zu
        viol = max(float(np.max(np.abs(cE), initial=0)), float(np.max(cI, initial=0)), 0.0)
        stat = float(np.max(np.abs(gphi), initial=0))
        if viol <= feas_tol and stat <= opt_tol and mu_b <= opt_tol:
            status = CONVERGED
            break
        if stat <= max(opt_tol, 1e-2 * mu_b):
            kappa = min(kappa * 10, 1e12)
            mu_b = max(mu_b * 0.1, opt_tol / 10)
            continue
        act = cI > 0
        H = (P.lagrangian_hessian(x, y_eq, y_in) + kappa * JE.T @ JE
             + kappa * JI[act].T @ JI[act] + np.diag(np.where(hl, zl / dl, 0) + np.where(hu, zu / du, 0)))
        w, V = np.linalg.eigh(0.5 * (H + H.T))
        w = np.maximum(w, 1e-8 * max(1.0, np.max(np.abs(w))))
        d = -V @ ((V.T @ gphi) / w)
        a = 1.0
        p0 = phi(x)
        # below this predicted decrease the merit values differ only by round-off
        flat = -(gphi @ d) < 1e-13 * max(1.0, abs(p0))
        while a > 1e-14:
            xt = x + a * d
            pt = phi(xt)
            if pt <= p0 + 1e-4 * a * (gphi @ d) or (flat and pt <= p0 + 1e-13 * max(1.0, abs(p0))):
                break
            a *= 0.5
        if a <= 1e-14:
            kappa = min(kappa * 10, 1e12)
            continue
        merit_history.append((p0, pt))
        x = xt
    fx = float(P.f(x))
    if not np.isfinite(fx):
        status = FAILURE
    return NlpSolution(x=x, objective=fx, max_violation=viol, stationarity=stat, status=status,
                       iterations=k0 + iters, y_eq=y_eq, y_ineq=y_in,
                       z_lo=np.where(hl, mu_b / np.where(hl, x - loF, 1.0), 0.0),
                       z_hi=np.where(hu, mu_b / np.where(hu, hiF - x, 1.0), 0.0),
                       slack=np.maximum(-_ineq_values(P, x), 0.0),
                       merit_history=merit_history, used_fallback=True)


def solve_penalty(problem: NlpProblem, feas_tol: float = 1e-6, opt_tol: float = 1e-6,
                  max_iter: int = 500) -> NlpSolution:
    """Run the penalty fallback directly (used when the KKT route is unwanted)."""
    return _penalty_fallback(problem, problem.x0, feas_tol, opt_tol, max_iter, 0, [])


# ------------------------------------------------------------------ KKT check


@dataclass
class KktReport:
    stationarity: float
    max_violation: float
    complementarity: float

    def passes(self, tol: float) -> bool:
        return max(self.stationarity, self.max_violation, self.complementarity) <= tol


def check_kkt(problem: NlpProblem, x, tol: float = 1e-6, multipliers: Optional[dict] = None,
              active_tol: float = 1e-4) -> KktReport:
    """Stationarity, feasibility and complementarity measures at ``x``.

    Without ``multipliers`` they are estimated by bounded least squares over
    the equality constraints and the inequalities/bounds within
    ``active_tol`` of being active.
    """
    P = problem
    x = np.asarray(x, float)
    g = np.asarray(P.grad(x), float)
    cE, JE = P.eval_eq(x)
    cI, JI = P.eval_ineq(x)
    hl, hu = np.isfinite(P.lo), np.isfinite(P.hi)
    viol = max(float(np.max(np.abs(cE), initial=0)), float(np.max(cI, initial=0)),
               float(np.max(np.where(hl, P.lo - x, 0), initial=0)),
               float(np.max(np.where(hu, x - P.hi, 0), initial=0)), 0.0)
    dl = np.where(hl, x - np.where(hl, P.lo, 0), np.inf)
    du = np.where(hu, np.where(hu, P.hi, 0) - x, np.inf)
    if multipliers is not None:
        yE = np.asarray(multipliers.get("y_eq", np.zeros(P.m_eq)), float)
        yI = np.asarray(multipliers.get("y_ineq", np.zeros(P.m_ineq)), float)
        zl = np.asarray(multipliers.get("z_lo", np.zeros(P.n)), float)
        zu = np.asarray(multipliers.get("z_hi", np.zeros(P.n)), float)
    else:
        actI = np.where(cI >= -active_tol)[0]
        actL = np.where(dl <= active_tol)[0]
        actU = np.where(du <= active_tol)[0]
        cols = [JE.T, JI[actI].T, -np.eye(P.n)[:, actL], np.eye(P.n)[:, actU]]
        A = np.hstack(cols) if P.n else np.zeros((0, 0))
        nfree = P.m_eq
        lb = np.concatenate([np.full(nfree, -np.inf), np.zeros(A.shape[1] - nfree)])
        ub = np.full(A.shape[1], np.inf)
        yE = np.zeros(P.m_eq)
        yI = np.zeros(P.m_ineq)
        zl = np.zeros(P.n)
        zu = np.zeros(P.n)
        if A.shape[1]:
            res = lsq_linear(A, -g, bounds=(lb, ub), tol=1e-14, lsmr_tol="auto", method="bvls")
            sol = res.x
            yE = sol[:nfree]
            o = nfree
            yI[actI] = sol[o:o + len(actI)]
            o += len(actI)
            zl[actL] = sol[o:o + len(actL)]
            o += len(actL)
            zu[actU] = sol[o:o + len(actU)]
    r = g + JE.T @ yE + JI.T @ yI - zl + zu
    compl = max(float(np.max(np.abs(yI * cI), initial=0)),
                float(np.max(np.where(hl, np.abs(zl * np.where(hl, dl, 0)), 0), initial=0)),
                float(np.max(np.where(hu, np.abs(zu * np.where(hu, du, 0)), 0), initial=0)))
    return KktReport(float(np.max(np.abs(r), initial=0)), viol, compl)

"""Ground-truth dataset generation, storage, splitting and training-data filters."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .admm import AdmmConfig, admm_iterate, cold_start
from .grid import PowerNetwork, partition
from .ml import BASE_TYPES, SLACK_TYPES, TYPE_FIELDS
from .nlp import CONVERGED, solve as nlp_solve
from .opf import ONE_LEVEL, TWO_LEVEL, CouplingTargets, centralized_model
from .twolevel import two_level_cold_start, two_level_iterate

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


# ------------------------------------------------------------ generation


@dataclass
class LoadInstance:
    id: str
    scale: float
    pd: np.ndarray
    qd: np.ndarray


def scale_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if not step > 0:
        raise DatasetError("step must be positive")
    if lo > hi:
        raise DatasetError("scale_lo must not exceed scale_hi")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def generate_instances(net: PowerNetwork, scale_lo: float = 0.8, scale_hi: float = 1.22,
                       step: float = 0.01, noise_frac: float = 0.01, seed: int = 0,
                       repeats: int = 1) -> list:
    """Scaled nominal loads plus a complex perturbation per load whose
    magnitude is exponential with mean ``noise_frac * |S_d|`` and whose angle
    is uniform on ``[0, 2 pi)``.

    ``repeats`` instances are drawn per scale point.
    """
    if noise_frac < 0:
        raise DatasetError("noise_frac must be nonnegative")
    scales = scale_grid(scale_lo, scale_hi, step)
    rng = np.random.default_rng(seed)
    s0 = np.array(net.nominal_pd, float) + 1j * np.array(net.nominal_qd, float)
    out = []
    for i, s in enumerate(scales):
        for r in range(repeats):
            mag = rng.exponential(1.0, s0.size) * noise_frac * np.abs(s0)
            ang = rng.uniform(0.0, 2.0 * np.pi, s0.size)
            sd = s * s0 + mag * np.exp(1j * ang)
            out.append(LoadInstance(f"{i:04d}-{r:03d}", float(s), sd.real.copy(), sd.imag.copy()))
    return out


# -------------------------------------------------------------- labeling


@dataclass
class LabelConfig:
    engine: str = ONE_LEVEL
    rho: Optional[float] = None          # 10 one-level, 1000 two-level
    iters: int = 3000
    eps: Optional[float] = None          # stop once residuals (and s_z) fall below
    norm: str = "inf"

    def __post_init__(self):
        if self.engine not in (ONE_LEVEL, TWO_LEVEL):
            raise DatasetError(f"unknown engine {self.engine!r}")
        if self.rho is None:
            self.rho = 1000.0 if self.engine == TWO_LEVEL else 10.0
        if self.norm not in ("inf", "l2"):
            raise DatasetError("norm must be 'inf' or 'l2'")
        if self.iters < 1:
            raise DatasetError("iters must be at least 1")

    @property
    def two_level(self) -> bool:
        return self.engine == TWO_LEVEL


@dataclass
class RegionSample:
    """What region ``k`` sees of one instance: its targets and the scores."""

    id: str
    targets: CouplingTargets
    rp: float
    rd: float
    sz: Optional[float] = None


@dataclass
class TrainingInstance:
    id: str
    scale: float
    pd: np.ndarray
    qd: np.ndarray
    targets: Optional[dict] = None       # region -> CouplingTargets
    rp_score: float = float("nan")
    rd_score: float = float("nan")
    sz_score: Optional[float] = None
    feasible: bool = False
    objective: float = float("nan")
    central_objective: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        if self.feasible != (self.targets is not None):
            raise DatasetError("targets must be present exactly when the instance is feasible")

    @property
    def two_level(self) -> bool:
        return self.sz_score is not None

    def region_sample(self, k) -> RegionSample:
        return RegionSample(self.id, self.targets[k], self.rp_score, self.rd_score, self.sz_score)


def central_solve(net: PowerNetwork, pd=None, qd=None):
    return nlp_solve(centralized_model(net, pd, qd).problem())


def run_engine(net: PowerNetwork, pd, qd, config: LabelConfig, init=None, t_max=None):
    """Cold (or ``init``-seeded) engine run; returns the trace."""
    views = partition(net)
    t_max = t_max or config.iters
    acfg = AdmmConfig(rho0=config.rho, early_stop=config.eps is not None,
                      eps=config.eps if config.eps is not None else 1e-4, norm=config.norm)
    if config.two_level:
        state = init.copy() if init is not None else two_level_cold_start(views, config.rho)
        return two_level_iterate(state, views, pd, qd, t_max, acfg)
    state = init.copy() if init is not None else cold_start(views, config.rho)
    return admm_iterate(state, views, pd, qd, t_max, acfg)


def _score(vec, norm):
    vec = np.asarray(vec, float)
    if vec.size == 0:
        return 0.0
    return float(np.max(np.abs(vec)) if norm == "inf" else np.linalg.norm(vec))


def label_instance(net: PowerNetwork, load: LoadInstance, config: LabelConfig) -> TrainingInstance:
    base = dict(id=load.id, scale=load.scale, pd=np.asarray(load.pd, float),
                qd=np.asarray(load.qd, float))
    cen = central_solve(net, load.pd, load.qd)
    if cen.status != CONVERGED:
        log.info("instance %s: no feasible centralized solution (%s), dropped", load.id, cen.status)
        return TrainingInstance(**base)
    trace = run_engine(net, load.pd, load.qd, config)
    if trace.status == "failure" or not trace.records:
        log.warning("instance %s: engine failed: %s", load.id, trace.error)
        return TrainingInstance(**base, central_objective=cen.objective)
    st, rec = trace.state, trace.last
    if config.two_level:
        targets = {k: CouplingTargets(st.arcs[k], st.xC[k].copy(), st.lam[k].copy(),
                                      st.z[k].copy(), st.Lam[k].copy()) for k in sorted(st.arcs)}
    else:
        targets = {k: CouplingTargets(st.arcs[k], st.xC[k].copy(), st.lam[k].copy())
                   for k in sorted(st.arcs)}
    return TrainingInstance(**base, targets=targets, rp_score=_score(rec.rp, config.norm),
                            rd_score=_score(rec.rd, config.norm),
                            sz_score=float(rec.s_z) if config.two_level else None, feasible=True,
                            objective=rec.objective, central_objective=cen.objective,
                            iterations=rec.iter)


def _label_job(args):
    return label_instance(*args)


def label_instances(net: PowerNetwork, loads: Sequence[LoadInstance], config: LabelConfig,
                    workers: int = 1, keep_infeasible: bool = False) -> list:
    """Label every load; infeasible or failed instances are dropped unless
    ``keep_infeasible``."""
    jobs = [(net, ld, config) for ld in loads]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_label_job, jobs))
    else:
        out = [_label_job(j) for j in jobs]
    if not keep_infeasible:
        dropped = sum(not t.feasible for t in out)
        if dropped:
            log.info("dropped %d of %d instances", dropped, len(out))
        out = [t for t in out if t.feasible]
    return out


# ------------------------------------------------------------------ split


def split_instances(instances: Sequence, train_frac: float = 0.8, seed: int = 0):
    if not 0 < train_frac < 1:
        raise DatasetError("train_frac must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(instances))
    n_train = int(round(train_frac * len(instances)))
    train = [instances[i] for i in sorted(order[:n_train])]
    test = [instances[i] for i in sorted(order[n_train:])]
    return train, test


# ---------------------------------------------------------------- filters


@dataclass
class FilterSpec:
    kind: str                      # "convergence", "slack" or "stddev"
    alpha: Optional[float] = None
    beta_sd: Optional[float] = None

    def __post_init__(self):
        if self.kind in ("convergence", "slack"):
            if self.alpha is None or not 0 < self.alpha <= 1:
                raise DatasetError("alpha must lie in (0, 1]")
        elif self.kind == "stddev":
            if self.beta_sd is None or not self.beta_sd > 0:
                raise DatasetError("beta_sd must be positive")
        else:
            raise DatasetError(f"unknown filter kind {self.kind!r}")

    def apply(self, samples: Sequence) -> list:
        if self.kind == "convergence":
            return convergence_filter(samples, self.alpha)
        if self.kind == "slack":
            return slack_convergence_filter(samples, self.alpha)
        return stddev_filter(samples, self.beta_sd)


def _threshold(scores, alpha):
    a = np.sort(np.asarray(scores, float))
    return a[int(math.ceil(alpha * len(a) - 1e-12)) - 1]


def _rp(s):
    return s.rp if isinstance(s, RegionSample) else s.rp_score


def _rd(s):
    return s.rd if isinstance(s, RegionSample) else s.rd_score


def _sz(s):
    return s.sz if isinstance(s, RegionSample) else s.sz_score


def convergence_filter(samples: Sequence, alpha: float) -> list:
    """Keep samples whose primal and dual scores are both at or below the
    ``ceil(alpha |T|)``-th smallest primal and dual scores."""
    if not samples:
        raise DatasetError("empty training set")
    if not 0 < alpha <= 1:
        raise DatasetError("alpha must lie in (0, 1]")
    tp = _threshold([_rp(s) for s in samples], alpha)
    td = _threshold([_rd(s) for s in samples], alpha)
    return [s for s in samples if _rp(s) <= tp and _rd(s) <= td]


def slack_convergence_filter(samples: Sequence, alpha: float) -> list:
    if not samples:
        raise DatasetError("empty training set")
    if not 0 < alpha <= 1:
        raise DatasetError("alpha must lie in (0, 1]")
    if any(_sz(s) is None for s in samples):
        raise DatasetError("slack filter needs two-level instances")
    ts = _threshold([_sz(s) for s in samples], alpha)
    return [s for s in samples if _sz(s) <= ts]


def _target_vector(s) -> np.ndarray:
    t = s.targets
    parts = [t.xC, t.lam] + ([t.z, t.Lam] if t.two_level else [])
    return np.concatenate([np.asarray(p, float).ravel() for p in parts])


def stddev_filter(samples: Sequence[RegionSample], beta_sd: float) -> list:
    """Keep samples with every target component within ``beta_sd`` standard
    deviations of the component mean; zero-variance components always pass."""
    if not beta_sd > 0:
        raise DatasetError("beta_sd must be positive")
    if len(samples) < 2:
        raise DatasetError("stddev filter needs at least two samples")
    Y = np.array([_target_vector(s) for s in samples])
    m, sd = Y.mean(axis=0), Y.std(axis=0)
    ok = (np.abs(Y - m) <= beta_sd * sd) | (sd == 0)
    return [s for s, keep in zip(samples, ok.all(axis=1)) if keep]


# ---------------------------------------------------------------- storage


def _targets_doc(t: CouplingTargets) -> dict:
    doc = {}
    for q in BASE_TYPES + (SLACK_TYPES if t.two_level else ()):
        name, col = TYPE_FIELDS[q]
        doc[q] = np.asarray(getattr(t, name))[:, col].tolist()
    return doc


def _targets_from_doc(arcs, doc) -> CouplingTargets:
    two = "z_p" in doc
    arrays = {}
    for q in BASE_TYPES + (SLACK_TYPES if two else ()):
        name, col = TYPE_FIELDS[q]
        arrays.setdefault(name, np.zeros((len(arcs), 4)))[:, col] = doc[q]
    return CouplingTargets(arcs, arrays["xC"], arrays["lam"], arrays.get("z"), arrays.get("Lam"))


def save_dataset(directory, instances: Sequence[TrainingInstance], split: Optional[dict] = None,
                 meta: Optional[dict] = None) -> None:
    """``loads.jsonl``, one ``region_<k>.jsonl`` per region, ``split.json``
    and ``meta.json`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "loads.jsonl", "w") as fh:
        for t in instances:
            fh.write(json.dumps({"id": t.id, "scale": t.scale, "pd": t.pd.tolist(),
                                 "qd": t.qd.tolist(), "feasible": t.feasible,
                                 "objective": t.objective, "central_objective": t.central_objective,
                                 "iterations": t.iterations}) + "\n")
    regions = sorted({k for t in instances if t.feasible for k in t.targets})
    arcs = {}
    for k in regions:
        with open(d / f"region_{k}.jsonl", "w") as fh:
            for t in instances:
                if not t.feasible:
                    continue
                arcs[k] = [list(a) for a in t.targets[k].arcs]
                fh.write(json.dumps({"id": t.id, "targets": _targets_doc(t.targets[k]),
                                     "rp": t.rp_score, "rd": t.rd_score, "sz": t.sz_score}) + "\n")
    m = dict(meta or {})
    m.update({"regions": regions, "arcs": arcs})
    (d / "meta.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    if split is not None:
        (d / "split.json").write_text(json.dumps(split, indent=1, sort_keys=True) + "\n")


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(directory) -> list:
    d = Path(directory)
    if not (d / "loads.jsonl").exists():
        raise DatasetError(f"{d} holds no loads.jsonl")
    meta = json.loads((d / "meta.json").read_text())
    per_region = {k: {r["id"]: r for r in _read_jsonl(d / f"region_{k}.jsonl")}
                  for k in meta["regions"]}
    out = []
    for row in _read_jsonl(d / "loads.jsonl"):
        targets, rp, rd, sz = None, float("nan"), float("nan"), None
        if row["feasible"]:
            targets = {}
            for k, recs in per_region.items():
                r = recs[row["id"]]
                targets[k] = _targets_from_doc(tuple(tuple(a) for a in meta["arcs"][k]),
                                               r["targets"])
                rp, rd, sz = r["rp"], r["rd"], r["sz"]
        out.append(TrainingInstance(row["id"], row["scale"], np.array(row["pd"], float),
                                    np.array(row["qd"], float), targets, rp, rd, sz,
                                    row["feasible"], row["objective"], row["central_objective"],
                                    row.get("iterations", 0)))
    return out


def load_split(directory) -> Optional[dict]:
    p = Path(directory) / "split.json"
    return json.loads(p.read_text()) if p.exists() else None


def load_meta(directory) -> dict:
    return json.loads((Path(directory) / "meta.json").read_text())


# ------------------------------------------------------- training views


def region_training_sets(instances: Sequence[TrainingInstance], ids=None) -> dict:
    """Per region: ``(X, samples)`` where row ``i`` of ``X`` is the flattened
    load of ``samples[i]``; ``ids`` (all, or a dict per region) restricts rows."""
    feas = [t for t in instances if t.feasible]
    if not feas:
        raise DatasetError("no feasible instances")
    out = {}
    for k in sorted(feas[0].targets):
        keep = ids[k] if isinstance(ids, dict) else ids
        keep = None if keep is None else set(keep)
        rows = [t for t in feas if keep is None or t.id in keep]
        X = np.array([np.concatenate([t.pd, t.qd]) for t in rows], float).reshape(len(rows), -1)
        out[k] = (X, [t.region_sample(k) for t in rows])
    return out


def apply_filter(sets: dict, spec: FilterSpec) -> dict:
    """Filter each region's samples independently; returns retained ids per region."""
    return {k: [s.id for s in spec.apply(samples)] for k, (_, samples) in sorted(sets.items())}


def save_filter(directory, name: str, retained: dict, spec: FilterSpec) -> Path:
    p = Path(directory) / "filters" / f"{name}.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"kind": spec.kind, "alpha": spec.alpha, "beta_sd": spec.beta_sd,
                             "retained": retained}, indent=1, sort_keys=True) + "\n")
    return p


def load_filter(directory, name: str) -> dict:
    p = Path(directory) / "filters" / f"{name}.json"
    if not p.exists():
        raise DatasetError(f"no filter named {name!r} in {directory}")
    return json.loads(p.read_text())["retained"]


def dataset_path(name: str) -> Path:
    """Directory of a labeled dataset shipped with the package."""
    p = Path(__file__).parent / "data" / "datasets" / name
    if not (p / "loads.jsonl").exists():
        raise FileNotFoundError(name)
    return p

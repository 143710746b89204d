"""Per-region feedforward predictors for warm-starting ADMM.

Each region trains one two-layer ReLU network per coupling quantity type,
mapping the flattened system load ``(pd, qd)`` to that quantity on every one
of the region's coupling arcs.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .opf import CouplingTargets

log = logging.getLogger(__name__)

BASE_TYPES = ("pC", "qC", "vC", "thC", "lam_p", "lam_q", "lam_v", "lam_th")
SLACK_TYPES = ("z_p", "z_q", "z_v", "z_th", "Lam_p", "Lam_q", "Lam_v", "Lam_th")
# quantity type -> (CouplingTargets field, column)
TYPE_FIELDS = {
    "pC": ("xC", 0), "qC": ("xC", 1), "vC": ("xC", 2), "thC": ("xC", 3),
    "lam_p": ("lam", 0), "lam_q": ("lam", 1), "lam_v": ("lam", 2), "lam_th": ("lam", 3),
    "z_p": ("z", 0), "z_q": ("z", 1), "z_v": ("z", 2), "z_th": ("z", 3),
    "Lam_p": ("Lam", 0), "Lam_q": ("Lam", 1), "Lam_v": ("Lam", 2), "Lam_th": ("Lam", 3),
}
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------- complex


def split_complex(x, kind: str = "S"):
    """Rectangular parts for power-like quantities, polar parts for voltages.

    ``kind`` is ``"S"`` (power, dual of power) or ``"V"`` (voltage).
    """
    x = np.asarray(x, complex)
    if kind == "S":
        return x.real.copy(), x.imag.copy()
    if kind == "V":
        return np.abs(x), np.angle(x)
    raise ValueError("kind must be 'S' or 'V'")


def recombine(a, b, kind: str = "S"):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if kind == "S":
        return a + 1j * b
    if kind == "V":
        return a * np.exp(1j * b)
    raise ValueError("kind must be 'S' or 'V'")


# -------------------------------------------------------------------- FNN


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class Fnn:
    """``y = relu(W2 relu(W1 x + b1) + b2)`` with ``hidden = 2 * n_out``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    output_relu: bool = True

    def __post_init__(self):
        self.W1, self.b1 = np.asarray(self.W1, float), np.asarray(self.b1, float)
        self.W2, self.b2 = np.asarray(self.W2, float), np.asarray(self.b2, float)
        h, n_in = self.W1.shape
        n_out = self.W2.shape[0]
        if self.W2.shape != (n_out, h) or self.b1.shape != (h,) or self.b2.shape != (n_out,):
            raise ValueError("inconsistent layer shapes")
        if h != 2 * n_out:
            raise ValueError(f"hidden width {h} must be twice the output width {n_out}")

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, output_relu: bool = True):
        """Uniform fan-in initialization."""
        h = 2 * n_out
        a1, a2 = 1.0 / math.sqrt(n_in), 1.0 / math.sqrt(h)
        return cls(rng.uniform(-a1, a1, (h, n_in)), rng.uniform(-a1, a1, h),
                   rng.uniform(-a2, a2, (n_out, h)), rng.uniform(-a2, a2, n_out), output_relu)

    def params(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def set_params(self, ps):
        self.W1, self.b1, self.W2, self.b2 = [np.array(p, float) for p in ps]

    def copy(self):
        return Fnn(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.output_relu)

    def forward(self, x):
        x = np.asarray(x, float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {x.shape[-1]}")
        h = relu(x @ self.W1.T + self.b1)
        out = h @ self.W2.T + self.b2
        return relu(out) if self.output_relu else out

    def loss_and_grads(self, X, Y):
        """Mean squared error over all entries and its parameter gradients."""
        X, Y = np.atleast_2d(X), np.atleast_2d(Y)
        a1 = X @ self.W1.T + self.b1
        h = relu(a1)
        a2 = h @ self.W2.T + self.b2
        out = relu(a2) if self.output_relu else a2
        diff = out - Y
        loss = float(np.mean(diff * diff))
        g_out = 2.0 * diff / diff.size
        g_a2 = g_out * (a2 > 0) if self.output_relu else g_out
        gW2 = g_a2.T @ h
        gb2 = g_a2.sum(axis=0)
        g_a1 = (g_a2 @ self.W2) * (a1 > 0)
        gW1 = g_a1.T @ X
        gb1 = g_a1.sum(axis=0)
        return loss, [gW1, gb1, gW2, gb2]

    def to_dict(self) -> dict:
        return {"W1": self.W1.tolist(), "b1": self.b1.tolist(), "W2": self.W2.tolist(),
                "b2": self.b2.tolist(), "output_relu": self.output_relu}

    @classmethod
    def from_dict(cls, d):
        return cls(d["W1"], d["b1"], d["W2"], d["b2"], bool(d.get("output_relu", True)))


def forward(model: Fnn, x):
    return model.forward(x)


@dataclass
class TrainResult:
    model: Fnn
    losses: list


def train(model: Fnn, X, Y, epochs: int = 1000, batch: int = 64, lr: float = 1e-3,
          seed: int = 0, averaged: bool = True, tail: float = 0.25,
          fit_bias: bool = True) -> TrainResult:
    """Minibatch SGD on MSE; with ``averaged`` the returned weights are the
    mean of the iterates over the last ``tail`` fraction of steps.

    The per-epoch loss curve is the full-data MSE of the current iterate.
    With ``fit_bias`` the output bias is first set so the mean prediction
    matches the mean target.
    """
    X, Y = np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Y, float))
    if len(X) == 0:
        raise TrainingError("empty dataset")
    if len(X) != len(Y) or X.shape[1] != model.n_in or Y.shape[1] != model.n_out:
        raise TrainingError("dataset dimensions do not match the model")
    rng = np.random.default_rng(seed)
    n = len(X)
    steps_per_epoch = math.ceil(n / batch)
    total = epochs * steps_per_epoch
    start_avg = total - max(1, int(round(tail * total))) if averaged else total
    avg = None
    n_avg = 0
    step = 0
    losses = []
    model.set_params([p.copy() for p in model.params()])
    ps = model.params()
    if fit_bias:
        # start every output unit active at the mean target so ReLU outputs are not born dead
        pre = relu(X @ model.W1.T + model.b1) @ model.W2.T
        ps[3][:] = Y.mean(axis=0) - pre.mean(axis=0)
    for ep in range(epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * batch:(s + 1) * batch]
            loss, grads = model.loss_and_grads(X[idx], Y[idx])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss at epoch {ep}, step {s} "
                                    f"(loss={loss}, lr={lr}, batch={len(idx)})")
            for p, g in zip(ps, grads):
                p -= lr * g
            step += 1
            if step > start_avg:
                n_avg += 1
                if avg is None:
                    avg = [p.copy() for p in ps]
                else:
                    for a, p in zip(avg, ps):
                        a += (p - a) / n_avg
        full, _ = model.loss_and_grads(X, Y)
        if not math.isfinite(full):
            raise TrainingError(f"non-finite loss at end of epoch {ep}")
        losses.append(full)
    if avg is not None:
        model.set_params(avg)
    return TrainResult(model, losses)


# ----------------------------------------------------------- normalizers


@dataclass
class Scaler:
    """Affine map ``(y - shift) / scale`` applied per component."""

    shift: np.ndarray
    scale: np.ndarray

    def apply(self, y):
        return (np.asarray(y, float) - self.shift) / self.scale

    def invert(self, z):
        return np.asarray(z, float) * self.scale + self.shift

    @classmethod
    def fit(cls, Y, mode: str):
        Y = np.atleast_2d(np.asarray(Y, float))
        sd = Y.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        if mode == "zscore":
            return cls(Y.mean(axis=0), sd)
        if mode == "minshift":
            return cls(Y.min(axis=0), sd)
        if mode == "none":
            return cls(np.zeros(Y.shape[1]), np.ones(Y.shape[1]))
        raise ValueError(f"unknown normalization {mode!r}")

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["shift"], float), np.array(d["scale"], float))


# ------------------------------------------------------------------ bank


def load_features(pd, qd) -> np.ndarray:
    return np.concatenate([np.asarray(pd, float).ravel(), np.asarray(qd, float).ravel()])


def target_matrix(targets: Sequence[CouplingTargets], qtype: str) -> np.ndarray:
    name, col = TYPE_FIELDS[qtype]
    return np.array([getattr(t, name)[:, col] for t in targets], float)


@dataclass
class RegionPredictor:
    region: str
    arcs: tuple
    x_scaler: Scaler
    models: dict = field(default_factory=dict)        # qtype -> Fnn
    y_scalers: dict = field(default_factory=dict)     # qtype -> Scaler
    curves: dict = field(default_factory=dict)        # qtype -> list of losses

    def predict(self, x) -> CouplingTargets:
        xs = self.x_scaler.apply(x)
        n = len(self.arcs)
        arrays = {}
        for qtype, model in self.models.items():
            name, col = TYPE_FIELDS[qtype]
            y = self.y_scalers[qtype].invert(model.forward(xs))
            arrays.setdefault(name, np.zeros((n, 4)))[:, col] = y
        two = "z" in arrays
        if any(q not in self.models for q in BASE_TYPES + (SLACK_TYPES if two else ())):
            raise TrainingError(f"region {self.region}: bank is missing trained models")
        return CouplingTargets(self.arcs, arrays["xC"], arrays["lam"], arrays.get("z"),
                               arrays.get("Lam"))


@dataclass
class PredictorBank:
    regions: dict                      # region -> RegionPredictor
    n_in: int
    two_level: bool = False
    normalization: str = "minshift"

    @property
    def qtypes(self):
        return BASE_TYPES + (SLACK_TYPES if self.two_level else ())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"version": FORMAT_VERSION, "n_in": self.n_in, "two_level": self.two_level,
                    "normalization": self.normalization, "regions": {}}
        for k, rp in sorted(self.regions.items()):
            files = {}
            for q, m in rp.models.items():
                fname = f"{k}__{q}.json"
                (d / fname).write_text(json.dumps(
                    {"version": FORMAT_VERSION, "region": k, "qtype": q, "model": m.to_dict(),
                     "y_scaler": rp.y_scalers[q].to_dict()}) + "\n")
                files[q] = fname
                if rp.curves.get(q):
                    (d / f"{k}__{q}_curve.csv").write_text(
                        "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(rp.curves[q])))
            manifest["regions"][k] = {"arcs": [list(a) for a in rp.arcs],
                                      "x_scaler": rp.x_scaler.to_dict(), "models": files}
        (d / "bank.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "PredictorBank":
        d = Path(directory)
        man = json.loads((d / "bank.json").read_text())
        if man.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported bank format {man.get('version')!r}")
        regions = {}
        for k, info in man["regions"].items():
            rp = RegionPredictor(k, tuple(tuple(a) for a in info["arcs"]),
                                 Scaler.from_dict(info["x_scaler"]))
            for q, fname in info["models"].items():
                doc = json.loads((d / fname).read_text())
                rp.models[q] = Fnn.from_dict(doc["model"])
                rp.y_scalers[q] = Scaler.from_dict(doc["y_scaler"])
            regions[k] = rp
        return cls(regions, int(man["n_in"]), bool(man["two_level"]), man["normalization"])


def train_region(region: str, arcs, X, targets: Sequence[CouplingTargets], qtypes,
                 epochs=1000, batch=64, lr=1e-3, seed=0, normalization="minshift",
                 averaged=True, workers=1) -> RegionPredictor:
    """Train every quantity model of one region from that region's targets only."""
    X = np.atleast_2d(np.asarray(X, float))
    if len(X) != len(targets) or len(X) == 0:
        raise TrainingError(f"region {region}: need one target per input row")
    x_scaler = Scaler.fit(X, "zscore")
    Xs = x_scaler.apply(X)
    rp = RegionPredictor(region, tuple(arcs), x_scaler)
    output_relu = normalization != "none"

    def fit(i_q):
        i, q = i_q
        Y = target_matrix(targets, q)
        ys = Scaler.fit(Y, normalization)
        rng = np.random.default_rng([seed, i])
        model = Fnn.init(X.shape[1], Y.shape[1], rng, output_relu=output_relu)
        res = train(model, Xs, ys.apply(Y), epochs, batch, lr, seed=int(rng.integers(2**31)),
                    averaged=averaged)
        return q, res.model, ys, res.losses

    jobs = list(enumerate(qtypes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(fit, jobs))
    else:
        out = [fit(j) for j in jobs]
    for q, model, ys, losses in out:
        rp.models[q] = model
        rp.y_scalers[q] = ys
        rp.curves[q] = losses
    return rp


def train_bank(X, targets_by_region: dict, arcs_by_region: dict, two_level=False, epochs=1000,
               batch=64, lr=1e-3, seed=0, normalization="minshift", averaged=True,
               workers=1) -> PredictorBank:
    """Train a bank; region ``k``'s models see only ``targets_by_region[k]``.

    ``X`` is either one load matrix shared by all regions or a dict of
    per-region matrices (regions may keep different filtered subsets).
    """
    qtypes = BASE_TYPES + (SLACK_TYPES if two_level else ())
    regions = {}
    n_in = None
    for i, k in enumerate(sorted(arcs_by_region)):
        Xk = np.atleast_2d(np.asarray(X[k] if isinstance(X, dict) else X, float))
        if n_in is not None and Xk.shape[1] != n_in:
            raise TrainingError("all regions must share the load feature width")
        n_in = Xk.shape[1]
        regions[k] = train_region(k, arcs_by_region[k], Xk, targets_by_region[k], qtypes, epochs,
                                  batch, lr, seed=seed * 1000 + i, normalization=normalization,
                                  averaged=averaged, workers=workers)
    if n_in is None:
        raise TrainingError("no regions to train")
    return PredictorBank(regions, n_in, two_level, normalization)


def predict_warmstart(bank: PredictorBank, pd, qd) -> dict:
    x = load_features(pd, qd)
    if x.shape[0] != bank.n_in:
        raise ValueError(f"load vector has {x.shape[0]} features, bank expects {bank.n_in}")
    if not bank.regions:
        raise TrainingError("bank has no trained regions")
    return {k: rp.predict(x) for k, rp in sorted(bank.regions.items())}

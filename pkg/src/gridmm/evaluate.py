"""Metrics, the baseline protocol and report emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import LabelConfig, TrainingInstance, run_engine
from .grid import PowerNetwork, partition
from .ml import BASE_TYPES, SLACK_TYPES, TYPE_FIELDS, PredictorBank, predict_warmstart
from .admm import warm_start
from .twolevel import two_level_warm_start

log = logging.getLogger(__name__)

BASELINES = ("N-ADMM", "P-ADMM", "ML-ADMM")
DEFAULT_BUDGETS = (5, 50, 100, 150, 200, 250, 300, 500)
ROW_COLUMNS = ("instance", "baseline", "budget", "status", "objective", "objective_gap",
               "optimality_gap", "rp_inf", "rd_inf")
SUMMARY_COLUMNS = ("baseline", "budget", "count", "mean_objective_gap", "mean_abs_objective_gap",
                   "mean_optimality_gap", "mean_rp_inf", "mean_rd_inf", "failures")


# ---------------------------------------------------------------- metrics


def objective_gap(run: float, reference: float) -> float:
    """Signed percentage of ``run`` above ``reference``."""
    if reference == 0:
        raise ZeroDivisionError("reference objective is zero")
    return 100.0 * (run - reference) / reference


def _quantity(t, qtype) -> np.ndarray:
    name, col = TYPE_FIELDS[qtype]
    return np.asarray(getattr(t, name), float)[:, col]


def prediction_error_from(predictions: Sequence[dict], truths: Sequence[dict],
                          qtypes: Sequence[str] = BASE_TYPES) -> dict:
    """Mean relative L1 error in percent per quantity type.

    Averaged over instances within each region, then over regions.
    Instances whose ground truth has zero L1 norm are skipped for that
    region and quantity.
    """
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        raise ValueError("empty test set")
    regions = sorted(truths[0])
    out = {}
    for q in qtypes:
        per_region = []
        for k in regions:
            errs = []
            for pred, true in zip(predictions, truths):
                x = _quantity(true[k], q)
                den = np.sum(np.abs(x))
                if den == 0:
                    log.warning("zero ground truth for %s in region %s; skipped", q, k)
                    continue
                errs.append(np.sum(np.abs(_quantity(pred[k], q) - x)) / den)
            if errs:
                per_region.append(float(np.mean(errs)))
        out[q] = 100.0 * float(np.mean(per_region)) if per_region else float("nan")
    return out


def prediction_error(bank: PredictorBank, instances: Sequence[TrainingInstance]) -> dict:
    feas = [t for t in instances if t.feasible]
    preds = [predict_warmstart(bank, t.pd, t.qd) for t in feas]
    return prediction_error_from(preds, [t.targets for t in feas], bank.qtypes)


# --------------------------------------------------------------- baselines


@dataclass
class EvalReport:
    network: str = ""
    filter: str = "none"
    rows: list = field(default_factory=list)
    prediction_errors: dict = field(default_factory=dict)

    def summary(self) -> list:
        """One row per (baseline, budget) in a fixed order."""
        out = []
        keys = sorted({(BASELINES.index(r["baseline"]), r["budget"]) for r in self.rows})
        for bi, budget in keys:
            name = BASELINES[bi]
            rows = [r for r in self.rows if r["baseline"] == name and r["budget"] == budget]
            ok = [r for r in rows if r["status"] != "failure"]

            def mean(col, f=lambda v: v):
                vals = [f(r[col]) for r in ok if math.isfinite(r[col])]
                return float(np.mean(vals)) if vals else float("nan")

            out.append({"baseline": name, "budget": budget, "count": len(ok),
                        "mean_objective_gap": mean("objective_gap"),
                        "mean_abs_objective_gap": mean("objective_gap", abs),
                        "mean_optimality_gap": mean("optimality_gap"),
                        "mean_rp_inf": mean("rp_inf"), "mean_rd_inf": mean("rd_inf"),
                        "failures": len(rows) - len(ok)})
        return out

    def to_dict(self) -> dict:
        return {"network": self.network, "filter": self.filter, "rows": self.rows,
                "prediction_errors": self.prediction_errors}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("network", ""), d.get("filter", "none"), list(d.get("rows", [])),
                   dict(d.get("prediction_errors", {})))


def _rows_from_trace(inst, name, trace, budgets):
    rows = []
    by_iter = {r.iter: r for r in trace.records}
    for b in budgets:
        rec = by_iter.get(b)
        if rec is None:
            rows.append({"instance": inst.id, "baseline": name, "budget": b, "status": "failure",
                         "objective": float("nan"), "objective_gap": float("nan"),
                         "optimality_gap": float("nan"), "rp_inf": float("nan"),
                         "rd_inf": float("nan")})
            continue
        rows.append({"instance": inst.id, "baseline": name, "budget": b,
                     "status": "unconverged" if rec.unconverged else "ok",
                     "objective": rec.objective,
                     "objective_gap": objective_gap(rec.objective, inst.objective),
                     "optimality_gap": objective_gap(rec.objective, inst.central_objective),
                     "rp_inf": rec.rp_inf, "rd_inf": rec.rd_inf})
    return rows


def initial_state(net: PowerNetwork, predictions: dict, config: LabelConfig):
    views = partition(net)
    if config.two_level:
        return two_level_warm_start(views, predictions, config.rho)
    return warm_start(views, predictions, config.rho)


def evaluate_instance(net: PowerNetwork, inst: TrainingInstance, bank: Optional[PredictorBank],
                      budgets: Sequence[int], config: LabelConfig,
                      baselines: Sequence[str] = BASELINES) -> list:
    """All baseline runs for one labeled instance; failures become rows, not errors."""
    t_max = max(budgets)
    run_cfg = LabelConfig(config.engine, config.rho, t_max, None, config.norm)
    rows = []
    for name in baselines:
        try:
            if name == "N-ADMM":
                init = None
            elif name == "P-ADMM":
                init = initial_state(net, inst.targets, run_cfg)
            elif name == "ML-ADMM":
                if bank is None:
                    continue
                init = initial_state(net, predict_warmstart(bank, inst.pd, inst.qd), run_cfg)
            else:
                raise ValueError(f"unknown baseline {name!r}")
            trace = run_engine(net, inst.pd, inst.qd, run_cfg, init=init, t_max=t_max)
        except (ValueError, KeyError, ArithmeticError) as exc:
            log.warning("instance %s, %s: %s", inst.id, name, exc)
            trace = None
        if trace is None or trace.status == "failure":
            rows.extend(_rows_from_trace(inst, name, _Empty(), budgets))
        else:
            rows.extend(_rows_from_trace(inst, name, trace, budgets))
    return rows


class _Empty:
    records = ()


def _eval_job(args):
    return evaluate_instance(*args)


def run_baselines(net: PowerNetwork, instances: Sequence[TrainingInstance],
                  bank: Optional[PredictorBank] = None, budgets: Sequence[int] = DEFAULT_BUDGETS,
                  config: Optional[LabelConfig] = None, workers: int = 1,
                  baselines: Sequence[str] = BASELINES, filter_name: str = "none") -> EvalReport:
    """N-ADMM, P-ADMM and ML-ADMM runs per labeled instance; gaps are against
    the instance's long-run objective and the centralized optimum."""
    config = config or LabelConfig()
    budgets = sorted({int(b) for b in budgets})
    if not budgets or budgets[0] < 1:
        raise ValueError("budgets must be positive integers")
    feas = [t for t in instances if t.feasible]
    jobs = [(net, t, bank, budgets, config, tuple(baselines)) for t in feas]
    if workers > 1 and jobs:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_eval_job, jobs))
    else:
        parts = [_eval_job(j) for j in jobs]
    report = EvalReport(net.name, filter_name, [r for p in parts for r in p])
    if bank is not None and feas:
        report.prediction_errors = prediction_error(bank, feas)
    return report


# ------------------------------------------------------------------ output


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _md(columns, rows) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r[c]
            cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, directory, fmt: str = "csv") -> list:
    """Write ``rows``, ``summary`` and ``prediction_error`` tables; returns paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pe_rows = [{"quantity": q, "error_pct": report.prediction_errors[q]}
               for q in BASE_TYPES + SLACK_TYPES if q in report.prediction_errors]
    tables = [("rows", ROW_COLUMNS, report.rows), ("summary", SUMMARY_COLUMNS, report.summary()),
              ("prediction_error", ("quantity", "error_pct"), pe_rows)]
    paths = []
    if fmt == "csv":
        for name, cols, rows in tables:
            p = d / f"{name}.csv"
            p.write_text(_csv(cols, rows))
            paths.append(p)
    elif fmt in ("md", "markdown"):
        parts = [f"# Evaluation: {report.network or 'network'} (filter {report.filter})\n"]
        for name, cols, rows in tables[::-1]:
            parts.append(f"\n## {name.replace('_', ' ')}\n\n" + _md(cols, rows))
        p = d / "report.md"
        p.write_text("".join(parts))
        paths.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return paths


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))

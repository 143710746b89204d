"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 solver or training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .agents import privacy_audit, run_decentralized
from .evaluate import DEFAULT_BUDGETS, emit_report, load_report, run_baselines, save_report
from .grid import NetworkError, load_fixture, load_network
from .ml import PredictorBank, TrainingError, predict_warmstart, train_bank
from .opf import ONE_LEVEL, TWO_LEVEL

log = logging.getLogger("gridmm")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2


class SolverFailure(RuntimeError):
    pass


def _engine(name: str) -> str:
    return {"one": ONE_LEVEL, "two": TWO_LEVEL, ONE_LEVEL: ONE_LEVEL, TWO_LEVEL: TWO_LEVEL}[name]


def _net(spec: str):
    """A network file path, or the name of a bundled fixture."""
    p = Path(spec)
    return load_network(p) if p.exists() else load_fixture(spec)


def _write_loads(path, loads):
    with open(path, "w") as fh:
        for ld in loads:
            fh.write(json.dumps({"id": ld.id, "scale": ld.scale, "pd": ld.pd.tolist(),
                                 "qd": ld.qd.tolist()}) + "\n")


def _read_loads(path):
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [D.LoadInstance(r["id"], r["scale"], np.array(r["pd"], float), np.array(r["qd"], float))
            for r in rows]


# --------------------------------------------------------------- commands


def cmd_gen(a):
    net = _net(a.net)
    loads = D.generate_instances(net, a.lo, a.hi, a.step, a.noise, a.seed, a.repeats)
    _write_loads(a.out, loads)
    print(f"wrote {len(loads)} load instances to {a.out}")


def cmd_label(a):
    net = _net(a.net)
    cfg = D.LabelConfig(_engine(a.engine), a.rho, a.iters, a.eps, a.norm)
    loads = _read_loads(a.loads)
    inst = D.label_instances(net, loads, cfg, workers=a.workers, keep_infeasible=True)
    feas = [t for t in inst if t.feasible]
    if not feas:
        raise SolverFailure("no instance could be labeled")
    train, test = D.split_instances(feas, a.train_frac, a.seed)
    D.save_dataset(a.out, inst, {"train": [t.id for t in train], "test": [t.id for t in test]},
                   meta={"network": a.net, "engine": cfg.engine, "rho": cfg.rho,
                         "iters": cfg.iters, "eps": cfg.eps, "norm": cfg.norm})
    print(f"labeled {len(feas)} of {len(inst)} instances "
          f"({len(train)} train / {len(test)} test) into {a.out}")


def cmd_filter(a):
    kind = {"c": "convergence", "s": "slack", "d": "stddev"}.get(a.kind, a.kind)
    spec = D.FilterSpec(kind, a.alpha, a.beta)
    inst = D.load_dataset(a.data)
    split = D.load_split(a.data) or {}
    sets = D.region_training_sets(inst, split.get("train"))
    retained = D.apply_filter(sets, spec)
    name = a.name or (f"{a.kind}{a.alpha}" if a.alpha is not None else f"{a.kind}{a.beta}")
    p = D.save_filter(a.data, name, retained, spec)
    counts = ", ".join(f"{k}: {len(v)}/{len(sets[k][1])}" for k, v in retained.items())
    print(f"filter {name} retained {counts}; wrote {p}")


def cmd_train(a):
    inst = D.load_dataset(a.data)
    meta = D.load_meta(a.data)
    split = D.load_split(a.data) or {}
    ids = D.load_filter(a.data, a.filter) if a.filter else split.get("train")
    sets = D.region_training_sets(inst, ids)
    two = meta.get("engine") == TWO_LEVEL
    arcs = {k: sets[k][1][0].targets.arcs for k in sets}
    bank = train_bank({k: X for k, (X, _) in sets.items()},
                      {k: [s.targets for s in samples] for k, (_, samples) in sets.items()},
                      arcs, two, a.epochs, a.batch, a.lr, a.seed, a.normalization,
                      averaged=not a.plain_sgd, workers=a.workers)
    bank.save(a.out)
    print(f"trained {len(bank.qtypes)} models for each of {len(bank.regions)} regions into {a.out}")


def cmd_solve(a):
    net = _net(a.net)
    engine = _engine(a.engine)
    pd = qd = None
    target = None
    if a.data and a.instance:
        inst = {t.id: t for t in D.load_dataset(a.data)}
        if a.instance not in inst:
            raise ValueError(f"instance {a.instance!r} not in {a.data}")
        target = inst[a.instance]
        pd, qd = target.pd, target.qd
    if a.init == "cold":
        init = "cold"
    elif a.init == "warm":
        if not a.bank:
            raise ValueError("--init warm needs --bank")
        bank = PredictorBank.load(a.bank)
        init = predict_warmstart(bank, net.nominal_pd if pd is None else pd,
                                 net.nominal_qd if qd is None else qd)
    else:
        if target is None or not target.feasible:
            raise ValueError("--init oracle needs --data and a labeled --instance")
        init = target.targets
    trace = run_decentralized(net, engine, init, a.iters, a.workers, pd, qd, rho0=a.rho,
                              log_path=a.log)
    if a.out:
        trace.to_csv(a.out, deterministic=a.deterministic)
    audit = privacy_audit(trace.messages, net)
    if trace.records:
        r = trace.last
        print(f"iterations {r.iter} objective {r.objective:.8g} rp_inf {r.rp_inf:.3e} "
              f"rd_inf {r.rd_inf:.3e} privacy {'ok' if audit else 'VIOLATION'}")
    if trace.status == "failure":
        raise SolverFailure(trace.error)
    if not audit:
        why = "; ".join(audit.reasons[m] for m in audit.offending[:3])
        raise SolverFailure(f"privacy audit failed: {why}")


def cmd_eval(a):
    net = _net(a.net)
    meta = D.load_meta(a.data)
    inst = D.load_dataset(a.data)
    split = D.load_split(a.data)
    test_ids = set(split["test"]) if split else {t.id for t in inst}
    test = [t for t in inst if t.id in test_ids and t.feasible]
    if a.limit:
        test = test[:a.limit]
    bank = PredictorBank.load(a.bank) if a.bank else None
    cfg = D.LabelConfig(meta.get("engine", ONE_LEVEL), meta.get("rho"))
    budgets = [int(b) for b in a.budgets.split(",") if b.strip()]
    report = run_baselines(net, test, bank, budgets, cfg, workers=a.workers,
                           filter_name=a.filter_name)
    save_report(report, a.out)
    print(f"evaluated {len(test)} instances at budgets {budgets}; wrote {a.out}")


def cmd_report(a):
    report = load_report(a.input)
    for p in emit_report(report, a.out, a.format):
        print(f"wrote {p}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridmm", description="Learning-warm-started ADMM for AC-OPF")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate perturbed load instances")
    p.add_argument("--net", required=True)
    p.add_argument("--lo", type=float, default=0.8)
    p.add_argument("--hi", type=float, default=1.22)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="loads.jsonl")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", help="label loads with long ADMM runs")
    p.add_argument("--net", required=True)
    p.add_argument("--loads", default="loads.jsonl")
    p.add_argument("--engine", choices=("one", "two"), default="one")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--eps", type=float, default=None, help="stop early below this residual")
    p.add_argument("--norm", choices=("inf", "l2"), default="inf")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="dataset")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("filter", help="filter the training split per region")
    p.add_argument("--data", default="dataset")
    p.add_argument("--kind", choices=("c", "s", "d"), required=True,
                   help="c: convergence, s: slack score, d: standard deviation")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="train the per-region predictor bank")
    p.add_argument("--data", default="dataset")
    p.add_argument("--filter", default=None, help="name of a saved filter")
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--normalization", choices=("minshift", "zscore", "none"), default="minshift")
    p.add_argument("--plain-sgd", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bank")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="run decentralized ADMM with one agent per region")
    p.add_argument("--net", required=True)
    p.add_argument("--engine", choices=("one", "two"), default="one")
    p.add_argument("--init", choices=("cold", "warm", "oracle"), default="cold")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--bank", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--instance", default=None)
    p.add_argument("--out", default=None, help="trace CSV")
    p.add_argument("--deterministic", action="store_true", help="blank timing columns")
    p.add_argument("--log", default=None, help="message log (JSON lines)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="run the baselines on the test split")
    p.add_argument("--net", required=True)
    p.add_argument("--data", default="dataset")
    p.add_argument("--bank", default=None)
    p.add_argument("--budgets", default=",".join(map(str, DEFAULT_BUDGETS)))
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N test instances")
    p.add_argument("--filter-name", default="none")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit CSV or markdown tables from an evaluation")
    p.add_argument("--in", dest="input", default="report.json")
    p.add_argument("--format", choices=("csv", "md"), default="csv")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (SolverFailure, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError, NetworkError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import math

import numpy as np
import pytest

from gridmm import evaluate, ml
from gridmm.evaluate import EvalReport
from gridmm.opf import CouplingTargets


def _truth(rng, regions=("A", "B"), n=3):
    return {k: CouplingTargets(tuple((i, 0) for i in range(n)), rng.uniform(0.5, 2.0, (n, 4)),
                               rng.uniform(-2.0, 2.0, (n, 4))) for k in regions}


def _scaled(truth, f):
    return {k: CouplingTargets(t.arcs, f * t.xC, f * t.lam) for k, t in truth.items()}


def test_prediction_error_examples(rng):
    truths = [_truth(rng) for _ in range(4)]
    exact = evaluate.prediction_error_from(truths, truths)
    assert all(v == 0.0 for v in exact.values()) and set(exact) == set(ml.BASE_TYPES)
    doubled = evaluate.prediction_error_from([_scaled(t, 2.0) for t in truths], truths)
    assert all(v == pytest.approx(100.0) for v in doubled.values())


def test_prediction_error_direct_summation(rng):
    truths = [_truth(rng) for _ in range(5)]
    preds = [_truth(rng) for _ in range(5)]
    got = evaluate.prediction_error_from(preds, truths)
    for q, (name, col) in ml.TYPE_FIELDS.items():
        if q not in ml.BASE_TYPES:
            continue
        total = 0.0
        for k in ("A", "B"):
            inner = 0.0
            for p, t in zip(preds, truths):
                x, xh = getattr(t[k], name)[:, col], getattr(p[k], name)[:, col]
                inner += sum(abs(a - b) for a, b in zip(xh, x)) / sum(abs(a) for a in x)
            total += inner / len(truths)
        assert got[q] == pytest.approx(100.0 * total / 2, rel=1e-12)


def test_prediction_error_skips_zero_truth(rng, caplog):
    truths = [_truth(rng) for _ in range(2)]
    truths[0]["A"].xC[:, 0] = 0.0
    preds = [_scaled(t, 1.5) for t in truths]
    got = evaluate.prediction_error_from(preds, truths)
    assert got["pC"] == pytest.approx(50.0)
    assert "zero ground truth" in caplog.text
    with pytest.raises(ValueError):
        evaluate.prediction_error_from([], [])


def test_objective_gap_examples():
    assert evaluate.objective_gap(3.2, 3.2) == 0.0
    assert evaluate.objective_gap(1.0, 2.0) == -50.0
    assert evaluate.objective_gap(-3.0, -3.0) == 0.0
    with pytest.raises(ZeroDivisionError):
        evaluate.objective_gap(1.0, 0.0)


# ----------------------------------------------------------- baselines


class _OracleBank:
    """Stands in for a trained bank; predictions are patched to ground truth."""
    qtypes = ml.BASE_TYPES


@pytest.fixture
def oracle(monkeypatch, dataset):
    truth = {t.id: t.targets for t in dataset["all"] if t.feasible}
    by_load = {t.pd.tobytes(): t.id for t in dataset["all"]}
    monkeypatch.setattr(evaluate, "predict_warmstart",
                        lambda bank, pd, qd: truth[by_load[np.asarray(pd).tobytes()]])
    return _OracleBank()


def test_ml_with_oracle_predictions_equals_p_admm(case6, dataset, oracle):
    inst = dataset["test"][0]
    rows = evaluate.evaluate_instance(case6, inst, oracle, [5, 20], evaluate.LabelConfig())
    by = {(r["baseline"], r["budget"]): r for r in rows}
    for b in (5, 20):
        p, m = dict(by["P-ADMM", b]), dict(by["ML-ADMM", b])
        p.pop("baseline"), m.pop("baseline")
        assert p == m
    assert len(rows) == 3 * 2


def test_report_shapes_and_determinism(tmp_path, case6, dataset, oracle):
    insts = dataset["test"][:1]
    rep = evaluate.run_baselines(case6, insts, oracle, budgets=[5, 10], filter_name="c50")
    assert len(rep.rows) == 2 * 3
    assert {(r["baseline"], r["budget"]) for r in rep.rows} == {(b, n) for b in evaluate.BASELINES
                                                               for n in (5, 10)}
    assert all(v == 0.0 for v in rep.prediction_errors.values())
    summ = rep.summary()
    assert [(s["baseline"], s["budget"]) for s in summ] == [(b, n) for b in evaluate.BASELINES
                                                           for n in (5, 10)]
    assert all(s["count"] == 1 for s in summ)
    a = evaluate.emit_report(rep, tmp_path / "a")
    evaluate.save_report(rep, tmp_path / "rep.json")
    b = evaluate.emit_report(evaluate.load_report(tmp_path / "rep.json"), tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    header = (tmp_path / "a" / "rows.csv").read_text().splitlines()[0]
    assert header == ",".join(evaluate.ROW_COLUMNS)
    md = evaluate.emit_report(rep, tmp_path / "md", "md")[0].read_text()
    assert "| baseline |" in md and "N-ADMM" in md


def test_empty_report_is_header_only(tmp_path):
    paths = evaluate.emit_report(EvalReport(), tmp_path)
    for p in paths:
        assert len(p.read_text().splitlines()) == 1
    with pytest.raises(ValueError):
        evaluate.emit_report(EvalReport(), tmp_path, "xlsx")


def test_failed_run_recorded_not_fatal(case6, dataset, monkeypatch):
    inst = dataset["test"][0]

    def boom(*a, **kw):
        raise ValueError("synthetic")

    monkeypatch.setattr(evaluate, "run_engine", boom)
    rows = evaluate.evaluate_instance(case6, inst, None, [5], evaluate.LabelConfig())
    assert [r["status"] for r in rows] == ["failure", "failure"]
    rep = EvalReport(rows=rows)
    assert all(s["failures"] == 1 and s["count"] == 0 for s in rep.summary())
    assert all(math.isnan(s["mean_objective_gap"]) for s in rep.summary())


def test_budget_validation(case6, dataset):
    with pytest.raises(ValueError):
        evaluate.run_baselines(case6, dataset["test"][:1], budgets=[0])


def test_prediction_error_with_trained_bank(bank, dataset):
    errs = evaluate.prediction_error(bank, dataset["test"])
    assert set(errs) == set(ml.BASE_TYPES)
    assert all(math.isfinite(v) and v >= 0 for v in errs.values())

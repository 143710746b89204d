import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridmm import admm, data, grid, ml
from gridmm.ml import Fnn, PredictorBank, TrainingError
from gridmm.opf import CouplingTargets


# ---------------------------------------------------------------- complex


def test_split_examples():
    assert ml.split_complex(3 + 4j, "S") == (3.0, 4.0)
    m, a = ml.split_complex(1 + 0j, "V")
    assert (m, a) == (1.0, 0.0)
    with pytest.raises(ValueError):
        ml.split_complex(1j, "X")


@given(st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=20))
def test_split_round_trip(values):
    x = np.array(values)
    for kind in ("S", "V"):
        np.testing.assert_allclose(ml.recombine(*ml.split_complex(x, kind), kind), x,
                                   rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))


# -------------------------------------------------------------------- FNN


def _identity(n):
    # hidden = 2n: identity on the first n hidden units, zero elsewhere
    W1 = np.vstack([np.eye(n), np.zeros((n, n))])
    W2 = np.hstack([np.eye(n), np.zeros((n, n))])
    return Fnn(W1, np.zeros(2 * n), W2, np.zeros(n))


def test_forward_identity_examples():
    m = _identity(3)
    np.testing.assert_array_equal(m.forward([0.5, 2.0, 0.0]), [0.5, 2.0, 0.0])
    np.testing.assert_array_equal(m.forward([-1.0, 2.0, -3.0]), [0.0, 2.0, 0.0])
    with pytest.raises(ValueError):
        m.forward([1.0, 2.0])


def _scalar_forward(m, x):
    h = []
    for i in range(m.W1.shape[0]):
        s = m.b1[i]
        for j in range(len(x)):
            s += m.W1[i, j] * x[j]
        h.append(max(s, 0.0))
    out = []
    for i in range(m.W2.shape[0]):
        s = m.b2[i]
        for j in range(len(h)):
            s += m.W2[i, j] * h[j]
        out.append(max(s, 0.0) if m.output_relu else s)
    return np.array(out)


def test_forward_matches_scalar_oracle(rng):
    for _ in range(20):
        n_in, n_out = rng.integers(1, 8, size=2)
        m = Fnn.init(int(n_in), int(n_out), rng, output_relu=bool(rng.integers(2)))
        m.b2 += 0.3
        x = rng.normal(size=n_in)
        np.testing.assert_allclose(m.forward(x), _scalar_forward(m, x), rtol=0, atol=1e-12)


def test_hidden_width_enforced(rng):
    with pytest.raises(ValueError, match="twice"):
        Fnn(rng.normal(size=(3, 2)), np.zeros(3), rng.normal(size=(2, 3)), np.zeros(2))
    m = Fnn.init(5, 4, rng)
    assert m.W1.shape == (8, 5)


def test_gradient_against_finite_differences(rng):
    worst = 0.0
    h = 1e-5
    for _ in range(50):
        m = Fnn.init(4, 3, rng, output_relu=bool(rng.integers(2)))
        m.b2 += 0.5     # keep most outputs away from the ReLU kink
        X, Y = rng.normal(size=(1, 4)), rng.normal(size=(1, 3))
        _, grads = m.loss_and_grads(X, Y)
        for p, g in zip(m.params(), grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up, _ = m.loss_and_grads(X, Y)
                flat[i] = old - h
                down, _ = m.loss_and_grads(X, Y)
                flat[i] = old
                fd = (up - down) / (2 * h)
                if max(abs(fd), abs(gflat[i])) > 1e-6:
                    worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i])))
    assert worst < 1e-4


# ------------------------------------------------------------------ train


def test_memorization(rng):
    m = Fnn.init(6, 3, rng)
    x, y = rng.normal(size=(1, 6)), np.array([[0.2, 1.5, 0.7]])
    res = ml.train(m, x, y, epochs=2000, batch=1, lr=1e-2)
    assert res.losses[-1] < 1e-6
    assert len(res.losses) == 2000


def test_linear_data_near_least_squares(rng):
    n_in, n_out = 6, 3
    M = rng.normal(size=(n_out, n_in))
    X = rng.normal(size=(300, n_in))
    Y = X @ M.T + 0.1 * rng.normal(size=(300, n_out))
    Xtr, Ytr, Xva, Yva = X[:200], Y[:200], X[200:], Y[200:]
    coef, *_ = np.linalg.lstsq(np.c_[Xtr, np.ones(200)], Ytr, rcond=None)
    ols = np.mean((np.c_[Xva, np.ones(100)] @ coef - Yva) ** 2)
    m = Fnn.init(n_in, n_out, np.random.default_rng(1), output_relu=False)
    ml.train(m, Xtr, Ytr, epochs=1000, batch=16, lr=1e-2)
    net = np.mean((m.forward(Xva) - Yva) ** 2)
    assert net < 2 * ols


def test_training_is_deterministic(rng):
    X, Y = rng.normal(size=(40, 3)), rng.uniform(size=(40, 2))
    a = ml.train(Fnn.init(3, 2, np.random.default_rng(5)), X, Y, epochs=30, seed=9).model
    b = ml.train(Fnn.init(3, 2, np.random.default_rng(5)), X, Y, epochs=30, seed=9).model
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_plain_sgd_differs_from_averaged(rng):
    X, Y = rng.normal(size=(40, 3)), rng.uniform(size=(40, 2))
    a = ml.train(Fnn.init(3, 2, np.random.default_rng(5)), X, Y, epochs=30, averaged=False).model
    b = ml.train(Fnn.init(3, 2, np.random.default_rng(5)), X, Y, epochs=30, averaged=True).model
    assert not np.array_equal(a.W1, b.W1)


def test_nan_loss_aborts(rng):
    X, Y = rng.normal(size=(10, 3)), rng.uniform(size=(10, 2))
    with pytest.raises(TrainingError, match="non-finite"):
        ml.train(Fnn.init(3, 2, rng), X, Y * np.nan, epochs=2)


def test_dimension_errors(rng):
    with pytest.raises(TrainingError):
        ml.train(Fnn.init(3, 2, rng), np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(TrainingError):
        ml.train(Fnn.init(3, 2, rng), np.zeros((4, 3)), np.zeros((4, 5)))


def test_scaler_modes(rng):
    Y = rng.normal(size=(30, 3))
    for mode in ("zscore", "minshift", "none"):
        s = ml.Scaler.fit(Y, mode)
        np.testing.assert_allclose(s.invert(s.apply(Y)), Y, atol=1e-12)
    assert np.all(ml.Scaler.fit(Y, "minshift").apply(Y) >= 0)
    with pytest.raises(ValueError):
        ml.Scaler.fit(Y, "rank")


# ------------------------------------------------------------------- bank


def _toy_targets(rng, n, arcs, two_level=False):
    out = []
    for _ in range(n):
        parts = [rng.normal(size=(len(arcs), 4)) for _ in range(4 if two_level else 2)]
        out.append(CouplingTargets(arcs, *parts))
    return out


class _TaintList(list):
    """List that records which region was being trained whenever it is read."""

    def __init__(self, owner, items, log, current):
        super().__init__(items)
        self.owner, self.log, self.current = owner, log, current

    def _note(self):
        self.log.append((self.current[0], self.owner))

    def __getitem__(self, i):
        self._note()
        return super().__getitem__(i)

    def __iter__(self):
        self._note()
        return super().__iter__()


def test_training_reads_only_own_region(rng, monkeypatch):
    arcs = {"A": ((0, 0), (1, 1)), "B": ((0, 1),)}
    X = rng.normal(size=(12, 4))
    log, current = [], [None]
    targets = {k: _TaintList(k, _toy_targets(rng, 12, a), log, current) for k, a in arcs.items()}
    real = ml.train_region

    def spy(region, *a, **kw):
        current[0] = region
        try:
            return real(region, *a, **kw)
        finally:
            current[0] = None

    monkeypatch.setattr(ml, "train_region", spy)
    bank = ml.train_bank(X, targets, arcs, epochs=2)
    assert log and all(cur == owner for cur, owner in log)
    assert {owner for _, owner in log} == {"A", "B"}
    # each region's predictions use only the shared load vector and its own models
    x = X[0]
    for k, rp in bank.regions.items():
        assert rp.predict(x).arcs == arcs[k]


def test_bank_layout_and_shapes(rng):
    arcs = {"A": ((0, 0), (1, 1)), "B": ((0, 1),)}
    X = rng.normal(size=(10, 6))
    targets = {k: _toy_targets(rng, 10, a, True) for k, a in arcs.items()}
    bank = ml.train_bank(X, targets, arcs, two_level=True, epochs=2)
    assert len(bank.qtypes) == 16
    for k, rp in bank.regions.items():
        assert set(rp.models) == set(ml.BASE_TYPES + ml.SLACK_TYPES)
        for m in rp.models.values():
            assert m.n_in == 6 and m.n_out == len(arcs[k]) and m.W1.shape[0] == 2 * m.n_out
    preds = ml.predict_warmstart(bank, X[0, :3], X[0, 3:])
    assert preds["A"].z.shape == (2, 4)
    with pytest.raises(ValueError):
        ml.predict_warmstart(bank, X[0, :2], X[0, 3:])


def test_missing_model_rejected(rng):
    arcs = {"A": ((0, 0),)}
    X = rng.normal(size=(5, 2))
    bank = ml.train_bank(X, {"A": _toy_targets(rng, 5, arcs["A"])}, arcs, epochs=1)
    del bank.regions["A"].models["lam_q"]
    with pytest.raises(TrainingError, match="missing"):
        ml.predict_warmstart(bank, X[0, :1], X[0, 1:])


def test_bank_save_load(tmp_path, rng):
    arcs = {"A": ((0, 0), (1, 1)), "B": ((0, 1),)}
    X = rng.normal(size=(10, 4))
    bank = ml.train_bank(X, {k: _toy_targets(rng, 10, a) for k, a in arcs.items()}, arcs, epochs=3)
    bank.save(tmp_path)
    assert (tmp_path / "A__pC.json").exists() and (tmp_path / "A__pC_curve.csv").exists()
    back = PredictorBank.load(tmp_path)
    a, b = ml.predict_warmstart(bank, X[0, :2], X[0, 2:]), ml.predict_warmstart(back, X[0, :2], X[0, 2:])
    for k in arcs:
        assert a[k].xC.tobytes() == b[k].xC.tobytes() and a[k].lam.tobytes() == b[k].lam.tobytes()


def test_bank_training_deterministic(rng):
    arcs = {"A": ((0, 0),), "B": ((0, 1),)}
    X = rng.normal(size=(8, 4))
    targets = {k: _toy_targets(rng, 8, a) for k, a in arcs.items()}
    one = ml.train_bank(X, targets, arcs, epochs=3, workers=1)
    many = ml.train_bank(X, targets, arcs, epochs=3, workers=4)
    for k in arcs:
        for q in ml.BASE_TYPES:
            assert one.regions[k].models[q].W1.tobytes() == many.regions[k].models[q].W1.tobytes()


def test_bank_memorizes_one_instance(dataset):
    inst = dataset["train"][0]
    X = ml.load_features(inst.pd, inst.qd)[None, :]
    arcs = {k: t.arcs for k, t in inst.targets.items()}
    bank = ml.train_bank(X, {k: [t] for k, t in inst.targets.items()}, arcs, epochs=200, batch=1)
    preds = ml.predict_warmstart(bank, inst.pd, inst.qd)
    views = grid.partition(grid.load_fixture(data.load_meta(dataset["path"])["network"]))
    st_ = admm.warm_start(views, preds)
    for k, t in inst.targets.items():
        np.testing.assert_allclose(st_.xC[k], t.xC, atol=1e-6)
        np.testing.assert_allclose(st_.lam[k], t.lam, atol=1e-6)

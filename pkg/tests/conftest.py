import numpy as np
import pytest
from hypothesis import settings

from gridmm import data, grid
from gridmm.ml import train_bank

DATASET = "case6_2r_one"

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def small_net(regions=("A", "A"), with_load=True):
    doc = {
        "base_mva": 100.0,
        "buses": [{"id": "1", "vmin": 0.9, "vmax": 1.1, "region": regions[0], "reference": True},
                  {"id": "2", "vmin": 0.9, "vmax": 1.1, "region": regions[1]}],
        "branches": [{"from": "1", "to": "2", "g": 1.0, "b": -10.0, "smax": 2.0}],
        "generators": [{"bus": "1", "pmin": 0.0, "pmax": 2.0, "qmin": -1.0, "qmax": 1.0,
                        "cost": [1.0, 2.0, 0.0]}],
        "loads": [{"bus": "2", "pd": 0.5, "qd": 0.1}] if with_load else [],
    }
    return doc


@pytest.fixture(scope="session")
def case6():
    return grid.load_fixture("case6_2r")


@pytest.fixture(scope="session")
def case14():
    return grid.load_fixture("case14_3r")


@pytest.fixture(scope="session")
def fig1():
    return grid.load_fixture("fig1_3r")


@pytest.fixture(scope="session")
def dataset():
    path = data.dataset_path(DATASET)
    inst = data.load_dataset(path)
    split = data.load_split(path)
    by_id = {t.id: t for t in inst}
    train = [by_id[i] for i in split["train"]]
    test = [by_id[i] for i in split["test"]]
    return {"path": path, "all": inst, "train": train, "test": test}


def fit_bank(instances, ids=None, **kw):
    sets = data.region_training_sets(instances, ids)
    arcs = {k: s[0].targets.arcs for k, (_, s) in sets.items()}
    return train_bank({k: X for k, (X, _) in sets.items()},
                      {k: [s.targets for s in samples] for k, (_, samples) in sets.items()},
                      arcs, **kw)


@pytest.fixture(scope="session")
def bank(dataset):
    return fit_bank(dataset["train"], seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

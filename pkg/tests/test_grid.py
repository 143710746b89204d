import json

import pytest
from hypothesis import given, settings, strategies as st

from gridmm import grid
from gridmm.grid import NetworkError

from conftest import small_net


def _write(tmp_path, doc, name="net.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_minimal_two_bus_file(tmp_path):
    net = grid.load_network(_write(tmp_path, small_net()))
    assert len(net.buses) == 2
    assert len(net.branches) == 1
    assert net.reference_bus == "1"


def test_dangling_branch_names_branch(tmp_path):
    doc = small_net()
    doc["branches"][0]["to"] = "9"
    with pytest.raises(NetworkError, match=r"branch 0 \(1->9\)"):
        grid.load_network(_write(tmp_path, doc))


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["buses"][0].pop("reference"), "reference bus"),
    (lambda d: d["buses"][1].update(region=""), "empty region"),
    (lambda d: d["buses"][1].update(vmin=1.2), "vmin"),
    (lambda d: d["branches"][0].update(smax=0.0), "smax"),
    (lambda d: d["branches"][0].update(g=0.0, b=0.0), "zero admittance"),
    (lambda d: d["branches"][0].update(to="1"), "self-loop"),
    (lambda d: d["generators"][0].update(pmin=3.0), "inverted"),
    (lambda d: d["generators"][0].update(cost=[-1.0, 0.0, 0.0]), "cost"),
    (lambda d: d["loads"][0].update(bus="7"), "missing bus"),
    (lambda d: d.pop("base_mva"), "missing"),
])
def test_validation_errors(tmp_path, mutate, msg):
    doc = small_net()
    mutate(doc)
    with pytest.raises(NetworkError, match=msg):
        grid.load_network(_write(tmp_path, doc))


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(NetworkError, match="malformed"):
        grid.load_network(p)


def test_case6_counts(case6):
    views = grid.partition(case6)
    assert [v.region for v in views] == ["A", "B"]
    assert len({e for v in views for e in v.coupling_branches}) == 2


def _brute_force(net):
    region = net.region_of
    border, neighbor, coupling = {}, {}, {}
    for e, br in enumerate(net.branches):
        a, b = region[br.from_bus], region[br.to_bus]
        if a == b:
            continue
        for k, inside, outside in ((a, br.from_bus, br.to_bus), (b, br.to_bus, br.from_bus)):
            border.setdefault(k, set()).add(inside)
            neighbor.setdefault(k, set()).add(outside)
            coupling.setdefault(k, set()).add(e)
    return border, neighbor, coupling


@pytest.mark.parametrize("name", ["case6_2r", "case14_3r", "fig1_3r"])
def test_partition_against_brute_force(name):
    net = grid.load_fixture(name)
    border, neighbor, coupling = _brute_force(net)
    for v in grid.partition(net):
        assert set(v.border_buses) == border[v.region]
        assert set(v.neighbor_buses) == neighbor[v.region]
        assert set(v.coupling_branches) == coupling[v.region]


def test_fig1_coupling_sets(fig1):
    views = {v.region: v for v in grid.partition(fig1)}
    names = {k: {fig1.branches[e].name for e in v.coupling_branches} for k, v in views.items()}
    assert names == {"1": {"1->2"}, "2": {"1->2", "3->4"}, "3": {"3->4"}}


def test_single_region(tmp_path):
    net = grid.network_from_dict(small_net())
    (v,) = grid.partition(net)
    assert v.coupling_branches == () and v.neighbor_buses == ()


@pytest.mark.parametrize("name", ["case6_2r", "case14_3r", "fig1_3r"])
def test_tiling_and_symmetry(name):
    net = grid.load_fixture(name)
    views = grid.partition(net)
    assert sum(len(v.local_buses) for v in views) == len(net.buses)
    union = {e for v in views for e in v.coupling_branches}
    assert sum(len(v.local_branches) for v in views) + len(union) == len(net.branches)
    for v in views:
        assert not set(v.local_branches) & set(v.coupling_branches)
        assert set(v.border_buses) <= set(v.local_buses)
        assert not set(v.neighbor_buses) & set(v.local_buses)
    region = net.region_of
    for e in union:
        br = net.branches[e]
        owners = [v.region for v in views if e in v.coupling_branches]
        assert sorted(owners) == sorted([region[br.from_bus], region[br.to_bus]])


@pytest.mark.parametrize("name", ["case6_2r", "case14_3r", "fig1_3r"])
def test_round_trip(tmp_path, name):
    net = grid.load_fixture(name)
    p = tmp_path / f"{name}.json"
    grid.save_network(net, p)
    again = grid.load_network(p)
    assert again == net


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from("ABC"), min_size=2, max_size=8), st.data())
def test_random_chain_partitions_tile(regions, draw):
    n = len(regions)
    doc = {"base_mva": 100.0,
           "buses": [{"id": str(i), "vmin": 0.9, "vmax": 1.1, "region": r} for i, r in enumerate(regions)],
           "branches": [], "generators": [], "loads": []}
    doc["buses"][0]["reference"] = True
    for i in range(1, n):
        j = draw.draw(st.integers(0, i - 1))
        doc["branches"].append({"from": str(j), "to": str(i), "g": 1.0, "b": -5.0, "smax": 1.0})
    net = grid.network_from_dict(doc)
    views = grid.partition(net)
    assert sum(len(v.local_buses) for v in views) == n
    owners = grid.arc_owners(views)
    assert all(len(o) == 2 for o in owners.values())

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import json_case
from rdaegrid.grid import (CaseParseError, CaseValidationError, Tag, UnobservableError, build_observation_matrix,
                           bus_degree, case_to_json, critical_measurements, is_critical, load_case,
                           observable_after_mask, observable_masks, parse_case)


def elimination_rank(M, rtol=1e-8):
    """Rank by Gaussian elimination with partial pivoting (independent of the SVD route)."""
    A = np.array(M, dtype=float, copy=True)
    if A.size == 0:
        return 0
    tol = rtol * max(np.abs(A).max(), 1e-300)
    rank, rows, cols = 0, A.shape[0], A.shape[1]
    for c in range(cols):
        if rank == rows:
            break
        p = rank + int(np.argmax(np.abs(A[rank:, c])))
        if abs(A[p, c]) <= tol:
            continue
        A[[rank, p]] = A[[p, rank]]
        A[rank + 1:] -= np.outer(A[rank + 1:, c] / A[rank, c], A[rank])
        rank += 1
    return rank


# ------------------------------------------------------------------ parsing

def test_case118_counts(case118):
    assert case118.n_buses == 118
    assert case118.n_branches == 186
    assert len(case118.generators) == 54
    assert len(case118.load_buses) == 99


def test_case14_counts(case14):
    assert case14.n_buses == 14
    assert case14.n_branches == 20
    # hand-counted branch list of the published 14-bus case
    expected = [(1, 2), (1, 5), (2, 3), (2, 4), (2, 5), (3, 4), (4, 5), (4, 7), (4, 9), (5, 6),
                (6, 11), (6, 12), (6, 13), (7, 8), (7, 9), (9, 10), (9, 14), (10, 11), (12, 13), (13, 14)]
    assert [(br.from_bus, br.to_bus) for br in case14.branches] == expected
    assert case14.slack_bus == 1


def test_two_bus_observation(two_bus):
    case, obs = two_bus
    assert obs.m == 3
    assert obs.index_map == (Tag("inj", 1), Tag("inj", 2), Tag("flow", 0))
    # +b at the from-bus of a flow row and the Bbus rows, reference column dropped
    np.testing.assert_array_equal(obs.H, [[-1.0], [1.0], [-1.0]])
    assert bus_degree(obs, 2) == 3


def test_reference_bus_has_no_column(two_bus):
    _, obs = two_bus
    with pytest.raises(ValueError):
        bus_degree(obs, 1)


MATPOWER_SNIPPET = """function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.06	0.94;
	2	1	50	10	0	0	1	1	0	135	1	1.06	0.94;
	3	1	30	5	2	0	1	1	0	135	1	1.06	0.94;
];
mpc.gen = [
	1	80	0	10	-10	1	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	100	100	100	0	0	1	-360	360;
	2	3	0.01	0.2	0	100	100	100	0.5	5	1	-360	360;
	1	3	0.01	0.3	0	100	100	100	0	0	0	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	20	5;
];
mpc.areas = [1 1];
"""


def test_matpower_parse_units_and_status():
    case = parse_case(MATPOWER_SNIPPET, "tiny")
    assert case.n_buses == 3
    assert case.n_branches == 2  # the out-of-service branch is skipped
    assert case.buses[1].pd == pytest.approx(0.5)
    assert case.buses[2].gs == pytest.approx(0.02)
    assert case.branches[0].b == pytest.approx(10.0)
    assert case.branches[1].b == pytest.approx(1 / (0.2 * 0.5))
    assert case.branches[1].shift == pytest.approx(np.deg2rad(5))
    g = case.generators[0]
    assert (g.pmin, g.pmax) == (0.0, 2.0)
    assert g.cost == pytest.approx((0.01 * 100 ** 2, 20 * 100, 5))
    assert any("areas" in w for w in case.warnings)


def test_matpower_bad_row_reports_line():
    bad = MATPOWER_SNIPPET.replace("2	1	50	10", "2	1	5x0	10")
    with pytest.raises(CaseParseError, match="line 7"):
        parse_case(bad)


def test_matpower_ragged_row_reports_line():
    bad = MATPOWER_SNIPPET.replace("	1	1.06	0.94;\n	3", "	1	1.06;\n	3")
    with pytest.raises(CaseParseError, match="line 7"):
        parse_case(bad)


def test_disconnected_case_rejected():
    with pytest.raises(CaseValidationError, match="disconnected"):
        parse_case(json_case([1, 2, 3, 4], [(1, 2, 1.0), (3, 4, 1.0)]))


@pytest.mark.parametrize("b", [0.0, float("inf")])
def test_bad_susceptance_rejected(b):
    with pytest.raises(CaseValidationError):
        parse_case(json_case([1, 2], [(1, 2, b)]))


def test_generator_on_unknown_bus_rejected():
    with pytest.raises(CaseValidationError, match="generator"):
        parse_case(json_case([1, 2], [(1, 2, 1.0)], generators=[{"bus": 9, "pmax": 1.0}]))


def test_missing_case_file():
    with pytest.raises(FileNotFoundError):
        load_case("no_such_case")


def test_json_round_trip(case14):
    again = parse_case(case_to_json(case14))
    np.testing.assert_array_equal(build_observation_matrix(again).H, build_observation_matrix(case14).H)
    assert json.loads(case_to_json(case14))["slack_bus"] == 1


# -------------------------------------------------------------- structure

def test_case118_dimensions_and_degrees(obs118):
    assert obs118.m == 304
    assert obs118.n_states == 117
    for bus in (10, 73, 87, 111, 112, 116, 117):
        assert bus_degree(obs118, bus) == 3
    assert bus_degree(obs118, 49) == 22
    degrees = [bus_degree(obs118, b) for b in obs118.state_buses]
    assert min(degrees) == 3 and max(degrees) == 22


def test_case14_structure(case14, obs14):
    assert obs14.m == 34 and obs14.n_states == 13
    flows = obs14.H_full[case14.n_buses:]
    assert np.all(np.count_nonzero(flows, axis=1) == 2)
    A = case14.incidence()
    for k, bus in enumerate(case14.bus_ids):
        incident = np.count_nonzero(A[:, k])
        assert np.count_nonzero(obs14.H_full[k]) == incident + 1


def test_bbus_identity(case14, obs14):
    # each injection row sums to zero over all buses; its diagonal is the sum of incident susceptances
    inj = obs14.H_full[:case14.n_buses]
    np.testing.assert_allclose(inj.sum(axis=1), 0.0, atol=1e-9)
    idx = case14.bus_index()
    for bus in case14.bus_ids:
        total = sum(br.b for br in case14.branches if bus in (br.from_bus, br.to_bus))
        assert inj[idx[bus], idx[bus]] == pytest.approx(total)


def test_degree_matches_structure(case14, obs14):
    # own injection + incident flows + neighbouring injections
    for bus in obs14.state_buses:
        nbrs = {br.to_bus if br.from_bus == bus else br.from_bus
                for br in case14.branches if bus in (br.from_bus, br.to_bus)}
        incident = sum(bus in (br.from_bus, br.to_bus) for br in case14.branches)
        assert bus_degree(obs14, bus) == 1 + incident + len(nbrs)
        assert bus_degree(obs14, bus) >= 3


def test_index_map_round_trip(obs118):
    for row, tag in enumerate(obs118.index_map):
        assert obs118.row_of(tag) == row
    assert obs118.index_map[:118] == tuple(Tag("inj", b) for b in sorted(obs118.all_buses))


def random_tree_case(n, seed):
    rng = np.random.default_rng(seed)
    edges = [(int(rng.integers(1, k)), k, float(rng.uniform(1, 20))) for k in range(2, n + 1)]
    return parse_case(json_case(list(range(1, n + 1)), edges))


@pytest.mark.parametrize("seed", range(5))
def test_random_tree_flow_rows(seed):
    case = random_tree_case(5, seed)
    obs = build_observation_matrix(case)
    flows = obs.H_full[case.n_buses:]
    assert np.all(np.count_nonzero(flows, axis=1) == 2)
    # only flow measurements on a tree: every one is a bridge
    flow_rows = list(range(case.n_buses, obs.m))
    assert all(is_critical(obs, k, flow_rows) for k in flow_rows)


def test_h_dump_csv(tmp_path, two_bus):
    _, obs = two_bus
    obs.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "row,theta_2"
    assert lines[1:] == ["inj:1,-1.0", "inj:2,1.0", "flow:0,-1.0"]


def test_negligible_susceptance_is_unobservable():
    # a branch far below the rank tolerance leaves bus 3's angle unobservable
    with pytest.raises(UnobservableError):
        build_observation_matrix(parse_case(json_case([1, 2, 3], [(1, 2, 1.0), (2, 3, 1e-300)])))


# ------------------------------------------------------------ observability

def test_two_bus_single_row_is_critical(two_bus):
    _, obs = two_bus
    assert is_critical(obs, 2, [2])


def test_case14_has_no_critical_rows(obs14):
    assert critical_measurements(obs14) == frozenset()
    assert not any(is_critical(obs14, k) for k in range(obs14.m))


def test_mask_extremes(obs14):
    assert observable_after_mask(obs14, [])
    assert not observable_after_mask(obs14, list(range(obs14.m)))


def test_mask_matches_elimination_oracle(obs14):
    rng = np.random.default_rng(7)
    k = int(0.1 * obs14.m)
    for _ in range(100):
        d = rng.choice(obs14.m, size=k, replace=False)
        keep = np.setdiff1d(np.arange(obs14.m), d)
        assert observable_after_mask(obs14, d) == (elimination_rank(obs14.H[keep]) == obs14.n_states)


def test_heavy_masks_match_elimination_oracle(obs14):
    rng = np.random.default_rng(8)
    results = set()
    for _ in range(200):
        d = rng.choice(obs14.m, size=int(rng.integers(10, 26)), replace=False)
        keep = np.setdiff1d(np.arange(obs14.m), d)
        ok = observable_after_mask(obs14, d)
        assert ok == (elimination_rank(obs14.H[keep]) == obs14.n_states)
        results.add(ok)
    assert results == {True, False}  # the sample exercises both outcomes


def test_bool_mask_accepted(obs14):
    d = np.zeros(obs14.m, dtype=bool)
    d[:3] = True
    assert observable_after_mask(obs14, d) == observable_after_mask(obs14, [0, 1, 2])


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_unobservability_is_monotone(obs14, data):
    d = data.draw(st.sets(st.integers(0, obs14.m - 1), max_size=obs14.m))
    extra = data.draw(st.sets(st.integers(0, obs14.m - 1), max_size=10))
    if not observable_after_mask(obs14, sorted(d)):
        assert not observable_after_mask(obs14, sorted(d | extra))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.0, 0.7))
def test_bulk_observability_matches_elimination(obs14, seed, frac):
    d = np.random.default_rng(seed).random((64, obs14.m)) < frac
    expected = [elimination_rank(obs14.H[~row]) == obs14.n_states for row in d]
    np.testing.assert_array_equal(observable_masks(obs14, d), expected)
    np.testing.assert_array_equal(observable_masks(obs14, d, chunk=5), expected)

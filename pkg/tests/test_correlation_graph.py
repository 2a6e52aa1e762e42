import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainpde.correlation_graph import (
    build_graph,
    correlation_matrix,
    graph_from_days,
    pearson,
    relative_volume_series,
    write_graph,
)
from chainpde.errors import InsufficientData, ParameterError, UndefinedCorrelation

from conftest import day, matrix_day


def test_relative_volume_concentrated():
    days = [matrix_day(day(i), {(1, 1): (1, 5.0 + i)}) for i in range(3)]
    rel = relative_volume_series(days)
    assert np.array_equal(rel.series[0], [1.0, 1.0, 1.0])
    assert not rel.series[1:].any()


def test_relative_volume_even_split():
    days = [matrix_day(day(i), {(1, 1): (1, 3.0 * (i + 1)), (2, 2): (1, 3.0 * (i + 1))}) for i in range(3)]
    rel = relative_volume_series(days)
    assert np.array_equal(rel.series[0], [0.5] * 3) and np.array_equal(rel.series[21], [0.5] * 3)


def test_relative_volume_direct_division():
    days = [
        matrix_day(day(0), {(1, 1): (1, 2.0), (3, 3): (1, 8.0)}),
        matrix_day(day(1), {(1, 1): (1, 5.0), (3, 3): (1, 15.0)}),
        matrix_day(day(2), {(3, 3): (1, 1.0)}),
    ]
    rel = relative_volume_series(days)
    assert np.allclose(rel.series[0, :2], [0.2, 0.25], rtol=0, atol=1e-15)


def test_relative_volume_drops_empty_days():
    days = [matrix_day(day(i), {(1, 1): (1, 1.0)}) for i in range(3)] + [matrix_day(day(3), {})]
    rel = relative_volume_series(days)
    assert rel.dropped == (day(3),) and rel.series.shape == (400, 3)


def test_relative_volume_needs_three_days():
    days = [matrix_day(day(i), {(1, 1): (1, 1.0)}) for i in range(2)] + [matrix_day(day(2), {})]
    with pytest.raises(InsufficientData):
        relative_volume_series(days)


def test_pearson_self_and_negation():
    a = [1.0, 4.0, 2.0, 8.0]
    assert pearson(a, a) == pytest.approx(1.0, abs=1e-15)
    assert pearson(a, [-x for x in a]) == pytest.approx(-1.0, abs=1e-15)


def test_pearson_hand_value():
    # means 2 and 7/3: cov sum 3, variance sums 2 and 42/9, so r = 9 / sqrt(84)
    expected = 9.0 / math.sqrt(84.0)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(expected, rel=1e-14)
    assert round(expected, 5) == 0.98198


def test_pearson_zero_variance():
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 1, 1], [1, 2, 3])


def test_correlation_matrix_matches_pairwise():
    rng = np.random.default_rng(1)
    x = rng.random((6, 9))
    x[3] = 2.0
    r, flat = correlation_matrix(x)
    assert flat.tolist() == [False, False, False, True, False, False]
    for i in range(6):
        for j in range(6):
            if flat[i] or flat[j]:
                assert math.isnan(r[i, j])
            else:
                assert r[i, j] == pytest.approx(pearson(x[i], x[j]), abs=1e-14)


def test_graph_identical_rows_weight_one():
    x = np.array([[1.0, 3.0, 2.0, 5.0], [1.0, 3.0, 2.0, 5.0], [5.0, 1.0, 3.0, 1.0]])
    g = build_graph(x, 0.6)
    assert g.weights[0, 1] == pytest.approx(1.0) and g.weights[0, 2] == 0.0


def test_graph_excludes_negative_correlation():
    a = np.array([1.0, 3.0, 2.0, 5.0])
    g = build_graph(np.vstack([a, -a]), 0.6)
    assert g.n_edges == 0
    g_abs = build_graph(np.vstack([a, -a]), 0.6, abs_corr=True)
    assert g_abs.weights[0, 1] == pytest.approx(1.0)


def test_graph_theta_one_keeps_only_affine_duplicates():
    rng = np.random.default_rng(2)
    x = rng.random((5, 20))
    x[4] = 3.0 * x[1] + 7.0
    g = build_graph(x, 1.0)
    assert [(i, j) for i, j, _ in g.edges()] == [(1, 4)]


@pytest.mark.parametrize("theta", [0.0, -0.1, 1.01])
def test_graph_rejects_theta(theta):
    with pytest.raises(ParameterError):
        build_graph(np.eye(3), theta)


def test_graph_flags_zero_variance_as_isolated():
    x = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.1], [4.0, 4.0, 4.0]])
    g = build_graph(x, 0.6)
    assert g.zero_variance == (2,) and 2 in g.isolated and g.weights[2].sum() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 1.0))
def test_graph_weight_invariants(seed, theta):
    rng = np.random.default_rng(seed)
    base = rng.random((3, 12))
    x = np.vstack([base[k % 3] + 0.3 * rng.random(12) for k in range(15)])
    g = build_graph(x, theta)
    w = g.weights
    assert np.array_equal(w, w.T) and not np.diag(w).any()
    nz = w[w > 0]
    assert np.all(nz >= theta - 1e-12) and np.all(nz <= 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_edge_count_monotone_in_theta(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((12, 10))
    counts = [build_graph(x, t).n_edges for t in np.linspace(0.05, 1.0, 12)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_graph_invariant_under_positive_affine_rescaling(seed):
    rng = np.random.default_rng(seed)
    base = rng.random((3, 15))
    x = np.vstack([base[k % 3] + 0.2 * rng.random(15) for k in range(9)])
    scale = rng.uniform(0.5, 20.0, (9, 1))
    shift = rng.uniform(-5, 5, (9, 1))
    g1, g2 = build_graph(x, 0.6), build_graph(scale * x + shift, 0.6)
    assert np.allclose(g1.weights, g2.weights, atol=1e-12)


def test_graph_export(tmp_path):
    days = [
        matrix_day(day(i), {(1, 1): (1, 1.0 + i), (1, 2): (1, 2.0 + 2 * i), (3, 3): (1, 10.0)}) for i in range(4)
    ]
    g = graph_from_days(days, 0.6)
    write_graph(g, tmp_path / "e.csv", tmp_path / "m.json")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "src_inputs,src_outputs,dst_inputs,dst_outputs,weight"
    assert lines[1].startswith("1,1,1,2,")
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["theta"] == 0.6 and meta["window"] == [day(0).isoformat(), day(3).isoformat()]
    assert len(meta["zero_variance_nodes"]) == 397 and [20, 20] in meta["isolated_nodes"]
    assert meta["dropped_days"] == []

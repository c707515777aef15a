import itertools

import numpy as np
import pytest

from twolevel.chain import (Absorbed, ChainParams, ChainState, EventKind, default_workers,
                            drift_functional, empirical_measure, event_rates, gillespie_step,
                            is_absorbed, martingale_residual, qv_functional, replica_rng,
                            run_ensemble, run_from_state, simulate)
from twolevel.measures import GridMeasure, MeasureError
from twolevel.testfunctions import TestFunction, constant, monomial, polynomial

FUNCS = [constant(1.0), monomial(1), monomial(2), polynomial([0.3, -1.0, 0.0, 2.0]),
         TestFunction(lambda x: np.sin(3 * x), name="sin3x")]


def _brute_force(counts, params, f):
    """Drift and QV rate of <f, mu> by enumerating every transition of the generator."""
    m, n = params.m, params.n
    F = lambda c: np.mean(f(np.asarray(c) / n))
    base = F(counts)
    drift = qv = 0.0
    for g in range(m):
        k = counts[g]
        het = k * (n - k) / n
        for step, rate in ((1, het), (-1, (1 + params.s) * het)):
            if rate:
                new = list(counts)
                new[g] += step
                d = F(new) - base
                drift += rate * d
                qv += rate * d * d
    for victim, parent in itertools.product(range(m), repeat=2):
        rate = params.w / m * (1 + params.r * counts[parent] / n)
        new = list(counts)
        new[victim] = counts[parent]
        d = F(new) - base
        drift += rate * d
        qv += rate * d * d
    return drift, qv


def test_generator_brute_force_all_small_states():
    worst = 0.0
    for m in range(1, 5):
        for n in range(1, 5):
            params = ChainParams(m, n, s=0.37, r=1.9, w=0.8)
            for counts in itertools.product(range(n + 1), repeat=m):
                state = ChainState(np.array(counts), n)
                for f in FUNCS:
                    d, q = _brute_force(counts, params, f)
                    worst = max(worst, abs(drift_functional(state, params, f) - d),
                                abs(qv_functional(state, params, f) - q))
    assert worst < 1e-12


def test_event_rate_examples():
    rt = event_rates(ChainState(np.array([1]), 2), ChainParams(1, 2, s=0.0))
    assert rt.up[0] == 0.5 and rt.down[0] == 0.5
    rt = event_rates(ChainState(np.array([0, 2]), 2), ChainParams(2, 2, s=0.0, r=1.0, w=1.0))
    assert rt.group_total == pytest.approx(3.0)
    assert rt.individual_total == 0.0


def test_absorbing_states():
    params = ChainParams(3, 4, s=0.1, r=1.0)
    with pytest.raises(Absorbed):
        gillespie_step(ChainState(np.array([4, 4, 4]), 4), params, np.random.default_rng(0))
    assert is_absorbed(np.array([0, 0]), 4)
    assert not is_absorbed(np.array([0, 4]), 4)  # group copies can still move it


def test_single_group_step_is_fair_coin():
    params = ChainParams(1, 2, s=0.0, r=0.0, w=1.0)
    state = ChainState(np.array([1]), 2)
    rng = np.random.default_rng(2024)
    N = 10 ** 5
    outcome = np.array([gillespie_step(state, params, rng)[0].counts[0] for _ in range(N)])
    moved = outcome != 1
    # rate 1/2 up, 1/2 down, 1 for the (no-op) self copy
    assert abs(moved.mean() - 0.5) <= 3 * np.sqrt(0.25 / N)
    up = (outcome[moved] == 2).mean()
    assert abs(up - 0.5) <= 3 * np.sqrt(0.25 / moved.sum())


def test_gillespie_event_record():
    params = ChainParams(3, 5, s=0.2, r=1.0)
    state = ChainState(np.array([1, 2, 3]), 5)
    new, (t, kind, (a, b)) = gillespie_step(state, params, np.random.default_rng(1))
    assert t > 0 and isinstance(kind, EventKind)
    expect = state.counts.copy()
    if kind == EventKind.GroupCopy:
        expect[a] = state.counts[b]
    else:
        expect[a] += 1 if kind == EventKind.IndivUp else -1
    np.testing.assert_array_equal(new.counts, expect)


def test_empirical_measure_examples():
    mu = empirical_measure(ChainState(np.array([0, 2, 3]), 3))
    np.testing.assert_allclose(mu.weights, [1 / 3, 0, 1 / 3, 1 / 3])
    np.testing.assert_array_equal(empirical_measure(ChainState(np.array([2, 2]), 4)).weights,
                                  [0, 0, 1, 0, 0])


def test_functional_trivial_cases():
    params = ChainParams(4, 5, s=0.3, r=2.0)
    state = ChainState(np.array([1, 3, 5, 2]), 5)
    assert drift_functional(state, params, constant(2.0)) == 0.0
    assert qv_functional(state, params, constant(2.0)) == 0.0
    zero = ChainState(np.zeros(4, dtype=int), 5)
    assert drift_functional(zero, params, monomial(2)) == 0.0
    assert qv_functional(zero, params, monomial(2)) == 0.0


def test_simulate_horizon_zero():
    params = ChainParams(10, 8, s=0.1, r=1.0)
    p = simulate(GridMeasure.uniform(8), params, 0.0, [monomial(1)], [0.0], np.random.default_rng(0))
    assert p.values[0, 0] == p.initial_values[0]
    assert martingale_residual(p, "x")[0] == 0.0


def test_simulate_is_deterministic_and_records_events():
    params = ChainParams(6, 6, s=0.2, r=1.0)
    a = simulate(GridMeasure.uniform(6), params, 1.0, [monomial(1)], [0.5, 1.0],
                 np.random.default_rng(42), record_events=True)
    b = simulate(GridMeasure.uniform(6), params, 1.0, [monomial(1)], [0.5, 1.0],
                 np.random.default_rng(42), record_events=True)
    assert a.events == b.events and len(a.events) == a.n_events
    np.testing.assert_array_equal(a.values, b.values)


def test_events_replay_to_final_state():
    params = ChainParams(5, 4, s=0.5, r=2.0)
    p = simulate(GridMeasure.uniform(4), params, 2.0, [], [], np.random.default_rng(3), record_events=True)
    counts = p.initial_state.counts.copy()
    for t, kind, (a, b) in p.events:
        if kind == EventKind.IndivUp:
            counts[a] += 1
        elif kind == EventKind.IndivDown:
            counts[a] -= 1
        else:
            counts[a] = counts[b]
    np.testing.assert_array_equal(counts, p.final_state.counts)


def test_absorbed_path_has_zero_residual():
    params = ChainParams(4, 3, s=0.3, r=1.0)
    p = run_from_state(ChainState(np.zeros(4, dtype=int), 3), params, 1.0, [monomial(2)],
                       [0.0, 0.5, 1.0], np.random.default_rng(0))
    np.testing.assert_array_equal(martingale_residual(p, "x^2"), 0.0)


def test_mismatched_initial_lattice():
    with pytest.raises(MeasureError):
        simulate(GridMeasure.uniform(5), ChainParams(3, 4), 1.0, [], [], np.random.default_rng(0))


def test_invalid_params():
    with pytest.raises(ValueError):
        ChainParams(0, 4)
    with pytest.raises(ValueError):
        ChainParams(2, 4, s=-1.0)


def test_path_csv(tmp_path):
    p = simulate(GridMeasure.uniform(5), ChainParams(4, 5, 0.1, 1.0), 1.0, [monomial(1), monomial(2)],
                 [0.0, 1.0], np.random.default_rng(0))
    out = tmp_path / "p.csv"
    p.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "time,observable_id,value"
    assert len(lines) == 1 + 2 * 2


def test_ensemble_independent_of_workers():
    params = ChainParams(8, 8, 0.1, 1.0)
    args = (GridMeasure.uniform(8), params, 1.0, [monomial(1)], [1.0], 6, 17)
    a = run_ensemble(*args, workers=1)
    b = run_ensemble(*args, workers=2)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.final_counts, b.final_counts)
    assert a.manifest()["seed"] == 17


def test_replica_streams_differ():
    x = replica_rng(5, 0).random(4)
    y = replica_rng(5, 1).random(4)
    z = replica_rng(5, 0, key=(1,)).random(4)
    assert not np.array_equal(x, y) and not np.array_equal(x, z)
    np.testing.assert_array_equal(x, replica_rng(5, 0).random(4))


def test_default_workers_env(monkeypatch):
    monkeypatch.setenv("TWOLEVEL_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("TWOLEVEL_WORKERS", "junk")
    assert default_workers() == 1

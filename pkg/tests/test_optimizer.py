import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize, stats

from sgdoverfit.construction import Variant
from sgdoverfit.errors import DimensionMismatch, OutOfRange, ScheduleExhausted
from sgdoverfit.harness import find_event_run
from sgdoverfit.instance import Dataset, make_dataset
from sgdoverfit.optimizer import (ScheduleKind, make_schedule, project_ball, run_sgd,
                                  suffix_average)
from sgdoverfit.oracle import AdversarialOracle
from sgdoverfit.rng import stream


# ---------------------------------------------------------------------------
# schedules


def test_one_pass_order():
    sch = make_schedule("OnePass", 5)
    assert [sch.index(t) + 1 for t in range(1, 6)] == [1, 2, 3, 4, 5]
    with pytest.raises(ScheduleExhausted):
        sch.index(6)
    with pytest.raises(ScheduleExhausted):
        sch.index(0)


def test_single_shuffle_repeats():
    # [PAPER] one permutation reused for every pass
    sch = make_schedule("MultiPassSingleShuffle", 3, 2, seed=4)
    assert np.array_equal(sch.epoch(1), sch.epoch(2)) and sch.T == 6


def test_explicit_index_convention():
    perms = [[2, 0, 1], [1, 2, 0]]
    sch = make_schedule("MultiPassExplicit", 3, 2, permutations=perms)
    # step t reads pass ceil(t/n) at position (t-1) mod n; t = 3 and t = 6 end a pass
    for t in range(1, 7):
        assert sch.index(t) == perms[math.ceil(t / 3) - 1][(t - 1) % 3]
    with pytest.raises(ValueError):
        make_schedule("MultiPassExplicit", 3, 2, permutations=[[0, 1, 1], [0, 1, 2]])
    with pytest.raises(ValueError):
        make_schedule("MultiPassExplicit", 3, 2, permutations=[[0, 1, 2]])
    with pytest.raises(ValueError):
        make_schedule("OnePass", 0)


def test_multi_shuffle_uniform():
    # [DERIVED] chi-square on the first three positions (336 equally likely cells)
    cells = {c: i for i, c in enumerate(itertools.permutations(range(8), 3))}
    counts = np.zeros(len(cells))
    pair = np.zeros((8, 8))
    for seed in range(1000):
        sch = make_schedule("MultiPassMultiShuffle", 8, 4, seed)
        for k in range(1, 5):
            e = sch.epoch(k)
            assert sorted(e.tolist()) == list(range(8))
            counts[cells[tuple(e[:3].tolist())]] += 1
        pair[sch.epoch(1)[0], sch.epoch(2)[0]] += 1
    assert stats.chisquare(counts).pvalue > 1e-3
    # distinct passes are independent
    assert stats.chisquare(pair.ravel()).pvalue > 1e-3


def test_with_replacement_uniform():
    sch = make_schedule("WithReplacement", 10, 1, seed=3, T=20_000)
    assert sch.T == 20_000
    assert stats.chisquare(np.bincount(sch.order, minlength=10)).pvalue > 1e-3
    assert make_schedule("WithReplacement", 10, 3, seed=3).T == 30


@given(n=st.integers(1, 30), K=st.integers(1, 4), seed=st.integers(0, 2**32))
def test_first_pass_is_whole_sample(n, K, seed):
    for kind in ("MultiPassSingleShuffle", "MultiPassMultiShuffle"):
        sch = make_schedule(kind, n, K, seed)
        assert sch.T == n * K
        assert sorted(sch.order[:n].tolist()) == list(range(n))


def test_with_replacement_coverage():
    # [PAPER] n log2 n uniform draws see every sample with probability at least 1/2
    for n in (16, 64, 256):
        steps = math.floor(n * math.log2(n))
        hits = 0
        for s in range(2000):
            order = make_schedule("WithReplacement", n, 1, seed=s, T=steps).order
            hits += np.unique(order).size == n
        assert hits / 2000 >= 0.5, n


# ---------------------------------------------------------------------------
# projection and averaging


def test_project_ball_examples():
    w = np.array([0.3, 0.0])
    assert project_ball(w) is w
    assert np.array_equal(project_ball(np.array([2.0, 0, 0])), [1.0, 0, 0])
    with pytest.raises(ValueError):
        project_ball(w, 0.0)


def test_project_ball_is_nearest_point():
    # [DERIVED] compare with a constrained least-squares solve
    rng = stream(30)
    for _ in range(100):
        w = rng.standard_normal(4) * rng.choice([0.3, 3.0])
        p = project_ball(w)
        res = optimize.minimize(lambda x: np.sum((x - w) ** 2), np.zeros(4),
                                jac=lambda x: 2 * (x - w), method="SLSQP",
                                constraints=[{"type": "ineq", "fun": lambda x: 1 - x @ x,
                                              "jac": lambda x: -2 * x}],
                                options={"ftol": 1e-14, "maxiter": 200})
        assert np.allclose(p, res.x, atol=1e-6)
        # variational inequality at the projection
        ys = rng.standard_normal((50, 4))
        ys /= np.maximum(1.0, np.linalg.norm(ys, axis=1, keepdims=True))
        assert np.all((ys - p) @ (w - p) <= 1e-12)


def test_suffix_average_cases():
    rng = stream(31)
    traj = rng.standard_normal((9, 3))
    assert np.array_equal(suffix_average(traj, 1), traj[-1])
    const = np.tile([0.25, -1.5, 2.0], (6, 1))
    assert np.array_equal(suffix_average(const, 4), const[0])
    for tau in range(1, 10):
        direct = sum(traj[t] for t in range(9 - tau, 9)) / tau
        assert np.allclose(suffix_average(traj, tau), direct, rtol=1e-12, atol=1e-15)
    with pytest.raises(OutOfRange):
        suffix_average(traj, 0)
    with pytest.raises(OutOfRange):
        suffix_average(traj, 10)


# ---------------------------------------------------------------------------
# run_sgd on hand-made sources


def _toy(dim, n=4, m=3):
    params = SimpleNamespace(ambient_dim=dim)
    ds = Dataset(np.zeros((n, m), bool), 0.5, 0)
    return params, ds


def test_zero_source_stays_at_origin():
    params, ds = _toy(3)
    sch = make_schedule("MultiPassSingleShuffle", 4, 3, 0)
    res = run_sgd(params, None, ds, sch, lambda w, S: np.zeros(3), 0.5, (1, 5, 12))
    assert res.projection_count == 0 and res.max_norm == 0 and res.steps_to_idle == 0
    assert all(not v.any() for v in res.suffix_averages.values())


def test_constant_gradient_trajectory():
    params, ds = _toy(2)
    g = np.array([0.6, -0.8])  # unit norm
    eta = 0.15
    sch = make_schedule("MultiPassSingleShuffle", 4, 3, 0)
    res = run_sgd(params, None, ds, sch, lambda w, S: g, eta, (1, 3, 12), record_trace=True)
    traj = res.trajectory
    first_proj = math.ceil(1 / eta)  # step whose raw update leaves the ball
    for t in range(1, first_proj):
        assert np.allclose(traj[t], -t * eta * g, rtol=1e-14, atol=0)
    assert np.allclose(traj[first_proj:], -g, rtol=1e-14, atol=0)
    assert res.projection_count == 12 - first_proj + 1 and math.isclose(res.max_norm, 1.0, rel_tol=1e-15)
    # suffix averages follow the iterate convention w_1 = 0
    for tau in (1, 3, 12):
        assert np.allclose(res.suffix_averages[tau], traj[12 - tau:12].mean(axis=0), rtol=1e-13, atol=1e-15)


def test_window_checkpoints_match_trajectory():
    params, ds = _toy(3)
    rng = stream(32)
    sch = make_schedule("MultiPassMultiShuffle", 4, 5, 1)
    src = lambda w, S: rng.standard_normal(3)
    res = run_sgd(params, None, ds, sch, src, 0.2, (2, 4), record_trace=True, checkpoints=(4, 8, 20))
    traj = res.trajectory
    for (end, tau), v in res.window_averages.items():
        assert np.allclose(v, traj[end - tau:end].mean(axis=0), rtol=1e-12, atol=1e-15)
    assert (8, 4) in res.window_averages and (20, 2) in res.window_averages


def test_run_sgd_errors():
    params, ds = _toy(3)
    sch = make_schedule("OnePass", 4)
    zero = lambda w, S: np.zeros(3)
    with pytest.raises(OutOfRange):
        run_sgd(params, None, ds, sch, zero, 0.1, (5,))
    with pytest.raises(ScheduleExhausted):
        run_sgd(params, None, ds, sch, zero, 0.1, (1,), steps=5)
    with pytest.raises(DimensionMismatch):
        run_sgd(params, None, ds, make_schedule("OnePass", 5), zero, 0.1, (1,))
    with pytest.raises(DimensionMismatch):
        run_sgd(params, None, ds, sch, lambda w, S: np.zeros(2), 0.1, (1,))
    with pytest.raises(OutOfRange):
        run_sgd(params, None, ds, sch, zero, 0.1, (1,), checkpoints=(9,))


def test_suffix_average_from_result():
    params, ds = _toy(3)
    res = run_sgd(params, None, ds, make_schedule("OnePass", 4), lambda w, S: np.ones(3), 0.1, (2,))
    assert np.array_equal(suffix_average(res, 2), res.suffix_averages[2])
    with pytest.raises(OutOfRange):
        suffix_average(res, 3)


# ---------------------------------------------------------------------------
# adversarial runs


def test_determinism(desk):
    p, pk = desk[Variant.SMALL_K]
    out = []
    for _ in range(2):
        ds = make_dataset(pk, p.delta, p.n, 77)
        sch = make_schedule("MultiPassSingleShuffle", p.n, p.K, 77)
        out.append(run_sgd(p, pk, ds, sch, AdversarialOracle(p, pk), p.eta, (1, 10, p.T)))
    a, b = out
    for tau in a.suffix_averages:
        assert a.suffix_averages[tau].tobytes() == b.suffix_averages[tau].tobytes()
    assert a.step_norms.tobytes() == b.step_norms.tobytes()
    assert a.event_flags == b.event_flags


def test_suffix_dominance_large_k(desk):
    # [PAPER] monotone w . u0 that settles by T/17 keeps every suffix average above 16/17 of it
    p, pk = desk[Variant.LARGE_K]
    taus = (1, 10, 1000, p.T // 2, p.T)
    run = find_event_run(p, pk, 0, tau_list=taus)
    u0 = pk.matrix[run.oracle.state.u0]
    assert run.result.steps_to_idle <= p.T / 17
    top = float(run.result.final @ u0)
    for tau in taus:
        assert float(run.result.suffix_averages[tau] @ u0) >= 16 / 17 * top * (1 - 1e-12)


@pytest.mark.parametrize("variant", list(Variant))
def test_no_projection_on_event_runs(variant, desk):
    p, pk = desk[variant]
    run = find_event_run(p, pk, 3, tau_list=(1,))
    assert run.result.projection_count == 0 and run.result.max_norm <= 1.0
    if variant is Variant.LARGE_K:
        t = np.arange(1, run.result.T + 1)
        assert np.all(run.result.step_norms**2 <= 2 * p.eta**2 * p.alpha**2 * (t + 1))

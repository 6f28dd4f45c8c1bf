import json
import threading
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from microcal import optimizer as O
from microcal import surrogate as S

UNIT = np.array([[0.0, 1.0]])


def two_point_model(noise=1e-6):
    hp = S.Hyperparams(np.array([0.2]), 1.0, noise)
    return S.fit([[0.1], [0.3]], [1.0, 0.5], UNIT, S.FitOptions(hyperparams=hp))


# --------------------------------------------------------------------------
# acquisitions


def test_closed_forms():
    mu, var, inc = 0.3, 0.04, 0.5
    z = (inc - mu) / 0.2
    assert O.acquisition_from_moments(mu, var, "ei", inc) == pytest.approx(
        (inc - mu) * norm.cdf(z) + 0.2 * norm.pdf(z))
    assert O.acquisition_from_moments(mu, var, "pi", inc) == pytest.approx(norm.cdf(z))
    assert O.acquisition_from_moments(mu, var, "ucb", inc, beta=2) == pytest.approx(-(0.3 - 0.4))
    assert O.acquisition_from_moments(mu, var, "maxvar", inc) == pytest.approx(0.04)


def test_ei_at_incumbent_is_sigma_phi0():
    assert O.acquisition_from_moments(1.0, 0.25, "ei", 1.0) == pytest.approx(0.5 * 0.39894, rel=1e-4)


def test_zero_variance_limits():
    assert O.acquisition_from_moments(1.0, 0.0, "ei", 1.0) == 0.0
    assert O.acquisition_from_moments(0.4, 0.0, "ei", 1.0) == pytest.approx(0.6)
    assert O.acquisition_from_moments(0.4, 0.0, "pi", 1.0) == 1.0
    assert O.acquisition_from_moments(1.4, 0.0, "pi", 1.0) == 0.0


def test_ei_vanishes_at_interpolated_incumbent():
    m = two_point_model(noise=1e-8)
    inc = float(S.predict(m, [0.3])[0])
    ei = O.acquisition_value(m, [0.3], "ei", inc)
    # latent variance at a training point is of the order of the nugget
    _, var = S.predict(m, [0.3])
    assert 0.0 <= ei <= np.sqrt(var) * norm.pdf(0) + 1e-12
    assert ei < 1e-4


@given(st.floats(-5, 5), st.floats(0, 4), st.floats(-5, 5))
def test_ei_pi_non_negative(mu, var, inc):
    assert O.acquisition_from_moments(mu, var, "ei", inc) >= 0
    assert 0 <= O.acquisition_from_moments(mu, var, "pi", inc) <= 1


def test_unknown_acquisition_and_bad_beta():
    with pytest.raises(ValueError):
        O.acquisition_from_moments(0, 1, "lcb", 0)
    with pytest.raises(ValueError):
        O.acquisition_from_moments(0, 1, "ucb", 0, beta=0)
    with pytest.raises(ValueError):
        O.DispatcherSettings(beta=-1)


def test_maxvar_peaks_far_from_data():
    m = two_point_model()
    xs = np.linspace(0, 1, 101)[:, None]
    v = O.acquisition_value(m, xs, "maxvar", 0.0)
    assert xs[np.argmax(v), 0] > 0.8


# --------------------------------------------------------------------------
# proposals


def test_maxvar_proposal_in_right_half():
    hp = S.Hyperparams(np.array([0.2]), 1.0, 1e-6)
    m = S.fit([[0.0], [0.05]], [0.0, 1.0], UNIT, S.FitOptions(hyperparams=hp))
    x = O.propose(m, UNIT, "maxvar", rng=np.random.default_rng(0))
    assert x[0] > 0.5


def test_proposals_stay_in_bounds():
    rng = np.random.default_rng(1)
    bounds = np.array([[-3.0, 2.0], [10.0, 11.0]])
    X = bounds[:, 0] + rng.random((6, 2)) * np.ptp(bounds, axis=1)
    m = S.fit(X, rng.standard_normal(6), bounds)
    settings = O.DispatcherSettings(n_candidates=64, n_polish=1, polish_evals=20)
    for i in range(1000):
        kind = O.ACQUISITIONS[i % 4]
        u = rng.random(2)
        x = O.propose(m if i % 50 else None, bounds, kind, rng=rng, settings=settings) if i % 10 == 0 \
            else np.clip(m.from_unit(u), bounds[:, 0], bounds[:, 1])
        assert np.all(x >= bounds[:, 0]) and np.all(x <= bounds[:, 1])


def test_pending_point_pushes_next_proposal_away():
    m = two_point_model()
    rng = lambda: np.random.default_rng(5)
    first = O.propose(m, UNIT, "maxvar", rng=rng())
    second = O.propose(m, UNIT, "maxvar", pending=[first], rng=rng())
    assert abs(second[0] - first[0]) >= 1e-3


def test_believer_incumbent_includes_pending():
    m = two_point_model()
    pend = np.array([[0.9]])
    mu_p, _ = S.predict(m, pend)
    v = m.with_points(pend, [mu_p])
    assert O._incumbent(v, "posterior") <= O._incumbent(m, "posterior") + 1e-12


def test_space_filling_without_model():
    rng = np.random.default_rng(3)
    x = O.propose(None, UNIT, "ei", pending=[[0.0]], rng=rng, existing=[[0.1]])
    assert x[0] > 0.5


def test_initial_design():
    pts = O.initial_design([[0, 1], [5, 6]], [[0.5, 5.5]])
    assert len(pts) == 1 and np.array_equal(pts[0], [0.5, 5.5])
    lhs = O.initial_design([[0, 1], [5, 6], [1, 2]], seed=1)
    assert len(lhs) == 6
    assert len(O.initial_design(UNIT)) == 4


def test_batch_policy():
    p = O.BatchPolicy(3, 1, 0)
    assert p.total == 4 and p.slots() == [1, 1, 1, 2]
    with pytest.raises(ValueError):
        O.BatchPolicy(0, 1, 0)
    with pytest.raises(ValueError):
        O.BatchPolicy(1, -1, 0)


# --------------------------------------------------------------------------
# dispatcher


def quadratic(seed, sigma=0.01, x0=0.3):
    def f(x, tid):
        r = np.random.default_rng([seed, tid])
        return float((x[0] - x0) ** 2 + sigma * r.standard_normal())
    return f


class InFlightCounter:
    def __init__(self, f, delay=0.0):
        self.f, self.delay = f, delay
        self.now = self.peak = 0
        self.lock = threading.Lock()

    def __call__(self, x, tid):
        with self.lock:
            self.now += 1
            self.peak = max(self.peak, self.now)
        try:
            time.sleep(self.delay * (1 + tid % 3))
            return self.f(x, tid)
        finally:
            with self.lock:
                self.now -= 1


def test_sequential_policy_has_one_in_flight():
    ev = InFlightCounter(quadratic(0))
    res = O.run_dispatcher(ev, [[-1, 1]], O.BatchPolicy(1, 0, 0), max_trials=8, seed=0)
    assert ev.peak == 1 == res.max_in_flight
    assert len(res.trials) == 8


def test_threaded_in_flight_bounded_and_trials_in_bounds():
    ev = InFlightCounter(quadratic(1), delay=0.002)
    res = O.run_dispatcher(ev, [[-1, 1]], O.BatchPolicy(3, 1, 0), max_trials=20, seed=1)
    assert ev.peak <= 4 and res.max_in_flight <= 4
    assert sorted(t.trial_id for t in res.trials) == list(range(20))
    assert [t.completion_index for t in res.trials] == list(range(20))
    for t in res.trials:
        assert -1 <= t.x[0] <= 1
        assert t.batch in (1, 2)
    tags = {t.acquisition for t in res.trials if t.batch == 2 and t.trial_id >= 6}
    assert tags <= {"maxvar"}


def test_objective_threshold_stops_early():
    res = O.run_dispatcher(lambda x, t: float(abs(x[0])), [[-1, 1]], O.BatchPolicy(1, 0, 0),
                           initial_points=[[0.5], [0.0]], max_trials=30, objective_threshold=1e-9,
                           executor="serial")
    assert len(res.trials) == 2


def test_failures_recorded_and_excluded():
    def f(x, tid):
        if tid % 3 == 1:
            raise RuntimeError("solver diverged")
        return float(x[0] ** 2)
    res = O.run_dispatcher(f, [[-1, 1]], O.BatchPolicy(2, 0, 0), max_trials=12, seed=2,
                           executor="serial")
    failed = [t for t in res.trials if t.status == "failed"]
    assert len(failed) == 4
    assert all("solver diverged" in t.reason for t in failed)
    assert res.engine.model.n == 8


def test_failure_budget_aborts_with_diagnostics():
    def boom(x, tid):
        raise ValueError("bad input deck")
    settings = O.DispatcherSettings(max_failures=3)
    with pytest.raises(O.DispatcherAborted) as err:
        O.run_dispatcher(boom, UNIT, O.BatchPolicy(2, 1, 0), max_trials=50, settings=settings)
    assert "bad input deck" in str(err.value)
    assert 4 <= len(err.value.trials) <= 6


def test_non_finite_objective_is_failure():
    res = O.run_dispatcher(lambda x, t: float("nan") if t == 0 else 1.0, UNIT,
                           O.BatchPolicy(1, 0, 0), max_trials=3, executor="serial")
    assert res.trials[0].status == "failed"


def test_batch3_falls_back_to_exploration():
    res = O.run_dispatcher(quadratic(4), [[-1, 1]], O.BatchPolicy(1, 0, 1), max_trials=8,
                           executor="serial")
    late = [t for t in res.trials if t.batch == 3 and t.acquisition not in ("init", "random")]
    assert late and all(t.acquisition == "maxvar" for t in late)


def test_replay_reproduces_threaded_run():
    ev = InFlightCounter(quadratic(6), delay=0.001)
    res = O.run_dispatcher(ev, [[-1, 1]], O.BatchPolicy(3, 1, 0), max_trials=15, seed=6)
    replay = O.replay_proposals(res.trials, [[-1, 1]], O.BatchPolicy(3, 1, 0), seed=6)
    logged = {t.trial_id: t.x for t in res.trials}
    assert [i for i, _ in replay] == list(range(15))
    for i, x in replay:
        assert np.array_equal(logged[i], x)


def test_trial_json_round_trip(tmp_path):
    t = O.Trial(3, np.array([0.1, 1 / 3]), 2, "maxvar", seed=2 ** 63 + 5, y_vector=(0.1, 0.2),
                descriptor_ids=(1, 4), y_scalar=0.3, status="completed", start_time=1.0,
                end_time=2.5, completion_index=7)
    line = t.to_json()
    keys = set(json.loads(line))
    assert {"trialId", "batch", "acquisition", "x", "seed", "yVector", "yScalar", "status",
            "startTime", "endTime"} <= keys
    back = O.Trial.from_json(line)
    assert np.array_equal(back.x, t.x) and back.seed == t.seed and back.wall_time == 1.5
    (tmp_path / "log.jsonl").write_text(line + "\n" + line + "\n")
    assert len(O.read_trials(tmp_path / "log.jsonl")) == 2


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30))
def test_best_so_far_non_increasing(ys):
    trials = [O.Trial(i, np.zeros(1), 1, "ei", y_scalar=y, status="completed", completion_index=i)
              for i, y in enumerate(ys)]
    b = O.best_so_far(trials)
    assert np.all(np.diff(b) <= 0) and b[-1] == min(ys)

"""Asynchronous parallel Bayesian optimization.

A single :class:`AsyncBayesOpt` engine owns the trial history and the GP;
``ask`` hands out the next point for a batch slot and ``tell`` records a
finished evaluation and refits.  :func:`run_dispatcher` drives the engine
with a worker pool, replacing each slot as soon as its evaluation returns.

Slots come in three batches: batch 1 maximizes an acquisition drawn per
proposal from EI / PI / UCB, batch 2 maximizes posterior variance, and
batch 3 (hidden-constraint classification) is not modelled and falls back
to exploration.  Pending points are imputed with their posterior mean
("believer") before each proposal so concurrent slots spread out.
"""

import json
import logging
import math
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import norm, qmc

from . import surrogate

logger = logging.getLogger(__name__)

ACQUISITIONS = ("ei", "pi", "ucb", "maxvar")


class DispatcherAborted(RuntimeError):
    """Raised when failed evaluations exceed the failure budget."""

    def __init__(self, message, trials):
        super().__init__(message)
        self.trials = trials


@dataclass(frozen=True)
class BatchPolicy:
    batch1: int = 20
    batch2: int = 5
    batch3: int = 0

    def __post_init__(self):
        if self.batch1 < 1 or self.batch2 < 0 or self.batch3 < 0:
            raise ValueError("batch1 must be >= 1 and batch2, batch3 >= 0")

    @property
    def total(self):
        return self.batch1 + self.batch2 + self.batch3

    def slots(self):
        return [1] * self.batch1 + [2] * self.batch2 + [3] * self.batch3


@dataclass(frozen=True)
class DispatcherSettings:
    acquisition_weights: tuple = (("ei", 0.5), ("pi", 0.25), ("ucb", 0.25))
    beta: float = 2.0
    incumbent: str = "posterior"
    n_candidates: int = 2048
    n_polish: int = 8
    polish_evals: int = 100
    fit_starts: int = 8
    max_failures: int = 10

    def __post_init__(self):
        if self.incumbent not in ("posterior", "raw"):
            raise ValueError("incumbent must be 'posterior' or 'raw'")
        if self.beta <= 0:
            raise ValueError("UCB beta must be positive")


@dataclass
class Evaluation:
    """What an evaluator returns for one input."""

    y_scalar: float
    y_vector: tuple = ()
    descriptor_ids: tuple = ()
    seed: int = None


@dataclass
class Trial:
    trial_id: int
    x: np.ndarray
    batch: int
    acquisition: str
    seed: int = None
    y_vector: tuple = ()
    descriptor_ids: tuple = ()
    y_scalar: float = None
    status: str = "pending"
    start_time: float = None
    end_time: float = None
    completion_index: int = None
    reason: str = None

    @property
    def wall_time(self):
        if self.start_time is None or self.end_time is None:
            return None
        return self.end_time - self.start_time

    def to_json(self):
        return json.dumps({
            "trialId": self.trial_id,
            "batch": self.batch,
            "acquisition": self.acquisition,
            "x": [float(v) for v in self.x],
            "seed": self.seed,
            "yVector": [float(v) for v in self.y_vector],
            "descriptorIds": [int(d) for d in self.descriptor_ids],
            "yScalar": None if self.y_scalar is None else float(self.y_scalar),
            "status": self.status,
            "startTime": self.start_time,
            "endTime": self.end_time,
            "completionIndex": self.completion_index,
            "reason": self.reason,
        })

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(
            trial_id=d["trialId"], x=np.array(d["x"], dtype=float), batch=d["batch"],
            acquisition=d["acquisition"], seed=d.get("seed"), y_vector=tuple(d.get("yVector") or ()),
            descriptor_ids=tuple(d.get("descriptorIds") or ()), y_scalar=d.get("yScalar"),
            status=d["status"], start_time=d.get("startTime"), end_time=d.get("endTime"),
            completion_index=d.get("completionIndex"), reason=d.get("reason"),
        )


def read_trials(path):
    with open(path) as fh:
        return [Trial.from_json(line) for line in fh if line.strip()]


def best_so_far(trials):
    """Running minimum of ``y_scalar`` over completed trials in completion order."""
    done = sorted((t for t in trials if t.status == "completed"), key=lambda t: t.completion_index)
    return np.minimum.accumulate([t.y_scalar for t in done]) if done else np.array([])


# --------------------------------------------------------------------------
# acquisition


def acquisition_from_moments(mu, var, kind, incumbent, beta=2.0):
    """Acquisition score from posterior mean and variance (larger is better)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    if kind == "maxvar":
        out = sigma * sigma
    elif kind == "ucb":
        if beta <= 0:
            raise ValueError("UCB beta must be positive")
        out = -(mu - beta * sigma)
    elif kind in ("ei", "pi"):
        imp = incumbent - mu
        pos = sigma > 0
        safe = np.where(pos, sigma, 1.0)
        z = np.clip(imp / safe, -40.0, 40.0)
        if kind == "ei":
            out = np.where(pos, imp * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(imp, 0.0))
            out = np.maximum(out, 0.0)
        else:
            out = np.where(pos, norm.cdf(z), (imp > 0).astype(float))
    else:
        raise ValueError(f"unknown acquisition {kind!r}")
    return float(out) if np.ndim(out) == 0 else out


def acquisition_value(model, x, kind, incumbent, beta=2.0):
    """Larger-is-better acquisition score for minimization.

    Works on a single point or an ``(m, d)`` array of points.
    """
    mu, var = surrogate.predict(model, x)
    return acquisition_from_moments(mu, var, kind, incumbent, beta)


def _incumbent(model, mode):
    if mode == "raw":
        return float(np.min(model.y_raw))
    mu, _ = surrogate.predict(model, model.X_raw)
    return float(np.min(mu))


def _space_filling(bounds, existing, rng, n=256):
    lo, hi = bounds[:, 0], bounds[:, 1]
    cand = lo + rng.random((n, len(lo))) * (hi - lo)
    if len(existing) == 0:
        return cand[0]
    E = (np.asarray(existing, dtype=float) - lo) / (hi - lo)
    U = (cand - lo) / (hi - lo)
    dmin = np.sqrt(((U[:, None, :] - E[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return cand[int(np.argmax(dmin))]


def propose(model, bounds, kind, pending=(), rng=None, settings=None, existing=()):
    """Next input (raw units) maximizing ``kind`` on the believer-imputed model.

    ``pending`` holds raw inputs still being evaluated.  With ``model=None``
    a space-filling random point is returned, kept away from ``existing`` and
    ``pending`` points.
    """
    settings = settings or DispatcherSettings()
    rng = rng if rng is not None else np.random.default_rng()
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    pending = [np.asarray(p, dtype=float) for p in pending]
    if model is None:
        return _space_filling(bounds, list(existing) + pending, rng)

    virtual = model
    if pending:
        P = np.vstack(pending)
        mu_p, _ = surrogate.predict(model, P)
        virtual = model.with_points(P, np.atleast_1d(mu_p))
    incumbent = _incumbent(virtual, settings.incumbent)
    d = virtual.dim

    def score(U):
        return np.atleast_1d(acquisition_value(virtual, virtual.from_unit(U), kind, incumbent,
                                               settings.beta))

    m = int(2 ** math.ceil(math.log2(settings.n_candidates)))
    sobol = qmc.Sobol(d=d, scramble=True, seed=rng)
    U = sobol.random(m)[: settings.n_candidates]
    vals = score(U)
    order = np.argsort(-vals, kind="stable")

    best_u, best_v = U[order[0]], vals[order[0]]
    for i in order[: settings.n_polish]:
        res = optimize.minimize(
            lambda u: -score(np.clip(u, 0.0, 1.0)[None, :])[0], U[i], method="Powell",
            bounds=[(0.0, 1.0)] * d, options={"maxfev": settings.polish_evals, "xtol": 1e-6},
        )
        u = np.clip(res.x, 0.0, 1.0)
        v = -res.fun
        if v > best_v:
            best_u, best_v = u, v

    taken = virtual.X
    def too_close(u):
        return len(taken) and np.min(np.sqrt(((taken - u) ** 2).sum(1))) < 1e-6

    if too_close(best_u):
        for i in order:
            if not too_close(U[i]):
                best_u = U[i]
                break
        else:
            best_u = rng.random(d)
    return np.clip(virtual.from_unit(best_u), bounds[:, 0], bounds[:, 1])


def initial_design(bounds, points=None, seed=0):
    """Explicit points verbatim, else a Latin hypercube of ``max(2d, 4)`` points."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if points is not None and len(points):
        return [np.asarray(p, dtype=float).reshape(len(bounds)) for p in points]
    d = len(bounds)
    U = qmc.LatinHypercube(d=d, seed=seed).random(max(2 * d, 4))
    return list(qmc.scale(U, bounds[:, 0], bounds[:, 1]))


# --------------------------------------------------------------------------
# engine


class AsyncBayesOpt:
    """Ask/tell state machine shared by the live dispatcher and replay."""

    def __init__(self, bounds, policy=None, initial_points=None, seed=0, settings=None):
        self.bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]) or not np.all(np.isfinite(self.bounds)):
            raise ValueError("bounds must be finite with lower < upper")
        self.policy = policy or BatchPolicy()
        self.settings = settings or DispatcherSettings()
        self.seed = int(seed)
        self.queue = initial_design(self.bounds, initial_points, seed)
        self.pending = {}
        self.finished = []
        self.model = None
        self.next_id = 0

    @property
    def completed(self):
        return [t for t in self.finished if t.status == "completed"]

    @property
    def n_failed(self):
        return sum(t.status == "failed" for t in self.finished)

    def _rng(self, trial_id):
        return np.random.default_rng([self.seed, trial_id])

    def ask(self, batch):
        tid = self.next_id
        self.next_id += 1
        rng = self._rng(tid)
        pend = [t.x for t in self.pending.values()]
        if self.queue:
            x, acq = self.queue.pop(0), "init"
        elif self.model is None:
            x = propose(None, self.bounds, "maxvar", pend, rng, self.settings,
                        existing=[t.x for t in self.completed])
            acq = "random"
        else:
            if batch == 1:
                names = [k for k, _ in self.settings.acquisition_weights]
                w = np.array([v for _, v in self.settings.acquisition_weights], dtype=float)
                acq = names[int(rng.choice(len(names), p=w / w.sum()))]
            else:
                acq = "maxvar"
            x = propose(self.model, self.bounds, acq, pend, rng, self.settings)
        trial = Trial(tid, np.asarray(x, dtype=float), batch, acq)
        self.pending[tid] = trial
        if len(self.pending) > self.policy.total:
            raise RuntimeError("in-flight evaluations exceed the batch policy")
        return trial

    def tell(self, trial):
        self.pending.pop(trial.trial_id, None)
        if trial.completion_index is None:
            trial.completion_index = len(self.finished)
        self.finished.append(trial)
        if trial.status == "completed":
            self._refit()

    def _refit(self):
        done = self.completed
        if len(done) < 2:
            return
        X = np.vstack([t.x for t in done])
        y = np.array([t.y_scalar for t in done], dtype=float)
        opts = surrogate.FitOptions(n_starts=self.settings.fit_starts, seed=self.seed + len(done))
        self.model = surrogate.fit(X, y, self.bounds, opts)

    def best(self):
        done = self.completed
        if not done:
            return None
        if self.settings.incumbent == "posterior" and self.model is not None:
            mu, _ = surrogate.predict(self.model, np.vstack([t.x for t in done]))
            return done[int(np.argmin(mu))]
        return min(done, key=lambda t: t.y_scalar)


def _evaluate(evaluator, trial):
    trial.start_time = time.time()
    try:
        out = evaluator(trial.x.copy(), trial.trial_id)
        if not isinstance(out, Evaluation):
            out = Evaluation(float(out))
        if not np.isfinite(out.y_scalar):
            raise ValueError(f"non-finite objective {out.y_scalar}")
        trial.y_scalar = float(out.y_scalar)
        trial.y_vector = tuple(float(v) for v in out.y_vector)
        trial.descriptor_ids = tuple(out.descriptor_ids)
        trial.seed = out.seed
        trial.status = "completed"
    except Exception as exc:  # evaluator crashes become failed trials
        trial.status = "failed"
        trial.reason = f"{type(exc).__name__}: {exc}"
        seed = getattr(exc, "seed", None)
        if seed is not None:
            trial.seed = seed
    trial.end_time = time.time()
    return trial


@dataclass
class DispatchResult:
    trials: list
    best: Trial
    max_in_flight: int
    engine: AsyncBayesOpt = field(repr=False)


def run_dispatcher(evaluator, bounds, policy=None, initial_points=None, max_trials=50,
                   objective_threshold=None, seed=0, settings=None, executor="thread", jobs=None,
                   on_trial=None, history=()):
    """Keep up to ``policy.total`` evaluations in flight until the budget is spent.

    ``evaluator(x, trial_id)`` returns a float or :class:`Evaluation`; any
    exception marks the trial failed.  ``executor="serial"`` evaluates slots
    lazily in submission order, which makes completion order deterministic.
    ``history`` re-seeds the engine with finished trials from an earlier run.
    """
    policy = policy or BatchPolicy()
    settings = settings or DispatcherSettings()
    engine = AsyncBayesOpt(bounds, policy, initial_points, seed, settings)
    for t in sorted(history, key=lambda t: t.completion_index):
        engine.tell(t)
    # initial points already handed out in the earlier run are not repeated
    del engine.queue[:sum(t.acquisition == "init" for t in history)]
    if history:
        engine.next_id = max(t.trial_id for t in history) + 1
    submitted = len(history)
    state = {"stop": False, "max_in_flight": 0}

    def can_submit():
        if state["stop"] or submitted >= max_trials:
            return False
        if objective_threshold is not None:
            b = [t.y_scalar for t in engine.completed]
            if b and min(b) <= objective_threshold:
                return False
        return True

    def finish(trial):
        engine.tell(trial)
        logger.info("trial %d batch %d %s y=%s status=%s", trial.trial_id, trial.batch,
                    trial.acquisition, trial.y_scalar, trial.status)
        if on_trial is not None:
            on_trial(trial)
        if engine.n_failed > settings.max_failures:
            state["stop"] = True

    if executor == "serial":
        inflight = []
        for slot in policy.slots():
            if can_submit():
                inflight.append(engine.ask(slot))
                submitted += 1
        while inflight:
            state["max_in_flight"] = max(state["max_in_flight"], len(inflight))
            trial = _evaluate(evaluator, inflight.pop(0))
            finish(trial)
            if can_submit():
                inflight.append(engine.ask(trial.batch))
                submitted += 1
    elif executor == "thread":
        with ThreadPoolExecutor(max_workers=jobs or policy.total) as pool:
            futures = {}
            for slot in policy.slots():
                if can_submit():
                    t = engine.ask(slot)
                    futures[pool.submit(_evaluate, evaluator, t)] = t
                    submitted += 1
            while futures:
                state["max_in_flight"] = max(state["max_in_flight"], len(futures))
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for f in sorted(done, key=lambda f: futures[f].trial_id):
                    futures.pop(f)
                    trial = f.result()
                    finish(trial)
                    if can_submit():
                        t = engine.ask(trial.batch)
                        futures[pool.submit(_evaluate, evaluator, t)] = t
                        submitted += 1
    else:
        raise ValueError(f"unknown executor {executor!r}")

    trials = list(engine.finished)
    if engine.n_failed > settings.max_failures:
        reasons = [t.reason for t in trials if t.status == "failed"][-3:]
        raise DispatcherAborted(
            f"{engine.n_failed} failed evaluations exceed the budget of {settings.max_failures}; "
            f"last reasons: {reasons}", trials)
    return DispatchResult(trials, engine.best(), state["max_in_flight"], engine)


def replay_proposals(trials, bounds, policy=None, initial_points=None, seed=0, settings=None):
    """Re-derive the proposal sequence from a trial log.

    Finished trials are fed back in their logged completion order; each
    completion frees a slot of the same batch.  Returns ``(trial_id, x)``
    pairs in proposal order.
    """
    policy = policy or BatchPolicy()
    engine = AsyncBayesOpt(bounds, policy, initial_points, seed, settings)
    budget = len(trials)
    proposals = []
    for slot in policy.slots():
        if len(proposals) < budget:
            t = engine.ask(slot)
            proposals.append((t.trial_id, t.x))
    for logged in sorted(trials, key=lambda t: t.completion_index):
        engine.tell(Trial(logged.trial_id, np.asarray(logged.x, dtype=float), logged.batch,
                          logged.acquisition, y_scalar=logged.y_scalar, status=logged.status,
                          completion_index=logged.completion_index))
        if len(proposals) < budget:
            t = engine.ask(logged.batch)
            proposals.append((t.trial_id, t.x))
    return proposals

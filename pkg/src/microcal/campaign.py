"""End-to-end calibration campaigns.

A campaign synthesizes (or loads) a target microstructure, caches its
descriptor densities once, and hands the optimizer an evaluator that runs
simulate -> describe -> compare -> scalarize for each candidate input.

Configs are plain JSON; see ``CampaignConfig`` for the keys.  Per-trial
seeds are split from the master seed with ``numpy.random.SeedSequence``
keyed on the trial id, so the order in which workers finish cannot change
any trial's randomness.
"""

import csv
import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import densities, descriptors, lattice, optimizer

logger = logging.getLogger(__name__)

SEED_ENV = "MICROCAL_SEED"

# Reference weld sampling points (velocity, haz, pool width).
WELD_INITIAL = [
    [16.0, 135.0, 180.7], [18.0, 134.0, 165.2], [25.0, 145.0, 148.0], [29.0, 175.0, 155.2],
    [29.0, 169.0, 237.7], [19.0, 179.0, 103.5], [30.0, 200.0, 224.0],
]
# desk weld runs shrink haz and pool width by this factor
DESK_WELD_SCALE = 0.4


class ConfigurationError(ValueError):
    pass


@dataclass
class CampaignConfig:
    """Everything needed to reproduce a campaign.

    ``parameter_space`` maps simulator field names (``kbts`` for grain
    growth; ``velocity``, ``haz``, ``pool_width`` for welds) to
    ``[lower, upper]``.  ``fixed_params`` holds the remaining simulator
    fields.  The target is either ``target_params`` + ``target_seed`` or an
    MSV1 file at ``target_path``.
    """

    process_model: str = "grain_growth"
    parameter_space: dict = field(default_factory=lambda: {"kbts": [0.25, 0.95]})
    fixed_params: dict = field(default_factory=dict)
    target_params: dict = field(default_factory=lambda: {"kbts": 0.70})
    target_seed: int = 20240601
    target_path: str = None
    descriptor_set: tuple = (4,)
    filter: descriptors.FilterConfig = field(
        default_factory=lambda: descriptors.FilterConfig(0.0, enabled=False))
    bands: descriptors.BandConfig = field(default_factory=descriptors.BandConfig)
    scalarization: densities.ScalarizationConfig = field(
        default_factory=densities.ScalarizationConfig)
    kl_orientation: str = "target||candidate"
    policy: optimizer.BatchPolicy = field(default_factory=lambda: optimizer.BatchPolicy(3, 1, 0))
    initial_points: list = None
    max_trials: int = 50
    objective_threshold: float = None
    replicates_for_noise: int = 25
    master_seed: int = 0
    dispatcher: optimizer.DispatcherSettings = field(default_factory=optimizer.DispatcherSettings)
    dump_microstructures: bool = False

    def __post_init__(self):
        if self.process_model not in ("grain_growth", "weld"):
            raise ConfigurationError(f"unknown process model {self.process_model!r}")
        if not self.parameter_space:
            raise ConfigurationError("parameter space is empty")
        for name, (lo, hi) in self.parameter_space.items():
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigurationError(f"bound for {name} must be finite with lower < upper")
        self.descriptor_set = tuple(sorted(int(d) for d in self.descriptor_set))
        if not self.descriptor_set or self.descriptor_set[0] < 1 or self.descriptor_set[-1] > 11:
            raise ConfigurationError("descriptor set must be a non-empty subset of 1..11")
        if self.kl_orientation not in ("target||candidate", "candidate||target"):
            raise ConfigurationError(f"unknown KL orientation {self.kl_orientation!r}")

    @property
    def names(self):
        return list(self.parameter_space)

    @property
    def bounds(self):
        return np.array([self.parameter_space[n] for n in self.names], dtype=float)

    @classmethod
    def defaults(cls, process_model="grain_growth", full_scale=False):
        """Desk-scale (or full-scale) settings for either case study."""
        if process_model == "grain_growth":
            side = 1024 if full_scale else 256
            return cls(
                process_model="grain_growth",
                parameter_space={"kbts": [0.25, 0.95]},
                fixed_params={"width": side, "length": side, "num_spins": side * side // 16,
                              "steps": 20},
                target_params={"kbts": 0.70},
                descriptor_set=(4,),
                initial_points=[[0.45], [0.25], [0.95]],
                policy=optimizer.BatchPolicy(3, 1, 0),
                max_trials=50,
            )
        if process_model == "weld":
            s = 1.0 if full_scale else DESK_WELD_SCALE
            space = {k: [lo * (1.0 if k == "velocity" else s), hi * (1.0 if k == "velocity" else s)]
                     for k, (lo, hi) in lattice.WELD_BOUNDS.items()}
            fixed = ({"width": 805, "length": 1575} if full_scale else {"width": 256, "length": 512})
            fixed.update({"kbts": 0.25, "pool_shape": "teardrop", "epitaxy": 0.3})
            bands = (descriptors.BandConfig(60, 20, 5) if full_scale
                     else descriptors.BandConfig(12, 8, 5))
            return cls(
                process_model="weld",
                parameter_space=space,
                fixed_params=fixed,
                target_params={"velocity": 15.0, "haz": 150.0 * s, "pool_width": 200.0 * s},
                descriptor_set=descriptors.ALL_DESCRIPTORS,
                filter=descriptors.FilterConfig(150.0 if full_scale else 20.0, True),
                bands=bands,
                initial_points=[[v, h * s, w * s] for v, h, w in WELD_INITIAL],
                policy=optimizer.BatchPolicy(20, 5, 0),
                max_trials=200,
            )
        raise ConfigurationError(f"unknown process model {process_model!r}")

    # -- JSON -------------------------------------------------------------

    def to_dict(self):
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        d["dispatcher"]["acquisition_weights"] = dict(self.dispatcher.acquisition_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        """Build from a JSON mapping, filling omitted keys from the model defaults."""
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)} - {"full_scale"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        base = cls.defaults(d.get("process_model", "grain_growth"), bool(d.pop("full_scale", False)))
        kw = {}
        for key, value in d.items():
            if key == "filter":
                value = descriptors.FilterConfig(**value)
            elif key == "bands":
                value = descriptors.BandConfig(**value)
            elif key == "scalarization":
                value = densities.ScalarizationConfig(**{
                    k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
            elif key == "policy":
                value = optimizer.BatchPolicy(**value)
            elif key == "dispatcher":
                value = dict(value)
                if isinstance(value.get("acquisition_weights"), dict):
                    value["acquisition_weights"] = tuple(value["acquisition_weights"].items())
                value = optimizer.DispatcherSettings(**value)
            elif key == "fixed_params":
                value = {**base.fixed_params, **value}
            kw[key] = value
        return dataclasses.replace(base, **kw)


def load_config(path):
    """Read a JSON config; ``MICROCAL_SEED`` overrides ``master_seed`` when set."""
    with open(path) as fh:
        config = CampaignConfig.from_dict(json.load(fh))
    return apply_seed_override(config)


def apply_seed_override(config):
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        config = dataclasses.replace(config, master_seed=int(env))
    return config


def save_config(config, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)


# --------------------------------------------------------------------------
# seeds and simulation


def trial_seed(master_seed, trial_id):
    return int(np.random.SeedSequence(int(master_seed), spawn_key=(0, int(trial_id)))
               .generate_state(1, np.uint64)[0])


def replicate_seed(master_seed, index):
    return int(np.random.SeedSequence(int(master_seed), spawn_key=(1, int(index)))
               .generate_state(1, np.uint64)[0])


def simulator_params(config, values, seed):
    """Simulator parameter object for named ``values`` merged over fixed params."""
    kw = {**config.fixed_params, **values, "seed": int(seed)}
    if config.process_model == "grain_growth":
        if "mobility" in kw and isinstance(kw["mobility"], dict):
            kw["mobility"] = lattice.MobilityModel(**kw["mobility"])
        return lattice.GrainGrowthParams(**kw)
    return lattice.WeldParams(**kw)


def simulate(config, values, seed):
    p = simulator_params(config, values, seed)
    if config.process_model == "grain_growth":
        return lattice.run_grain_growth(p)
    return lattice.run_weld(p)


def describe(config, ms, strict=False):
    return descriptors.compute_descriptors(ms, config.descriptor_set, config.filter, config.bands,
                                           strict=strict)


# --------------------------------------------------------------------------
# target


@dataclass
class TargetSpec:
    params: dict = None
    seed: int = None
    path: str = None
    microstructure: lattice.Microstructure = field(default=None, repr=False)
    samples: list = field(default=None, repr=False)
    densities: dict = field(default=None, repr=False)

    @classmethod
    def from_config(cls, config):
        if config.target_path:
            return cls(path=config.target_path)
        return cls(params=dict(config.target_params), seed=config.target_seed)

    @property
    def prepared(self):
        return self.densities is not None


def prepare_target(spec, config):
    """Synthesize or load the target and cache its samples and densities."""
    if (spec.params is None) == (spec.path is None):
        raise ConfigurationError("target needs exactly one of params or path")
    if spec.path is not None:
        ms = lattice.load_msv1(spec.path)
    else:
        ms = simulate(config, spec.params, spec.seed)
    try:
        samples = describe(config, ms, strict=True)
        dens = densities.target_densities(samples)
    except descriptors.InsufficientSamplesError as exc:
        raise ConfigurationError(
            f"target has too few samples for descriptor {exc.descriptor_id} "
            f"({descriptors.DESCRIPTOR_NAMES.get(exc.descriptor_id)}): {exc}") from exc
    for d in dens.values():
        d.values.setflags(write=False)
        d.grid.setflags(write=False)
    return dataclasses.replace(spec, microstructure=ms, samples=samples, densities=dens)


# --------------------------------------------------------------------------
# evaluation


def _check_bounds(x, config):
    x = np.asarray(x, dtype=float).ravel()
    b = config.bounds
    if x.shape != (len(b),):
        raise ValueError(f"expected {len(b)} inputs, got {x.size}")
    for name, v, (lo, hi) in zip(config.names, x, b):
        if not lo <= v <= hi:
            raise ValueError(f"{name}={v} outside bounds [{lo}, {hi}]")
    return x


def _objective(x, seed, config, target, dump_path=None):
    values = dict(zip(config.names, (float(v) for v in x)))
    ms = simulate(config, values, seed)
    if dump_path is not None:
        lattice.save_msv1(ms, dump_path)
    samples = describe(config, ms)
    yv = densities.objective_vector(target.densities, samples, config.kl_orientation)
    y = densities.scalarize(yv, config.scalarization)
    return optimizer.Evaluation(y, tuple(yv.y), yv.descriptor_ids, int(seed))


def evaluate_candidate(x, trial_seed_value, config, target, trial_id=0):
    """Run one candidate and return a finished :class:`~microcal.optimizer.Trial`.

    Out-of-bounds inputs raise ``ValueError`` before any simulation; failures
    inside the pipeline yield a trial with ``status == "failed"``.
    """
    x = _check_bounds(x, config)
    trial = optimizer.Trial(trial_id, x, 0, "direct")

    def run(xx, _tid):
        try:
            return _objective(xx, trial_seed_value, config, target)
        except Exception as exc:
            exc.seed = int(trial_seed_value)
            raise

    return optimizer._evaluate(run, trial)


def make_evaluator(config, target, out_dir=None):
    """``evaluator(x, trial_id)`` for the dispatcher."""
    dump_dir = None
    if config.dump_microstructures and out_dir is not None:
        dump_dir = Path(out_dir) / "microstructures"
        dump_dir.mkdir(parents=True, exist_ok=True)

    def evaluator(x, trial_id):
        x = _check_bounds(x, config)
        seed = trial_seed(config.master_seed, trial_id)
        dump = None if dump_dir is None else dump_dir / f"trial_{trial_id:05d}.ms"
        try:
            return _objective(x, seed, config, target, dump)
        except Exception as exc:
            exc.seed = seed
            raise

    return evaluator


# --------------------------------------------------------------------------
# noise


def run_noise_study(config, target, replicates=None, seeds=None, jobs=None, out_path=None):
    """Objective statistics at the target parameters across fresh seeds."""
    if target.params is None:
        raise ConfigurationError("noise study needs target parameters, not a file target")
    n = replicates or config.replicates_for_noise
    if seeds is None:
        seeds = [replicate_seed(config.master_seed, i) for i in range(n)]
    if len(seeds) < 2:
        raise ConfigurationError("noise study needs at least two replicates")
    x = np.array([target.params[k] for k in config.names], dtype=float)

    def one(seed):
        try:
            return _objective(x, seed, config, target)
        except Exception as exc:
            logger.warning("replicate with seed %d failed: %s", seed, exc)
            return None

    with ThreadPoolExecutor(max_workers=jobs or config.policy.total) as pool:
        results = list(pool.map(one, seeds))
    ok = [r for r in results if r is not None]
    if len(ok) < 2:
        raise RuntimeError(f"only {len(ok)} of {len(seeds)} noise replicates succeeded")
    vectors = [densities.ObjectiveVector(r.y_vector, r.descriptor_ids) for r in ok]
    profile = densities.quantify_noise(vectors)
    if out_path is not None:
        densities.write_noise_csv(profile, out_path)
    return profile


# --------------------------------------------------------------------------
# campaign


@dataclass
class CampaignResult:
    trials: list
    best: optimizer.Trial
    noise: densities.NoiseProfile
    correlations: np.ndarray
    summary: dict


def write_convergence_csv(trials, path):
    done = sorted((t for t in trials if t.status == "completed"), key=lambda t: t.completion_index)
    best = optimizer.best_so_far(done)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["completion_index", "trial_id", "batch", "acquisition", "y_scalar", "best_so_far"])
        for t, b in zip(done, best):
            w.writerow([t.completion_index, t.trial_id, t.batch, t.acquisition, repr(t.y_scalar),
                        repr(float(b))])


def trial_correlations(trials):
    """R^2 matrix of the objective vectors of completed trials (or ``None``)."""
    done = [t for t in trials if t.status == "completed" and len(t.y_vector)]
    if len(done) < 3:
        return None, ()
    ids = done[0].descriptor_ids or tuple(range(1, len(done[0].y_vector) + 1))
    return densities.objective_correlations(np.array([t.y_vector for t in done])), ids


def write_report(trials, out_dir):
    """convergence.csv and (with >= 3 completed trials) correlations.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_convergence_csv(trials, out_dir / "convergence.csv")
    R, ids = trial_correlations(trials)
    if R is not None:
        densities.write_correlations_csv(R, ids, out_dir / "correlations.csv")
    return R


def _summary(config, trials, best, wall):
    done = [t for t in trials if t.status == "completed"]
    out = {
        "processModel": config.process_model,
        "masterSeed": config.master_seed,
        "trials": len(trials),
        "completed": len(done),
        "failed": len(trials) - len(done),
        "wallTime": wall,
    }
    if best is not None:
        out.update({
            "bestTrialId": best.trial_id,
            "bestX": dict(zip(config.names, (float(v) for v in best.x))),
            "bestYScalar": best.y_scalar,
            "bestYVector": list(best.y_vector),
            "bestObservedYScalar": min(t.y_scalar for t in done),
        })
    return out


def run_campaign(config, target=None, out_dir=None, jobs=None, resume=False, executor="thread",
                 noise=False):
    """Calibrate ``config`` against ``target`` and write the campaign artifacts.

    Artifacts in ``out_dir``: config.json, trials.jsonl (appended as trials
    finish), convergence.csv, correlations.csv, best.json and, with
    ``noise=True``, noise.csv.  With ``resume=True`` an existing
    trials.jsonl is loaded and the campaign continues from it.
    """
    t0 = time.time()
    if target is None:
        target = TargetSpec.from_config(config)
    if not target.prepared:
        target = prepare_target(target, config)
    out = None if out_dir is None else Path(out_dir)
    history = []
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.json")
        log_path = out / "trials.jsonl"
        if resume and log_path.exists():
            history = optimizer.read_trials(log_path)
            logger.info("resuming from %d logged trials", len(history))
        log = open(log_path, "a" if resume else "w")

    def on_trial(trial):
        if log is not None:
            log.write(trial.to_json() + "\n")
            log.flush()

    profile = None
    try:
        if noise:
            profile = run_noise_study(config, target, jobs=jobs,
                                      out_path=None if out is None else out / "noise.csv")
        try:
            res = optimizer.run_dispatcher(
                make_evaluator(config, target, out), config.bounds, config.policy,
                config.initial_points, config.max_trials, config.objective_threshold,
                config.master_seed, config.dispatcher, executor, jobs, on_trial, history)
            trials, best = res.trials, res.best
        except optimizer.DispatcherAborted as exc:
            if out is not None:
                write_report(exc.trials, out)
            raise
    finally:
        if log is not None:
            log.close()

    R, _ = trial_correlations(trials)
    summary = _summary(config, trials, best, time.time() - t0)
    if out is not None:
        write_report(trials, out)
        with open(out / "best.json", "w") as fh:
            json.dump(summary, fh, indent=2)
    return CampaignResult(trials, best, profile, R, summary)

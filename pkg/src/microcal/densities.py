"""Descriptor densities, KL objectives, scalarization and noise statistics."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DESCRIPTOR_NAMES, DescriptorSamples, InsufficientSamplesError

FLOOR = 1e-12
GRID_POINTS = 512


@dataclass(frozen=True, eq=False)
class Density:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float = float("nan")

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or len(g) < 2:
            raise ValueError("grid and values must be matching 1-D arrays")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and non-negative")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    def integral(self):
        return float(np.trapezoid(self.values, self.grid))


@dataclass(frozen=True)
class GridSpec:
    points: int = GRID_POINTS
    lo: float = None
    hi: float = None
    pad: float = 3.0


def _normalize(values, grid, floor=FLOOR):
    v = np.asarray(values, dtype=float)
    z = np.trapezoid(v, grid)
    if not z > 0:
        v = np.ones_like(v)
        z = np.trapezoid(v, grid)
    v = np.maximum(v / z, floor)
    return v / np.trapezoid(v, grid)


def scott_bandwidth(samples):
    x = np.asarray(samples, dtype=float)
    return float(np.std(x, ddof=1) * len(x) ** (-0.2))


def kde(samples, grid_spec=None, descriptor_id=None):
    """Gaussian KDE with Scott's-rule bandwidth on a uniform grid.

    The result is normalized to unit trapezoidal mass, floored at ``1e-12``
    and renormalized, so it is strictly positive everywhere.
    """
    x = np.asarray(samples.samples if isinstance(samples, DescriptorSamples) else samples,
                   dtype=float).ravel()
    if descriptor_id is None and isinstance(samples, DescriptorSamples):
        descriptor_id = samples.descriptor_id
    if len(x) < 2:
        raise InsufficientSamplesError(descriptor_id, len(x))
    h = scott_bandwidth(x)
    if not h > 0:
        raise InsufficientSamplesError(descriptor_id, len(x), "zero sample variance")
    spec = grid_spec or GridSpec()
    lo = x.min() - spec.pad * h if spec.lo is None else spec.lo
    hi = x.max() + spec.pad * h if spec.hi is None else spec.hi
    grid = np.linspace(lo, hi, spec.points)
    dens = np.zeros_like(grid)
    # exact kernel sum, chunked to bound memory
    for start in range(0, len(x), 2048):
        u = (grid[:, None] - x[None, start:start + 2048]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= len(x) * h * math.sqrt(2.0 * math.pi)
    return Density(grid, _normalize(dens, grid), h)


def trapezoid_weights(grid):
    g = np.asarray(grid, dtype=float)
    w = np.zeros_like(g)
    d = np.diff(g)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def weighted_kl(p, q, weights=None):
    """``sum w p log(p/q)``; unit weights give the discrete divergence."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=float)
    mask = p > 0
    return float(np.sum(w[mask] * p[mask] * np.log(p[mask] / q[mask])))


def resample(density, grid):
    v = np.interp(grid, density.grid, density.values, left=0.0, right=0.0)
    return _normalize(v, grid)


def kl_divergence(target, candidate, points=GRID_POINTS):
    """``KL(target || candidate)`` on a shared grid spanning both supports."""
    if target is candidate:
        return 0.0
    lo = min(target.grid[0], candidate.grid[0])
    hi = max(target.grid[-1], candidate.grid[-1])
    grid = np.linspace(lo, hi, points)
    p = resample(target, grid)
    q = resample(candidate, grid)
    value = weighted_kl(p, q, trapezoid_weights(grid))
    if value < 0:
        if value < -1e-9:
            raise ArithmeticError(f"negative divergence {value}")
        value = 0.0
    return value


@dataclass(frozen=True, eq=False)
class ObjectiveVector:
    y: np.ndarray
    descriptor_ids: tuple

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        ids = tuple(int(d) for d in self.descriptor_ids)
        if len(y) != len(ids):
            raise ValueError("one objective per descriptor required")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "descriptor_ids", ids)

    def __len__(self):
        return len(self.y)


def target_densities(target_samples, grid_spec=None):
    """KDE every target descriptor once; fails loudly on thin targets."""
    return {s.descriptor_id: kde(s, grid_spec) for s in target_samples}


def objective_vector(target, candidate_samples, orientation="target||candidate", grid_spec=None):
    """One KL objective per descriptor.

    ``target`` is either a list of :class:`DescriptorSamples` or a mapping
    ``descriptor_id -> Density`` (the cached form used by campaigns).
    """
    if not isinstance(target, dict):
        target = target_densities(target, grid_spec)
    cand = {s.descriptor_id: s for s in candidate_samples}
    if set(cand) != set(target):
        raise ValueError(f"descriptor ids differ: target {sorted(target)} vs candidate {sorted(cand)}")
    ids = sorted(target)
    y = []
    for d in ids:
        q = kde(cand[d], grid_spec)
        p = target[d]
        if orientation == "target||candidate":
            y.append(kl_divergence(p, q))
        elif orientation == "candidate||target":
            y.append(kl_divergence(q, p))
        else:
            raise ValueError(f"unknown KL orientation {orientation!r}")
    return ObjectiveVector(np.array(y), tuple(ids))


# --------------------------------------------------------------------------
# scalarization


@dataclass(frozen=True)
class ScalarizationConfig:
    method: str = "weighted_sum"
    weights: tuple = None
    ideal: tuple = None
    rho: float = 0.05

    def __post_init__(self):
        if self.method not in ("weighted_sum", "chebyshev", "augmented_chebyshev"):
            raise ValueError(f"unknown scalarization {self.method!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not w.sum() > 0:
                raise ValueError("weights must be non-negative with a positive sum")
        if self.method == "augmented_chebyshev" and not self.rho > 0:
            raise ValueError("rho must be positive for augmented Chebyshev")


def scalarize(y, config=None):
    config = config or ScalarizationConfig()
    y = np.asarray(y.y if isinstance(y, ObjectiveVector) else y, dtype=float)
    lam = np.ones_like(y) if config.weights is None else np.asarray(config.weights, dtype=float)
    z = np.zeros_like(y) if config.ideal is None else np.asarray(config.ideal, dtype=float)
    if lam.shape != y.shape or z.shape != y.shape:
        raise ValueError(f"dimension mismatch: y has {y.size} entries, weights {lam.size}, ideal {z.size}")
    if config.method == "weighted_sum":
        return float(np.sum(lam * y))
    cheb = float(np.max(lam * (y - z)))
    if config.method == "chebyshev":
        return cheb
    return cheb + config.rho * float(np.sum(lam * y))


# --------------------------------------------------------------------------
# noise and correlation


@dataclass(frozen=True)
class NoiseProfile:
    mean: np.ndarray
    variance: np.ndarray
    replicates: int
    descriptor_ids: tuple = field(default=())

    @property
    def total_mean(self):
        return float(np.sum(self.mean))

    @property
    def total_variance(self):
        return float(np.sum(self.variance))


def quantify_noise(replicates):
    """Per-objective mean and unbiased variance across replicate vectors."""
    if len(replicates) < 2:
        raise ValueError("at least two replicates are needed")
    ids = replicates[0].descriptor_ids if isinstance(replicates[0], ObjectiveVector) else ()
    Y = np.array([r.y if isinstance(r, ObjectiveVector) else r for r in replicates], dtype=float)
    return NoiseProfile(Y.mean(axis=0), Y.var(axis=0, ddof=1), len(Y), tuple(ids))


def objective_correlations(Y):
    """Squared Pearson correlation between objective columns.

    ``Y`` is an ``(n_trials, s)`` array.  Columns with zero variance yield
    ``nan`` rows and columns.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 3:
        raise ValueError("need at least three trials")
    C = Y - Y.mean(axis=0)
    sd = np.sqrt((C * C).sum(axis=0))
    ok = sd > 0
    R = np.full((Y.shape[1], Y.shape[1]), np.nan)
    Z = C[:, ok] / sd[ok]
    r = np.clip(Z.T @ Z, -1.0, 1.0)
    R[np.ix_(ok, ok)] = r * r
    idx = np.flatnonzero(ok)
    R[idx, idx] = 1.0
    return R


def write_noise_csv(profile, path):
    ids = profile.descriptor_ids or tuple(range(1, len(profile.mean) + 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["objective", "descriptor", "mean", "variance"])
        for i, d in enumerate(ids):
            w.writerow([f"y{d}", DESCRIPTOR_NAMES.get(d, str(d)), repr(float(profile.mean[i])),
                        repr(float(profile.variance[i]))])
        w.writerow(["total", "sum", repr(profile.total_mean), repr(profile.total_variance)])


def write_correlations_csv(R, descriptor_ids, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + [f"y{d}" for d in descriptor_ids])
        for d, row in zip(descriptor_ids, R):
            w.writerow([f"y{d}"] + ["nan" if np.isnan(v) else repr(float(v)) for v in row])


def read_correlations_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [int(c[1:]) for c in rows[0][1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), ids


def write_density_csv(density, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid", "value"])
        for g, v in zip(density.grid, density.values):
            w.writerow([repr(float(g)), repr(float(v))])

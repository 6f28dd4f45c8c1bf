"""Gaussian-process regression surrogate.

Squared-exponential ARD kernel on inputs scaled to the unit box, outputs
standardized to zero mean and unit variance.  Hyperparameters are learned by
multi-start L-BFGS-B on the exact log marginal likelihood with its analytic
gradient.
"""

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(ls <= 0) or self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("hyperparameters must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def theta(self):
        return np.concatenate([np.log(self.lengthscales),
                               [math.log(self.signal_variance), math.log(self.noise_variance)]])

    @classmethod
    def from_theta(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[:-2]), float(np.exp(theta[-2])), float(np.exp(theta[-1])))


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 8
    seed: int = 0
    lengthscale_bounds: tuple = (1e-2, 1e1)
    signal_bounds: tuple = (1e-3, 1e2)
    noise_bounds: tuple = (1e-8, 1.0)
    hyperparams: Hyperparams = None  # skip learning when given


def kernel(x1, x2, hyperparams):
    """SE-ARD covariance between two points (or row sets)."""
    ls = hyperparams.lengthscales
    if hyperparams.signal_variance <= 0 or np.any(ls <= 0):
        raise ValueError("hyperparameters must be positive")
    a = np.atleast_2d(np.asarray(x1, dtype=float)) / ls
    b = np.atleast_2d(np.asarray(x2, dtype=float)) / ls
    if a.shape[1] != b.shape[1]:
        raise ValueError("input dimensions differ")
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    K = hyperparams.signal_variance * np.exp(-0.5 * np.maximum(d2, 0.0))
    if np.ndim(x1) == 1 and np.ndim(x2) == 1:
        return float(K[0, 0])
    return K


def _sq_dists(X):
    diff = X[:, None, :] - X[None, :, :]
    return diff * diff  # (n, n, d)


def cholesky_jitter(K, jitter=JITTER_START):
    """Lower Cholesky factor with jitter grown x10 up to ``JITTER_MAX``."""
    n = K.shape[0]
    while True:
        try:
            return linalg.cholesky(K + jitter * np.eye(n), lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise FactorizationError(
                    f"kernel matrix not positive definite with jitter up to {JITTER_MAX:g}") from None


def _lml(theta, D2, y, jitter=None):
    """Value and gradient of the log marginal likelihood in log-hyperparameters."""
    n, _, d = D2.shape
    ls2 = np.exp(2.0 * theta[:d])
    sf2 = math.exp(theta[d])
    sn2 = math.exp(theta[d + 1])
    Kse = sf2 * np.exp(-0.5 * (D2 / ls2).sum(axis=2))
    K = Kse + sn2 * np.eye(n)
    if jitter is None:
        L, jitter = cholesky_jitter(K)
    else:
        L = linalg.cholesky(K + jitter * np.eye(n), lower=True)
    alpha = linalg.cho_solve((L, True), y)
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(d + 2)
    for k in range(d):
        grad[k] = 0.5 * np.sum(W * Kse * D2[:, :, k] / ls2[k])
    grad[d] = 0.5 * np.sum(W * Kse)
    grad[d + 1] = 0.5 * sn2 * np.trace(W)
    return float(value), grad, jitter


@dataclass(frozen=True, eq=False)
class GpModel:
    """Fitted GP; ``X`` in unit-box coordinates and ``y`` standardized."""

    X: np.ndarray
    y: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    y_mean: float
    y_std: float
    hyperparams: Hyperparams
    factor: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = JITTER_START

    @property
    def n(self):
        return len(self.y)

    @property
    def dim(self):
        return self.X.shape[1]

    def _rows(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim < 2:
            x = x.reshape(-1, self.dim) if self.dim == 1 else x.reshape(1, -1)
        return x

    def to_unit(self, x):
        return (self._rows(x) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u):
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)

    @property
    def X_raw(self):
        return self.from_unit(self.X)

    @property
    def y_raw(self):
        return self.y_mean + self.y_std * self.y

    def with_points(self, x_raw, y_raw):
        """Same hyperparameters and scaling, extra training points appended."""
        U = self.to_unit(x_raw)
        if len(U) == 0:
            return self
        ys = (np.asarray(y_raw, dtype=float).ravel() - self.y_mean) / self.y_std
        return _assemble(np.vstack([self.X, U]), np.concatenate([self.y, ys]), self.lower,
                         self.upper, self.y_mean, self.y_std, self.hyperparams)


def _assemble(U, ys, lower, upper, y_mean, y_std, hp):
    K = kernel(U, U, hp) + hp.noise_variance * np.eye(len(ys))
    L, jitter = cholesky_jitter(K)
    alpha = linalg.cho_solve((L, True), ys)
    return GpModel(U, ys, lower, upper, y_mean, y_std, hp, L, alpha, jitter)


def _default_hyperparams(d):
    return Hyperparams(np.full(d, 0.3), 1.0, 1e-6)


def fit(X, y, bounds, options=None):
    """Fit a GP to raw inputs ``X`` (n x d) and outputs ``y`` within ``bounds``.

    ``bounds`` is a ``(d, 2)`` array of ``[lower, upper]`` rows.
    """
    options = options or FitOptions()
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim < 2:
        X = X.reshape(len(y), -1)
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if len(X) != len(y) or len(y) < 1:
        raise ValueError("need matching, non-empty X and y")
    lower, upper = bounds[:, 0], bounds[:, 1]
    if np.any(upper <= lower):
        raise ValueError("bounds must satisfy lower < upper")
    U = (X - lower) / (upper - lower)
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 0:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    d = U.shape[1]

    if options.hyperparams is not None:
        hp = options.hyperparams
    elif len(y) < 2:
        hp = _default_hyperparams(d)
    else:
        hp = _learn(U, ys, options)
    return _assemble(U, ys, lower, upper, y_mean, y_std, hp)


def _learn(U, ys, options):
    d = U.shape[1]
    lo = np.log(np.r_[np.full(d, options.lengthscale_bounds[0]), options.signal_bounds[0],
                      options.noise_bounds[0]])
    hi = np.log(np.r_[np.full(d, options.lengthscale_bounds[1]), options.signal_bounds[1],
                      options.noise_bounds[1]])
    starts = qmc.scale(qmc.LatinHypercube(d=d + 2, seed=options.seed).random(options.n_starts), lo, hi)
    D2 = _sq_dists(U)

    def neg(theta):
        try:
            v, g, _ = _lml(theta, D2, ys)
        except FactorizationError:
            return 1e25, np.zeros_like(theta)
        return -v, -g

    best = None
    for t0 in starts:
        res = optimize.minimize(neg, t0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)))
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    return Hyperparams.from_theta(np.clip(best.x, lo, hi))


def predict(model, x):
    """Posterior mean and latent variance at raw-unit point(s) ``x``."""
    U = model.to_unit(x)
    Ks = kernel(U, model.X, model.hyperparams)
    mu = Ks @ model.alpha
    v = linalg.solve_triangular(model.factor, Ks.T, lower=True)
    var = model.hyperparams.signal_variance - (v * v).sum(axis=0)
    var = np.where(var < 0, np.where(var > -1e-12, 0.0, var), var)
    var = np.maximum(var, 0.0)
    mean = model.y_mean + model.y_std * mu
    var = var * model.y_std ** 2
    if np.ndim(x) < 2 and len(U) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


def log_marginal_likelihood(model):
    """Log marginal likelihood of the standardized data and its gradient.

    The gradient is with respect to ``log`` lengthscales, ``log`` signal
    variance and ``log`` noise variance, evaluated at the model's jitter.
    """
    v, g, _ = _lml(model.hyperparams.theta, _sq_dists(model.X), model.y, model.jitter)
    return v, g


def lml_at(theta, model):
    """LML value at arbitrary log-hyperparameters on the model's data and jitter."""
    v, _, _ = _lml(np.asarray(theta, dtype=float), _sq_dists(model.X), model.y, model.jitter)
    return v


# --------------------------------------------------------------------------
# text snapshot


def dump_model(model):
    """Versioned plain-text snapshot (hyperparameters plus CSV data blocks)."""
    buf = io.StringIO()
    hp = model.hyperparams
    buf.write("GPV1\n")
    buf.write(f"dim,{model.dim}\nn,{model.n}\n")
    buf.write("lengthscales," + ",".join(repr(float(v)) for v in hp.lengthscales) + "\n")
    buf.write(f"signal_variance,{hp.signal_variance!r}\nnoise_variance,{hp.noise_variance!r}\n")
    buf.write("lower," + ",".join(repr(float(v)) for v in model.lower) + "\n")
    buf.write("upper," + ",".join(repr(float(v)) for v in model.upper) + "\n")
    buf.write(f"y_mean,{model.y_mean!r}\ny_std,{model.y_std!r}\n")
    buf.write("[data]\n")
    buf.write(",".join([f"x{i}" for i in range(model.dim)] + ["y"]) + "\n")
    for xr, yr in zip(model.X, model.y):
        buf.write(",".join(repr(float(v)) for v in list(xr) + [yr]) + "\n")
    return buf.getvalue()


def load_model(text):
    lines = text.strip().split("\n")
    if lines[0] != "GPV1":
        raise ValueError("unsupported model snapshot")
    head = {}
    i = 1
    while lines[i] != "[data]":
        k, *vals = lines[i].split(",")
        head[k] = [float(v) for v in vals]
        i += 1
    rows = np.array([[float(v) for v in r.split(",")] for r in lines[i + 2:]]).reshape(-1, int(head["dim"][0]) + 1)
    hp = Hyperparams(np.array(head["lengthscales"]), head["signal_variance"][0], head["noise_variance"][0])
    return _assemble(rows[:, :-1], rows[:, -1], np.array(head["lower"]), np.array(head["upper"]),
                     head["y_mean"][0], head["y_std"][0], hp)


__all__ = ["Hyperparams", "FitOptions", "GpModel", "FactorizationError", "kernel", "fit",
           "predict", "log_marginal_likelihood", "lml_at", "cholesky_jitter", "dump_model",
           "load_model"]

"""Potts-model kinetic Monte Carlo simulators.

Two forward models share one Metropolis kernel:

* isothermal curvature-driven grain growth (:func:`run_grain_growth`), and
* a moving weld pool (:func:`run_weld`) that melts, re-solidifies and
  coarsens the heat-affected zone around a pool travelling along ``x``.

Lattices are 2-D integer label arrays of shape ``(length, width)``: rows are
indexed by ``y`` and columns by ``x``.  Energy is the number of unlike
nearest-neighbour bonds (4-neighbourhood, free boundaries, bond energy 1).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from .rng import Xoshiro256, make_state, next_below, next_double

logger = logging.getLogger(__name__)

MOLTEN = -1

_DY = (-1, 1, 0, 0)
_DX = (0, 0, -1, 1)


@dataclass(frozen=True, eq=False)
class Microstructure:
    """Immutable labelled lattice.

    ``spins[y, x]`` is the grain label at column ``x`` of row ``y``; the
    array is stored read-only so values can be shared across threads.
    """

    spins: np.ndarray

    def __post_init__(self):
        spins = np.array(self.spins, dtype=np.int64, copy=True)
        if spins.ndim != 2 or spins.size == 0:
            raise ValueError("spins must be a non-empty 2-D array")
        if spins.min() < 0:
            raise ValueError("labels must be non-negative")
        spins.setflags(write=False)
        object.__setattr__(self, "spins", spins)

    @property
    def width(self):
        return self.spins.shape[1]

    @property
    def length(self):
        return self.spins.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Microstructure):
            return NotImplemented
        return np.array_equal(self.spins, other.spins)

    __hash__ = None


@dataclass(frozen=True)
class MobilityModel:
    """Grain-boundary mobility prefactor for Metropolis acceptance.

    ``constant`` mode always yields 1.  ``arrhenius`` mode evaluates
    ``M0 exp(-Q / T)`` and divides by its value at ``reference_temperature``
    (the hottest temperature of the run, defaulting to ``temperature``) so the
    resulting factor stays in ``(0, 1]``.
    """

    mode: str = "constant"
    prefactor: float = 1.0
    activation: float = 0.0
    temperature: float = 1.0
    reference_temperature: float = None

    def __post_init__(self):
        if self.mode not in ("constant", "arrhenius"):
            raise ValueError(f"unknown mobility mode {self.mode!r}")
        if self.prefactor <= 0:
            raise ValueError("mobility prefactor must be positive")
        if self.mode == "arrhenius" and self.temperature <= 0:
            raise ValueError("arrhenius mobility needs a positive temperature")

    def raw(self, temperature=None):
        t = self.temperature if temperature is None else temperature
        return self.prefactor * math.exp(-self.activation / t)

    def factor(self, temperature=None):
        if self.mode == "constant":
            return 1.0
        t_ref = self.reference_temperature or self.temperature
        m = self.raw(temperature) / self.raw(t_ref)
        if not 0.0 < m <= 1.0 + 1e-12:
            raise ValueError(f"normalized mobility {m} outside (0, 1]")
        return min(m, 1.0)


@dataclass(frozen=True)
class GrainGrowthParams:
    width: int = 256
    length: int = 256
    num_spins: int = 4096
    kbts: float = 0.7
    steps: int = 20
    seed: int = 0
    mobility: MobilityModel = field(default_factory=MobilityModel)

    def __post_init__(self):
        if self.kbts < 0:
            raise ValueError("kbts must be >= 0")
        if self.num_spins < 2:
            raise ValueError("num_spins must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


# Table-1 style bounds used when the weld model is calibrated.
WELD_BOUNDS = {"velocity": (15.0, 30.0), "haz": (120.0, 200.0), "pool_width": (50.0, 250.0)}


@dataclass(frozen=True)
class WeldParams:
    """Moving weld-pool model settings.

    The pool travels along ``x`` (columns) on the centreline row of the
    lattice, so ``length`` (rows) is the lateral extent of the plate.
    """

    width: int = 256
    length: int = 512
    velocity: float = 15.0
    haz: float = 60.0
    pool_width: float = 80.0
    pool_shape: str = "teardrop"
    kbts: float = 0.25
    seed: int = 0
    haz_profile: str = "linear"
    haz_activation: float = 2.0
    epitaxy: float = 0.3
    base_sweeps: int = 5
    base_spins: int = None

    def __post_init__(self):
        if self.pool_shape not in ("teardrop", "ellipse"):
            raise ValueError(f"unknown pool shape {self.pool_shape!r}")
        if self.haz_profile not in ("linear", "arrhenius"):
            raise ValueError(f"unknown haz profile {self.haz_profile!r}")
        if self.velocity <= 0:
            raise ValueError("velocity must be positive")
        if self.haz < 0 or self.pool_width <= 0:
            raise ValueError("haz must be >= 0 and pool_width > 0")
        if self.kbts < 0:
            raise ValueError("kbts must be >= 0")


# --------------------------------------------------------------------------
# MSV1 text format


def to_msv1(ms):
    lines = [f"MSV1 {ms.width} {ms.length}"]
    lines.extend(" ".join(map(str, row)) for row in ms.spins.tolist())
    return "\n".join(lines) + "\n"


def from_msv1(text):
    rows = text.strip("\n").split("\n")
    header = rows[0].split()
    if len(header) != 3 or header[0] != "MSV1":
        raise ValueError("not an MSV1 document")
    width, length = int(header[1]), int(header[2])
    body = rows[1:]
    if len(body) != length:
        raise ValueError(f"expected {length} rows, found {len(body)}")
    spins = np.array([list(map(int, r.split())) for r in body], dtype=np.int64)
    if spins.shape != (length, width):
        raise ValueError(f"expected {width} labels per row")
    return Microstructure(spins)


def save_msv1(ms, path):
    with open(path, "w") as fh:
        fh.write(to_msv1(ms))


def load_msv1(path):
    with open(path) as fh:
        return from_msv1(fh.read())


# --------------------------------------------------------------------------
# energy


def init_microstructure(width, length, q, seed):
    """Uniform random labels in ``[0, q)``, deterministic for ``seed``."""
    if width * length < 1 or width < 1 or length < 1:
        raise ValueError("domain must contain at least one site")
    if q < 2:
        raise ValueError("q must be >= 2")
    state = make_state(seed)
    spins = np.empty((length, width), dtype=np.int64)
    _fill_uniform(spins, q, state)
    return Microstructure(spins)


@njit(cache=True, nogil=True)
def _fill_uniform(spins, q, state):
    for y in range(spins.shape[0]):
        for x in range(spins.shape[1]):
            spins[y, x] = next_below(state, q)


def _as_array(ms):
    return ms.spins if isinstance(ms, Microstructure) else np.asarray(ms)


def site_energy(ms, x, y):
    """Number of 4-neighbours whose label differs from site ``(x, y)``."""
    spins = _as_array(ms)
    length, width = spins.shape
    if not (0 <= x < width and 0 <= y < length):
        raise IndexError(f"site ({x}, {y}) outside {width}x{length} lattice")
    return int(_site_energy(spins, y, x, spins[y, x]))


def site_energies(ms):
    """Per-site unlike-neighbour counts for the whole lattice."""
    s = _as_array(ms)
    e = np.zeros(s.shape, dtype=np.int64)
    h = s[:, 1:] != s[:, :-1]
    v = s[1:, :] != s[:-1, :]
    e[:, 1:] += h
    e[:, :-1] += h
    e[1:, :] += v
    e[:-1, :] += v
    return e


def boundary_energy(ms):
    """Total count of unlike bonds."""
    s = _as_array(ms)
    return int(np.count_nonzero(s[:, 1:] != s[:, :-1]) + np.count_nonzero(s[1:, :] != s[:-1, :]))


@njit(cache=True, nogil=True)
def _site_energy(spins, y, x, label):
    length, width = spins.shape
    e = 0
    for k in range(4):
        ny = y + _DY[k]
        nx = x + _DX[k]
        if 0 <= ny < length and 0 <= nx < width:
            s = spins[ny, nx]
            if s >= 0 and s != label:
                e += 1
    return e


@njit(cache=True, nogil=True)
def acceptance_probability(delta_e, kbts, mobility):
    """Metropolis acceptance ``M`` for downhill moves, ``M exp(-dE/kT)`` uphill."""
    if delta_e <= 0:
        return mobility
    if kbts <= 0.0:
        return 0.0
    return mobility * math.exp(-delta_e / kbts)


@njit(cache=True, nogil=True)
def _unlike_labels(spins, y, x, out):
    """Distinct solid neighbour labels different from the site's; returns count."""
    length, width = spins.shape
    own = spins[y, x]
    n = 0
    for k in range(4):
        ny = y + _DY[k]
        nx = x + _DX[k]
        if 0 <= ny < length and 0 <= nx < width:
            s = spins[ny, nx]
            if s < 0 or s == own:
                continue
            dup = False
            for j in range(n):
                if out[j] == s:
                    dup = True
            if not dup:
                out[n] = s
                n += 1
    return n


@njit(cache=True, nogil=True)
def _try_flip(spins, y, x, kbts, mobility, state, buf):
    """One curvature-driven flip attempt.

    Returns ``(attempted, accepted, delta_e)``.
    """
    n = _unlike_labels(spins, y, x, buf)
    if n == 0:
        return False, False, 0
    cand = buf[next_below(state, n)]
    own = spins[y, x]
    de = _site_energy(spins, y, x, cand) - _site_energy(spins, y, x, own)
    p = acceptance_probability(de, kbts, mobility)
    if p >= 1.0 or next_double(state) < p:
        spins[y, x] = cand
        return True, True, de
    return True, False, de


@njit(cache=True, nogil=True)
def _sweep_kernel(spins, n_attempts, kbts, mobility, state, trace, trace_every, energy0):
    """Random-site flip attempts over the whole lattice.

    ``trace`` (length >= 1) receives the running boundary energy every
    ``trace_every`` attempts when ``trace_every > 0``.  Returns the number of
    accepted flips and the largest accepted energy change.
    """
    length, width = spins.shape
    n_sites = length * width
    buf = np.empty(4, dtype=np.int64)
    energy = energy0
    accepted = 0
    max_de = -1000
    slot = 0
    if trace_every > 0:
        trace[0] = energy
        slot = 1
    for a in range(n_attempts):
        i = next_below(state, n_sites)
        y = i // width
        x = i - y * width
        att, acc, de = _try_flip(spins, y, x, kbts, mobility, state, buf)
        if acc:
            accepted += 1
            energy += de
            if de > max_de:
                max_de = de
        if trace_every > 0 and (a + 1) % trace_every == 0 and slot < trace.shape[0]:
            trace[slot] = energy
            slot += 1
    return accepted, max_de


@njit(cache=True, nogil=True)
def _haz_kernel(spins, ys, xs, mob, kbts, state):
    n = ys.shape[0]
    buf = np.empty(4, dtype=np.int64)
    accepted = 0
    for _ in range(n):
        i = next_below(state, n)
        m = mob[i]
        if m <= 0.0:
            continue
        att, acc, de = _try_flip(spins, ys[i], xs[i], kbts, m, state, buf)
        if acc:
            accepted += 1
    return accepted


def metropolis_flip(spins, x, y, candidate, kbts, mobility, rng):
    """Attempt to relabel site ``(x, y)`` of a mutable lattice to ``candidate``.

    ``candidate`` must be the label of one of the site's unlike neighbours.
    ``rng`` is a :class:`~microcal.rng.Xoshiro256`.  Returns whether the flip
    was accepted; ``spins`` is modified only on acceptance.
    """
    if kbts < 0:
        raise ValueError("kbts must be >= 0")
    if not 0.0 < mobility <= 1.0:
        raise ValueError("mobility must lie in (0, 1]")
    buf = np.empty(4, dtype=np.int64)
    n = _unlike_labels(spins, y, x, buf)
    if candidate not in buf[:n]:
        raise ValueError(f"label {candidate} is not an unlike neighbour of ({x}, {y})")
    de = _site_energy(spins, y, x, candidate) - _site_energy(spins, y, x, spins[y, x])
    p = acceptance_probability(de, kbts, mobility)
    if p >= 1.0 or rng.random() < p:
        spins[y, x] = candidate
        return True
    return False


@dataclass
class GrowthTrace:
    """Bookkeeping from :func:`run_grain_growth` when ``trace=True``."""

    energies: np.ndarray
    accepted: int
    max_accepted_delta: int


def run_grain_growth(params, trace=False, initial=None):
    """Isothermal Potts grain growth.

    Performs ``steps * width * length`` attempts at uniformly random sites.
    With ``trace=True`` a :class:`GrowthTrace` holding the boundary energy
    after every sweep is returned alongside the microstructure.
    """
    if initial is None:
        initial = init_microstructure(params.width, params.length, params.num_spins, params.seed)
    spins = np.array(initial.spins)
    state = make_state(_stream_seed(params.seed, 1))
    n_sites = spins.size
    mob = params.mobility.factor()
    energy0 = boundary_energy(spins) if trace else 0
    tr = np.zeros(params.steps + 1 if trace else 1, dtype=np.int64)
    accepted, max_de = _sweep_kernel(
        spins, params.steps * n_sites, float(params.kbts), mob, state, tr,
        n_sites if trace else 0, energy0,
    )
    ms = Microstructure(spins)
    if trace:
        return ms, GrowthTrace(tr, int(accepted), int(max_de))
    return ms


def _stream_seed(seed, stream):
    # independent generator per phase of a run; splitmix of the pair
    return (int(seed) * 0x9E3779B97F4A7C15 + stream * 0xD1B54A32D192ED03) & ((1 << 64) - 1)


# --------------------------------------------------------------------------
# weld pool


def pool_extent(pool_shape, pool_width):
    """(ahead, behind) distance from the pool centre along the travel axis."""
    r = pool_width / 2.0
    if pool_shape == "teardrop":
        return r, float(pool_width)
    if pool_shape == "ellipse":
        return 0.75 * pool_width, 0.75 * pool_width
    raise ValueError(f"unknown pool shape {pool_shape!r}")


def pool_contains(pool_shape, pool_width, pool_center, x, y):
    """Whether point(s) ``(x, y)`` lie inside the weld pool.

    The teardrop is a semicircular nose of radius ``pool_width / 2`` ahead of
    the centre joined to a straight taper that closes ``pool_width`` behind
    it.  The ellipse has lateral semi-axis ``pool_width / 2`` and
    longitudinal semi-axis ``0.75 * pool_width``.  Works elementwise on
    arrays.
    """
    if pool_width <= 0:
        raise ValueError("pool_width must be positive")
    cx, cy = pool_center
    dx = np.asarray(x, dtype=float) - cx
    dy = np.abs(np.asarray(y, dtype=float) - cy)
    r = pool_width / 2.0
    if pool_shape == "ellipse":
        inside = (dx / (0.75 * pool_width)) ** 2 + (dy / r) ** 2 <= 1.0
    elif pool_shape == "teardrop":
        nose = (dx >= 0) & (dx * dx + dy * dy <= r * r)
        half = r * (1.0 + dx / pool_width)
        tail = (dx < 0) & (dx >= -pool_width) & (dy <= half)
        inside = nose | tail
    else:
        raise ValueError(f"unknown pool shape {pool_shape!r}")
    return bool(inside) if np.ndim(inside) == 0 else inside


@njit(cache=True, nogil=True)
def _solidify(spins, ys, xs, state, next_label, epitaxy):
    """Epitaxial solidification of molten sites that left the pool.

    Sites are filled in waves: each wave copies, for every pending site with
    at least one solid neighbour, the label of the trailing neighbour
    (``x - 1``) with probability ``epitaxy`` and otherwise that of a randomly
    chosen solid neighbour.  A pending region with no solid contact nucleates a fresh
    label.  Returns the next unused label.
    """
    length, width = spins.shape
    n = ys.shape[0]
    done = np.zeros(n, dtype=np.bool_)
    chosen = np.empty(n, dtype=np.int64)
    cand = np.empty(4, dtype=np.int64)
    remaining = n
    while remaining > 0:
        progressed = False
        for i in range(n):
            chosen[i] = -1
            if done[i]:
                continue
            y = ys[i]
            x = xs[i]
            c = 0
            for k in range(4):
                ny = y + _DY[k]
                nx = x + _DX[k]
                if 0 <= ny < length and 0 <= nx < width and spins[ny, nx] >= 0:
                    cand[c] = spins[ny, nx]
                    c += 1
            if c > 0:
                if x > 0 and spins[y, x - 1] >= 0 and next_double(state) < epitaxy:
                    chosen[i] = spins[y, x - 1]
                else:
                    chosen[i] = cand[next_below(state, c)]
                progressed = True
        if progressed:
            for i in range(n):
                if chosen[i] >= 0:
                    spins[ys[i], xs[i]] = chosen[i]
                    done[i] = True
                    remaining -= 1
        else:
            for i in range(n):
                if not done[i]:
                    spins[ys[i], xs[i]] = next_label
                    next_label += 1
                    done[i] = True
                    remaining -= 1
                    break
    return next_label


@dataclass
class WeldHistory:
    """Per-run masks for invariant checks."""

    initial: Microstructure
    ever_haz: np.ndarray
    ever_molten: np.ndarray


def _haz_mobility(params, d):
    frac = 1.0 - d / params.haz
    if params.haz_profile == "linear":
        return frac
    # temperature falls linearly across the zone; normalized by the boundary value
    t = 0.25 + 0.75 * frac
    return np.exp(-params.haz_activation / t) / math.exp(-params.haz_activation)


def run_weld(params, history=False):
    """Translate a weld pool across a fine-grained plate.

    Each Monte Carlo step melts the sites inside the pool, solidifies the
    molten sites it has just left, and performs one sweep of flip attempts
    over the solid sites within ``haz`` of the pool with mobility falling
    from 1 at the pool edge to 0 at distance ``haz``.  Sites never within
    ``haz`` of the pool are left untouched.
    """
    width, length = params.width, params.length
    if params.pool_width > length:
        raise ValueError(f"pool width {params.pool_width} exceeds lateral extent {length}")
    if params.pool_width + 2 * params.haz > length:
        logger.warning("pool width + 2*haz exceeds the lateral extent %d", length)

    q = params.base_spins or max(2, width * length // 16)
    base = run_grain_growth(
        GrainGrowthParams(width=width, length=length, num_spins=q, kbts=0.0,
                          steps=params.base_sweeps, seed=params.seed)
    )
    spins = np.array(base.spins)
    next_label = int(spins.max()) + 1
    state = make_state(_stream_seed(params.seed, 2))

    ahead, behind = pool_extent(params.pool_shape, params.pool_width)
    cy = (length - 1) / 2.0
    haz = float(params.haz)
    pad = int(math.ceil(haz)) + 2
    y0 = max(0, int(math.floor(cy - params.pool_width / 2.0)) - pad)
    y1 = min(length, int(math.ceil(cy + params.pool_width / 2.0)) + pad + 1)
    rows = np.arange(y0, y1)

    molten = np.zeros((length, width), dtype=bool)
    ever_haz = np.zeros((length, width), dtype=bool) if history else None
    ever_molten = np.zeros((length, width), dtype=bool) if history else None

    def pool_window(cx):
        wx0 = int(math.floor(cx - behind)) - pad
        wx1 = int(math.ceil(cx + ahead)) + pad + 1
        cols = np.arange(wx0, wx1)
        inside = pool_contains(params.pool_shape, params.pool_width, (cx, cy),
                               cols[None, :], rows[:, None])
        dx0, dx1 = max(wx0, 0), min(wx1, width)
        pool = np.zeros((length, width), dtype=bool)
        if dx1 > dx0:
            pool[y0:y1, dx0:dx1] = inside[:, dx0 - wx0:dx1 - wx0]
        return pool, inside, wx0, dx0, dx1

    # the pool advances in sub-steps of at most one site so that melting and
    # epitaxial solidification see a continuous trailing edge
    n_sub = max(1, int(math.ceil(params.velocity)))
    sub = params.velocity / n_sub
    cx = -ahead
    kbts = float(params.kbts)
    step = 0
    while True:
        for k in range(n_sub):
            pos = cx + (k + 1 - n_sub) * sub if step else cx
            pool, inside, wx0, dx0, dx1 = pool_window(pos)
            exiting = molten & ~pool
            spins[pool] = MOLTEN
            if exiting.any():
                ey, ex = np.nonzero(exiting)
                next_label = _solidify(spins, ey.astype(np.int64), ex.astype(np.int64), state,
                                       next_label, float(params.epitaxy))
            molten = pool
            if history:
                ever_molten |= pool
            if not step:
                break

        if haz > 0 and inside.any() and dx1 > dx0:
            dist = ndimage.distance_transform_edt(~inside)[:, dx0 - wx0:dx1 - wx0]
            zone = (dist > 0) & (dist <= haz)
            if zone.any():
                zy, zx = np.nonzero(zone)
                mob = _haz_mobility(params, dist[zy, zx])
                gy = (zy + y0).astype(np.int64)
                gx = (zx + dx0).astype(np.int64)
                if history:
                    ever_haz[gy, gx] = True
                _haz_kernel(spins, gy, gx, np.ascontiguousarray(mob, dtype=np.float64), kbts, state)

        if not molten.any() and cx - behind > width:
            break
        cx += params.velocity
        step += 1

    ms = Microstructure(spins)
    if history:
        return ms, WeldHistory(base, ever_haz, ever_molten)
    return ms


def weld_track_mask(params):
    """Sites swept by the pool centreline band (|y - axis| <= pool_width / 2)."""
    cy = (params.length - 1) / 2.0
    y = np.arange(params.length)[:, None]
    return np.broadcast_to(np.abs(y - cy) <= params.pool_width / 2.0, (params.length, params.width))


__all__ = [
    "MOLTEN", "Microstructure", "MobilityModel", "GrainGrowthParams", "WeldParams",
    "WELD_BOUNDS", "Xoshiro256", "init_microstructure", "site_energy", "site_energies",
    "boundary_energy", "acceptance_probability", "metropolis_flip", "run_grain_growth",
    "pool_contains", "pool_extent", "run_weld", "weld_track_mask", "to_msv1", "from_msv1",
    "save_msv1", "load_msv1", "GrowthTrace", "WeldHistory",
]

"""Grain segmentation and per-grain / per-chord descriptor samples.

Descriptor ids follow the usual eleven-descriptor ordering:

==  ==========================================
1   major axis ``a`` of the moment ellipse
2   minor axis ``b``
3   orientation ``theta`` in ``[0, pi)``
4   grain area (sites)
5   chord length along ``x`` (rows)
6   chord length along ``y`` (columns)
7   banded ``x`` chord length, band 0
..  ...
11  banded ``x`` chord length, band 4
==  ==========================================

Grain-based descriptors use the grains that pass the area filter; chord
descriptors keep only runs lying in such grains.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .lattice import Microstructure

ALL_DESCRIPTORS = tuple(range(1, 12))
DESCRIPTOR_NAMES = {
    1: "ellipse_major",
    2: "ellipse_minor",
    3: "ellipse_theta",
    4: "grain_area",
    5: "chord_x",
    6: "chord_y",
    7: "band0_chord_x",
    8: "band1_chord_x",
    9: "band2_chord_x",
    10: "band3_chord_x",
    11: "band4_chord_x",
}


class InsufficientSamplesError(ValueError):
    """A descriptor produced fewer than two usable samples."""

    def __init__(self, descriptor_id, count, detail=""):
        self.descriptor_id = descriptor_id
        self.count = count
        msg = f"descriptor {descriptor_id} ({DESCRIPTOR_NAMES.get(descriptor_id, '?')}) has {count} samples"
        super().__init__(msg + (f"; {detail}" if detail else ""))


@dataclass(frozen=True, eq=False)
class Grain:
    label: int
    sites: np.ndarray  # (area, 2) array of (x, y)

    @property
    def area(self):
        return len(self.sites)


@dataclass(frozen=True)
class EllipseFit:
    a: float
    b: float
    theta: float
    xc: float
    yc: float


@dataclass(frozen=True)
class BandConfig:
    """Horizontal sampling bands about the weld axis.

    Band 0 is centred on ``axis_y``; band ``k`` is the pair of intervals at
    distance ``k * (band_width + band_spacing)`` above and below it.  With
    ``axis_y=None`` the lattice centreline ``(length - 1) / 2`` is used.
    """

    band_width: int = 60
    band_spacing: int = 20
    num_bands: int = 5
    axis_y: float = None

    def __post_init__(self):
        if self.band_width <= 0 or self.num_bands < 1 or self.band_spacing < 0:
            raise ValueError("invalid band configuration")

    def rows(self, band_index, length):
        if not 0 <= band_index < self.num_bands:
            raise IndexError(f"band {band_index} outside [0, {self.num_bands})")
        c = (length - 1) / 2.0 if self.axis_y is None else float(self.axis_y)
        offset = band_index * (self.band_width + self.band_spacing)
        half = self.band_width / 2.0
        if c - offset - half < -0.5 or c + offset + half > length - 0.5:
            raise ValueError(f"band {band_index} does not fit in {length} rows")
        r = np.arange(length)
        d = np.abs(r - c)
        if band_index == 0:
            sel = d < half
        else:
            sel = (d >= offset - half) & (d < offset + half)
        return r[sel]


@dataclass(frozen=True)
class FilterConfig:
    area_threshold: float = 150.0
    enabled: bool = True

    def __post_init__(self):
        if self.area_threshold < 0:
            raise ValueError("area_threshold must be >= 0")


@dataclass(frozen=True, eq=False)
class DescriptorSamples:
    descriptor_id: int
    samples: np.ndarray = field(repr=False)

    @property
    def count(self):
        return len(self.samples)

    @property
    def sufficient(self):
        return self.count >= 2

    def __eq__(self, other):
        return (isinstance(other, DescriptorSamples)
                and self.descriptor_id == other.descriptor_id
                and np.array_equal(self.samples, other.samples))


# --------------------------------------------------------------------------
# segmentation


@njit(cache=True, nogil=True)
def _label_components(spins):
    length, width = spins.shape
    comp = -np.ones((length, width), dtype=np.int64)
    stack = np.empty(length * width, dtype=np.int64)
    n = 0
    for y0 in range(length):
        for x0 in range(width):
            if comp[y0, x0] >= 0:
                continue
            lab = spins[y0, x0]
            comp[y0, x0] = n
            top = 0
            stack[0] = y0 * width + x0
            top = 1
            while top > 0:
                top -= 1
                i = stack[top]
                y = i // width
                x = i - y * width
                if y > 0 and comp[y - 1, x] < 0 and spins[y - 1, x] == lab:
                    comp[y - 1, x] = n
                    stack[top] = i - width
                    top += 1
                if y < length - 1 and comp[y + 1, x] < 0 and spins[y + 1, x] == lab:
                    comp[y + 1, x] = n
                    stack[top] = i + width
                    top += 1
                if x > 0 and comp[y, x - 1] < 0 and spins[y, x - 1] == lab:
                    comp[y, x - 1] = n
                    stack[top] = i - 1
                    top += 1
                if x < width - 1 and comp[y, x + 1] < 0 and spins[y, x + 1] == lab:
                    comp[y, x + 1] = n
                    stack[top] = i + 1
                    top += 1
            n += 1
    return comp, n


def label_components(ms):
    """Component-id image (ids in row-major discovery order) and component count."""
    spins = ms.spins if isinstance(ms, Microstructure) else np.asarray(ms, dtype=np.int64)
    comp, n = _label_components(np.ascontiguousarray(spins, dtype=np.int64))
    return comp, int(n)


def segment_grains(ms):
    """Maximal 4-connected constant-label regions, in row-major discovery order."""
    comp, n = label_components(ms)
    flat = comp.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n + 1))
    width = comp.shape[1]
    spins = ms.spins.ravel()
    grains = []
    for g in range(n):
        idx = order[bounds[g]:bounds[g + 1]]
        sites = np.column_stack((idx % width, idx // width))
        grains.append(Grain(int(spins[idx[0]]), sites))
    return grains


def apply_filter(grains, filter_config):
    """Grains with area strictly above the threshold (all grains if disabled)."""
    if not filter_config.enabled:
        return list(grains)
    return [g for g in grains if g.area > filter_config.area_threshold]


# --------------------------------------------------------------------------
# ellipse


def _moment_ellipse(n, sx, sy, sxx, syy, sxy):
    """Moment-equivalent ellipse parameters from raw coordinate sums (vectorized)."""
    n = np.asarray(n, dtype=float)
    xc = sx / n
    yc = sy / n
    cxx = sxx / n - xc * xc + 1.0 / 12.0
    cyy = syy / n - yc * yc + 1.0 / 12.0
    cxy = sxy / n - xc * yc
    tr = 0.5 * (cxx + cyy)
    disc = np.sqrt(np.maximum(0.25 * (cxx - cyy) ** 2 + cxy * cxy, 0.0))
    lmax = tr + disc
    lmin = np.maximum(tr - disc, 1.0 / 12.0)
    theta = np.mod(0.5 * np.arctan2(2.0 * cxy, cxx - cyy), np.pi)
    theta = np.where(theta >= np.pi, 0.0, theta)  # mod of a tiny negative rounds to pi
    return 2.0 * np.sqrt(lmax), 2.0 * np.sqrt(lmin), theta, xc, yc


def fit_ellipse(grain):
    """Ellipse with the same second moments as the grain's unit squares."""
    if grain.area == 0:
        raise ValueError("cannot fit an ellipse to an empty grain")
    x = grain.sites[:, 0].astype(float)
    y = grain.sites[:, 1].astype(float)
    # centre first for numerical accuracy on large grains
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    a, b, theta, _, _ = _moment_ellipse(len(x), dx.sum(), dy.sum(), (dx * dx).sum(),
                                        (dy * dy).sum(), (dx * dy).sum())
    return EllipseFit(float(a), float(b), float(theta), float(mx), float(my))


# --------------------------------------------------------------------------
# chords


def _row_runs(a):
    """(row, length, value) of every maximal constant run along each row."""
    length, width = a.shape
    change = np.ones(a.shape, dtype=bool)
    change[:, 1:] = a[:, 1:] != a[:, :-1]
    starts = np.flatnonzero(change.ravel())
    lengths = np.diff(np.append(starts, a.size))
    return starts // width, lengths, a.ravel()[starts]


def chord_lengths(ms, axis):
    """Run lengths of constant labels along ``x`` (each row) or ``y`` (each column)."""
    spins = ms.spins
    if axis == "x":
        _, lengths, _ = _row_runs(spins)
        return DescriptorSamples(5, lengths.astype(float))
    if axis == "y":
        _, lengths, _ = _row_runs(np.ascontiguousarray(spins.T))
        return DescriptorSamples(6, lengths.astype(float))
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def banded_chord_lengths(ms, band_config, band_index):
    """``x`` run lengths pooled over both row intervals of one band."""
    rows = band_config.rows(band_index, ms.length)
    _, lengths, _ = _row_runs(np.ascontiguousarray(ms.spins[rows]))
    return DescriptorSamples(7 + band_index, lengths.astype(float))


# --------------------------------------------------------------------------
# pipeline


def compute_descriptors(ms, descriptor_set=ALL_DESCRIPTORS, filter_config=None,
                        band_config=None, strict=False):
    """Samples for every requested descriptor, in id order.

    With ``strict=True`` an :class:`InsufficientSamplesError` is raised for
    the first descriptor with fewer than two samples; otherwise such
    descriptors are returned and flagged by ``sufficient``.
    """
    ids = sorted(set(int(d) for d in descriptor_set))
    if not ids or ids[0] < 1 or ids[-1] > 11:
        raise ValueError(f"descriptor ids must be a non-empty subset of 1..11, got {ids}")
    filter_config = filter_config or FilterConfig(enabled=False)
    band_config = band_config or BandConfig()

    comp, n = label_components(ms)
    flat = comp.ravel()
    area = np.bincount(flat, minlength=n)
    if filter_config.enabled:
        keep = area > filter_config.area_threshold
    else:
        keep = np.ones(n, dtype=bool)

    out = {}
    if any(d <= 3 for d in ids):
        length, width = comp.shape
        yy, xx = np.divmod(np.arange(flat.size), width)
        # per-grain centred moments via raw sums on grain-local offsets
        sx = np.bincount(flat, xx, n)
        sy = np.bincount(flat, yy, n)
        ox = (sx / area)[flat]
        oy = (sy / area)[flat]
        dx, dy = xx - ox, yy - oy
        a, b, theta, _, _ = _moment_ellipse(
            area, np.bincount(flat, dx, n), np.bincount(flat, dy, n),
            np.bincount(flat, dx * dx, n), np.bincount(flat, dy * dy, n),
            np.bincount(flat, dx * dy, n))
        out[1], out[2], out[3] = a[keep], b[keep], theta[keep]
    if 4 in ids:
        out[4] = area[keep].astype(float)
    if 5 in ids:
        _, lengths, vals = _row_runs(comp)
        out[5] = lengths[keep[vals]].astype(float)
    if 6 in ids:
        _, lengths, vals = _row_runs(np.ascontiguousarray(comp.T))
        out[6] = lengths[keep[vals]].astype(float)
    for d in ids:
        if d >= 7:
            rows = band_config.rows(d - 7, ms.length)
            _, lengths, vals = _row_runs(np.ascontiguousarray(comp[rows]))
            out[d] = lengths[keep[vals]].astype(float)

    result = [DescriptorSamples(d, np.asarray(out[d], dtype=float)) for d in ids]
    if strict:
        for s in result:
            if not s.sufficient:
                raise InsufficientSamplesError(s.descriptor_id, s.count)
    return result


def write_samples_csv(samples, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["descriptor_id", "value"])
        for s in samples:
            for v in s.samples:
                w.writerow([s.descriptor_id, repr(float(v))])


def read_samples_csv(path):
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(int(row["descriptor_id"]), []).append(float(row["value"]))
    return [DescriptorSamples(d, np.array(v)) for d, v in sorted(groups.items())]


def mean_filtered_area(ms, threshold=0.0):
    """Mean area of grains above ``threshold``; ``nan`` if none pass."""
    (s,) = compute_descriptors(ms, [4], FilterConfig(threshold, threshold > 0))
    return float(s.samples.mean()) if s.count else math.nan

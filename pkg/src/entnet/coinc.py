"""Batch-aligned cross-correlation, peak fitting, and CAR extraction.

The correlator pairs batches by epoch index and histograms t_b - t_a -
static_delay over a bounded lag range. Pair extraction uses sorted-array
window searches, so the cost is O(n log m + k) per epoch with k in-range
pairs, and the per-epoch histograms merge by plain summation (order
independent).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, ContractViolation, EmptyOverlap,
                     InsufficientData, NoPeakError, UndefinedValue)
from .fitting import fit_gaussian
from .timebase import TagStream

DEFAULT_BIN_WIDTH_PS = 100
DEFAULT_RANGE_PS = (-50_000, 50_000)        # +/- 50 ns
DELAY_SCAN_RANGE_PS = (-1_000_000, 1_000_000)  # wide scan to locate static delays


@dataclass
class CorrelationHistogram:
    bin_width_ps: int
    lo_ps: int
    hi_ps: int
    counts: np.ndarray
    static_delay_ps: int = 0
    n_epochs: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (self.hi_ps - self.lo_ps) % self.bin_width_ps != 0:
            raise ConfigError("histogram range must be divisible by bin width")
        nbins = (self.hi_ps - self.lo_ps) // self.bin_width_ps
        if self.counts.size != nbins:
            raise ConfigError("counts length does not match range/bin_width")

    @classmethod
    def empty(cls, bin_width_ps, range_ps, static_delay_ps=0):
        lo, hi = (int(range_ps[0]), int(range_ps[1]))
        nbins = (hi - lo) // int(bin_width_ps)
        return cls(int(bin_width_ps), lo, lo + nbins * int(bin_width_ps),
                   np.zeros(nbins, dtype=np.int64), int(static_delay_ps))

    @property
    def bin_centers_ps(self):
        return self.lo_ps + self.bin_width_ps * (np.arange(self.counts.size) + 0.5)

    def merge(self, other):
        if (other.bin_width_ps, other.lo_ps, other.hi_ps, other.static_delay_ps) != \
                (self.bin_width_ps, self.lo_ps, self.hi_ps, self.static_delay_ps):
            raise ConfigError("histograms with different axes cannot be merged")
        return CorrelationHistogram(self.bin_width_ps, self.lo_ps, self.hi_ps,
                                    self.counts + other.counts,
                                    self.static_delay_ps,
                                    self.n_epochs + other.n_epochs)


@dataclass(frozen=True)
class PeakFit:
    center_ps: float
    sigma_ps: float
    fwhm_ps: float
    amplitude: float
    baseline: float
    goodness: float          # reduced chi-square
    center_err_ps: float = 0.0
    sigma_err_ps: float = 0.0


def _window_pair_indices(ta, tb, lo, hi):
    """Indices (i, j) of all pairs with lo <= tb[j] - ta[i] < hi.

    Both inputs must be sorted. Returns flat index arrays ordered by i.
    """
    lo_idx = np.searchsorted(tb, ta + np.int64(lo), side="left")
    hi_idx = np.searchsorted(tb, ta + np.int64(hi), side="left")
    k = hi_idx - lo_idx
    total = int(k.sum())
    if total == 0:
        return (np.empty(0, dtype=np.int64),) * 2
    i_idx = np.repeat(np.arange(ta.size, dtype=np.int64), k)
    offsets = np.repeat(np.cumsum(k) - k, k)
    j_idx = np.repeat(lo_idx, k) + (np.arange(total, dtype=np.int64) - offsets)
    return i_idx, j_idx


def correlate_times(ta, tb, bin_width_ps=DEFAULT_BIN_WIDTH_PS,
                    range_ps=DEFAULT_RANGE_PS, static_delay_ps=0):
    """Histogram of (tb - ta - static_delay) over the lag range for two
    sorted timestamp arrays."""
    hist = CorrelationHistogram.empty(bin_width_ps, range_ps, static_delay_ps)
    ta = np.asarray(ta, dtype=np.int64)
    tb = np.asarray(tb, dtype=np.int64)
    shift = np.int64(static_delay_ps)
    i_idx, j_idx = _window_pair_indices(ta + shift, tb, hist.lo_ps, hist.hi_ps)
    if i_idx.size:
        diffs = tb[j_idx] - ta[i_idx] - shift
        bins = (diffs - hist.lo_ps) // hist.bin_width_ps
        hist.counts += np.bincount(bins, minlength=hist.counts.size)
    hist.n_epochs = 1
    return hist


def _batch_map(batches):
    out = {}
    for b in batches:
        if b.epoch_index in out:
            raise ContractViolation(f"duplicate epoch {b.epoch_index} in batch list")
        out[b.epoch_index] = b
    return out


def cross_correlate(a, b, bin_width_ps=DEFAULT_BIN_WIDTH_PS,
                    range_ps=DEFAULT_RANGE_PS, static_delay_ps=0):
    """Epoch-matched cross-correlation of two batch lists.

    Only batches with equal epoch_index are correlated; per-epoch histograms
    are summed. Raises EmptyOverlap when the nodes share no epoch.
    """
    map_a, map_b = _batch_map(a), _batch_map(b)
    common = sorted(set(map_a) & set(map_b))
    if not common:
        raise EmptyOverlap("no matching epochs between the two nodes")
    hist = CorrelationHistogram.empty(bin_width_ps, range_ps, static_delay_ps)
    for epoch in common:
        h = correlate_times(map_a[epoch].tags.times_ps, map_b[epoch].tags.times_ps,
                            bin_width_ps, range_ps, static_delay_ps)
        hist.counts += h.counts
    hist.n_epochs = len(common)
    return hist


def fit_peak(h):
    """Least-squares Gaussian + constant baseline fit of the histogram peak.

    Requires a bin exceeding the baseline by at least 5 Poisson sigma;
    otherwise NoPeakError is raised (fit non-convergence raises
    FitConvergenceError instead).
    """
    counts = h.counts
    baseline = float(np.median(counts))
    significance = 5.0 * np.sqrt(max(baseline, 1.0))
    if counts.max() < baseline + significance:
        raise NoPeakError("no bin exceeds the baseline by 5 Poisson sigma")
    fit = fit_gaussian(h.bin_centers_ps, counts, with_baseline=True)
    return PeakFit(center_ps=fit.center, sigma_ps=fit.sigma, fwhm_ps=fit.fwhm,
                   amplitude=fit.height, baseline=fit.baseline,
                   goodness=fit.reduced_chisq, center_err_ps=fit.center_err,
                   sigma_err_ps=fit.sigma_err)


def peak_argmax(h):
    """Raw-argmax peak position (bin center of the maximum), for cross-checks."""
    return float(h.bin_centers_ps[int(np.argmax(h.counts))])


def _greedy_match(ta, tb, lo, hi, target):
    """One-to-one pairing of tags whose difference falls in [lo, hi].

    Tags are consumed greedily in time order; each a-tag takes its unused
    b-candidate closest to the target difference.
    """
    i_idx, j_idx = _window_pair_indices(ta, tb, lo, hi + 1)
    if i_idx.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    used_b = np.zeros(tb.size, dtype=bool)
    out_i, out_j = [], []
    # candidates arrive sorted by i, then by j
    pos = 0
    n = i_idx.size
    while pos < n:
        i = i_idx[pos]
        end = pos
        while end < n and i_idx[end] == i:
            end += 1
        best = -1
        best_err = None
        for p in range(pos, end):
            j = j_idx[p]
            if used_b[j]:
                continue
            err = abs(int(tb[j]) - int(ta[i]) - target)
            if best_err is None or err < best_err:
                best, best_err = j, err
        if best >= 0:
            used_b[best] = True
            out_i.append(i)
            out_j.append(best)
        pos = end
    return np.asarray(out_i, dtype=np.int64), np.asarray(out_j, dtype=np.int64)


@dataclass
class CoincidenceMatches:
    """Matched one-to-one coincidences with their channel labels."""

    channels_a: np.ndarray
    channels_b: np.ndarray
    dt_ps: np.ndarray

    def __len__(self):
        return self.dt_ps.size

    def combo_counts(self):
        counts = {}
        for ca, cb in zip(self.channels_a, self.channels_b):
            key = (str(ca), str(cb))
            counts[key] = counts.get(key, 0) + 1
        return counts


def _epoch_pairs(a, b):
    if isinstance(a, TagStream):
        return [(a, b)]
    map_a, map_b = _batch_map(a), _batch_map(b)
    common = sorted(set(map_a) & set(map_b))
    if not common:
        raise EmptyOverlap("no matching epochs between the two nodes")
    return [(map_a[e].tags, map_b[e].tags) for e in common]


def match_coincidences(a, b, window_ps, center_ps=0, static_delay_ps=0):
    """One-to-one matched coincidences with |t_b - t_a - static - center|
    <= window/2. Accepts two TagStreams or two epoch-batched lists."""
    if window_ps <= 0:
        raise ConfigError("window must be positive")
    target = int(center_ps)
    half = window_ps / 2.0
    lo = int(np.floor(target - half))
    hi = int(np.ceil(target + half))
    chunks = []
    for sa, sb in _epoch_pairs(a, b):
        ta = sa.times_ps + np.int64(static_delay_ps)
        i_idx, j_idx = _greedy_match(ta, sb.times_ps, lo, hi, target)
        chunks.append((sa.channels[i_idx], sb.channels[j_idx],
                       sb.times_ps[j_idx] - ta[i_idx]))
    return CoincidenceMatches(
        np.concatenate([c[0] for c in chunks]),
        np.concatenate([c[1] for c in chunks]),
        np.concatenate([c[2] for c in chunks]))


def coincidences_in_window(a, b, center_ps, window_ps, static_delay_ps=0):
    """Number of one-to-one coincidences inside the window."""
    return len(match_coincidences(a, b, window_ps, center_ps, static_delay_ps))


def car(h, window_ps):
    """Coincidence-to-accidental ratio read off a histogram.

    Peak window counts (centered on the argmax bin) divided by the mean
    sideband level scaled to the window width; sidebands exclude a guard
    zone of 3 windows around the peak.
    """
    if window_ps <= 0:
        raise ConfigError("window must be positive")
    centers = h.bin_centers_ps
    peak_c = centers[int(np.argmax(h.counts))]
    # half-open window so a w-wide window covers exactly w/bin_width bins
    in_window = (centers >= peak_c - window_ps / 2.0) & (centers < peak_c + window_ps / 2.0)
    sideband = np.abs(centers - peak_c) > 3.0 * window_ps
    n_window_bins = int(in_window.sum())
    if sideband.sum() < 10 * n_window_bins:
        raise InsufficientData("need at least 10 window-widths of sideband")
    side_mean = float(h.counts[sideband].mean())
    if side_mean == 0.0:
        raise UndefinedValue("sidebands are empty; CAR is undefined")
    return float(h.counts[in_window].sum()) / (side_mean * n_window_bins)


def write_histogram_csv(path, h):
    with open(path, "w") as fh:
        fh.write("bin_center_ps,count\n")
        for c, n in zip(h.bin_centers_ps, h.counts):
            fh.write(f"{c:.1f},{int(n)}\n")


def peakfit_to_dict(fit):
    return {"center_ps": fit.center_ps, "sigma_ps": fit.sigma_ps,
            "fwhm_ps": fit.fwhm_ps, "amplitude": fit.amplitude,
            "baseline": fit.baseline, "goodness": fit.goodness}


def write_peakfit_json(path, fit):
    with open(path, "w") as fh:
        json.dump(peakfit_to_dict(fit), fh, sort_keys=True, indent=2)
        fh.write("\n")

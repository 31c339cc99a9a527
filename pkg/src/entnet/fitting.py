"""Shared nonlinear least-squares helpers for histogram peaks.

The Gaussian model is integrated over each bin (difference of normal CDFs)
so that fitted widths stay unbiased even when the bin width is comparable
to the peak width. Counts are weighted by their Poisson uncertainty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import ndtr

from .errors import FitConvergenceError, InsufficientData

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# Convergence policy for all histogram fits: relative parameter change
# below XTOL or MAX_ITER iterations, whichever comes first.
XTOL = 1e-8
MAX_ITER = 200


@dataclass(frozen=True)
class GaussianFitResult:
    total: float            # integrated counts under the Gaussian
    center: float
    sigma: float
    baseline: float         # constant per-bin background
    center_err: float
    sigma_err: float
    reduced_chisq: float
    bin_width: float

    @property
    def fwhm(self):
        return FWHM_PER_SIGMA * self.sigma

    @property
    def height(self):
        """Peak excess above baseline at the center, in counts per bin."""
        if self.sigma <= 0:
            return self.total
        return self.total * self.bin_width / (self.sigma * math.sqrt(2.0 * math.pi))


def _binned_gaussian(centers, total, mu, sigma, baseline, bin_width):
    half = 0.5 * bin_width
    hi = ndtr((centers + half - mu) / sigma)
    lo = ndtr((centers - half - mu) / sigma)
    return total * (hi - lo) + baseline


def fit_gaussian(bin_centers, counts, *, with_baseline=False):
    """Fit a bin-integrated Gaussian (plus optional flat baseline) to counts.

    Returns a GaussianFitResult. Degenerate histograms (fewer than three
    occupied bins) are reported with the discretization-floor width of one
    bin, or zero width if every sample fell into a single bin.
    """
    x = np.asarray(bin_centers, dtype=float)
    y = np.asarray(counts, dtype=float)
    if x.size != y.size or x.size == 0:
        raise InsufficientData("histogram is empty or malformed")
    bin_width = float(x[1] - x[0]) if x.size > 1 else 1.0

    baseline0 = float(np.median(y)) if with_baseline else 0.0
    excess = np.clip(y - baseline0, 0.0, None)
    occupied = np.count_nonzero(excess > 0)
    if excess.sum() <= 0:
        raise InsufficientData("histogram has no counts above baseline")

    # Initialize from the peak region (argmax + half-maximum width) so a
    # flat background cannot inflate the starting width.
    peak_idx = int(np.argmax(y))
    mu0 = float(x[peak_idx])
    half_level = baseline0 + 0.5 * (y[peak_idx] - baseline0)
    left = peak_idx
    while left > 0 and y[left - 1] >= half_level:
        left -= 1
    right = peak_idx
    while right < y.size - 1 and y[right + 1] >= half_level:
        right += 1
    n_above = right - left + 1

    if occupied <= 1:
        return GaussianFitResult(float(excess.sum()), mu0, 0.0, baseline0,
                                 0.0, 0.0, float("nan"), bin_width)
    if occupied == 2 or n_above <= 1:
        # Discretization floor: report one bin of FWHM instead of an
        # ill-conditioned fit.
        return GaussianFitResult(float(excess.sum()), mu0,
                                 bin_width / FWHM_PER_SIGMA, baseline0,
                                 bin_width / 2.0, 0.0, float("nan"), bin_width)

    sigma0 = max(n_above * bin_width / FWHM_PER_SIGMA, 0.3 * bin_width)
    near = np.abs(x - mu0) <= 5.0 * sigma0
    total0 = max(float(excess[near].sum()), 1.0)
    yerr = np.sqrt(np.clip(y, 1.0, None))

    span = float(x[-1] - x[0]) + bin_width
    if with_baseline:
        def model(c, total, mu, sigma, baseline):
            return _binned_gaussian(c, total, mu, sigma, baseline, bin_width)
        p0 = [total0, mu0, sigma0, baseline0]
        bounds = ([0.0, x[0], 0.05 * bin_width, 0.0],
                  [np.inf, x[-1], span, np.inf])
    else:
        def model(c, total, mu, sigma):
            return _binned_gaussian(c, total, mu, sigma, 0.0, bin_width)
        p0 = [total0, mu0, sigma0]
        bounds = ([0.0, x[0], 0.05 * bin_width], [np.inf, x[-1], span])

    try:
        popt, pcov = curve_fit(model, x, y, p0=p0, sigma=yerr,
                               absolute_sigma=True, bounds=bounds,
                               xtol=XTOL, maxfev=MAX_ITER * (len(p0) + 2))
    except RuntimeError as exc:
        raise FitConvergenceError(f"gaussian fit did not converge: {exc}") from exc

    perr = np.sqrt(np.clip(np.diag(pcov), 0.0, None))
    resid = (y - model(x, *popt)) / yerr
    dof = max(x.size - len(popt), 1)
    red_chisq = float(np.sum(resid ** 2) / dof)
    baseline = float(popt[3]) if with_baseline else 0.0
    return GaussianFitResult(float(popt[0]), float(popt[1]), float(popt[2]),
                             baseline, float(perr[1]), float(perr[2]),
                             red_chisq, bin_width)

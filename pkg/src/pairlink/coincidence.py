"""Coincidence counting, delay histograms, accidentals, CAR and Gaussian peak fits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import curve_fit

from .tagstream import TagStream

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
DEFAULT_WINDOW_PS = 1000


class UnsortedStreamError(ValueError):
    pass


class NoPeakError(ValueError):
    """The histogram has no peak significantly above its baseline."""

    def __init__(self, message: str, histogram: "DelayHistogram | None" = None):
        super().__init__(message)
        self.histogram = histogram


def _times(s) -> np.ndarray:
    if isinstance(s, TagStream):
        return s.t_ps
    t = np.ascontiguousarray(s, dtype=np.int64)
    if t.size > 1 and np.any(np.diff(t) < 0):
        raise UnsortedStreamError("time tags must be sorted")
    return t


def _duration_ps(s) -> int:
    if isinstance(s, TagStream) and "duration_ps" in s.metadata:
        return int(s.metadata["duration_ps"])
    t = _times(s)
    return int(t[-1] - t[0]) if t.size else 0


@numba.njit(cache=True)
def _greedy_count(ta, tb, delay, window):
    # a tag b matches a when 2*|b - a - delay| <= window
    n_a = ta.size
    n_b = tb.size
    j = 0
    count = 0
    for i in range(n_a):
        a = ta[i] + delay
        while j < n_b and 2 * (a - tb[j]) > window:
            j += 1
        if j < n_b and 2 * (tb[j] - a) <= window:
            count += 1
            j += 1
    return count


@numba.njit(cache=True)
def _sweep_histogram(ta, tb, lo, bin_ps, nbins):
    counts = np.zeros(nbins, dtype=np.int64)
    hi = lo + bin_ps * nbins
    n_b = tb.size
    j0 = 0
    for i in range(ta.size):
        a = ta[i]
        while j0 < n_b and tb[j0] - a < lo:
            j0 += 1
        j = j0
        while j < n_b:
            d = tb[j] - a
            if d >= hi:
                break
            counts[(d - lo) // bin_ps] += 1
            j += 1
    return counts


def count_coincidences(sA, sB, delay_ps: int = 0, window_ps: int = DEFAULT_WINDOW_PS) -> int:
    """Pairs with ``|t_B - t_A - delay| <= window/2``, each tag used at most once.

    Greedy earliest match in a single merge pass, O(n_A + n_B).  For equal
    windows the greedy choice is also a maximum matching, so the count is
    bounded by ``min(n_A, n_B)``.
    """
    if window_ps <= 0:
        raise ValueError("window must be positive")
    return int(_greedy_count(_times(sA), _times(sB), np.int64(delay_ps), np.int64(window_ps)))


@dataclass(frozen=True, eq=False)
class DelayHistogram:
    start_ps: int
    bin_ps: int
    counts: np.ndarray

    @property
    def centers_ps(self) -> np.ndarray:
        return self.start_ps + self.bin_ps * (np.arange(self.counts.size) + 0.5)

    @property
    def stop_ps(self) -> int:
        return self.start_ps + self.bin_ps * self.counts.size

    def argmax_center(self) -> float:
        # np.argmax returns the first maximum: lowest delay wins ties
        return float(self.centers_ps[int(np.argmax(self.counts))])

    def to_csv(self, header: str | None = None) -> str:
        lines = [] if header is None else [f"# {header}"]
        lines.append("delay_ps,count")
        edges = self.start_ps + self.bin_ps * np.arange(self.counts.size)
        lines += [f"{int(d)},{int(c)}" for d, c in zip(edges, self.counts)]
        return "\n".join(lines) + "\n"


def delay_scan(sA, sB, lo_ps: int, hi_ps: int, bin_ps: int) -> DelayHistogram:
    """Histogram of ``t_B - t_A`` over ``[lo, hi)`` from a merge-window sweep.

    Rows are ``delay_ps`` = left bin edge.  The upper edge is rounded up to a
    whole number of bins.  Cost is proportional to the number of pairs in range.
    """
    if bin_ps <= 0 or hi_ps <= lo_ps:
        raise ValueError("range and bin width must be positive")
    nbins = int(-(-(hi_ps - lo_ps) // bin_ps))
    counts = _sweep_histogram(_times(sA), _times(sB), np.int64(lo_ps), np.int64(bin_ps), nbins)
    return DelayHistogram(int(lo_ps), int(bin_ps), counts)


def displaced_delays(delay_ps: int, window_ps: int, n_offsets: int) -> list[int]:
    """Probe delays for the accidental floor: ±10, ±20, ... windows from the peak."""
    out = []
    k = 1
    while len(out) < n_offsets:
        out.append(delay_ps + 10 * k * window_ps)
        if len(out) < n_offsets:
            out.append(delay_ps - 10 * k * window_ps)
        k += 1
    return out


def estimate_accidentals(sA, sB, window_ps: int = DEFAULT_WINDOW_PS, n_offsets: int = 10,
                         delay_ps: int = 0) -> float:
    """Mean in-window count at ``n_offsets`` delays displaced >= 10 windows from ``delay_ps``."""
    if n_offsets < 1:
        raise ValueError("n_offsets must be >= 1")
    ta, tb = _times(sA), _times(sB)
    if ta.size == 0 or tb.size == 0:
        return 0.0
    probes = displaced_delays(delay_ps, window_ps, n_offsets)
    reach = max(abs(p - delay_ps) for p in probes)
    if min(_duration_ps(sA), _duration_ps(sB)) <= reach:
        raise ValueError("streams are shorter than the accidental-probe displacement span")
    return float(np.mean([count_coincidences(ta, tb, p, window_ps) for p in probes]))


def accidentals_rate_product(sA, sB, window_ps: int, duration_ps: int | None = None) -> float:
    """Cross-check: ``rate_A * rate_B * window * duration`` for Poisson streams."""
    ta, tb = _times(sA), _times(sB)
    T = duration_ps if duration_ps is not None else max(_duration_ps(sA), _duration_ps(sB))
    if T <= 0:
        return 0.0
    return ta.size * tb.size * window_ps / T


@dataclass(frozen=True)
class CoincidenceResult:
    cc: int
    accidentals: float
    car: float
    window_ps: int
    delay_ps: int

    def to_dict(self) -> dict:
        return {"cc": self.cc, "accidentals": self.accidentals,
                "car": self.car if math.isfinite(self.car) else None,
                "window_ps": self.window_ps, "delay_ps": self.delay_ps}


def measure_coincidences(sA, sB, delay_ps: int = 0, window_ps: int = DEFAULT_WINDOW_PS,
                         n_offsets: int = 10) -> CoincidenceResult:
    cc = count_coincidences(sA, sB, delay_ps, window_ps)
    acc = estimate_accidentals(sA, sB, window_ps, n_offsets, delay_ps)
    car = cc / acc if acc > 0 else math.inf
    return CoincidenceResult(cc, acc, car, int(window_ps), int(delay_ps))


# -- peak fitting ----------------------------------------------------------

@dataclass(frozen=True)
class PeakFit:
    center_ps: float
    fwhm_ps: float
    amplitude: float
    baseline: float
    center_err_ps: float = math.nan
    method: str = "gaussian"  # gaussian | centroid | single-bin
    degenerate: bool = False

    @property
    def sigma_ps(self) -> float:
        return self.fwhm_ps / FWHM_PER_SIGMA


def _gauss(x, amp, center, sigma, base):
    return amp * np.exp(-0.5 * ((x - center) / sigma) ** 2) + base


def fit_gaussian_peak(h: DelayHistogram) -> PeakFit:
    """Poisson-weighted least-squares Gaussian-plus-baseline fit to the dominant peak.

    Raises :class:`NoPeakError` unless the highest bin exceeds the median
    baseline by more than ``5*sqrt(max(baseline, 1))``.  A peak confined to one
    bin is returned with ``degenerate=True``; when the nonlinear fit fails the
    centroid of bins above half maximum is used instead.
    """
    y = h.counts.astype(np.float64)
    if y.size == 0:
        raise NoPeakError("empty histogram", h)
    x = h.centers_ps
    base = float(np.median(y))
    k = int(np.argmax(y))
    excess = y - base
    peak = float(excess[k])
    if peak <= 5.0 * math.sqrt(max(base, 1.0)):
        raise NoPeakError("no bin significantly above the baseline", h)
    above = excess > 0.5 * peak
    neighbours = excess[max(k - 1, 0):k + 2]
    if np.count_nonzero(above) == 1 and np.count_nonzero(neighbours > 0.1 * peak) == 1:
        return PeakFit(float(x[k]), 0.0, peak, base, h.bin_ps / math.sqrt(12.0), "single-bin", True)

    # initial width from the second moment of the excess near the peak
    near = np.abs(x - x[k]) <= 10 * h.bin_ps
    w = np.clip(excess[near], 0, None)
    mu = float(np.sum(w * x[near]) / np.sum(w))
    sigma0 = math.sqrt(max(float(np.sum(w * (x[near] - mu) ** 2) / np.sum(w)), (h.bin_ps / 2.0) ** 2))
    try:
        popt, pcov = curve_fit(
            _gauss, x, y, p0=[peak, float(x[k]), sigma0, base], sigma=np.sqrt(np.maximum(y, 1.0)),
            absolute_sigma=True,
            bounds=([0.0, x[0] - h.bin_ps, 1e-3, -np.inf], [np.inf, x[-1] + h.bin_ps, np.inf, np.inf]),
            maxfev=5000,
        )
        amp, center, sigma, fbase = (float(v) for v in popt)
        err = float(math.sqrt(pcov[1, 1])) if np.all(np.isfinite(pcov)) else math.nan
        if not (x[0] <= center <= x[-1]) or not math.isfinite(sigma):
            raise RuntimeError("fit left the histogram")
        return PeakFit(center, FWHM_PER_SIGMA * abs(sigma), amp, fbase, err, "gaussian", False)
    except (RuntimeError, ValueError):
        sel = above
        c = float(np.sum(excess[sel] * x[sel]) / np.sum(excess[sel]))
        width = float(np.count_nonzero(sel) * h.bin_ps)
        return PeakFit(c, width, peak, base, h.bin_ps / math.sqrt(12.0), "centroid", False)

"""Two-clock synchronization from the time correlation of photon pairs.

Procedure: find the delay of the first 1 s block by a coarse-to-fine scan,
then walk through the following blocks scanning only a narrow window around
the previous block's delay.  Delays are accumulated on a 1/1024 ps grid so
that the increment and running-sum identities hold exactly in floating point.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .coincidence import DelayHistogram, NoPeakError, PeakFit, delay_scan, fit_gaussian_peak
from .tagstream import TagBlock, TagStream, split_into_blocks

_GRID = 1024.0
MAX_DIRECT_PAIRS = 20_000_000
MAX_FFT_BINS = 1 << 22


class SyncFailure(RuntimeError):
    def __init__(self, message: str, histogram: DelayHistogram | None = None):
        super().__init__(message)
        self.histogram = histogram


class SyncLossError(SyncFailure):
    pass


def _snap(x: float) -> float:
    return round(x * _GRID) / _GRID


def _tags(b) -> TagStream:
    return b.tags if isinstance(b, TagBlock) else b


def _residue(t: np.ndarray, bin_ps: int) -> int:
    if t.size == 0:
        return 0
    return int(np.argmax(np.bincount(t[: 1 << 16] % bin_ps, minlength=bin_ps)))


def _lattice_lo(x: float, bin_ps: int, phase: int = 0) -> int:
    # bin edges sit half a bin below the points t_B - t_A can take, so those land mid-bin
    return int(math.floor((x - phase) / bin_ps)) * bin_ps - bin_ps // 2 + phase


def _phase(sa: TagStream, sb: TagStream, bin_ps: int) -> int:
    """Offset of the delay lattice; nonzero once a stream has been shifted off the TTU grid."""
    return (_residue(sb.t_ps, bin_ps) - _residue(sa.t_ps, bin_ps)) % bin_ps


def _look_elsewhere_z(n: int) -> float:
    return 5.0 + math.sqrt(2.0 * math.log(max(n, 2)))


def _significant_argmax(counts: np.ndarray) -> int | None:
    base = float(np.median(counts))
    k = int(np.argmax(counts))
    if counts[k] - base > _look_elsewhere_z(counts.size) * math.sqrt(max(base, 1.0)):
        return k
    return None


def _fft_lag_counts(ta: np.ndarray, tb: np.ndarray, lo: int, hi: int, W: int):
    t0 = min(int(ta[0]), int(tb[0]))
    ia = (ta - t0) // W
    ib = (tb - t0) // W
    L = int(max(ia[-1], ib[-1])) + 1
    ca = np.bincount(ia, minlength=L).astype(np.float64)
    cb = np.bincount(ib, minlength=L).astype(np.float64)
    n = sfft.next_fast_len(2 * L)
    corr = sfft.irfft(np.conj(sfft.rfft(ca, n)) * sfft.rfft(cb, n), n)
    k_lo = max(int(math.floor(lo / W)), -(L - 1))
    k_hi = min(int(math.ceil(hi / W)), L - 1)
    lags = np.arange(k_lo, k_hi + 1)
    return lags, np.rint(corr[lags % n])


def locate_peak(block_a, block_b, search_range_ps: int, *, coarse_bin_ps: int = 1000,
                fine_half_width_ps: int = 50_000, bin_ps: int | None = None) -> PeakFit:
    """Coarse-to-fine search for the coincidence peak within ``±search_range_ps``.

    Very wide searches are first narrowed with an FFT cross-correlation of
    binned counts; the remaining stages are exact merge-window histograms at
    ``coarse_bin_ps`` and then at TTU resolution around the coarse maximum.
    """
    sa, sb = _tags(block_a), _tags(block_b)
    ta, tb = sa.t_ps, sb.t_ps
    if ta.size == 0 or tb.size == 0:
        raise SyncFailure("empty block: no coincidences to scan")
    if bin_ps is None:
        bin_ps = max(sa.resolution_ps, sb.resolution_ps)
    lo, hi = -int(search_range_ps), int(search_range_ps)
    span = max(int(ta[-1] - ta[0]), int(tb[-1] - tb[0]), 1)
    expected_pairs = ta.size * tb.size * (hi - lo) / span
    if expected_pairs > MAX_DIRECT_PAIRS:
        W = max(coarse_bin_ps, -(-(max(int(ta[-1]), int(tb[-1])) - min(int(ta[0]), int(tb[0]))) // MAX_FFT_BINS))
        lags, counts = _fft_lag_counts(ta, tb, lo, hi, W)
        k = _significant_argmax(counts)
        if k is None:
            raise SyncFailure("no correlation peak in the coarse cross-correlation",
                              DelayHistogram(int(lags[0] * W), W, counts.astype(np.int64)))
        lo, hi = int((lags[k] - 2) * W), int((lags[k] + 2) * W)
    coarse = delay_scan(sa, sb, lo, hi, coarse_bin_ps)
    k = _significant_argmax(coarse.counts)
    if k is None:
        raise SyncFailure("no coincidence peak above the accidental floor", coarse)
    c = float(coarse.centers_ps[k])
    flo = _lattice_lo(c - fine_half_width_ps, bin_ps, _phase(sa, sb, bin_ps))
    fine = delay_scan(sa, sb, flo, int(c + fine_half_width_ps) + bin_ps, bin_ps)
    try:
        return fit_gaussian_peak(fine)
    except NoPeakError as exc:
        raise SyncFailure("fine scan lost the peak", fine) from exc


def find_initial_offset(block_a, block_b, search_range_ps: int, **kwargs) -> float:
    """Delay (ps) of Bob's tags relative to Alice's in the first block."""
    return locate_peak(block_a, block_b, search_range_ps, **kwargs).center_ps


@dataclass(eq=False)
class SyncResult:
    delta_T: np.ndarray  # per-block delay, ps
    delta_t: np.ndarray  # increments; delta_t[0] == 0
    fits: list
    flagged: np.ndarray
    correction_applied: bool = False
    include_flagged: bool = False
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.delta_T.size)

    @property
    def allan_var_ns2(self) -> float:
        return allan_variance(self.delta_T, flags=None if self.include_flagged else self.flagged)

    @property
    def allan_var_inclusive_ns2(self) -> float:
        return allan_variance(self.delta_T)

    @property
    def allan_dev_ns(self) -> float:
        return math.sqrt(self.allan_var_ns2)

    def fit_fwhm(self) -> np.ndarray:
        return np.array([f.fwhm_ps if f is not None else math.nan for f in self.fits])

    def fit_center_err(self) -> np.ndarray:
        return np.array([f.center_err_ps if f is not None else math.nan for f in self.fits])

    def check_identities(self) -> None:
        d = self.delta_T
        if self.delta_t[0] != 0.0 or np.any(np.diff(d) != self.delta_t[1:]):
            raise AssertionError("delta_t is not the exact difference of delta_T")
        acc = d[0]
        for i in range(1, d.size):
            acc = acc + self.delta_t[i]
            if acc != d[i]:
                raise AssertionError("delta_T is not the running sum of delta_t")

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block_index", "delta_T_ps", "delta_t_ps", "fit_fwhm_ps", "flagged"])
        for i, (T, t, fw, fl) in enumerate(zip(self.delta_T, self.delta_t, self.fit_fwhm(), self.flagged)):
            w.writerow([i, repr(float(T)), repr(float(t)), repr(float(fw)), int(fl)])
        return buf.getvalue()

    def summary(self) -> dict:
        n = len(self)
        return {
            "blocks": n,
            "flagged_blocks": int(np.count_nonzero(self.flagged)),
            "initial_offset_ps": float(self.delta_T[0]) if n else None,
            "allan_var_ns2": self.allan_var_ns2 if n >= 2 else None,
            "allan_dev_ns": math.sqrt(self.allan_var_ns2) if n >= 2 else None,
            "allan_var_inclusive_ns2": self.allan_var_inclusive_ns2 if n >= 2 else None,
            "peak_to_peak_ps": float(np.ptp(self.delta_T)) if n else None,
            "correction_applied": self.correction_applied,
        }


def track_drift(blocks_a, blocks_b, initial_offset_ps: float, fine_range_ps: int = 10_000, *,
                bin_ps: int | None = None, max_failures: int = 5,
                include_flagged: bool = False) -> SyncResult:
    """Iterative per-block delay tracking starting from the first block's delay.

    Block i is scanned only within ``±fine_range_ps`` of block i-1's delay.  A
    block without a peak holds the previous value and is flagged; more than
    ``max_failures`` consecutive flagged blocks raise :class:`SyncLossError`.
    """
    blocks_a, blocks_b = list(blocks_a), list(blocks_b)
    n = min(len(blocks_a), len(blocks_b))
    if n == 0:
        raise SyncFailure("no blocks to track")
    delta_T = np.zeros(n)
    delta_t = np.zeros(n)
    flagged = np.zeros(n, dtype=bool)
    fits: list[PeakFit | None] = [None] * n
    prev = _snap(float(initial_offset_ps))
    delta_T[0] = prev
    run = 0
    for i in range(n):
        sa, sb = _tags(blocks_a[i]), _tags(blocks_b[i])
        b = bin_ps or max(sa.resolution_ps, sb.resolution_ps)
        fit = None
        if len(sa) and len(sb):
            lo = _lattice_lo(prev - fine_range_ps, b, _phase(sa, sb, b))
            h = delay_scan(sa, sb, lo, int(prev + fine_range_ps) + b, b)
            try:
                fit = fit_gaussian_peak(h)
                if abs(fit.center_ps - prev) > fine_range_ps:
                    fit = None
            except NoPeakError:
                fit = None
        fits[i] = fit
        if i == 0:
            continue
        if fit is None:
            flagged[i] = True
            run += 1
            if run > max_failures:
                raise SyncLossError(f"{run} consecutive blocks without a coincidence peak (at block {i})")
            step = 0.0
        else:
            run = 0
            step = _snap(fit.center_ps - prev)
        delta_t[i] = step
        prev = prev + step
        delta_T[i] = prev
    result = SyncResult(delta_T, delta_t, fits, flagged, include_flagged=include_flagged)
    result.check_identities()
    return result


def synchronize(stream_a: TagStream, stream_b: TagStream, search_range_ps: int,
                fine_range_ps: int = 10_000, **kwargs) -> SyncResult:
    """Block both streams on 1PPS edges, find the first delay, then track it."""
    n = max(_n_blocks(stream_a), _n_blocks(stream_b))
    blocks_a = split_into_blocks(stream_a, n)
    blocks_b = split_into_blocks(stream_b, n)
    first = min((i for i in range(n) if len(blocks_a[i]) and len(blocks_b[i])), default=None)
    if first is None:
        raise SyncFailure("streams share no non-empty block")
    fit = locate_peak(blocks_a[first], blocks_b[first], search_range_ps)
    result = track_drift(blocks_a[first:], blocks_b[first:], fit.center_ps, fine_range_ps, **kwargs)
    result.fits[0] = fit
    if first:
        pad = np.full(first, result.delta_T[0])
        result = SyncResult(np.concatenate([pad, result.delta_T]),
                            np.concatenate([np.zeros(first), result.delta_t]),
                            [None] * first + result.fits,
                            np.concatenate([np.ones(first, bool), result.flagged]),
                            include_flagged=result.include_flagged)
        result.flagged[0] = False
    return result


def _n_blocks(s: TagStream) -> int:
    if "duration_ps" in s.metadata:
        return int(-(-int(s.metadata["duration_ps"]) // s.pps_period_ps))
    return int(s.t_ps[-1] // s.pps_period_ps) + 1 if len(s) else 0


def allan_variance(delta_T, tau_s: float = 1, flags=None) -> float:
    """Two-sample variance (ns^2) of a per-second delay series given in ps.

    ``sum((T[i+1] - T[i])**2) / (2*(N-1))``.  With ``flags``, differences
    touching a flagged block are dropped and the normalisation uses the
    number of remaining differences.
    """
    if tau_s != 1:
        raise ValueError("only tau = 1 s (one block) is supported")
    d = np.asarray(delta_T, dtype=np.float64)
    if d.size < 2:
        raise ValueError("need at least two blocks")
    diffs = np.diff(d)
    if flags is not None:
        f = np.asarray(flags, dtype=bool)
        keep = ~(f[1:] | f[:-1])
        diffs = diffs[keep]
        if diffs.size == 0:
            raise ValueError("no unflagged consecutive blocks")
    return float(np.sum(diffs * diffs) / (2.0 * diffs.size)) * 1e-6


def apply_correction(stream: TagStream, sync: SyncResult, mode: str = "absolute") -> TagStream:
    """Shift every tag of block i by ``-delta_T[i]`` (piecewise constant per block).

    ``mode="drift"`` removes only ``delta_T[i] - delta_T[0]``, keeping the
    initial offset.  Shifts are rounded to whole picoseconds; the output's
    resolution is the gcd of the input resolution and all shifts.  In
    absolute mode, tags that would precede the epoch (only possible within the
    first ``delta_T`` of the run) are dropped and counted in
    ``metadata['dropped_before_epoch']``.
    """
    if mode not in ("absolute", "drift"):
        raise ValueError("mode must be 'absolute' or 'drift'")
    n = _n_blocks(stream)
    if n > len(sync):
        raise ValueError(f"sync covers {len(sync)} blocks but the stream spans {n}")
    ref = sync.delta_T[0] if mode == "drift" else 0.0
    shifts = np.rint(sync.delta_T[:max(n, 1)] - ref).astype(np.int64)
    block = (stream.t_ps // stream.pps_period_ps).astype(np.int64)
    t = stream.t_ps - shifts[block] if len(stream) else stream.t_ps.copy()
    keep = t >= 0
    dropped = int(np.count_nonzero(~keep))
    res = int(np.gcd.reduce(np.concatenate([[stream.resolution_ps], np.abs(shifts)])))
    meta = dict(stream.metadata)
    meta["sync_corrected"] = mode
    meta["dropped_before_epoch"] = dropped
    return TagStream.from_unsorted(t[keep], stream.channel[keep], resolution_ps=max(res, 1),
                                   pps_period_ps=stream.pps_period_ps, metadata=meta)


def allan_summary_json(before: SyncResult, after: SyncResult | None, config_hash: str) -> str:
    payload = {"config_hash": config_hash, "uncorrected": before.summary()}
    if after is not None:
        payload["corrected"] = after.summary()
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"

"""Fiber transmission, detection and drifting local clocks.

Turns emitted events into the time tags each node actually records.  The
ordering inside :func:`detect` matters for peak widths: timing jitter and the
clock offset are both added to the continuous arrival time *before* the TTU
quantizes it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .source import (
    ARM_IDLER,
    ARM_SIGNAL,
    KIND_PAIR,
    PairEvents,
    SourceConfig,
    outcome_from_draw,
    outcome_probabilities,
)
from .tagstream import DEFAULT_RESOLUTION_PS, PPS_PERIOD_PS, TagStream, quantize_array

CH_PLUS = 0
CH_MINUS = 1


@dataclass(frozen=True)
class LinkConfig:
    length_km: float = 0.0
    delay_us_per_km: float = 5.0
    loss_db_per_km: float = 0.0
    extra_loss_db: float = 0.0

    def __post_init__(self):
        if self.length_km < 0 or self.loss_db_per_km < 0 or self.extra_loss_db < 0:
            raise ValueError("length and losses must be non-negative")

    @property
    def delay_ps(self) -> int:
        # rounded once for the whole link, never per event
        return int(round(self.length_km * self.delay_us_per_km * 1e6))

    @property
    def loss_db(self) -> float:
        return self.loss_db_per_km * self.length_km + self.extra_loss_db

    @property
    def transmittance(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    jitter_sigma_ps: float = 0.0
    dark_rate_hz: float = 0.0
    resolution_ps: int = DEFAULT_RESOLUTION_PS

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.jitter_sigma_ps < 0 or self.dark_rate_hz < 0:
            raise ValueError("jitter and dark rate must be non-negative")
        if self.resolution_ps <= 0:
            raise ValueError("resolution_ps must be positive")


@dataclass(frozen=True)
class ClockModel:
    """Offset of a node's local clock from true time.

    ``C(t) = initial_offset + linear_rate*t + W(t) + u(floor(t))`` where W is a
    Gaussian random walk with per-second steps (linearly interpolated inside
    a second) and u is the 1PPS sawtooth: each second after the first, the
    block's time reference sits at a uniform offset in
    ``[-pps_sawtooth_ps/2, +pps_sawtooth_ps/2]``.
    """

    initial_offset_ps: int = 0
    linear_rate: float = 0.0
    random_walk_sigma_ps_per_sqrt_s: float = 0.0
    pps_sawtooth_ps: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.random_walk_sigma_ps_per_sqrt_s < 0 or self.pps_sawtooth_ps < 0:
            raise ValueError("random-walk sigma and sawtooth width must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.initial_offset_ps == 0 and self.linear_rate == 0
                and self.random_walk_sigma_ps_per_sqrt_s == 0 and self.pps_sawtooth_ps == 0)

    def trajectory(self, duration_s: float) -> "ClockTrajectory":
        from .rng import stream
        n = int(math.ceil(max(duration_s, 0.0))) + 1
        walk = np.zeros(n + 1)
        if self.random_walk_sigma_ps_per_sqrt_s > 0:
            steps = stream(self.rng_seed, "clock", "walk").standard_normal(n)
            walk[1:] = np.cumsum(steps * self.random_walk_sigma_ps_per_sqrt_s)
        saw = np.zeros(n + 1)
        if self.pps_sawtooth_ps > 0:
            half = self.pps_sawtooth_ps / 2.0
            saw[1:] = stream(self.rng_seed, "clock", "pps").uniform(-half, half, n)
        return ClockTrajectory(self, walk, saw)


@dataclass(frozen=True, eq=False)
class ClockTrajectory:
    """Precomputed per-second knots of a :class:`ClockModel`; read-only."""

    model: ClockModel
    walk_ps: np.ndarray
    sawtooth_ps: np.ndarray

    @property
    def seconds(self) -> int:
        return self.walk_ps.size - 1

    def offset_at(self, t_s):
        t = np.asarray(t_s, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("clock offsets are defined for t >= 0 only")
        if np.any(t > self.seconds):
            raise ValueError("time beyond the precomputed trajectory")
        knots = np.arange(self.walk_ps.size, dtype=np.float64)
        walk = np.interp(t, knots, self.walk_ps)
        block = np.minimum(np.floor(t).astype(np.int64), self.sawtooth_ps.size - 1)
        out = (self.model.initial_offset_ps + self.model.linear_rate * t * 1e12
               + walk + self.sawtooth_ps[block])
        return float(out) if out.ndim == 0 else out


def clock_offset_at(clock: ClockModel, t_s: float) -> float:
    """Local-clock offset in ps at true time ``t_s``."""
    if t_s < 0:
        raise ValueError("t must be non-negative")
    return clock.trajectory(t_s).offset_at(t_s)


@dataclass(frozen=True, eq=False)
class ArmEvents:
    """Photons travelling in one arm: true times (ps, float) and analyzer output channel."""

    t_ps: np.ndarray
    channel: np.ndarray

    def __len__(self) -> int:
        return int(self.t_ps.size)


def to_arms(events: PairEvents, theta_a: float, theta_b: float, cfg: SourceConfig,
            rng: np.random.Generator) -> tuple[ArmEvents, ArmEvents]:
    """Split events into Alice's idler arm and Bob's signal arm with analyzer outputs.

    Pair photons get jointly sampled outputs; unpaired photons (noise, or a
    pair that lost its partner) exit either analyzer port with probability 1/2,
    which is exactly the marginal of the joint distribution.
    """
    n = len(events)
    i, j = outcome_from_draw(rng.random(n), outcome_probabilities(theta_a, theta_b, cfg))
    alice = (events.arms & ARM_IDLER) != 0
    bob = (events.arms & ARM_SIGNAL) != 0
    ch_a = np.where(i > 0, CH_PLUS, CH_MINUS).astype(np.uint8)
    ch_b = np.where(j > 0, CH_PLUS, CH_MINUS).astype(np.uint8)
    return (ArmEvents(events.t_ps[alice], ch_a[alice]),
            ArmEvents(events.t_ps[bob], ch_b[bob]))


def propagate(events: ArmEvents, link: LinkConfig, rng: np.random.Generator) -> ArmEvents:
    """Fiber: Bernoulli survival at the link transmittance, then a fixed delay."""
    p = link.transmittance
    if p < 1.0:
        keep = rng.random(len(events)) < p
        t, ch = events.t_ps[keep], events.channel[keep]
    else:
        t, ch = events.t_ps, events.channel
    return ArmEvents(t + link.delay_ps, ch)


def dark_counts(det: DetectorConfig, start_ps: float, stop_ps: float, rng: np.random.Generator,
                channels=(CH_PLUS, CH_MINUS)) -> tuple[np.ndarray, np.ndarray]:
    """Dark-count local times (unsorted) uniform over ``[start, stop)`` on each channel."""
    ts, cs = [], []
    if det.dark_rate_hz > 0 and stop_ps > start_ps:
        for c in channels:
            nd = rng.poisson(det.dark_rate_hz * (stop_ps - start_ps) * 1e-12)
            ts.append(rng.uniform(start_ps, stop_ps, nd))
            cs.append(np.full(nd, c, np.uint8))
    if not ts:
        return np.empty(0), np.empty(0, np.uint8)
    return np.concatenate(ts), np.concatenate(cs)


def detect_local(events: ArmEvents, det: DetectorConfig, traj: "ClockTrajectory",
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Efficiency, jitter and the local clock: continuous local times of surviving photons."""
    t, ch = events.t_ps, events.channel
    if det.efficiency < 1.0:
        keep = rng.random(t.size) < det.efficiency
        t, ch = t[keep], ch[keep]
    if det.jitter_sigma_ps > 0 and t.size:
        t = t + rng.normal(0.0, det.jitter_sigma_ps, t.size)
    ok = (t >= 0) & (t <= traj.seconds * 1e12)
    t, ch = t[ok], ch[ok]
    local = t + traj.offset_at(t * 1e-12) if t.size else t
    return local, ch


def detect(events: ArmEvents, det: DetectorConfig, clock: ClockModel | ClockTrajectory,
           duration_s: float, rng: np.random.Generator, channels=(CH_PLUS, CH_MINUS),
           metadata: dict | None = None) -> TagStream:
    """Detector and TTU: efficiency, jitter, local clock, dark counts, quantization.

    Only tags whose local time falls in the recording window ``[0, duration)``
    are kept.  Dark counts arrive at ``dark_rate_hz`` on every channel in
    ``channels``, uniform over the window.
    """
    traj = clock if isinstance(clock, ClockTrajectory) else clock.trajectory(duration_s + 1.0)
    window_ps = duration_s * 1e12
    local, ch = detect_local(events, det, traj, rng)
    dt, dc = dark_counts(det, 0.0, window_ps, rng, channels)
    local = np.concatenate([local, dt])
    ch = np.concatenate([ch, dc])
    t, ch = quantize_window(local, ch, det.resolution_ps, window_ps)
    meta = {"duration_ps": int(round(window_ps))}
    meta.update(metadata or {})
    return TagStream.from_unsorted(t, ch, resolution_ps=det.resolution_ps,
                                   pps_period_ps=PPS_PERIOD_PS, metadata=meta)


def quantize_window(local: np.ndarray, ch: np.ndarray, resolution_ps: int,
                    window_ps: float) -> tuple[np.ndarray, np.ndarray]:
    """TTU quantization, keeping tags whose local time lies in ``[0, window)``."""
    inside = local >= 0
    tq = quantize_array(local[inside], resolution_ps)
    ch = ch[inside]
    keep = tq < window_ps
    return tq[keep], ch[keep]

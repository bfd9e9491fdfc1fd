"""SFWM photon-pair source: channel-pair grid, Poisson emission and polarization outcomes.

Rates follow the usual power law for a pumped waveguide: pairs at ``a*P**2``
and, per arm, singles at ``a*P**2 + b*P + c`` (the linear term is Raman
noise, the constant a background).  The idler occupies the low-frequency
(Stokes) side of the pump, the signal the high-frequency side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

PUMP_THZ = 193.5
GRID_GHZ = 100.0

KIND_PAIR = 0
KIND_NOISE_S = 1
KIND_NOISE_I = 2
KIND_DARK = 3  # reserved; dark counts are added by the detector model

ARM_SIGNAL = 1
ARM_IDLER = 2


@dataclass(frozen=True)
class ChannelPair:
    """One signal/idler DWDM channel pair placed symmetrically about the pump."""

    index: int
    detuning_ghz: float
    a: float
    b_s: float = 0.0
    b_i: float = 0.0
    c_s: float = 0.0
    c_i: float = 0.0

    def __post_init__(self):
        if self.detuning_ghz <= 0:
            raise ValueError("detuning_ghz must be positive")
        for name in ("a", "b_s", "b_i", "c_s", "c_i"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def signal_thz(self) -> float:
        return PUMP_THZ + self.detuning_ghz / 1000.0

    @property
    def idler_thz(self) -> float:
        return PUMP_THZ - self.detuning_ghz / 1000.0


@dataclass(frozen=True)
class SourceConfig:
    pump_power_mw: float
    pairs: tuple[ChannelPair, ...]
    phase_theta: float = 0.0
    visibility: float = 1.0
    single_nanowire: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.pump_power_mw < 0:
            raise ValueError("pump_power_mw must be non-negative")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError("visibility must lie in [0, 1]")
        detunings = [p.detuning_ghz for p in self.pairs]
        if len(set(detunings)) != len(detunings):
            raise ValueError("channel-pair detunings must be distinct")

    def pair(self, index: int) -> ChannelPair:
        for p in self.pairs:
            if p.index == index:
                return p
        raise KeyError(f"no channel pair with index {index}")


class PairEvent(NamedTuple):
    t_true_ps: float
    pair_index: int
    kind: int
    arms: int


@dataclass(frozen=True, eq=False)
class PairEvents:
    """Columnar, time-sorted sequence of :class:`PairEvent`.

    ``arms`` is a bitmask of the arms an event still occupies
    (``ARM_SIGNAL | ARM_IDLER`` for an intact pair).
    """

    t_ps: np.ndarray
    pair_index: np.ndarray
    kind: np.ndarray
    arms: np.ndarray

    def __len__(self) -> int:
        return int(self.t_ps.size)

    def __getitem__(self, i: int) -> PairEvent:
        return PairEvent(float(self.t_ps[i]), int(self.pair_index[i]), int(self.kind[i]), int(self.arms[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls) -> "PairEvents":
        return cls(np.empty(0), np.empty(0, np.int16), np.empty(0, np.int8), np.empty(0, np.uint8))

    @classmethod
    def concatenate(cls, parts: Sequence["PairEvents"]) -> "PairEvents":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        t = np.concatenate([p.t_ps for p in parts])
        idx = np.concatenate([p.pair_index for p in parts])
        kind = np.concatenate([p.kind for p in parts])
        arms = np.concatenate([p.arms for p in parts])
        order = np.lexsort((idx, kind, t))
        return cls(t[order], idx[order], kind[order], arms[order])


def dwdm_grid(
    n_pairs: int = 22,
    first_index: int = 2,
    *,
    a_ref: float,
    b_ref: float = 0.0,
    c: float = 0.0,
    reference_index: int = 5,
    a_rolloff_per_thz: float = 0.0,
    b_decay_thz: float = math.inf,
    stokes_ratio: float = 1.0,
) -> tuple[ChannelPair, ...]:
    """Channel pairs on the 100 GHz grid around the CH35 pump.

    Pair ``m`` sits ``m*100 GHz`` from the pump, so pair 5 is the CH30/CH40
    couple and the 100 GHz pair (m=1), clipped by the pump WDM, is skipped by
    the default ``first_index=2``.  ``a`` falls linearly by ``a_rolloff_per_thz``
    (fraction of ``a_ref`` per THz) away from the reference pair; the Raman
    coefficient decays exponentially with scale ``b_decay_thz``; the idler
    (Stokes) arm gets ``stokes_ratio`` times the signal-arm Raman rate.
    """
    pairs = []
    ref_thz = reference_index * GRID_GHZ / 1000.0
    for m in range(first_index, first_index + n_pairs):
        det_thz = m * GRID_GHZ / 1000.0
        a = max(a_ref * (1.0 - a_rolloff_per_thz * (det_thz - ref_thz)), 0.0)
        b_s = b_ref * math.exp(-(det_thz - ref_thz) / b_decay_thz)
        pairs.append(ChannelPair(m, m * GRID_GHZ, a, b_s, b_s * stokes_ratio, c, c))
    return tuple(pairs)


def pair_coefficient(cfg: SourceConfig, pair: ChannelPair) -> float:
    """Effective quadratic coefficient for the configured geometry.

    ``pair.a`` is quoted for the entangled source, where the pump is split
    evenly over two nanowires (two halves each giving ``a_nw*(P/2)**2``).
    A single nanowire receives the full power and produces twice the total.
    """
    return 2.0 * pair.a if cfg.single_nanowire else pair.a


def pair_rate(power_mw: float, pair: ChannelPair) -> float:
    """SFWM pair generation rate ``a*P**2`` in s^-1."""
    if power_mw < 0:
        raise ValueError("power must be non-negative")
    return pair.a * power_mw**2


def singles_rate(power_mw: float, pair: ChannelPair, arm: str = "signal") -> float:
    """Per-arm emitted singles ``a*P**2 + b*P + c`` for ``arm`` in {signal, idler}."""
    if power_mw < 0:
        raise ValueError("power must be non-negative")
    b, c = (pair.b_s, pair.c_s) if arm == "signal" else (pair.b_i, pair.c_i)
    return pair.a * power_mw**2 + b * power_mw + c


def _poisson_times(rng: np.random.Generator, rate_hz: float, start_ps: float, stop_ps: float) -> np.ndarray:
    if rate_hz <= 0 or stop_ps <= start_ps:
        return np.empty(0)
    n = rng.poisson(rate_hz * (stop_ps - start_ps) * 1e-12)
    return np.sort(rng.uniform(start_ps, stop_ps, n))


def generate_events(
    cfg: SourceConfig,
    duration_s: float,
    rng: np.random.Generator | None = None,
    *,
    acceptance: tuple[float, float] = (1.0, 1.0),
    segment_s: float = 1.0,
    start_s: float = 0.0,
) -> PairEvents:
    """Emission events of every configured channel pair over ``duration_s``.

    Pairs form a homogeneous Poisson process at the pair rate, arm-local noise
    independent processes at ``b*P + c``.  ``acceptance=(p_signal, p_idler)``
    pre-thins the processes by independent per-arm survival probabilities
    (exact by the thinning property); pairs that lose one arm are returned
    with only the surviving arm set.  Generation proceeds in ``segment_s``
    slices so memory stays bounded by the per-slice event count.  Event
    times run from ``start_s`` to ``start_s + duration_s``.
    """
    if duration_s < 0:
        raise ValueError("duration must be non-negative")
    if rng is None:
        from .rng import stream
        rng = stream(cfg.rng_seed, "source")
    p_s, p_i = acceptance
    if not (0 <= p_s <= 1 and 0 <= p_i <= 1):
        raise ValueError("acceptance probabilities must lie in [0, 1]")
    P = cfg.pump_power_mw
    total_ps = (start_s + duration_s) * 1e12
    seg_ps = segment_s * 1e12
    parts = []
    start = start_s * 1e12
    while start < total_ps:
        stop = min(start + seg_ps, total_ps)
        for pair in cfg.pairs:
            r_pair = pair_coefficient(cfg, pair) * P**2
            r_s = pair.b_s * P + pair.c_s
            r_i = pair.b_i * P + pair.c_i
            processes = (
                (KIND_PAIR, ARM_SIGNAL | ARM_IDLER, r_pair * p_s * p_i),
                (KIND_PAIR, ARM_SIGNAL, r_pair * p_s * (1 - p_i)),
                (KIND_PAIR, ARM_IDLER, r_pair * (1 - p_s) * p_i),
                (KIND_NOISE_S, ARM_SIGNAL, r_s * p_s),
                (KIND_NOISE_I, ARM_IDLER, r_i * p_i),
            )
            for kind, arms, rate in processes:
                t = _poisson_times(rng, rate, start, stop)
                if t.size:
                    parts.append(PairEvents(
                        t,
                        np.full(t.size, pair.index, np.int16),
                        np.full(t.size, kind, np.int8),
                        np.full(t.size, arms, np.uint8),
                    ))
        start = stop
    return PairEvents.concatenate(parts)


# -- polarization ----------------------------------------------------------

def correlation_model(theta_a: float, theta_b: float, cfg: SourceConfig) -> float:
    """Analyzer correlation for Alice at ``theta_a`` and Bob at ``theta_b`` (radians).

    For the entangled state with relative phase ``cfg.phase_theta`` and
    visibility V: ``V*(cos2a*cos2b + cos(phase)*sin2a*sin2b)``.  In
    single-nanowire mode the output is the product state |HH>, so the
    coherence term vanishes.
    """
    coherence = 0.0 if cfg.single_nanowire else math.cos(cfg.phase_theta)
    e = cfg.visibility * (
        math.cos(2 * theta_a) * math.cos(2 * theta_b)
        + coherence * math.sin(2 * theta_a) * math.sin(2 * theta_b)
    )
    if abs(e) > 1 + 1e-12:
        raise ArithmeticError(f"model correlation {e} outside [-1, 1]")
    return max(-1.0, min(1.0, e))


OUTCOMES = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def outcome_probabilities(theta_a: float, theta_b: float, cfg: SourceConfig) -> dict[tuple[int, int], float]:
    """``P(i, j) = (1 + i*j*E)/4`` for analyzer outputs i (Alice), j (Bob) in {+1, -1}."""
    e = correlation_model(theta_a, theta_b, cfg)
    return {(i, j): 0.25 * (1 + i * j * e) for i, j in OUTCOMES}


def outcome_from_draw(u: np.ndarray, probs: dict[tuple[int, int], float]) -> tuple[np.ndarray, np.ndarray]:
    """Map uniform draws in [0, 1) onto joint outcomes by inverse CDF."""
    cdf = np.cumsum([probs[o] for o in OUTCOMES])
    cdf[-1] = 1.0
    k = np.searchsorted(cdf, np.asarray(u), side="right")
    k = np.minimum(k, 3)
    table_i = np.array([o[0] for o in OUTCOMES], dtype=np.int8)
    table_j = np.array([o[1] for o in OUTCOMES], dtype=np.int8)
    return table_i[k], table_j[k]


def sample_outcomes(theta_a: float, theta_b: float, cfg: SourceConfig, n: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return outcome_from_draw(rng.random(n), outcome_probabilities(theta_a, theta_b, cfg))


def sample_polarization_outcome(theta_a: float, theta_b: float, cfg: SourceConfig,
                                rng: np.random.Generator) -> tuple[int, int]:
    i, j = sample_outcomes(theta_a, theta_b, cfg, 1, rng)
    return int(i[0]), int(j[0])

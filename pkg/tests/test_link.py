import math

import numpy as np
import pytest

from pairlink.link import (
    CH_MINUS,
    CH_PLUS,
    ArmEvents,
    ClockModel,
    DetectorConfig,
    LinkConfig,
    clock_offset_at,
    dark_counts,
    detect,
    propagate,
    to_arms,
)
from pairlink.rng import stream
from pairlink.source import ChannelPair, SourceConfig, generate_events
from pairlink.tagstream import quantize_array


def _arm(n, rng, span_s=1.0):
    t = np.sort(rng.uniform(0, span_s * 1e12, n))
    return ArmEvents(t, rng.integers(0, 2, n).astype(np.uint8))


def test_link_delay_and_loss():
    bob = LinkConfig(30.245, 5.0, 0.2, 0.0)
    assert bob.delay_ps == 151_225_000
    assert bob.loss_db == pytest.approx(6.049)
    assert LinkConfig().delay_ps == 0 and LinkConfig().transmittance == 1.0
    with pytest.raises(ValueError):
        LinkConfig(-1.0)


def test_zero_length_link_is_identity():
    ev = _arm(1000, np.random.default_rng(0))
    out = propagate(ev, LinkConfig(), stream(0))
    assert np.array_equal(out.t_ps, ev.t_ps) and np.array_equal(out.channel, ev.channel)


def test_survival_fraction_at_6db():
    n = 200_000
    out = propagate(_arm(n, np.random.default_rng(1)), LinkConfig(extra_loss_db=6.0), stream(1))
    p = 10 ** -0.6
    assert p == pytest.approx(0.2512, abs=1e-4)
    assert abs(len(out) - n * p) < 5 * math.sqrt(n * p * (1 - p))


def test_loss_and_efficiency_compose():
    n = 200_000
    ev = _arm(n, np.random.default_rng(2), span_s=0.5)
    link = LinkConfig(extra_loss_db=3.0)
    det = DetectorConfig(efficiency=0.5, resolution_ps=1)
    tags = detect(propagate(ev, link, stream(2, "l")), det, ClockModel(), 1.0, stream(2, "d"))
    p = link.transmittance * 0.5
    assert abs(len(tags) - n * p) < 5 * math.sqrt(n * p * (1 - p))


def test_ideal_detector_equals_quantized_input():
    ev = _arm(5000, np.random.default_rng(3))
    tags = detect(ev, DetectorConfig(), ClockModel(), 1.0, stream(3))
    expect = np.sort(quantize_array(ev.t_ps, 156))
    assert np.array_equal(np.sort(tags.t_ps), expect)
    assert tags.metadata["duration_ps"] == 10**12


def test_tags_stay_in_recording_window():
    ev = _arm(2000, np.random.default_rng(4), span_s=2.0)
    tags = detect(ev, DetectorConfig(jitter_sigma_ps=100.0), ClockModel(initial_offset_ps=-10**11), 1.0, stream(4))
    assert tags.t_ps.min() >= 0 and tags.t_ps.max() < 10**12


def test_dark_counts_rate_and_channels():
    t, c = dark_counts(DetectorConfig(dark_rate_hz=1e3), 0.0, 10e12, stream(5))
    for ch in (CH_PLUS, CH_MINUS):
        n = np.count_nonzero(c == ch)
        assert abs(n - 1e4) < 5 * 100
    assert t.min() >= 0 and t.max() < 10e12
    t, c = dark_counts(DetectorConfig(), 0.0, 10e12, stream(5))
    assert t.size == 0


def test_jitter_spread():
    n = 20000
    t0 = np.full(n, 5e11)
    tags = detect(ArmEvents(t0, np.zeros(n, np.uint8)), DetectorConfig(jitter_sigma_ps=96.7, resolution_ps=1),
                  ClockModel(), 1.0, stream(6))
    assert np.std(tags.t_ps - 5e11) == pytest.approx(96.7, rel=0.03)


def test_clock_offsets():
    assert clock_offset_at(ClockModel(initial_offset_ps=123), 0.0) == 123
    assert clock_offset_at(ClockModel(linear_rate=5e-12), 600.0) == pytest.approx(3000.0)
    saw = ClockModel(pps_sawtooth_ps=6500, rng_seed=7).trajectory(100)
    assert saw.offset_at(0.5) == 0.0  # first block aligned to 1PPS
    vals = saw.sawtooth_ps[1:]
    assert np.all(np.abs(vals) <= 3250) and np.ptp(vals) > 5000
    assert ClockModel().is_identity and not ClockModel(linear_rate=1e-9).is_identity
    with pytest.raises(ValueError):
        saw.offset_at(-1.0)


def test_random_walk_peak_to_peak():
    sigma, T = 70.0, 600
    ptp = [np.ptp(ClockModel(random_walk_sigma_ps_per_sqrt_s=sigma, rng_seed=s).trajectory(T).walk_ps)
           for s in range(200)]
    # Brownian range sqrt(8/pi)*sigma*sqrt(T), less the per-second sampling correction at both ends
    expected = math.sqrt(8 / math.pi) * sigma * math.sqrt(T) - 2 * 0.5826 * sigma
    assert np.mean(ptp) == pytest.approx(expected, rel=0.05)


def test_clock_trajectory_deterministic():
    a = ClockModel(random_walk_sigma_ps_per_sqrt_s=10, pps_sawtooth_ps=100, rng_seed=3).trajectory(10)
    b = ClockModel(random_walk_sigma_ps_per_sqrt_s=10, pps_sawtooth_ps=100, rng_seed=3).trajectory(10)
    assert np.array_equal(a.walk_ps, b.walk_ps) and np.array_equal(a.sawtooth_ps, b.sawtooth_ps)


def test_to_arms_perfect_correlation_at_equal_angles():
    cfg = SourceConfig(1.0, (ChannelPair(5, 500.0, 1e4),))
    ev = generate_events(cfg, 1.0, stream(8))
    a, b = to_arms(ev, 0.0, 0.0, cfg, stream(8, "a"))
    assert len(a) == len(b) == len(ev)
    assert np.array_equal(a.channel, b.channel)
    a, b = to_arms(ev, 0.0, math.pi / 2, cfg, stream(8, "a"))
    assert np.all(a.channel != b.channel)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pairlink.rng import derive_seed, stream
from pairlink.source import (
    ARM_IDLER,
    ARM_SIGNAL,
    KIND_NOISE_I,
    KIND_NOISE_S,
    KIND_PAIR,
    OUTCOMES,
    ChannelPair,
    SourceConfig,
    correlation_model,
    dwdm_grid,
    generate_events,
    outcome_probabilities,
    pair_coefficient,
    pair_rate,
    sample_outcomes,
    sample_polarization_outcome,
    singles_rate,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def _cfg(a=1e3, b_s=0.0, b_i=0.0, c=0.0, P=1.0, **kw):
    return SourceConfig(P, (ChannelPair(5, 500.0, a, b_s, b_i, c, c),), **kw)


def test_rng_streams_named_and_reproducible():
    a = stream(1, "x", 2).random(5)
    assert np.array_equal(a, stream(1, "x", 2).random(5))
    assert not np.array_equal(a, stream(1, "x", 3).random(5))
    assert not np.array_equal(a, stream(2, "x", 2).random(5))
    assert derive_seed(1, "clock") == derive_seed(1, "clock") != derive_seed(1, "clock", "bob")
    with pytest.raises(ValueError):
        stream(None)


def test_pair_rate_examples():
    p = ChannelPair(5, 500.0, 5e4)
    assert pair_rate(1.0, p) == 5e4
    assert pair_rate(0.0, p) == 0.0
    assert pair_rate(3.25, p) == pytest.approx(5.28125e5)
    q = ChannelPair(5, 500.0, 5e4, 1e3, 2e3, 10, 20)
    assert singles_rate(2.0, q, "signal") == 5e4 * 4 + 2e3 + 10
    assert singles_rate(2.0, q, "idler") == 5e4 * 4 + 4e3 + 20
    with pytest.raises(ValueError):
        pair_rate(-1.0, p)


def test_channel_pair_validation():
    with pytest.raises(ValueError):
        ChannelPair(1, 100.0, -1.0)
    with pytest.raises(ValueError):
        ChannelPair(1, 0.0, 1.0)
    with pytest.raises(ValueError):
        SourceConfig(1.0, (ChannelPair(1, 100.0, 1.0), ChannelPair(2, 100.0, 1.0)))
    with pytest.raises(ValueError):
        SourceConfig(1.0, (), visibility=1.5)


def test_grid_has_22_pairs_without_the_100ghz_pair():
    grid = dwdm_grid(a_ref=5e4)
    assert [p.detuning_ghz for p in grid] == [100.0 * m for m in range(2, 24)]
    p5 = next(p for p in grid if p.index == 5)
    assert p5.idler_thz == pytest.approx(193.0)  # CH30
    assert p5.signal_thz == pytest.approx(194.0)  # CH40
    assert min(p.idler_thz for p in grid) == pytest.approx(191.2)
    assert max(p.signal_thz for p in grid) == pytest.approx(195.8)


def test_grid_raman_decay_and_stokes_asymmetry():
    grid = dwdm_grid(a_ref=5e4, b_ref=1e5, b_decay_thz=1.0, stokes_ratio=1.2)
    b = [p.b_s for p in grid]
    assert all(x > y for x, y in zip(b, b[1:]))
    assert all(p.b_i == pytest.approx(1.2 * p.b_s) for p in grid)
    assert next(p for p in grid if p.index == 5).b_s == pytest.approx(1e5)


def test_event_count_poisson():
    ev = generate_events(_cfg(a=1e3), 100.0, stream(3, "t"))
    assert abs(len(ev) - 1e5) < 5 * math.sqrt(1e5)
    assert np.all(ev.kind == KIND_PAIR)
    assert np.all(ev.arms == ARM_SIGNAL | ARM_IDLER)
    assert np.all(np.diff(ev.t_ps) >= 0)
    assert ev.t_ps.min() >= 0 and ev.t_ps.max() < 100e12


def test_zero_rate_and_zero_duration():
    assert len(generate_events(_cfg(a=0.0), 10.0, stream(0))) == 0
    assert len(generate_events(_cfg(a=1e3), 0.0, stream(0))) == 0
    assert len(generate_events(_cfg(a=1e3, P=0.0), 10.0, stream(0))) == 0


def test_noise_honours_per_arm_coefficients():
    cfg = _cfg(a=0.0, b_s=1e3, b_i=3e3, c=0.0, P=2.0)
    ev = generate_events(cfg, 20.0, stream(4))
    n_s = np.count_nonzero(ev.kind == KIND_NOISE_S)
    n_i = np.count_nonzero(ev.kind == KIND_NOISE_I)
    assert abs(n_s - 4e4) < 5 * math.sqrt(4e4)
    assert abs(n_i - 1.2e5) < 5 * math.sqrt(1.2e5)
    assert np.all(ev.arms[ev.kind == KIND_NOISE_S] == ARM_SIGNAL)
    assert np.all(ev.arms[ev.kind == KIND_NOISE_I] == ARM_IDLER)


def test_generation_deterministic_and_start_offset():
    cfg = _cfg(a=1e3, b_s=100, b_i=100)
    a = generate_events(cfg, 2.0, stream(9))
    b = generate_events(cfg, 2.0, stream(9))
    assert np.array_equal(a.t_ps, b.t_ps) and np.array_equal(a.kind, b.kind)
    c = generate_events(cfg, 1.0, stream(9), start_s=5.0)
    assert c.t_ps.min() >= 5e12 and c.t_ps.max() < 6e12


def test_acceptance_thinning_statistics():
    cfg = _cfg(a=2e4)
    ev = generate_events(cfg, 10.0, stream(5), acceptance=(0.5, 0.25))
    both = np.count_nonzero(ev.arms == ARM_SIGNAL | ARM_IDLER)
    sig_only = np.count_nonzero(ev.arms == ARM_SIGNAL)
    idl_only = np.count_nonzero(ev.arms == ARM_IDLER)
    n = 2e5
    for got, p in ((both, 0.125), (sig_only, 0.375), (idl_only, 0.125)):
        assert abs(got - n * p) < 5 * math.sqrt(n * p)


def test_single_nanowire_doubles_pair_coefficient():
    p = ChannelPair(5, 500.0, 5e4, 1e3, 1e3)
    assert pair_coefficient(SourceConfig(1.0, (p,), single_nanowire=True), p) == 1e5
    assert pair_coefficient(SourceConfig(1.0, (p,)), p) == 5e4


def test_correlation_model_examples():
    ideal = _cfg()
    probs = outcome_probabilities(0.0, 0.0, ideal)
    assert probs[(1, 1)] == probs[(-1, -1)] == 0.5
    assert probs[(1, -1)] == probs[(-1, 1)] == 0.0
    assert correlation_model(0.0, math.radians(22.5), ideal) == pytest.approx(0.70711, abs=1e-5)
    v = _cfg(visibility=0.946)
    assert correlation_model(0.0, math.radians(22.5), v) == pytest.approx(0.6689, abs=5e-5)
    # the product state of one nanowire loses the coherence term
    prod = _cfg(single_nanowire=True)
    assert correlation_model(math.radians(45), math.radians(45), prod) == pytest.approx(0.0, abs=1e-12)


def test_sampler_matches_closed_form():
    cfg = _cfg(visibility=0.946)
    tb = math.radians(22.5)
    i, j = sample_outcomes(0.0, tb, cfg, 10**6, stream(11))
    e_hat = float(np.mean(i * j))
    e = correlation_model(0.0, tb, cfg)
    sigma = math.sqrt((1 - e * e) / 10**6)
    assert abs(e_hat - e) < 3 * sigma
    assert sample_polarization_outcome(0.0, 0.0, _cfg(), stream(1)) in ((1, 1), (-1, -1))


@given(angles, angles, st.floats(0, 1), angles)
def test_probabilities_valid_and_marginals_unbiased(ta, tb, vis, phase):
    cfg = _cfg(visibility=vis, phase_theta=phase)
    p = outcome_probabilities(ta, tb, cfg)
    assert all(p[o] >= -1e-15 for o in OUTCOMES)
    assert sum(p.values()) == pytest.approx(1.0)
    assert p[(1, 1)] + p[(1, -1)] == pytest.approx(0.5)
    assert p[(1, 1)] + p[(-1, 1)] == pytest.approx(0.5)


@given(angles, angles, st.floats(0, 1))
def test_analyzer_flip_antisymmetry(ta, tb, vis):
    cfg = _cfg(visibility=vis)
    assert correlation_model(ta + math.pi / 2, tb, cfg) == pytest.approx(-correlation_model(ta, tb, cfg), abs=1e-12)

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bootstrap_expectation_sigma
from pairlink.bell import (
    TSIRELSON,
    ChshResult,
    Expectation,
    SettingCounts,
    UndefinedExpectationError,
    chsh_s,
    curve_samples_csv,
    expectation,
    fit_correlation_curve,
    sample_setting_counts,
)
from pairlink.pipeline import run_chsh_experiment
from pairlink.rng import stream
from pairlink.source import ChannelPair, SourceConfig

D = math.radians


def _src(vis):
    return SourceConfig(1.0, (ChannelPair(5, 500.0, 1e3),), visibility=vis)


def _sweep(vis, mean_total, seed, theta_a=0.0, n=9):
    rng = stream(seed, "curve")
    out = []
    for tb in np.linspace(0, math.pi, n, endpoint=False):
        c = sample_setting_counts(theta_a, float(tb), _src(vis), mean_total, rng)
        out.append((float(tb), expectation(c)))
    return out


def test_perfect_correlation():
    e = expectation(SettingCounts(0, 0, 100, 100, 0, 0))
    assert e.value == 1.0 and e.sigma == 0.0
    with pytest.raises(UndefinedExpectationError):
        expectation(SettingCounts(0, 0, 0, 0, 0, 0))


def test_sigma_matches_poisson_resampling():
    counts = (300, 310, 80, 75)
    e = expectation(SettingCounts(0, 0, *counts))
    boot = bootstrap_expectation_sigma(counts, 10**4, np.random.default_rng(0))
    assert e.sigma == pytest.approx(boot, rel=0.05)
    assert e.value == pytest.approx(455 / 765)


@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(2, 50))
def test_expectation_scale_invariant(a, b, c, d, k):
    e1 = expectation(SettingCounts(0, 0, a, b, c, d))
    ek = expectation(SettingCounts(0, 0, k * a, k * b, k * c, k * d))
    assert ek.value == pytest.approx(e1.value)
    assert ek.sigma == pytest.approx(e1.sigma / math.sqrt(k))
    assert -1 <= e1.value <= 1


def test_expectation_error_at_3400_counts():
    # about 3.4e3 coincidences per setting give a per-setting error near 0.013
    c = sample_setting_counts(0.0, D(22.5), _src(0.946), 3380, stream(1, "e1"))
    e = expectation(c)
    assert e.sigma == pytest.approx(0.0131, rel=0.1)
    assert abs(e.value - 0.946 * math.cos(D(45))) < 3 * e.sigma


def test_expectation_validation():
    with pytest.raises(ValueError):
        Expectation(1.5, 0.0)
    with pytest.raises(ValueError):
        Expectation(0.5, -1.0)


def test_chsh_examples():
    c = math.cos(D(45))
    r = chsh_s(Expectation(c, 0), Expectation(-c, 0), Expectation(c, 0), Expectation(c, 0))
    assert r.s == pytest.approx(TSIRELSON) and r.violation_sigmas == math.inf
    z = Expectation(0.0, 0.0)
    assert chsh_s(z, z, z, z).s == 0.0


def test_chsh_result_serializes():
    e = Expectation(0.5, 0.01)
    r = chsh_s(e, e, e, e)
    assert r.s == pytest.approx(1.0) and r.sigma_s == pytest.approx(0.02)
    doc = json.loads(json.dumps(r.to_dict()))
    assert doc["s"] == pytest.approx(1.0) and len(doc["expectations"]) == 4
    assert "counts" not in doc
    assert ChshResult(1.0, 0.0, -math.inf).to_dict()["violation_sigmas"] is None


def test_curve_fit_noiseless():
    for ta in (0.0, D(45)):
        samples = [(float(t), Expectation(math.cos(2 * (t - ta)), 0.0)) for t in np.linspace(0, math.pi, 9)]
        fit = fit_correlation_curve(samples, theta_a=ta)
        assert fit.visibility == pytest.approx(1.0, abs=1e-6)
        assert fit.phase_offset == pytest.approx(ta, abs=1e-6)


def test_curve_fit_needs_distinct_angles():
    same = [(0.3, Expectation(0.5, 0.01))] * 9
    with pytest.raises(ValueError):
        fit_correlation_curve(same)
    # angles equal modulo pi are not distinct
    alias = [(0.3 + k * math.pi, Expectation(0.5, 0.01)) for k in range(5)]
    with pytest.raises(ValueError):
        fit_correlation_curve(alias)


@pytest.mark.parametrize("seed", range(5))
def test_visibility_recovered_from_noisy_sweep(seed):
    fit = fit_correlation_curve(_sweep(0.946, 3e3 * 10, seed))
    assert abs(fit.visibility - 0.946) < 3 * fit.visibility_sigma
    assert abs(fit.phase_offset) < 3 * fit.phase_sigma + 1e-9
    assert 1e-3 < fit.visibility_sigma < 1e-2


def test_visibility_sigma_is_calibrated():
    fits = [fit_correlation_curve(_sweep(0.946, 3e3, s)) for s in range(200)]
    v = np.array([f.visibility for f in fits])
    assert np.std(v) == pytest.approx(np.mean([f.visibility_sigma for f in fits]), rel=0.15)


def test_curve_csv():
    text = curve_samples_csv([(D(22.5), Expectation(0.5, 0.01))], "config_hash=abc")
    lines = text.splitlines()
    assert lines[:2] == ["# config_hash=abc", "theta_B_deg,E,sigma"]
    assert [float(x) for x in lines[2].split(",")] == pytest.approx([22.5, 0.5, 0.01])


def test_low_visibility_does_not_violate(paper_cfg):
    cfg = paper_cfg.with_overrides({"source.visibility": 0.70})
    res = run_chsh_experiment(cfg, key=("test-bell", "v070"))
    assert res.s < 2.0
    assert abs(res.s - TSIRELSON * 0.70) < 4 * res.sigma_s
    assert len(res.counts) == 4 and all(c.total > 0 for c in res.counts)

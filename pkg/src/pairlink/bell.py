"""Polarization correlations and the CHSH test."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

TSIRELSON = 2.0 * math.sqrt(2.0)
CANONICAL_SETTINGS_DEG = ((0.0, 22.5), (0.0, 67.5), (45.0, 22.5), (45.0, 67.5))


class UndefinedExpectationError(ValueError):
    pass


@dataclass(frozen=True)
class SettingCounts:
    theta_a: float
    theta_b: float
    cc_pp: int
    cc_mm: int
    cc_pm: int
    cc_mp: int

    @property
    def total(self) -> int:
        return self.cc_pp + self.cc_mm + self.cc_pm + self.cc_mp


@dataclass(frozen=True)
class Expectation:
    value: float
    sigma: float

    def __post_init__(self):
        if abs(self.value) > 1.0 + 1e-12:
            raise ValueError("expectation value outside [-1, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class ChshResult:
    s: float
    sigma_s: float
    violation_sigmas: float
    expectations: tuple[Expectation, ...] = ()
    counts: tuple[SettingCounts, ...] = ()

    def to_dict(self) -> dict:
        out = {
            "s": self.s,
            "sigma_s": self.sigma_s,
            "violation_sigmas": self.violation_sigmas if math.isfinite(self.violation_sigmas) else None,
            "expectations": [{"value": e.value, "sigma": e.sigma} for e in self.expectations],
        }
        if self.counts:
            out["counts"] = [{"theta_a_deg": math.degrees(c.theta_a), "theta_b_deg": math.degrees(c.theta_b),
                              "cc_pp": c.cc_pp, "cc_mm": c.cc_mm, "cc_pm": c.cc_pm, "cc_mp": c.cc_mp}
                             for c in self.counts]
        return out


def expectation(counts: SettingCounts) -> Expectation:
    """Correlation ``(CC++ + CC-- - CC+- - CC-+)/T`` with its Poisson error.

    With A = CC++ + CC--, B = CC+- + CC-+, T = A + B, first-order propagation
    of independent Poisson counts gives ``sigma = 2*sqrt(A*B/T**3)``.
    """
    T = counts.total
    if T <= 0:
        raise UndefinedExpectationError("no coincidences: expectation undefined")
    A = counts.cc_pp + counts.cc_mm
    B = counts.cc_pm + counts.cc_mp
    return Expectation((A - B) / T, 2.0 * math.sqrt(A * B / T**3))


def chsh_s(e1: Expectation, e2: Expectation, e3: Expectation, e4: Expectation) -> ChshResult:
    """``S = |E1 - E2 + E3 + E4|`` at (0,22.5), (0,67.5), (45,22.5), (45,67.5) degrees."""
    s = abs(e1.value - e2.value + e3.value + e4.value)
    sigma = math.sqrt(e1.sigma**2 + e2.sigma**2 + e3.sigma**2 + e4.sigma**2)
    viol = (s - 2.0) / sigma if sigma > 0 else (math.inf if s > 2 else -math.inf if s < 2 else 0.0)
    return ChshResult(s, sigma, viol, (e1, e2, e3, e4))


@dataclass(frozen=True)
class CurveFit:
    visibility: float
    visibility_sigma: float
    phase_offset: float  # radians
    phase_sigma: float
    chi2: float

    def to_dict(self) -> dict:
        return {"visibility": self.visibility, "visibility_sigma": self.visibility_sigma,
                "phase_offset_deg": math.degrees(self.phase_offset),
                "phase_sigma_deg": math.degrees(self.phase_sigma), "chi2": self.chi2}


def fit_correlation_curve(samples, theta_a: float = 0.0) -> CurveFit:
    """Weighted least squares of ``E(theta_B) = V*cos(2*(theta_B - phi))``.

    ``samples`` is a sequence of ``(theta_b, Expectation)`` with angles in
    radians.  The model is linear in ``(V cos 2phi, V sin 2phi)``, so the fit
    is a closed-form 2-parameter solve.  ``phi`` is reported in the half-open
    quarter-turn range nearest ``theta_a``.
    """
    th = np.array([s[0] for s in samples], dtype=np.float64)
    e = np.array([s[1].value for s in samples], dtype=np.float64)
    sig = np.array([s[1].sigma for s in samples], dtype=np.float64)
    if np.unique(np.round(np.mod(th, math.pi), 12)).size < 5:
        raise ValueError("need at least 5 distinct analyzer angles")
    floor = max(float(sig.max()) * 1e-6, 1e-12)
    w = 1.0 / np.maximum(sig, floor)
    X = np.column_stack([np.cos(2 * th), np.sin(2 * th)])
    coef, *_ = np.linalg.lstsq(X * w[:, None], e * w, rcond=None)
    p, q = coef
    cov = np.linalg.inv((X * w[:, None]).T @ (X * w[:, None]))
    if not np.any(sig > 0):
        cov = np.zeros((2, 2))
    V = math.hypot(p, q)
    phi = 0.5 * math.atan2(q, p)
    # pick the representative of phi (mod pi) closest to theta_a
    phi = theta_a + ((phi - theta_a + math.pi / 2) % math.pi) - math.pi / 2
    if V > 0:
        gV = np.array([p, q]) / V
        gphi = 0.5 * np.array([-q, p]) / V**2
        v_sig = math.sqrt(max(float(gV @ cov @ gV), 0.0))
        phi_sig = math.sqrt(max(float(gphi @ cov @ gphi), 0.0))
    else:
        v_sig = phi_sig = math.nan
    resid = (e - X @ coef) * w
    return CurveFit(V, v_sig, phi, phi_sig, float(resid @ resid))


def sample_setting_counts(theta_a: float, theta_b: float, cfg, mean_total: float,
                          rng: np.random.Generator) -> SettingCounts:
    """Poisson total with multinomial outcomes from the source's correlation model.

    A shortcut around the tag pipeline for correlation-curve sweeps.
    """
    from .source import OUTCOMES, outcome_probabilities

    probs = outcome_probabilities(theta_a, theta_b, cfg)
    n = rng.poisson(mean_total)
    k = dict(zip(OUTCOMES, rng.multinomial(n, [probs[o] for o in OUTCOMES])))
    return SettingCounts(theta_a, theta_b, int(k[(1, 1)]), int(k[(-1, -1)]), int(k[(1, -1)]), int(k[(-1, 1)]))


def curve_samples_csv(samples, header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["theta_B_deg", "E", "sigma"])
    for th, ex in samples:
        wr.writerow([repr(math.degrees(th)), repr(ex.value), repr(ex.sigma)])
    return buf.getvalue()

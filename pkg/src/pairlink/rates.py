"""Power-sweep fits (``a*P**2 + b*P + c``), CAR prediction, brightness and spectrum tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import nnls

# 100 GHz at the 1550 nm reference wavelength
NM_PER_100GHZ = 0.8
WHICH = ("singles_s", "singles_i", "coincidences")


class RankDeficientError(ValueError):
    pass


class SweepPoint(NamedTuple):
    power_mw: float
    rate_hz: float
    which: str


@dataclass(frozen=True)
class PowerSweep:
    points: tuple[SweepPoint, ...]
    integration_s: float | None = None

    def __post_init__(self):
        pts = tuple(SweepPoint(float(p), float(r), str(w)) for p, r, w in self.points)
        for p in pts:
            if p.which not in WHICH:
                raise ValueError(f"unknown series {p.which!r}; expected one of {WHICH}")
            if p.power_mw < 0:
                raise ValueError("powers must be non-negative")
        for w in WHICH:
            pw = [p.power_mw for p in pts if p.which == w]
            if len(pw) != len(set(pw)):
                raise ValueError(f"repeated power in the {w} series")
        object.__setattr__(self, "points", pts)

    def series(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        sel = sorted((p.power_mw, p.rate_hz) for p in self.points if p.which == which)
        if not sel:
            return np.empty(0), np.empty(0)
        P, r = zip(*sel)
        return np.array(P), np.array(r)

    @classmethod
    def from_arrays(cls, powers, rates, which: str, integration_s=None) -> "PowerSweep":
        return cls(tuple(SweepPoint(p, r, which) for p, r in zip(powers, rates)), integration_s)

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["power_mw", "rate_hz", "which"])
        for p in self.points:
            w.writerow([repr(p.power_mw), repr(p.rate_hz), p.which])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PowerSweep":
        rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.DictReader(rows)
        if reader.fieldnames is None or not {"power_mw", "rate_hz", "which"} <= set(reader.fieldnames):
            raise ValueError("sweep CSV needs the columns power_mw, rate_hz, which")
        return cls(tuple(SweepPoint(float(r["power_mw"]), float(r["rate_hz"]), r["which"].strip())
                         for r in reader))


@dataclass(frozen=True)
class RateFit:
    a: float
    b: float
    c: float
    a_err: float
    b_err: float
    c_err: float
    residual_norm: float
    n_points: int
    weighting: str = "none"
    constrained: bool = False
    residuals: tuple = field(default=(), repr=False)
    powers: tuple = field(default=(), repr=False)
    rates: tuple = field(default=(), repr=False)

    def __call__(self, power_mw):
        P = np.asarray(power_mw, dtype=np.float64)
        out = self.a * P**2 + self.b * P + self.c
        return float(out) if out.ndim == 0 else out

    @property
    def negative_terms(self) -> tuple[str, ...]:
        return tuple(k for k in ("a", "b", "c") if getattr(self, k) < 0)

    def high_power_deficit(self, n_last: int = 3) -> bool:
        """True when the top ``n_last`` powers fall clearly below a low-power fit.

        The curve is refitted without those points; each of them must lie more
        than two prediction standard errors (parameter uncertainty plus point
        scatter, and at least a relative 1e-9) under the extrapolation.  That
        pattern signals absorption-type saturation, which the polynomial model
        does not include.
        """
        P = np.asarray(self.powers, dtype=np.float64)
        y = np.asarray(self.rates, dtype=np.float64)
        if P.size < n_last + 3:
            return False
        low = fit_rate_curve((P[:-n_last], y[:-n_last]), weighting=self.weighting)
        dof = P.size - n_last - 3
        X = np.column_stack([P**2, P, np.ones_like(P)])
        Xl, Xh = X[:-n_last], X[-n_last:]
        w = np.ones(Xl.shape[0]) if self.weighting == "none" else 1.0 / y[:-n_last]
        r = y[:-n_last] - low(P[:-n_last])
        s2 = float(np.sum(w * r * r)) / dof if dof > 0 else 0.0
        cov = np.linalg.inv((Xl * w[:, None]).T @ Xl) * s2
        wh = np.ones(n_last) if self.weighting == "none" else 1.0 / np.maximum(y[-n_last:], 1e-300)
        pred = low(P[-n_last:])
        se = np.sqrt(np.einsum("ij,jk,ik->i", Xh, cov, Xh) + s2 / wh)
        return bool(np.all(y[-n_last:] < pred - np.maximum(2.0 * se, 1e-9 * np.abs(pred))))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "a_err": self.a_err, "b_err": self.b_err,
                "c_err": self.c_err, "residual_norm": self.residual_norm, "n_points": self.n_points,
                "weighting": self.weighting, "constrained": self.constrained,
                "negative_terms": list(self.negative_terms),
                "high_power_deficit": self.high_power_deficit()}


def _solve3(M: list[list[Fraction]], v: list[Fraction]) -> list[Fraction]:
    A = [row[:] + [rhs] for row, rhs in zip(M, v)]
    n = 3
    for col in range(n):
        piv = next((r for r in range(col, n) if A[r][col] != 0), None)
        if piv is None:
            raise RankDeficientError("design matrix is rank deficient (need 3 distinct powers)")
        A[col], A[piv] = A[piv], A[col]
        for r in range(n):
            if r != col and A[r][col] != 0:
                f = A[r][col] / A[col][col]
                A[r] = [x - f * y for x, y in zip(A[r], A[col])]
    return [A[i][n] / A[i][i] for i in range(n)]


def fit_rate_curve(sweep, which: str | None = None, *, weighting: str = "none",
                   nonnegative: bool = False) -> RateFit:
    """Least-squares ``a*P**2 + b*P + c`` through one series of a sweep.

    ``sweep`` is a :class:`PowerSweep` (then ``which`` picks the series) or a
    ``(powers, rates)`` pair.  The normal equations are formed and solved in
    exact rational arithmetic, so noiseless polynomial data come back exactly
    up to the final float conversion.  ``weighting="poisson"`` weights each
    point by ``1/rate``.  Standard errors are scaled by the reduced chi-square
    (NaN with exactly three points).  ``nonnegative=True`` solves the
    bound-constrained problem instead.
    """
    if isinstance(sweep, PowerSweep):
        if which is None:
            kinds = {p.which for p in sweep.points}
            if len(kinds) != 1:
                raise ValueError("sweep mixes series; pass which=")
            which = kinds.pop()
        P, y = sweep.series(which)
    else:
        P, y = (np.asarray(x, dtype=np.float64) for x in sweep)
    if P.size != y.size:
        raise ValueError("powers and rates differ in length")
    if np.unique(P).size < 3:
        raise RankDeficientError("need at least 3 distinct powers")
    if weighting == "none":
        w = np.ones_like(y)
    elif weighting == "poisson":
        if np.any(y <= 0):
            raise ValueError("Poisson weighting needs positive rates")
        w = 1.0 / y
    else:
        raise ValueError("weighting must be 'none' or 'poisson'")

    Pf = [Fraction(float(p)) for p in P]
    yf = [Fraction(float(v)) for v in y]
    wf = [Fraction(float(v)) for v in w]
    cols = [[p * p for p in Pf], Pf, [Fraction(1)] * len(Pf)]
    M = [[sum(wi * ci * cj for wi, ci, cj in zip(wf, cols[i], cols[j])) for j in range(3)] for i in range(3)]
    v = [sum(wi * ci * yi for wi, ci, yi in zip(wf, cols[i], yf)) for i in range(3)]
    coef = [float(x) for x in _solve3(M, v)]

    X = np.column_stack([P**2, P, np.ones_like(P)])
    if nonnegative and min(coef) < 0:
        sw = np.sqrt(w)
        coef = list(nnls(X * sw[:, None], y * sw)[0])
    resid = y - X @ np.array(coef)
    rss = float(np.sum(w * resid**2))
    dof = P.size - 3
    Minv = np.linalg.inv(np.array([[float(x) for x in row] for row in M]))
    scale = rss / dof if dof > 0 else math.nan
    errs = np.sqrt(np.clip(np.diag(Minv) * scale, 0, None)) if dof > 0 else np.full(3, math.nan)
    order = np.argsort(P)
    return RateFit(coef[0], coef[1], coef[2], float(errs[0]), float(errs[1]), float(errs[2]),
                   float(np.linalg.norm(resid)), int(P.size), weighting, bool(nonnegative),
                   tuple(float(r) for r in resid[order]), tuple(float(p) for p in P[order]),
                   tuple(float(r) for r in y[order]))


class CarPrediction(NamedTuple):
    value: float
    infinite: bool  # no predicted accidentals: value is the inf sentinel


def predict_car(power_mw: float, fit_s: RateFit, fit_i: RateFit, fit_cc: RateFit,
                window_ps: float) -> CarPrediction:
    """Model CAR: ``CC(P) / (S_s(P) * S_i(P) * window)``."""
    if window_ps < 0:
        raise ValueError("window must be non-negative")
    cc = fit_cc(power_mw)
    acc = fit_s(power_mw) * fit_i(power_mw) * window_ps * 1e-12
    if acc <= 0:
        return CarPrediction(math.inf, True)
    return CarPrediction(cc / acc, False)


def brightness(fit, bandwidth_nm: float = NM_PER_100GHZ, total_loss_db: float = 0.0) -> float:
    """Loss-corrected brightness per nm: ``a / (bandwidth * 10**(-loss/10))``."""
    if bandwidth_nm <= 0:
        raise ValueError("bandwidth must be positive")
    a = fit.a if isinstance(fit, RateFit) else float(fit)
    return a / (bandwidth_nm * 10.0 ** (-total_loss_db / 10.0))


@dataclass(frozen=True)
class SpectrumRow:
    pair_index: int
    detuning_ghz: float
    a: float
    b_s: float
    b_i: float
    cc_hz: float
    car: float
    car_model: float = math.nan


@dataclass(frozen=True)
class SpectrumTable:
    rows: tuple[SpectrumRow, ...]
    car_trend_ok: bool
    raman_decreasing: bool

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "detuning_ghz", "a", "b_s", "b_i", "cc_hz", "car", "car_model"])
        for r in self.rows:
            w.writerow([r.pair_index, repr(r.detuning_ghz), repr(r.a), repr(r.b_s), repr(r.b_i),
                        repr(r.cc_hz), repr(r.car), repr(r.car_model)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"car_trend_ok": self.car_trend_ok, "raman_decreasing": self.raman_decreasing,
                           "rows": [r.__dict__ for r in self.rows]}, indent=2) + "\n"


def spectrum_scan(rows: Sequence[SpectrumRow], rel_tol: float = 0.05) -> SpectrumTable:
    """Tabulate per-pair results and check the CAR trend against detuning.

    When the fitted Raman coefficients fall with detuning, the model CAR
    (measured CAR if no model value) must be non-decreasing in detuning up to
    a relative tolerance ``rel_tol`` between neighbours.
    """
    rows = tuple(sorted(rows, key=lambda r: r.detuning_ghz))
    b = np.array([r.b_s + r.b_i for r in rows])
    raman_dec = bool(b.size > 1 and np.all(np.diff(b) <= rel_tol * b[:-1]))
    car = np.array([r.car_model if math.isfinite(r.car_model) else r.car for r in rows])
    trend = bool(np.all(car[1:] >= car[:-1] * (1 - rel_tol))) if car.size > 1 else True
    return SpectrumTable(rows, trend if raman_dec else True, raman_dec)

"""End-to-end runs: source -> links -> detectors -> sync -> coincidences.

Every acquisition is generated in 1 s chunks, each with its own named random
stream, so results are independent of thread count and chunks never hold
more than one second of events in memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bell import ChshResult, SettingCounts, chsh_s, expectation
from .coincidence import CoincidenceResult, count_coincidences, estimate_accidentals, measure_coincidences
from .config import RunConfig
from .link import (
    CH_MINUS,
    CH_PLUS,
    ArmEvents,
    DetectorConfig,
    ClockModel,
    dark_counts,
    detect_local,
    propagate,
    quantize_window,
    to_arms,
)
from .parallel import pmap
from .rates import PowerSweep, RateFit, SpectrumRow, SpectrumTable, SweepPoint, fit_rate_curve, predict_car, spectrum_scan
from .rng import stream
from .source import ARM_IDLER, ARM_SIGNAL, SourceConfig, generate_events
from .sync import SyncResult, apply_correction, synchronize
from .tagstream import PPS_PERIOD_PS, TagStream


@dataclass(eq=False)
class SimulatedRun:
    alice: TagStream
    bob: TagStream
    truth: dict = field(default_factory=dict)


def _node_effective(node, fast: bool):
    """Fast path moves loss and efficiency into the source's acceptance."""
    if not fast:
        return node.link, node.detector, 1.0
    p = node.link.transmittance * node.detector.efficiency
    link = replace(node.link, loss_db_per_km=0.0, extra_loss_db=0.0)
    return link, replace(node.detector, efficiency=1.0), p


def simulate_run(cfg: RunConfig, *, duration_s: float | None = None, theta_a: float = 0.0,
                 theta_b: float = 0.0, key: tuple = ("run",), source: SourceConfig | None = None,
                 fast: bool = True) -> SimulatedRun:
    """Simulate both nodes' tag streams for one analyzer setting (radians).

    ``fast=False`` runs the stages literally (emit everything, then thin in
    the fiber and the detector); the default thins at emission, which gives
    the same distribution at a fraction of the cost.
    """
    dur = cfg.duration_s if duration_s is None else float(duration_s)
    if dur < 0:
        raise ValueError("duration must be non-negative")
    src = source if source is not None else cfg.source_config()
    link_a, det_a, p_a = _node_effective(cfg.alice, fast)
    link_b, det_b, p_b = _node_effective(cfg.bob, fast)
    traj_a = cfg.alice.clock.trajectory(dur + 1.0)
    traj_b = cfg.bob.clock.trajectory(dur + 1.0)
    n_chunks = int(math.ceil(dur))

    def chunk(k: int):
        rng = stream(cfg.seed, *key, "chunk", k)
        start, stop = float(k), min(k + 1.0, dur)
        ev = generate_events(src, stop - start, rng, acceptance=(p_b, p_a), start_s=start)
        arm_a, arm_b = to_arms(ev, theta_a, theta_b, src, rng)
        out = []
        for arm, link, det, traj in ((arm_a, link_a, det_a, traj_a), (arm_b, link_b, det_b, traj_b)):
            local, ch = detect_local(propagate(arm, link, rng), det, traj, rng)
            dt, dc = dark_counts(det, start * 1e12, stop * 1e12, rng)
            out.append((np.concatenate([local, dt]), np.concatenate([ch, dc])))
        return out

    parts = pmap(chunk, range(n_chunks))
    meta = {"duration_ps": int(round(dur * 1e12))}
    streams = []
    for node, det in ((0, det_a), (1, det_b)):
        if parts:
            local = np.concatenate([p[node][0] for p in parts])
            ch = np.concatenate([p[node][1] for p in parts])
        else:
            local, ch = np.empty(0), np.empty(0, np.uint8)
        t, ch = quantize_window(local, ch, det.resolution_ps, dur * 1e12)
        del local
        streams.append(TagStream.from_unsorted(t, ch, resolution_ps=det.resolution_ps,
                                               pps_period_ps=PPS_PERIOD_PS, metadata=dict(meta)))
    secs = np.arange(int(math.ceil(dur)) + 1, dtype=np.float64)
    truth = {
        "true_delay_ps": cfg.bob.link.delay_ps - cfg.alice.link.delay_ps,
        "alice_clock_ps": traj_a.offset_at(secs).tolist() if secs.size else [],
        "bob_clock_ps": traj_b.offset_at(secs).tolist() if secs.size else [],
    }
    return SimulatedRun(streams[0], streams[1], truth)


def expected_block_delays(cfg: RunConfig, n_blocks: int) -> np.ndarray:
    """Oracle for sync: true delay plus the clock difference at each block's middle."""
    ta = cfg.alice.clock.trajectory(n_blocks + 1.0)
    tb = cfg.bob.clock.trajectory(n_blocks + 1.0)
    mid = np.arange(n_blocks) + 0.5
    delay = cfg.bob.link.delay_ps - cfg.alice.link.delay_ps
    return delay + tb.offset_at(mid) - ta.offset_at(mid)


@dataclass(eq=False)
class SyncReport:
    sync: SyncResult
    corrected_bob: TagStream
    after: SyncResult | None


def sync_and_correct(cfg: RunConfig, alice: TagStream, bob: TagStream, *, verify: bool = True) -> SyncReport:
    """Track Bob's delay block by block, correct his tags, and re-measure."""
    an = cfg.analysis
    sync = synchronize(alice, bob, an.search_range_ps, an.fine_range_ps, include_flagged=an.include_flagged)
    corrected = apply_correction(bob, sync, an.correction_mode)
    after = None
    if verify:
        resid_range = an.fine_range_ps + (0 if an.correction_mode == "absolute" else abs(int(sync.delta_T[0])))
        after = synchronize(alice, corrected, resid_range, an.fine_range_ps, include_flagged=an.include_flagged)
        after.correction_applied = True
    return SyncReport(sync, corrected, after)


def residual_delay(cfg: RunConfig, report: SyncReport) -> int:
    """Delay of the corrected stream relative to Alice (0 in absolute mode)."""
    return 0 if cfg.analysis.correction_mode == "absolute" else int(round(report.sync.delta_T[0]))


def setting_counts(alice: TagStream, bob: TagStream, theta_a: float, theta_b: float,
                   delay_ps: int, window_ps: int) -> SettingCounts:
    a = {c: alice.select(c) for c in (CH_PLUS, CH_MINUS)}
    b = {c: bob.select(c) for c in (CH_PLUS, CH_MINUS)}

    def cc(i, j):
        return count_coincidences(a[i], b[j], delay_ps, window_ps)

    return SettingCounts(theta_a, theta_b, cc(CH_PLUS, CH_PLUS), cc(CH_MINUS, CH_MINUS),
                         cc(CH_PLUS, CH_MINUS), cc(CH_MINUS, CH_PLUS))


def run_setting(cfg: RunConfig, theta_a: float, theta_b: float, seconds: float, key: tuple,
                source: SourceConfig | None = None) -> SettingCounts:
    run = simulate_run(cfg, duration_s=seconds, theta_a=theta_a, theta_b=theta_b, key=key, source=source)
    report = sync_and_correct(cfg, run.alice, run.bob, verify=False)
    return setting_counts(run.alice, report.corrected_bob, theta_a, theta_b,
                          residual_delay(cfg, report), cfg.analysis.window_ps)


def run_chsh_experiment(cfg: RunConfig, *, seconds_per_setting: float | None = None,
                        key: tuple = ("chsh",), source: SourceConfig | None = None) -> ChshResult:
    """Four equal-length acquisitions, each synchronized and corrected, then S."""
    secs = cfg.chsh.seconds_per_setting if seconds_per_setting is None else seconds_per_setting
    jobs = [(k, math.radians(a), math.radians(b)) for k, (a, b) in enumerate(cfg.chsh.settings_deg)]
    counts = pmap(lambda j: run_setting(cfg, j[1], j[2], secs, key + (j[0],), source), jobs)
    res = chsh_s(*(expectation(c) for c in counts))
    return replace(res, counts=tuple(counts))


# -- local (back-to-back) rate measurements ----------------------------------

@dataclass(frozen=True)
class LocalPoint:
    power_mw: float
    singles_s_hz: float
    singles_i_hz: float
    cc_hz: float
    accidentals_hz: float

    @property
    def car(self) -> float:
        return self.cc_hz / self.accidentals_hz if self.accidentals_hz > 0 else math.inf


def measure_local_point(cfg: RunConfig, power_mw: float, duration_s: float, *, pair_index: int | None = None,
                        arm_loss_db: float | None = None, key: tuple = ("local",),
                        source: SourceConfig | None = None) -> LocalPoint:
    """Singles, coincidences and accidentals with both arms detected on site.

    No fiber and no clock drift: each arm sees ``arm_loss_db`` of lumped loss
    and a detector with the sweep's jitter and dark rate.
    """
    sw = cfg.sweep
    loss = sw.arm_loss_db if arm_loss_db is None else arm_loss_db
    base = source if source is not None else cfg.source_config(all_pairs=True)
    idx = cfg.source["selected_pair"] if pair_index is None else pair_index
    src = replace(base, pump_power_mw=power_mw, pairs=(base.pair(idx),))
    eta = 10.0 ** (-loss / 10.0)
    det = DetectorConfig(1.0, sw.jitter_sigma_ps, sw.dark_rate_hz, cfg.alice.detector.resolution_ps)
    traj = ClockModel().trajectory(duration_s + 1.0)
    n_chunks = int(math.ceil(duration_s))

    def chunk(k: int):
        rng = stream(cfg.seed, *key, "chunk", k)
        start, stop = float(k), min(k + 1.0, duration_s)
        ev = generate_events(src, stop - start, rng, acceptance=(eta, eta), start_s=start)
        out = []
        for arm in (ARM_SIGNAL, ARM_IDLER):
            sel = (ev.arms & arm) != 0
            local, ch = detect_local(ArmEvents(ev.t_ps[sel], np.zeros(int(sel.sum()), np.uint8)), det, traj, rng)
            dt, dc = dark_counts(det, start * 1e12, stop * 1e12, rng, channels=(0,))
            out.append(quantize_window(np.concatenate([local, dt]), np.concatenate([ch, dc]),
                                       det.resolution_ps, duration_s * 1e12))
        return out

    parts = pmap(chunk, range(n_chunks))
    meta = {"duration_ps": int(round(duration_s * 1e12))}
    sig, idl = (TagStream.from_unsorted(np.concatenate([p[n][0] for p in parts]),
                                        np.concatenate([p[n][1] for p in parts]),
                                        resolution_ps=det.resolution_ps, metadata=dict(meta))
                for n in (0, 1))
    w = sw.window_ps
    cc = count_coincidences(idl, sig, 0, w)
    acc = estimate_accidentals(idl, sig, w, cfg.analysis.n_offsets, 0)
    return LocalPoint(power_mw, len(sig) / duration_s, len(idl) / duration_s, cc / duration_s, acc / duration_s)


@dataclass(eq=False)
class SweepReport:
    sweep: PowerSweep
    points: list
    fit_s: RateFit
    fit_i: RateFit
    fit_cc: RateFit

    def car_model(self, power_mw: float, window_ps: float) -> float:
        return predict_car(power_mw, self.fit_s, self.fit_i, self.fit_cc, window_ps).value


def simulate_power_sweep(cfg: RunConfig, *, powers_mw=None, integration_s: float | None = None,
                         pair_index: int | None = None, arm_loss_db: float | None = None,
                         key: tuple = ("sweep",), source: SourceConfig | None = None,
                         weighting: str = "none") -> SweepReport:
    sw = cfg.sweep
    powers = tuple(sw.powers_mw if powers_mw is None else powers_mw)
    secs = sw.integration_s if integration_s is None else integration_s
    pts = [measure_local_point(cfg, P, secs, pair_index=pair_index, arm_loss_db=arm_loss_db,
                               key=key + (k,), source=source) for k, P in enumerate(powers)]
    rows = []
    for p in pts:
        rows += [SweepPoint(p.power_mw, p.singles_s_hz, "singles_s"),
                 SweepPoint(p.power_mw, p.singles_i_hz, "singles_i"),
                 SweepPoint(p.power_mw, p.cc_hz, "coincidences")]
    sweep = PowerSweep(tuple(rows), secs)
    fits = [fit_rate_curve(sweep, w, weighting=weighting) for w in ("singles_s", "singles_i", "coincidences")]
    return SweepReport(sweep, pts, *fits)


def simulate_spectrum(cfg: RunConfig, *, power_mw: float | None = None, fit_powers_mw=None,
                      integration_s: float = 0.2, key: tuple = ("spectrum",),
                      source: SourceConfig | None = None) -> SpectrumTable:
    """Per-pair sweeps over the whole grid, tabulated by :func:`spectrum_scan`."""
    base = source if source is not None else cfg.source_config(all_pairs=True)
    P0 = max(cfg.sweep.powers_mw) if power_mw is None else power_mw
    fit_powers = tuple(fit_powers_mw) if fit_powers_mw is not None else (P0 / 3, 2 * P0 / 3, P0)
    if P0 not in fit_powers:
        raise ValueError("power_mw must be one of the fit powers")

    def one(pair):
        rep = simulate_power_sweep(cfg, powers_mw=fit_powers, integration_s=integration_s,
                                   pair_index=pair.index, key=key + (pair.index,), source=base)
        at = next(p for p in rep.points if p.power_mw == P0)
        return SpectrumRow(pair.index, pair.detuning_ghz, rep.fit_s.a, rep.fit_s.b, rep.fit_i.b,
                           at.cc_hz, at.car, rep.car_model(P0, cfg.sweep.window_ps))

    return spectrum_scan(pmap(one, base.pairs))


def coincidence_report(cfg: RunConfig, alice: TagStream, bob: TagStream, delay_ps: int) -> CoincidenceResult:
    return measure_coincidences(alice, bob, delay_ps, cfg.analysis.window_ps, cfg.analysis.n_offsets)

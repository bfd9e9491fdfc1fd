"""Command-line entry point: ``pairlink simulate|sync|coincide|chsh|ratefit``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

from .coincidence import delay_scan, measure_coincidences
from .config import ConfigError, RunConfig, as_dict, load_config, schema_text
from .rates import PowerSweep, RankDeficientError, brightness, fit_rate_curve, predict_car
from .sync import SyncFailure, allan_summary_json, apply_correction, synchronize
from .tagstream import PtagError, TagStreamError, read_tag_file, write_tag_file

log = logging.getLogger("pairlink")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SYNC = 3
EXIT_IO = 4


def _json(obj) -> str:
    # json uses repr() for floats: shortest round-trip decimal
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finite(x):
    return x if isinstance(x, (int, str)) or (isinstance(x, float) and math.isfinite(x)) else None


def _load(args) -> RunConfig:
    cfg = load_config(args.config, seed=args.seed)
    if args.window_ps is not None:
        if args.window_ps <= 0:
            raise ConfigError("--window-ps: must be positive")
        cfg = cfg.with_overrides({"analysis.window_ps": args.window_ps, "sweep.window_ps": args.window_ps})
    return cfg


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(args, name: str, payload: dict, csv_text: str | None = None) -> None:
    """Write ``name.json`` (or ``name.csv``) to --out and echo the JSON to stdout."""
    d = _out_dir(args)
    text = _json(payload)
    if args.format == "csv" and csv_text is not None:
        (d / f"{name}.csv").write_text(csv_text, encoding="utf-8")
    else:
        (d / f"{name}.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# -- commands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .pipeline import simulate_run

    cfg = _load(args)
    run = simulate_run(cfg, theta_a=math.radians(args.theta_a), theta_b=math.radians(args.theta_b))
    d = _out_dir(args)
    write_tag_file(run.alice, d / "alice.ptag")
    write_tag_file(run.bob, d / "bob.ptag")
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": as_dict(cfg),
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "theta_a_deg": args.theta_a,
        "theta_b_deg": args.theta_b,
        "counts": {"alice": len(run.alice), "bob": len(run.bob)},
        "truth": run.truth,
    }
    (d / "manifest.json").write_text(_json(manifest), encoding="utf-8")
    sys.stdout.write(_json({"config_hash": manifest["config_hash"], "counts": manifest["counts"],
                            "true_delay_ps": run.truth["true_delay_ps"]}))
    return EXIT_OK


def cmd_sync(args) -> int:
    cfg = _load(args)
    an = cfg.analysis
    a, b = read_tag_file(args.alice), read_tag_file(args.bob)
    before = synchronize(a, b, an.search_range_ps, an.fine_range_ps, include_flagged=an.include_flagged)
    corrected = apply_correction(b, before, an.correction_mode)
    resid = an.fine_range_ps + (0 if an.correction_mode == "absolute" else abs(int(before.delta_T[0])))
    after = synchronize(a, corrected, resid, an.fine_range_ps, include_flagged=an.include_flagged)
    after.correction_applied = True
    d = _out_dir(args)
    h = cfg.config_hash()
    (d / "sync.csv").write_text(before.to_csv(f"config_hash={h}"), encoding="utf-8")
    (d / "allan.json").write_text(allan_summary_json(before, after, h), encoding="utf-8")
    if args.write_corrected:
        write_tag_file(corrected, d / "bob_corrected.ptag")
    print(f"initial offset: {before.delta_T[0]:.3f} ps")
    print(f"Allan deviation (1 s): uncorrected {before.allan_dev_ns:.4f} ns, corrected {after.allan_dev_ns:.4f} ns")
    if len(before) > 1:
        print(f"flagged blocks: {int(before.flagged.sum())} of {len(before)}")
    return EXIT_OK


def cmd_coincide(args) -> int:
    cfg = _load(args)
    an = cfg.analysis
    a, b = read_tag_file(args.alice), read_tag_file(args.bob)
    delay = args.delay_ps
    if delay is None and args.sync_csv:
        delay = _initial_delay(Path(args.sync_csv))
    delay = int(round(delay or 0))
    res = measure_coincidences(a, b, delay, an.window_ps, an.n_offsets)
    payload = {"config_hash": cfg.config_hash(), **res.to_dict(),
               "singles_alice": len(a), "singles_bob": len(b)}
    csv_text = None
    if args.format == "csv":
        half = args.scan_ps
        hist = delay_scan(a, b, delay - half, delay + half, a.resolution_ps)
        csv_text = hist.to_csv(f"config_hash={cfg.config_hash()}")
    _emit(args, "coincidences", payload, csv_text)
    return EXIT_OK


def _initial_delay(path: Path) -> float:
    rows = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    if len(rows) < 2 or not rows[0].startswith("block_index"):
        raise ValueError(f"{path}: not a sync CSV")
    return float(rows[1].split(",")[1])


def cmd_chsh(args) -> int:
    from .pipeline import run_chsh_experiment

    cfg = _load(args)
    res = run_chsh_experiment(cfg)
    h = cfg.config_hash()
    payload = {"config_hash": h, **res.to_dict(),
               "seconds_per_setting": cfg.chsh.seconds_per_setting}
    rows = ["theta_a_deg,theta_b_deg,cc_pp,cc_mm,cc_pm,cc_mp,E,sigma"]
    for c, e in zip(res.counts, res.expectations):
        rows.append(f"{math.degrees(c.theta_a)!r},{math.degrees(c.theta_b)!r},"
                    f"{c.cc_pp},{c.cc_mm},{c.cc_pm},{c.cc_mp},{e.value!r},{e.sigma!r}")
    _emit(args, "chsh", payload, f"# config_hash={h}\n" + "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_ratefit(args) -> int:
    cfg = _load(args)
    h = cfg.config_hash()
    if args.simulate:
        from .pipeline import simulate_power_sweep

        sweep = simulate_power_sweep(cfg).sweep
        (_out_dir(args) / "sweep.csv").write_text(sweep.to_csv(f"config_hash={h}"), encoding="utf-8")
    else:
        if not args.sweep:
            raise ConfigError("ratefit: give a sweep CSV or --simulate")
        sweep = PowerSweep.from_csv(_read_sweep(args.sweep))
    fits = {}
    for which in ("singles_s", "singles_i", "coincidences"):
        if any(p.which == which for p in sweep.points):
            fits[which] = fit_rate_curve(sweep, which, weighting=args.weighting, nonnegative=args.nonnegative)
    if not fits:
        raise ValueError("sweep has no points")
    sw = cfg.sweep
    payload = {"config_hash": h, "fits": {k: {kk: _finite(vv) if not isinstance(vv, list) else vv
                                               for kk, vv in f.to_dict().items()} for k, f in fits.items()}}
    for k, f in fits.items():
        loss = sw.arm_loss_db if k.startswith("singles") else 2 * sw.arm_loss_db
        payload["fits"][k]["brightness_per_nm"] = brightness(f, sw.bandwidth_nm, loss)
    if all(k in fits for k in ("singles_s", "singles_i", "coincidences")):
        car = {}
        for P in sorted({p.power_mw for p in sweep.points}):
            pred = predict_car(P, fits["singles_s"], fits["singles_i"], fits["coincidences"], sw.window_ps)
            car[repr(P)] = None if pred.infinite else pred.value
        payload["car_model"] = car
    rows = ["which,a,b,c,a_err,b_err,c_err,residual_norm"]
    for k, f in fits.items():
        rows.append(",".join([k] + [repr(v) for v in (f.a, f.b, f.c, f.a_err, f.b_err, f.c_err, f.residual_norm)]))
    _emit(args, "ratefit", payload, f"# config_hash={h}\n" + "\n".join(rows) + "\n")
    return EXIT_OK


def _read_sweep(name: str) -> str:
    p = Path(name)
    if p.is_file():
        return p.read_text(encoding="utf-8")
    try:
        return resources.files("pairlink").joinpath("presets").joinpath(p.name).read_text(encoding="utf-8")
    except (FileNotFoundError, OSError):
        raise FileNotFoundError(f"sweep file not found: {name}") from None


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="paper",
                        help="config file (INI-style or JSON) or bundled preset name (default: paper)")
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--window-ps", type=int, default=None, help="coincidence window (full width, ps)")
    common.add_argument("--format", choices=("csv", "json"), default="json", help="export format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pairlink", description=__doc__)
    p.add_argument("--help-config", action="store_true", help="print the config schema and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("simulate", parents=[common], help="simulate both nodes' tag files")
    s.add_argument("--theta-a", type=float, default=0.0, help="Alice's analyzer angle (deg)")
    s.add_argument("--theta-b", type=float, default=0.0, help="Bob's analyzer angle (deg)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sync", parents=[common], help="synchronize two tag files and report Allan deviation")
    s.add_argument("alice")
    s.add_argument("bob")
    s.add_argument("--write-corrected", action="store_true", help="also write bob_corrected.ptag")
    s.set_defaults(func=cmd_sync)

    s = sub.add_parser("coincide", parents=[common], help="coincidences, accidentals and CAR")
    s.add_argument("alice")
    s.add_argument("bob")
    s.add_argument("--delay-ps", type=float, default=None, help="delay of Bob relative to Alice")
    s.add_argument("--sync-csv", default=None, help="take the delay from a sync.csv (block 0)")
    s.add_argument("--scan-ps", type=int, default=5000, help="half range of the CSV delay histogram")
    s.set_defaults(func=cmd_coincide)

    s = sub.add_parser("chsh", parents=[common], help="end-to-end CHSH experiment")
    s.set_defaults(func=cmd_chsh)

    s = sub.add_parser("ratefit", parents=[common], help="fit a*P^2 + b*P + c to a power sweep")
    s.add_argument("sweep", nargs="?", help="sweep CSV (power_mw,rate_hz,which)")
    s.add_argument("--simulate", action="store_true", help="simulate the sweep from the config first")
    s.add_argument("--weighting", choices=("none", "poisson"), default="none")
    s.add_argument("--nonnegative", action="store_true", help="constrain a, b, c >= 0")
    s.set_defaults(func=cmd_ratefit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        sys.stdout.write(schema_text())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SyncFailure as exc:
        print(f"sync failure: {exc}", file=sys.stderr)
        return EXIT_SYNC
    except (PtagError, TagStreamError, OSError, RankDeficientError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

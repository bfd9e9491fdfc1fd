"""Run configuration: a sectioned key=value file (or the equivalent JSON).

Sections may be nested with dots (``[bob.clock]``).  A file may start from a
bundled preset with ``include = <name>`` in ``[run]``; later keys override.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .link import ClockModel, DetectorConfig, LinkConfig
from .rng import derive_seed
from .source import ChannelPair, SourceConfig, dwdm_grid


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v) -> tuple[float, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).replace(";", ",").split(",") if x.strip())


def _settings(v) -> tuple[tuple[float, float], ...]:
    if isinstance(v, (list, tuple)):
        return tuple((float(a), float(b)) for a, b in v)
    out = []
    for item in str(v).split(","):
        if item.strip():
            a, b = item.split(":")
            out.append((float(a), float(b)))
    return tuple(out)


def _int(v) -> int:
    f = float(v)
    if not f.is_integer():
        raise ValueError(f"not an integer: {v!r}")
    return int(f)


# section -> key -> (parser, default, description)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (_int, None, "master seed (mandatory); every random stream derives from it"),
        "duration_s": (float, 20.0, "length of a simulate run in seconds"),
        "include": (str, "", "bundled preset or path loaded before this file"),
    },
    "source": {
        "pump_power_mw": (float, 1.0, "on-chip pump power P (mW)"),
        "pair_coefficient": (float, 6.48e5, "source-side a at the reference pair (s^-1 mW^-2)"),
        "raman_coefficient": (float, 0.0, "signal-arm Raman b at the reference pair (s^-1 mW^-1)"),
        "background_hz": (float, 0.0, "constant background c per arm (s^-1)"),
        "reference_pair": (_int, 5, "grid index the coefficients are quoted at"),
        "a_rolloff_per_thz": (float, 0.0, "fractional drop of a per THz of detuning"),
        "raman_decay_thz": (float, math.inf, "e-folding detuning of the Raman coefficient (THz)"),
        "stokes_ratio": (float, 1.0, "idler (Stokes) / signal (anti-Stokes) Raman ratio"),
        "n_pairs": (_int, 22, "number of 100 GHz channel pairs"),
        "first_pair": (_int, 2, "index of the innermost pair (1 = 100 GHz)"),
        "selected_pair": (_int, 5, "pair routed to Alice/Bob (0 = all pairs)"),
        "phase_theta_rad": (float, 0.0, "residual relative phase of the |VV> term (rad)"),
        "visibility": (float, 1.0, "correlation visibility V in [0, 1]"),
        "single_nanowire": (_bool, False, "pump one nanowire with the full power"),
    },
    "link": {
        "length_km": (float, 0.0, "fiber length"),
        "delay_us_per_km": (float, 5.0, "group delay per km (us)"),
        "loss_db_per_km": (float, 0.0, "fiber attenuation"),
        "extra_loss_db": (float, 0.0, "lumped insertion loss of the arm"),
    },
    "detector": {
        "efficiency": (float, 1.0, "detection efficiency"),
        "jitter_sigma_ps": (float, 0.0, "Gaussian timing jitter per detector"),
        "dark_rate_hz": (float, 0.0, "dark counts per detector channel"),
        "resolution_ps": (_int, 156, "TTU time bin"),
    },
    "clock": {
        "initial_offset_ps": (_int, 0, "clock offset at t=0"),
        "linear_rate": (float, 0.0, "fractional frequency offset (s/s)"),
        "random_walk_sigma_ps_per_sqrt_s": (float, 0.0, "per-second random-walk step"),
        "pps_sawtooth_ps": (float, 0.0, "full width of the uniform 1PPS edge error"),
        "seed": (_int, None, "clock seed (default: derived from run.seed)"),
    },
    "analysis": {
        "window_ps": (_int, 1000, "coincidence window (full width)"),
        "search_range_ps": (_int, 500_000_000_000, "initial-offset search half range"),
        "fine_range_ps": (_int, 10_000, "per-block drift search half range"),
        "coarse_bin_ps": (_int, 1000, "coarse delay-scan bin"),
        "n_offsets": (_int, 10, "displaced windows for the accidental estimate"),
        "include_flagged": (_bool, False, "keep held (flagged) blocks in the Allan variance"),
        "correction_mode": (str, "absolute", "absolute | drift"),
    },
    "chsh": {
        "seconds_per_setting": (float, 30.0, "integration per analyzer setting"),
        "settings_deg": (_settings, ((0.0, 22.5), (0.0, 67.5), (45.0, 22.5), (45.0, 67.5)),
                         "thetaA:thetaB pairs in E1..E4 order"),
    },
    "sweep": {
        "powers_mw": (_floats, (0.325, 0.65, 0.975, 1.3, 1.625, 1.95, 2.275, 2.6, 2.925, 3.25),
                      "pump powers of a rate sweep"),
        "integration_s": (float, 1.0, "integration per sweep point"),
        "arm_loss_db": (float, 0.0, "total loss of each arm in the local (WSS) measurement"),
        "dwdm_arm_loss_db": (float, 0.0, "total loss of each arm with the DWDM filters instead"),
        "window_ps": (_int, 1000, "coincidence window for sweeps"),
        "bandwidth_nm": (float, 0.8, "channel bandwidth (100 GHz at 1550 nm)"),
        "jitter_sigma_ps": (float, 96.7, "detector jitter in the local measurement"),
        "dark_rate_hz": (float, 0.0, "detector darks in the local measurement"),
    },
}

_NODE_PARTS = ("link", "detector", "clock")


def _schema_for(section: str) -> dict:
    if section in SCHEMA:
        return SCHEMA[section]
    node, _, part = section.partition(".")
    if node in ("alice", "bob") and part in _NODE_PARTS:
        return SCHEMA[part]
    raise ConfigError(f"unknown section [{section}]")


def schema_text() -> str:
    lines = ["# pairlink run configuration (sections may also be given as nested JSON objects)"]
    order = ["run", "source", "alice.link", "alice.detector", "alice.clock",
             "bob.link", "bob.detector", "bob.clock", "analysis", "chsh", "sweep"]
    for sec in order:
        lines.append(f"\n[{sec}]")
        for key, (_, default, doc) in _schema_for(sec).items():
            shown = "<required>" if key == "seed" and sec == "run" else ("" if default is None else default)
            if isinstance(shown, tuple):
                shown = ", ".join(f"{x[0]:g}:{x[1]:g}" if isinstance(x, tuple) else f"{x:g}" for x in shown)
            lines.append(f"{key} = {shown}    ; {doc}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NodeConfig:
    link: LinkConfig
    detector: DetectorConfig
    clock: ClockModel


@dataclass(frozen=True)
class AnalysisConfig:
    window_ps: int = 1000
    search_range_ps: int = 500_000_000_000
    fine_range_ps: int = 10_000
    coarse_bin_ps: int = 1000
    n_offsets: int = 10
    include_flagged: bool = False
    correction_mode: str = "absolute"


@dataclass(frozen=True)
class ChshConfig:
    seconds_per_setting: float = 30.0
    settings_deg: tuple = ((0.0, 22.5), (0.0, 67.5), (45.0, 22.5), (45.0, 67.5))


@dataclass(frozen=True)
class SweepConfig:
    powers_mw: tuple = ()
    integration_s: float = 1.0
    arm_loss_db: float = 0.0
    dwdm_arm_loss_db: float = 0.0
    window_ps: int = 1000
    bandwidth_nm: float = 0.8
    jitter_sigma_ps: float = 96.7
    dark_rate_hz: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    duration_s: float
    source: dict
    alice: NodeConfig
    bob: NodeConfig
    analysis: AnalysisConfig
    chsh: ChshConfig
    sweep: SweepConfig
    raw: dict = field(default_factory=dict, compare=False)

    def grid(self) -> tuple[ChannelPair, ...]:
        s = self.source
        return dwdm_grid(
            s["n_pairs"], s["first_pair"], a_ref=s["pair_coefficient"], b_ref=s["raman_coefficient"],
            c=s["background_hz"], reference_index=s["reference_pair"],
            a_rolloff_per_thz=s["a_rolloff_per_thz"], b_decay_thz=s["raman_decay_thz"],
            stokes_ratio=s["stokes_ratio"],
        )

    def source_config(self, all_pairs: bool = False, **overrides) -> SourceConfig:
        s = self.source
        pairs = self.grid()
        if not all_pairs and s["selected_pair"]:
            pairs = tuple(p for p in pairs if p.index == s["selected_pair"])
            if not pairs:
                raise ConfigError(f"source.selected_pair: {s['selected_pair']} is not on the grid")
        cfg = SourceConfig(
            pump_power_mw=s["pump_power_mw"], pairs=pairs, phase_theta=s["phase_theta_rad"],
            visibility=s["visibility"], single_nanowire=s["single_nanowire"],
            rng_seed=derive_seed(self.seed, "source"),
        )
        return replace(cfg, **overrides) if overrides else cfg

    def config_hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Return a new config with ``{"section.key": value}`` overrides applied."""
        raw = {sec: dict(kv) for sec, kv in self.raw.items()}
        for dotted, value in overrides.items():
            sec, _, key = dotted.rpartition(".")
            raw.setdefault(sec, {})[key] = value
        return build_config(raw)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _flatten(obj: dict, prefix: str = "") -> dict[str, dict]:
    out: dict[str, dict] = {}
    scalars = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            for sec, kv in _flatten(v, f"{prefix}{k}.").items():
                out.setdefault(sec, {}).update(kv)
        else:
            scalars[k] = v
    if scalars:
        out.setdefault(prefix.rstrip("."), {}).update(scalars)
    return out


def _read_raw(path_or_name) -> dict[str, dict]:
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        text = _bundled(path.stem if path.suffix else str(path_or_name))
    if text.lstrip().startswith("{"):
        try:
            raw = _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
    else:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"invalid config syntax: {exc}") from exc
        raw = {sec: dict(cp.items(sec)) for sec in cp.sections()}
    base = raw.get("run", {}).get("include")
    if base:
        merged = _read_raw(base)
        for sec, kv in raw.items():
            merged.setdefault(sec, {}).update(kv)
        merged["run"].pop("include", None)
        raw = merged
    return raw


def _bundled(name: str) -> str:
    try:
        return resources.files("pairlink").joinpath("presets", f"{name}.cfg").read_text(encoding="utf-8")
    except (FileNotFoundError, OSError) as exc:
        raise ConfigError(f"config {name!r} is neither a file nor a bundled preset") from exc


def preset_names() -> list[str]:
    d = resources.files("pairlink").joinpath("presets")
    return sorted(p.name[:-4] for p in d.iterdir() if p.name.endswith(".cfg"))


def _section(raw: dict, sec: str) -> dict:
    schema = _schema_for(sec)
    given = raw.get(sec, {})
    out = {}
    for key in given:
        if key not in schema:
            raise ConfigError(f"{sec}.{key}: unknown key")
    for key, (parse, default, _) in schema.items():
        if key in given and given[key] not in ("", None):
            try:
                out[key] = parse(given[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{sec}.{key}: {exc}") from exc
        else:
            out[key] = default
    return out


def build_config(raw: dict[str, dict]) -> RunConfig:
    for sec in raw:
        _schema_for(sec)
    run = _section(raw, "run")
    if run["seed"] is None:
        raise ConfigError("run.seed: a seed is mandatory")
    if run["duration_s"] < 0:
        raise ConfigError("run.duration_s: must be non-negative")
    seed = run["seed"]

    nodes = {}
    for node in ("alice", "bob"):
        parts = {}
        for part, cls in (("link", LinkConfig), ("detector", DetectorConfig), ("clock", ClockModel)):
            sec = f"{node}.{part}"
            values = _section(raw, sec)
            if part == "clock":
                s = values.pop("seed")
                values["rng_seed"] = derive_seed(seed, "clock", node) if s is None else s
            try:
                parts[part] = cls(**values)
            except ValueError as exc:
                raise ConfigError(f"{sec}: {exc}") from exc
        nodes[node] = NodeConfig(**parts)

    source = _section(raw, "source")
    analysis = _section(raw, "analysis")
    if analysis["correction_mode"] not in ("absolute", "drift"):
        raise ConfigError("analysis.correction_mode: must be 'absolute' or 'drift'")
    for k in ("window_ps", "search_range_ps", "fine_range_ps", "coarse_bin_ps", "n_offsets"):
        if analysis[k] <= 0:
            raise ConfigError(f"analysis.{k}: must be positive")
    chsh = _section(raw, "chsh")
    if len(chsh["settings_deg"]) != 4:
        raise ConfigError("chsh.settings_deg: exactly four thetaA:thetaB pairs are required")
    sweep = _section(raw, "sweep")

    normalized = {sec: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                  for sec, kv in raw.items()}
    cfg = RunConfig(seed, run["duration_s"], source, nodes["alice"], nodes["bob"],
                    AnalysisConfig(**analysis), ChshConfig(**chsh), SweepConfig(**sweep), raw=normalized)
    try:
        cfg.source_config(all_pairs=True)
        cfg.source_config()
    except ValueError as exc:
        raise ConfigError(f"source: {exc}") from exc
    return cfg


def load_config(path_or_name="paper", seed: int | None = None) -> RunConfig:
    """Load a config file (INI-style or JSON) or a bundled preset by name."""
    raw = _read_raw(path_or_name)
    if seed is not None:
        raw.setdefault("run", {})["seed"] = seed
    return build_config(raw)


def as_dict(cfg: RunConfig) -> dict:
    """Fully resolved configuration (defaults filled in), for manifests."""
    out = {"run": {"seed": cfg.seed, "duration_s": cfg.duration_s}, "source": dict(cfg.source)}
    for node in ("alice", "bob"):
        n = getattr(cfg, node)
        for part in _NODE_PARTS:
            obj = getattr(n, part)
            out[f"{node}.{part}"] = {f.name: getattr(obj, f.name) for f in fields(obj)}
    for name in ("analysis", "chsh", "sweep"):
        obj = getattr(cfg, name)
        out[name] = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return json.loads(json.dumps(out, default=lambda v: list(v) if isinstance(v, tuple) else str(v)))

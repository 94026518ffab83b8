"""Flat ``section.key = value`` configuration files and named presets.

Every key maps onto one field of a parameter record. Unknown keys and
malformed values are errors carrying the offending line number. Floats are
written with ``repr`` so parse -> serialize -> parse is exact.
"""

from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .analytic import DecoherenceParams, NoiseModel, SourceParams, binning_factor_pixelated, chsh_settings, source_for_targets
from .core import CorrelationKernel, DetectorGeometry, MeasurementSetting, PhaseProfile, PhaseVariant, Wavevector


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line, self.key = line, key
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CameraParams:
    """Full camera frame, used by the per-frame scalar estimates only."""

    width_px: int = 160
    height_px: int = 130

    @property
    def n_px(self) -> int:
        return self.width_px * self.height_px


@dataclass(frozen=True)
class SimSettings:
    mode: str = "physical"
    shots: int = 100_000
    seed: int = 1
    v_eff: float = 1.0
    pair_statistics: str = "poisson"
    block_size: int = 4096
    dedupe: bool = True
    settings: tuple = (MeasurementSetting(0.0, 0.0),)
    times: tuple[float, ...] = (0.3,)


@dataclass(frozen=True)
class AnalysisSettings:
    n_sigma: float = 1.0
    segment: int = 50
    min_segment: int = 50
    sigma_y: float = 1.0
    sigma_x: float = 10.0
    min_counts: float = 20.0
    refine: bool = True
    margins: tuple[int, int, int, int] = (0, 0, 0, 0)
    interior_margin_px: int = 4
    tau_mode: str = "survival"
    p0: tuple[float, float, float] = (0.9, 0.1, 6.0e3)
    bootstrap: int = 200


@dataclass(frozen=True)
class LifetimeSettings:
    """Visibility-map options for the per-|k| lifetime analysis."""

    sigma_x: float = 2.0
    segment: int = 50
    min_segment: int = 25
    margins: tuple[int, int, int, int] = (0, 16, 10, 10)
    band: float = 28.0
    n_bins: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: DetectorGeometry = field(default_factory=DetectorGeometry)
    kernel: CorrelationKernel = field(default_factory=CorrelationKernel)
    source: SourceParams = field(default_factory=SourceParams)
    noise: NoiseModel = field(default_factory=NoiseModel)
    decoherence: DecoherenceParams = field(default_factory=DecoherenceParams)
    phase: PhaseProfile = field(default_factory=PhaseProfile)
    camera: CameraParams = field(default_factory=CameraParams)
    sim: SimSettings = field(default_factory=SimSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    lifetime: LifetimeSettings = field(default_factory=LifetimeSettings)


SECTIONS = [f.name for f in fields(ExperimentConfig)]

# Units of physical values; rad/mm for wavevectors, us for times.
UNITS = {
    "geometry.pixel_pitch": "rad/mm per pixel",
    "geometry.width_px": "pixels",
    "geometry.height_px": "pixels",
    "geometry.y_max": "rad/mm",
    "geometry.origin": "rad/mm, centre of pixel (0, 0) as 'x, y'",
    "kernel.sigma_x": "rad/mm",
    "kernel.sigma_y": "rad/mm",
    "source.chi": "pairs per mode per shot",
    "source.M": "modes (per-frame estimates)",
    "source.eta_w": "probability",
    "source.eta_r0": "probability",
    "source.alpha": "dimensionless",
    "source.eta_det_r": "probability",
    "noise.b_w": "noise probability per mode",
    "noise.b_r0": "noise probability per mode",
    "noise.b_r_inf": "noise probability per mode",
    "noise.b_r_chi": "per unit chi ('coefficient') or per mode ('absolute')",
    "noise.tau_b": "us",
    "noise.b_r_chi_mode": "coefficient | absolute",
    "decoherence.gamma": "us rad/mm",
    "decoherence.temp_cal": "uK (us rad/mm)^2",
    "phase.variant": "constant | linear | grid",
    "phase.a_w": "rad per rad/mm, 'x, y'",
    "phase.a_r": "rad per rad/mm, 'x, y'",
    "phase.phi0": "rad",
    "phase.cell": "rad/mm",
    "phase.cells": "grid pattern rows of 0/1 separated by '/', or 'none'",
    "camera.width_px": "pixels",
    "camera.height_px": "pixels",
    "sim.mode": "effective | physical",
    "sim.shots": "shots per schedule entry",
    "sim.seed": "64-bit unsigned integer",
    "sim.v_eff": "dimensionless",
    "sim.pair_statistics": "poisson | thermal",
    "sim.block_size": "shots per RNG block",
    "sim.dedupe": "bool",
    "sim.settings": "'xi_w:xi_r; ...' in rad, or 'chsh'",
    "sim.times": "us, comma separated",
    "analysis.n_sigma": "correlation widths",
    "analysis.segment": "sum pixels",
    "analysis.min_segment": "sum pixels",
    "analysis.sigma_y": "sum pixels",
    "analysis.sigma_x": "sum pixels",
    "analysis.min_counts": "coincidences",
    "analysis.refine": "bool",
    "analysis.margins": "sum pixels (bottom, top, left, right)",
    "analysis.interior_margin_px": "camera pixels",
    "analysis.tau_mode": "survival | mean | min | max | H",
    "analysis.p0": "initial V0, W, gamma",
    "analysis.bootstrap": "resamples",
    "lifetime.sigma_x": "sum pixels",
    "lifetime.segment": "sum pixels",
    "lifetime.min_segment": "sum pixels",
    "lifetime.margins": "sum pixels (bottom, top, left, right)",
    "lifetime.band": "rad/mm below y_max/2",
    "lifetime.n_bins": "|k| bins",
}


# --- value codecs -----------------------------------------------------------------


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    parts = [p for p in s.replace(",", " ").split()]
    out = tuple(float(p) for p in parts)
    if not all(math.isfinite(v) for v in out):
        raise ValueError("non-finite value")
    return out


def _parse_int(s: str) -> int:
    v = float(s) if any(c in s for c in ".eE") else int(s)
    if v != int(v):
        raise ValueError(f"not an integer: {s!r}")
    return int(v)


def _parse_settings(s: str):
    s = s.strip()
    if s.lower().startswith("chsh"):
        _, _, phi = s.partition(":")
        return tuple(chsh_settings(float(phi) if phi.strip() else 0.0))
    out = []
    for item in s.split(";"):
        if not item.strip():
            continue
        w, sep, r = item.partition(":")
        if not sep:
            raise ValueError(f"setting {item!r} is not 'xi_w:xi_r'")
        out.append(MeasurementSetting(float(w), float(r)))
    if not out:
        raise ValueError("no measurement settings")
    return tuple(out)


def _fmt_settings(v) -> str:
    return "; ".join(f"{_fmt_float(m.xi_w)}:{_fmt_float(m.xi_r)}" for m in v)


def _parse_cells(s: str):
    if s.strip().lower() == "none":
        return None
    rows = tuple(tuple(int(c) for c in row.strip()) for row in s.split("/"))
    if not rows or len({len(r) for r in rows}) != 1 or any(c not in (0, 1) for r in rows for c in r):
        raise ValueError("cells must be equal-length rows of 0/1 separated by '/'")
    return rows


def _fmt_cells(v) -> str:
    return "none" if v is None else "/".join("".join(str(c) for c in r) for r in v)


def _codec(section_type, name: str):
    hint = typing.get_type_hints(section_type)[name]
    if name == "settings":
        return _parse_settings, _fmt_settings
    if name == "cells":
        return _parse_cells, _fmt_cells
    if name == "origin":
        def parse(s):
            x, y = _parse_floats(s)
            return Wavevector(x, y)
        return parse, lambda v: f"{_fmt_float(v.x)}, {_fmt_float(v.y)}"
    if name == "variant":
        return lambda s: PhaseVariant(s.strip()), lambda v: PhaseVariant(v).value
    if hint is bool:
        return _parse_bool, lambda v: "true" if v else "false"
    if hint is int:
        return _parse_int, str
    if hint is float:
        def pf(s):
            v = float(s)
            if not math.isfinite(v):
                raise ValueError("non-finite value")
            return v
        return pf, _fmt_float
    if hint is str:
        return lambda s: s.strip(), str
    args = typing.get_args(hint)
    if typing.get_origin(hint) is tuple:
        conv = int if args and args[0] is int else float
        fmt = str if conv is int else _fmt_float
        n = None if (len(args) == 2 and args[1] is Ellipsis) else len(args)

        def parse_tuple(s):
            vals = tuple(conv(v) if conv is float else _parse_int(str(v)) for v in s.replace(",", " ").split())
            if n is not None and len(vals) != n:
                raise ValueError(f"expected {n} values, got {len(vals)}")
            if not vals:
                raise ValueError("empty list")
            return vals

        return parse_tuple, lambda v: ", ".join(fmt(x) for x in v)
    raise TypeError(f"no codec for {section_type.__name__}.{name}")


def _schema():
    out = {}
    for sec in fields(ExperimentConfig):
        typ = typing.get_type_hints(ExperimentConfig)[sec.name]
        for f in fields(typ):
            out[f"{sec.name}.{f.name}"] = (sec.name, f.name, typ, *_codec(typ, f.name))
    return out


SCHEMA = _schema()


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    base = base or ExperimentConfig()
    updates: dict[str, dict] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        sec, name, _, parse, _ = SCHEMA[key]
        try:
            updates.setdefault(sec, {})[name] = parse(value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from exc
        lines.setdefault(sec, lineno)
        lines[key] = lineno
    kw = {}
    for sec, vals in updates.items():
        try:
            kw[sec] = replace(getattr(base, sec), **vals)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid [{sec}] parameters: {exc}", lines[sec]) from exc
    cfg = replace(base, **kw)
    try:
        validate(cfg)
    except ConfigError as exc:
        if exc.key not in lines:
            raise
        raise ConfigError(str(exc), lines[exc.key], exc.key) from None
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    s, a = cfg.sim, cfg.analysis
    checks = [
        (s.mode in ("effective", "physical"), "sim.mode", f"must be effective or physical, got {s.mode!r}"),
        (s.pair_statistics in ("poisson", "thermal"), "sim.pair_statistics", f"must be poisson or thermal, got {s.pair_statistics!r}"),
        (s.shots >= 0, "sim.shots", "must be nonnegative"),
        (s.block_size >= 1, "sim.block_size", "must be at least 1"),
        (0 <= s.seed < 2**64, "sim.seed", "must be a 64-bit unsigned integer"),
        (0 <= s.v_eff <= 1, "sim.v_eff", "must lie in [0, 1]"),
        (all(t >= 0 for t in s.times), "sim.times", "must be nonnegative"),
        (a.tau_mode in ("survival", "mean", "min", "max", "H"), "analysis.tau_mode", f"unknown mode {a.tau_mode!r}"),
        (a.n_sigma > 0, "analysis.n_sigma", "must be positive"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(f"{key} {msg}", key=key)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_items(cfg: ExperimentConfig) -> dict[str, str]:
    out = {}
    for key, (sec, name, _, _, fmt) in SCHEMA.items():
        out[key] = fmt(getattr(getattr(cfg, sec), name))
    return out


def serialize_config(cfg: ExperimentConfig, units: bool = True) -> str:
    lines = []
    current = None
    for key, value in config_items(cfg).items():
        sec = key.split(".", 1)[0]
        if sec != current:
            if current is not None:
                lines.append("")
            current = sec
        lines.append(f"{key} = {value}" + (f"  # {UNITS[key]}" if units and key in UNITS else ""))
    return "\n".join(lines) + "\n"


def config_from_items(items: dict[str, str]) -> ExperimentConfig:
    """Rebuild a config from ``config.<key>`` style entries (prefix already stripped)."""
    return parse_config("\n".join(f"{k} = {v}" for k, v in items.items()))


# --- presets ---------------------------------------------------------------------------

# Fringe period of 25 sum pixels: two periods per 50-pixel segment.
FRINGE_PERIOD_SUM_PX = 25


def linear_fringe(geom: DetectorGeometry, period_sum_px: float = FRINGE_PERIOD_SUM_PX) -> PhaseProfile:
    a = 2 * math.pi / (period_sum_px * 0.5 * geom.pixel_pitch)
    return PhaseProfile(PhaseVariant.LINEAR, (0.0, a / 2), (0.0, a / 2), 0.0)


def reference_noise(chi: float = 0.01) -> NoiseModel:
    """Read-out noise with B_r(inf) = 5 B_r(0), chi coefficient 0.131, tau_B = 13 us."""
    return NoiseModel(b_w=1e-4, b_r0=0.0043, b_r_inf=0.0215, b_r_chi=0.131, tau_b=13.0)


def storage_times(n: int = 7, lo: float = 0.3, hi: float = 60.3) -> tuple[float, ...]:
    return tuple(float(t) for t in np.linspace(lo, hi, n))


def injected_source(v0: float, w: float, cfg: ExperimentConfig) -> tuple[SourceParams, NoiseModel]:
    """Source and constant read-out noise that realise (V0, W) in simulation."""
    from .simulator import ModeGrid

    grid = ModeGrid.for_geometry(cfg.geometry, cfg.kernel, cfg.source.alpha)
    F = binning_factor_pixelated(cfg.analysis.n_sigma, cfg.kernel, cfg.geometry.pixel_pitch, grid.alpha_effective(cfg.geometry, cfg.kernel))
    chi, b = source_for_targets(v0, w, cfg.source.eta_r0, F=F)
    return replace(cfg.source, chi=chi), NoiseModel(0.0, b, b, 0.0, cfg.noise.tau_b)


def preset(name: str) -> ExperimentConfig:
    base = ExperimentConfig()
    geom = base.geometry
    if name == "reference":
        return replace(
            base,
            noise=reference_noise(),
            phase=linear_fringe(geom),
            sim=replace(base.sim, shots=1_000_000, times=storage_times()),
        )
    if name == "bell":
        return replace(
            base,
            source=replace(base.source, eta_w=1.0, eta_r0=1.0),
            phase=linear_fringe(geom),
            sim=replace(base.sim, mode="effective", v_eff=0.92, shots=200_000, settings=tuple(chsh_settings(0.0)), times=(0.0,)),
        )
    if name == "noiseless":
        return replace(
            base,
            source=replace(base.source, eta_w=1.0, eta_r0=1.0),
            sim=replace(base.sim, shots=1_000_000, times=(0.0,)),
        )
    if name == "noisy":
        return replace(
            base,
            source=replace(base.source, eta_w=1.0),
            noise=reference_noise(),
            sim=replace(base.sim, shots=1_000_000, times=(0.3, 20.0, 45.0, 60.0)),
        )
    if name in ("recovery", "lifetime"):
        cfg = replace(base, source=replace(base.source, eta_w=1.0), phase=linear_fringe(geom))
        if name == "lifetime":
            cfg = replace(cfg, decoherence=DecoherenceParams(5.98e3))
        src, noise = injected_source(0.92, 0.13, cfg)
        return replace(cfg, source=src, noise=noise, sim=replace(cfg.sim, shots=1_000_000, times=storage_times()))
    raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("reference", "bell", "noiseless", "noisy", "recovery", "lifetime")


def plan_from_config(cfg: ExperimentConfig, seed: int | None = None, shots: int | None = None):
    """Simulation plan: every storage time crossed with every measurement setting."""
    from .simulator import ScheduleEntry, SimulationPlan

    s = cfg.sim
    schedule = [ScheduleEntry(b, setting, t) for t in s.times for b, setting in enumerate(s.settings)]
    return SimulationPlan(
        mode=s.mode,
        n_shots=s.shots if shots is None else shots,
        schedule=tuple(schedule),
        seed=s.seed if seed is None else seed,
        source=cfg.source,
        noise=cfg.noise,
        decoherence=cfg.decoherence,
        kernel=cfg.kernel,
        profile=cfg.phase,
        geometry=cfg.geometry,
        v_eff=s.v_eff,
        pair_statistics=s.pair_statistics,
        block_size=s.block_size,
        dedupe=s.dedupe,
    )

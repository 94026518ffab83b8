"""Command-line entry point: ``wvmux {config,simulate,analyze,report}``.

Exit codes: 0 success, 1 usage or config error, 2 data error (bad or
missing input, unwritable output), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from .analytic import binning_factor, collision_probability, success_probability, visibility_from_g2
from .config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    config_from_items,
    config_items,
    load_config,
    plan_from_config,
    preset,
    serialize_config,
)
from .events import EventFormatError, EventWriter, atomic_write, format_float, meta_path, read_events, read_keyvalue, write_keyvalue
from .simulator import ModeGrid, group_shots, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("bell", "visibility", "lifetime", "g2")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# --- output helpers -----------------------------------------------------------------


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else format_float(v)


def write_csv_map(path, a: np.ndarray) -> None:
    """Matrix as CSV, one row per ``y_s``; repr floats and ``nan``."""
    a = np.asarray(a, float)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.atleast_2d(a):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv_map(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def write_table(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in r) + "\n")


def _tag(b: int, t: float) -> str:
    return f"b{b}_t{format_float(t)}"


# --- config resolution ----------------------------------------------------------------


def _config_from_args(args, default: str | None = "reference") -> ExperimentConfig:
    if getattr(args, "config", None):
        try:
            return load_config(args.config)
        except OSError as exc:
            raise CliError(EXIT_USAGE, f"cannot read config: {exc}") from exc
    if getattr(args, "preset", None):
        return preset(args.preset)
    if default is None:
        raise CliError(EXIT_USAGE, "no configuration given")
    return preset(default)


def _shots_from_meta(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if k.startswith("shots.b"):
            b, _, t = k[len("shots.b") :].partition(".t")
            out[(int(b), float(t))] = int(v)
    return out


# --- simulate -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    plan = plan_from_config(cfg, seed=args.seed, shots=args.shots)
    cfg_run = config_from_items(
        {**config_items(cfg), "sim.seed": str(plan.seed), "sim.shots": str(plan.n_shots)}
    )
    out = Path(args.out)
    meta = meta_path(out)
    threads = args.threads or os.cpu_count() or 1
    _log(args, f"simulating {len(plan.schedule)} x {plan.n_shots} shots ({plan.mode} mode, seed {plan.seed})")
    state = {}

    def write_events_file(tmp):
        with EventWriter(tmp) as w:
            state["result"] = run_experiment(plan, threads=threads, sink=w.write)
            state["records"] = w.records

    try:
        atomic_write(out, write_events_file)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write {out}: {exc}") from exc
    except RuntimeError as exc:
        if isinstance(exc.__cause__, OSError):
            raise CliError(EXIT_DATA, f"cannot write {out}: {exc}") from exc
        raise
    d = state["result"].diagnostics
    grid = ModeGrid.for_geometry(cfg.geometry, cfg.kernel, cfg.source.alpha)
    items = {
        "seed": plan.seed,
        "records": state["records"],
        "achieved_M": d.achieved_M,
        "alpha_effective": format_float(grid.alpha_effective(cfg.geometry, cfg.kernel)),
        "pairs": d.pairs,
        "dropped": d.dropped,
        "dropped_write": d.dropped_write,
        "dropped_read": d.dropped_read,
        "noise_hits": d.noise_hits,
        "merged_hits": d.merged_hits,
    }
    for (b, t), n in group_shots(plan).items():
        items[f"shots.b{b}.t{format_float(t)}"] = n
    items.update({f"config.{k}": v for k, v in config_items(cfg_run).items()})
    try:
        atomic_write(meta, lambda tmp: write_keyvalue(tmp, items))
    except OSError as exc:
        out.unlink(missing_ok=True)
        raise CliError(EXIT_DATA, f"cannot write {meta}: {exc}") from exc
    _log(args, f"wrote {state['records']} records to {out} (achieved M = {d.achieved_M}, dropped {d.dropped})")
    return EXIT_OK


# --- analyze --------------------------------------------------------------------------


def _load_run(args):
    path = Path(args.input)
    if not path.exists():
        raise CliError(EXIT_DATA, f"input not found: {path}")
    meta = {}
    if meta_path(path).exists():
        meta = read_keyvalue(meta_path(path))
    if args.config or args.preset:
        cfg = _config_from_args(args, None)
    else:
        echo = {k[len("config.") :]: v for k, v in meta.items() if k.startswith("config.")}
        if not echo:
            raise CliError(EXIT_USAGE, f"no --config given and no config echo in {meta_path(path)}")
        cfg = config_from_items(echo)
    shots = _shots_from_meta(meta) or group_shots(plan_from_config(cfg))
    geom = cfg.geometry
    events = read_events(path, geom.width_px, geom.height_px)
    cmap = an.accumulate_coincidences(
        events, geom, cfg.kernel, cfg.analysis.n_sigma, range(len(cfg.sim.settings)), shots
    )
    if cmap.skipped:
        _log(args, f"warning: skipped {cmap.skipped} records with unknown basis index")
    return cfg, cmap


def _gradient(cfg):
    return an.fringe_gradient(cfg.phase, cfg.geometry), an.pixel_mtf(cfg.phase, cfg.geometry)


def _vmap(cfg, cmap, key, settings=None):
    """Segment-fit map for a fringe along y_s, per-pixel ``E/cos`` for a flat phase."""
    grad, mtf = _gradient(cfg)
    a = cfg.analysis
    if grad[1] == 0:
        s = cfg.sim.settings[key[0]]
        return an.visibility_map_constant(cmap, key, cfg.phase.phi0 + s.xi_w + s.xi_r)
    seg = settings or a
    return an.visibility_map(
        cmap, key, grad, mtf,
        segment=seg.segment, min_segment=seg.min_segment, sigma_y=a.sigma_y, sigma_x=seg.sigma_x,
        min_counts=a.min_counts, refine=a.refine, margins=seg.margins,
    )


def _task_bell(args, cfg, cmap, out: Path) -> dict:
    if len(cfg.sim.settings) != 4:
        raise CliError(EXIT_DATA, "bell task needs exactly four measurement settings")
    grad, mtf = _gradient(cfg)
    res = an.bell_map_from_coincidences(cmap, range(4), grad, mtf, refine=cfg.analysis.refine)
    for b in range(4):
        write_csv_map(out / f"bell_E_b{b}.csv", an.expected_value_map(cmap, b))
    write_csv_map(out / "bell_S.csv", res.s_map)
    write_table(out / "bell_trace.csv", ["y_s", "S"], [(str(i), v) for i, v in enumerate(res.trace)])
    return {
        "amplitude": res.amplitude,
        "amplitude_se": res.stderr,
        "violation_sigmas": res.violation_sigmas,
        "mtf": res.mtf,
        "coincidences": sum(float(cmap.group(b).total.sum()) for b in range(4)),
    }


def _task_visibility(args, cfg, cmap, out: Path) -> dict:
    region = an.interior_region(cfg.geometry, cfg.analysis.interior_margin_px)
    seed = cfg.sim.seed if args.seed is None else args.seed
    summary = {}
    for i, key in enumerate(sorted(cmap.groups)):
        tag = _tag(*key)
        vm = _vmap(cfg, cmap, key)
        write_csv_map(out / f"visibility_{tag}.csv", vm.v)
        write_csv_map(out / f"visibility_se_{tag}.csv", vm.se)
        if vm.windows is not None:
            write_csv_map(out / f"visibility_counts_{tag}.csv", vm.counts)
            write_table(out / f"visibility_windows_{tag}.csv", ["lo", "hi", "sigma_x"],
                        [(str(lo), str(hi), vm.sigma_x) for lo, hi in vm.windows])
        ms = an.mode_summary(vm, cfg.analysis.bootstrap, seed=_subseed(seed, i))
        summary[f"{tag}.t"] = key[1]
        summary[f"{tag}.n_points"] = ms.n_modes if ms else 0
        for name in ("fraction", "mean_violating", "mean_all"):
            e = getattr(ms, name) if ms else an.MISSING
            summary[f"{tag}.{name}"] = e.value
            summary[f"{tag}.{name}_se"] = e.stderr
        summary[f"{tag}.flagged"] = int(vm.flags.sum())
        if not any(cfg.phase.gradient):
            s = cfg.sim.settings[key[0]]
            c = math.cos(cfg.phase.phi0 + s.xi_w + s.xi_r)
            e = an.pooled_visibility(cmap, key, region)
            summary[f"{tag}.pooled"] = e.value / c
            summary[f"{tag}.pooled_se"] = e.stderr / abs(c)
    return summary


def _subseed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1, np.uint64)[0])


def _load_map_dir(path: Path, basis: int = 0):
    vmaps = []
    for f in sorted(path.glob(f"visibility_b{basis}_t*.csv")):
        tag = f.name[len("visibility_") : -len(".csv")]
        t = float(tag.split("_t", 1)[1])
        v = read_csv_map(f)
        se_path = path / f"visibility_se_{tag}.csv"
        if not se_path.exists():
            raise CliError(EXIT_DATA, f"missing standard errors {se_path}")
        se = read_csv_map(se_path)
        counts = windows = None
        sigma_x = 0.0
        if (path / f"visibility_counts_{tag}.csv").exists():
            counts = read_csv_map(path / f"visibility_counts_{tag}.csv")
            tab = np.loadtxt(path / f"visibility_windows_{tag}.csv", delimiter=",", skiprows=1, ndmin=2)
            windows, sigma_x = tab[:, :2].astype(int), float(tab[0, 2])
        vmaps.append(an.VisibilityMap(t, v, se, counts=counts, windows=windows, sigma_x=sigma_x))
    vmaps.sort(key=lambda m: m.t)
    if not vmaps:
        raise CliError(EXIT_DATA, f"no visibility maps in {path}")
    return vmaps


def _task_lifetime(args, cfg, cmap, out: Path, maps_dir: Path | None = None) -> dict:
    a, lt = cfg.analysis, cfg.lifetime
    if maps_dir is not None:
        vmaps = life_maps = _load_map_dir(maps_dir)
    else:
        keys = sorted(k for k in cmap.groups if k[0] == 0)
        vmaps = [_vmap(cfg, cmap, k) for k in keys]
        life_maps = [_vmap(cfg, cmap, k, lt) for k in keys]
    fit = an.fit_decoherence(vmaps, cfg.geometry, p0=a.p0, tau_mode=a.tau_mode)
    T, T_se = fit.temperature
    summary = {
        "v0": fit["v0"], "v0_se": fit.error("v0"),
        "w": fit["w"], "w_se": fit.error("w"),
        "gamma": fit["gamma"], "gamma_se": fit.error("gamma"),
        "temperature": T, "temperature_se": T_se,
        "chi2": fit.residual_sum, "dof": fit.dof, "nfev": fit.nfev,
        "times": " ".join(format_float(m.t) for m in vmaps),
    }
    try:
        tau = an.tau_vs_k(life_maps, cfg.geometry, band=lt.band, n_bins=lt.n_bins, p0=a.p0)
    except (an.FitError, ValueError) as exc:
        if maps_dir is None:
            raise
        # saved maps may mask the balanced band; the global fit still stands
        summary["tau_status"] = f"skipped: {exc}"
        return summary
    summary["tau_status"] = "ok"
    write_table(out / "lifetime_tau.csv", ["k", "tau", "tau_se"], zip(tau.k, tau.tau, tau.tau_se))
    summary.update({
        "tau_gamma": tau.gamma, "tau_gamma_se": tau.gamma_se, "tau_temperature": tau.temperature,
        "tau_temperature_se": 2 * tau.temperature * tau.gamma_se / tau.gamma,
        "tau_v0": tau.v0, "tau_w": tau.w,
        "tau_excluded_bins": " ".join(str(i) for i in tau.excluded) or "none",
    })
    return summary


def _task_g2(args, cfg, cmap, out: Path) -> dict:
    region = an.interior_region(cfg.geometry, cfg.analysis.interior_margin_px)
    summary = {}
    for key in sorted(cmap.groups):
        tag = _tag(*key)
        g = cmap.groups[key]
        acc = an.accidental_map(g, cmap.window)
        coinc = g.total.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            write_csv_map(out / f"g2_{tag}.csv", np.where(acc > 0, g.shots * coinc / np.where(acc > 0, acc, 1), np.nan))
        summed = an.estimate_g2(cmap, key, region, "summed")
        corr = an.estimate_g2(cmap, key, region, "correlated")
        pooled = an.pooled_visibility(cmap, key, region)
        # sampling can push g2 below 1 where the inversion is undefined
        v = visibility_from_g2(corr.value) if not corr.missing and corr.value >= 1 else math.nan
        summary.update({
            f"{tag}.t": key[1],
            f"{tag}.shots": g.shots,
            f"{tag}.g2": summed.value, f"{tag}.g2_se": summed.stderr,
            f"{tag}.g2_correlated": corr.value, f"{tag}.g2_correlated_se": corr.stderr,
            f"{tag}.visibility_from_g2": v,
            f"{tag}.visibility_from_g2_se": 2 * corr.stderr / (corr.value + 1) ** 2 if not corr.missing else math.nan,
            f"{tag}.pooled_visibility": pooled.value, f"{tag}.pooled_visibility_se": pooled.stderr,
        })
    return summary


def _write_summary(path: Path, items: dict) -> None:
    write_keyvalue(path, {k: (_fmt(v) if isinstance(v, float) else v) for k, v in items.items()})


def cmd_analyze(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot create {out}: {exc}") from exc
    src = Path(args.input)
    if args.task == "lifetime" and src.is_dir():
        cfg = _config_from_args(args)
        summary = _task_lifetime(args, cfg, None, out, maps_dir=src)
    else:
        cfg, cmap = _load_run(args)
        task = {"bell": _task_bell, "visibility": _task_visibility, "lifetime": _task_lifetime, "g2": _task_g2}[args.task]
        summary = task(args, cfg, cmap, out)
    _write_summary(out / f"{args.task}_summary.txt", summary)
    if not args.quiet:
        for k, v in summary.items():
            print(f"{k} = {_fmt(v) if isinstance(v, float) else v}")
    return EXIT_OK


# --- report ---------------------------------------------------------------------------

# quantity, summary file, value key, stderr key, target, tolerance, combine stderr
REPORT_ROWS = [
    ("S", "bell", "amplitude", "amplitude_se", 2.60, 0.19, True),
    ("V0", "lifetime", "v0", "v0_se", 0.92, 0.02, False),
    ("W", "lifetime", "w", "w_se", 0.13, 0.02, False),
    ("gamma", "lifetime", "gamma", "gamma_se", 6.26e3, 290.0, False),
    ("T_uK", "lifetime", "temperature", "temperature_se", 47.0, 5.0, False),
    ("gamma_tau", "lifetime", "tau_gamma", "tau_gamma_se", 5.98e3, 598.0, False),
    ("T_tau_uK", "lifetime", "tau_temperature", "tau_temperature_se", 52.0, 5.0, False),
]


def report_rows(out: Path, cfg: ExperimentConfig):
    """(quantity, target, tolerance, achieved, stderr, status) rows and missing artifacts."""
    summaries, missing = {}, []
    for name in ("bell", "lifetime"):
        p = out / f"{name}_summary.txt"
        if p.exists():
            summaries[name] = read_keyvalue(p)
        else:
            missing.append(p.name)
    rows = []
    for q, src, key, se_key, target, tol, combine in REPORT_ROWS:
        s = summaries.get(src)
        if s is None or key not in s:
            rows.append((q, target, tol, math.nan, math.nan, "missing"))
            continue
        val, se = float(s[key]), float(s.get(se_key, "nan"))
        # the Bell amplitude carries the experiment's own error bar: 3 combined sigma
        lim = 3 * math.hypot(se, tol) if combine else tol
        rows.append((q, target, lim, val, se, "pass" if abs(val - target) <= lim else "fail"))
    scalars = [
        ("F(1)", 0.825, 0.001, binning_factor(1.0, cfg.source.alpha)),
        ("collision_p", 4.8e-4, 0.02 * 4.8e-4, collision_probability(cfg.camera.n_px, 5)),
        ("success_p", 0.35, 0.01, success_probability(cfg.source.eta_w, cfg.source.chi, cfg.source.M)),
    ]
    for q, target, tol, val in scalars:
        rows.append((q, target, tol, val, 0.0, "pass" if abs(val - target) <= tol else "fail"))
    return rows, missing


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise CliError(EXIT_DATA, f"outputs directory not found: {out}")
    cfg = _config_from_args(args)
    rows, missing = report_rows(out, cfg)
    header = ("quantity", "target", "tolerance", "achieved", "stderr", "status")
    write_table(out / "report.csv", header, [(r[0], *r[1:5], r[5]) for r in rows])
    lines = [f"{header[0]:<12} {header[1]:>12} {header[2]:>12} {header[3]:>14} {header[4]:>12}  {header[5]}"]
    for q, target, tol, val, se, status in rows:
        lines.append(f"{q:<12} {target:>12.6g} {tol:>12.4g} {val:>14.6g} {se:>12.4g}  {status}")
    if missing:
        lines.append("missing inputs: " + ", ".join(missing))
    text = "\n".join(lines) + "\n"
    with open(out / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    if not args.quiet:
        sys.stdout.write(text)
    if missing:
        print("missing inputs: " + ", ".join(missing), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _config_from_args(args)
    text = serialize_config(cfg)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wvmux", description="Simulate and analyse spin-wave multiplexed Bell-state runs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--config", help="key = value configuration file")
            g.add_argument("--preset", choices=PRESETS, help="built-in configuration")
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")

    sp = sub.add_parser("config", help="print a preset or normalised config file")
    common(sp)
    sp.add_argument("--out", help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_config)

    sp = sub.add_parser("simulate", help="simulate a run and write an event file")
    common(sp)
    sp.add_argument("--out", required=True, help="event file (.csv or .csv.gz)")
    sp.add_argument("--seed", type=_nonneg_int)
    sp.add_argument("--shots", type=_nonneg_int, help="shots per schedule entry")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="analyse an event file")
    common(sp)
    sp.add_argument("input", help="event file, or a directory of visibility maps for --task lifetime")
    sp.add_argument("--task", required=True, choices=TASKS)
    sp.add_argument("--out", required=True, help="outputs directory")
    sp.add_argument("--seed", type=_nonneg_int, help="bootstrap seed (default: the run seed)")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report", help="compare task outputs with the target table")
    common(sp)
    sp.add_argument("--out", required=True, help="outputs directory holding task summaries")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"wvmux: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"wvmux: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EventFormatError as exc:
        print(f"wvmux: event file error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except an.FitError as exc:
        print(f"wvmux: fit failed: {exc}", file=sys.stderr)
        for k, v in (exc.diagnostics or {}).items():
            print(f"  {k} = {v}", file=sys.stderr)
        return EXIT_NUMERIC
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"wvmux: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"wvmux: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

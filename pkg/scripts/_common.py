"""Helpers shared by the experiment scripts."""

import argparse
import time

from wvmux import analysis as an
from wvmux.analytic import binning_factor_pixelated
from wvmux.config import plan_from_config
from wvmux.simulator import ModeGrid, group_shots, run_experiment


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--shots", type=int, help="shots per schedule entry (preset value if omitted)")
    p.add_argument("--threads", type=int, default=1)
    return p


def simulate(cfg, seed, shots=None, threads=1):
    """Run a configured schedule and bin it; returns (map, seconds)."""
    plan = plan_from_config(cfg, seed=seed, shots=shots)
    t0 = time.perf_counter()
    events = run_experiment(plan, threads=threads).events
    cm = an.accumulate_coincidences(events, cfg.geometry, cfg.kernel, cfg.analysis.n_sigma, shots=group_shots(plan))
    return cm, time.perf_counter() - t0


def effective_f(cfg):
    """Binning factor at the geometric factor the mode grid actually achieves."""
    grid = ModeGrid.for_geometry(cfg.geometry, cfg.kernel, cfg.source.alpha)
    alpha = grid.alpha_effective(cfg.geometry, cfg.kernel)
    return binning_factor_pixelated(cfg.analysis.n_sigma, cfg.kernel, cfg.geometry.pixel_pitch, alpha)


def vmap(cfg, cm, key, lifetime=False):
    a = cfg.analysis
    s = cfg.lifetime if lifetime else a
    return an.visibility_map(
        cm, key, an.fringe_gradient(cfg.phase, cfg.geometry), an.pixel_mtf(cfg.phase, cfg.geometry),
        segment=s.segment, min_segment=s.min_segment, sigma_y=a.sigma_y, sigma_x=s.sigma_x,
        min_counts=a.min_counts, refine=a.refine, margins=s.margins,
    )

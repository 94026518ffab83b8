"""Acceptance criteria 1 to 11, each at its stated tolerance.

The heavy criteria share module-scoped simulation runs. One summary line per
criterion is printed at the end of the session.
"""

import math
import time

import numpy as np
import pytest

from wvmux import analysis as an
from wvmux.analytic import (
    DecoherenceParams,
    WernerState,
    binning_factor,
    binning_factor_pixelated,
    chsh_value,
    collision_probability,
    crosstalk_probability,
    joint_outcome_probs,
    model_map,
    optimal_bases,
    success_probability,
    temperature_from_gamma,
    visibility_from_g2,
    visibility_vs_time,
)
from wvmux.config import preset, plan_from_config
from wvmux.core import MeasurementSetting, Wavevector
from wvmux.events import write_events
from wvmux.simulator import ModeGrid, group_shots, run_experiment


def simulate(cfg, **kw):
    plan = plan_from_config(cfg, **kw)
    t0 = time.perf_counter()
    res = run_experiment(plan)
    cm = an.accumulate_coincidences(res.events, cfg.geometry, cfg.kernel, cfg.analysis.n_sigma, shots=group_shots(plan))
    return cm, time.perf_counter() - t0


def f_eff(cfg):
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


@pytest.fixture(scope="module")
def noisy_run():
    cfg = preset("noisy")
    cm, _ = simulate(cfg, seed=21)
    return cfg, cm


# --- 1, 2, 8, 9: closed form --------------------------------------------------------


def test_c1_binning_factor(record):
    f = binning_factor(1, 0.565)
    record(1, abs(f - 0.825) <= 0.001, f"F(1) = {f:.5f} (target 0.825 +- 0.001)")


def test_c2_chsh_identity(record):
    r = np.random.default_rng(2)
    worst = 0.0
    for v, phi in zip(r.uniform(0, 1, 1000), r.uniform(-math.pi, math.pi, 1000)):
        s = chsh_value(WernerState(v, phi), *optimal_bases(phi))
        worst = max(worst, abs(s - 2 * math.sqrt(2) * v))
    record(2, worst <= 1e-10, f"max |S - 2 sqrt2 V| = {worst:.1e} over 1000 draws")


def test_c8_mode_summary(record):
    geom = preset("reference").geometry
    s45 = an.mode_summary(model_map(45.0, geom, 0.92, 0.13, 6.26e3), n_boot=50)
    s60 = an.mode_summary(model_map(60.0, geom, 0.92, 0.13, 6.26e3), n_boot=50)
    ok = abs(s45.fraction.value - 0.5) <= 0.1 and abs(s60.mean_all.value - 0.5) <= 0.1
    record(8, ok, f"fraction(45 us) = {s45.fraction.value:.3f}, mean V(60 us) = {s60.mean_all.value:.3f} (0.5 +- 0.1, calibrated geometry)")


def test_c9_scalar_formulas(record):
    cfg = preset("reference")
    pc = collision_probability(20800, 5)
    ps = success_probability(0.08, 0.01, 550)
    px = crosstalk_probability(cfg.source, 2.65, cfg.camera.n_px)
    ok = abs(pc / 4.8e-4 - 1) <= 0.02 and round(ps, 3) == 0.356 and abs(px / 1.7e-3 - 1) <= 0.1
    record(9, ok, f"collision {pc:.3e}, success {ps:.4f}, crosstalk {px:.3e}")


# --- 3: Bell amplitude ------------------------------------------------------------------


def test_c3_bell_amplitude(record):
    cfg = preset("bell")
    assert cfg.sim.shots >= 200_000 and cfg.sim.v_eff == 0.92
    cm, dt = simulate(cfg, seed=3)
    res = an.bell_map_from_coincidences(
        cm, range(4), an.fringe_gradient(cfg.phase, cfg.geometry), an.pixel_mtf(cfg.phase, cfg.geometry)
    )
    lim = 3 * math.hypot(res.stderr, 0.19)
    ok = abs(res.amplitude - 2.60) <= lim and dt <= 300
    record(3, ok, f"S = {res.amplitude:.3f} +- {res.stderr:.3f} (2.60, limit {lim:.2f}), {dt:.0f} s")


# --- 4, 5: visibility oracles -------------------------------------------------------------


def test_c4_noiseless_visibility(record):
    cfg = preset("noiseless")
    cm, dt = simulate(cfg, seed=4)
    e = an.pooled_visibility(cm, (0, 0.0), an.interior_region(cfg.geometry, cfg.analysis.interior_margin_px))
    oracle = 1 / (1 + 2 * cfg.source.chi / f_eff(cfg))
    ok = abs(e.value - 0.976) <= 3 * e.stderr and abs(e.value - oracle) <= 3 * e.stderr and dt <= 600
    record(4, ok, f"V = {e.value:.4f} +- {e.stderr:.4f} (0.976; oracle {oracle:.5f}), {dt:.0f} s")


def test_c5_noisy_visibility(record, noisy_run):
    cfg, cm = noisy_run
    geom = cfg.geometry
    region = an.interior_region(geom, cfg.analysis.interior_margin_px)
    F = f_eff(cfg)
    ys, xs = geom.sum_shape
    X, Y = geom.sum_pixel_center(np.arange(xs), np.arange(ys))
    X, Y = np.meshgrid(X, Y)
    dec = DecoherenceParams(cfg.decoherence.gamma)
    parts, ok = [], True
    for key in sorted(cm.groups):
        t = key[1]
        e = an.pooled_visibility(cm, key, region)
        C = cm.groups[key].total[region]
        model = np.array([
            visibility_vs_time(t, Wavevector(x, y), cfg.source, cfg.noise, dec, 1.0, geom, F=F)
            for x, y in zip(X[region], Y[region])
        ])
        expected = float((model * C).sum() / C.sum())
        pull = (e.value - expected) / e.stderr
        ok &= abs(pull) <= 3
        parts.append(f"t={t:g}: {e.value:.3f} vs {expected:.3f} ({pull:+.1f} sigma)")
    record(5, ok, ", ".join(parts))


# --- 6, 7: decoherence fits -------------------------------------------------------------


def test_c6_parameter_recovery(record):
    cfg = preset("recovery")
    cm, dt = simulate(cfg, seed=11)
    vms = [vmap(cfg, cm, k) for k in sorted(cm.groups)]
    fit = an.fit_decoherence(vms, cfg.geometry, p0=cfg.analysis.p0)
    T = temperature_from_gamma(fit["gamma"])
    ok = (
        abs(fit["v0"] - 0.92) <= 0.02
        and abs(fit["w"] - 0.13) <= 0.02
        and abs(fit["gamma"] - 6.26e3) <= 290
        and abs(T - 47) <= 5
        and dt <= 1800
    )
    err = {n: fit.error(n) for n in fit.names}
    record(
        6, ok,
        f"V0 {fit['v0']:.3f} +- {err['v0']:.3f}, W {fit['w']:.3f} +- {err['w']:.3f}, "
        f"gamma {fit['gamma']:.0f} +- {err['gamma']:.0f}, T {T:.1f} uK, {dt:.0f} s",
    )


def test_c7_lifetime_law(record):
    cfg = preset("lifetime")
    cm, _ = simulate(cfg, seed=7)
    lt = cfg.lifetime
    vms = [vmap(cfg, cm, k, lifetime=True) for k in sorted(cm.groups)]
    tau = an.tau_vs_k(vms, cfg.geometry, band=lt.band, n_bins=lt.n_bins, p0=cfg.analysis.p0)
    ok = abs(tau.gamma / 5.98e3 - 1) <= 0.1 and abs(tau.temperature - 52) <= 5
    record(7, ok, f"gamma {tau.gamma:.0f} +- {tau.gamma_se:.0f} (5980 +- 10%), T {tau.temperature:.1f} uK (52 +- 5)")


# --- 10: g2 against visibility ----------------------------------------------------------


def test_c10_g2_visibility_consistency(record, noisy_run):
    cfg, cm = noisy_run
    region = an.interior_region(cfg.geometry, cfg.analysis.interior_margin_px)
    parts, ok = [], True
    for key in sorted(cm.groups):
        g = an.estimate_g2(cm, key, region, "correlated")
        v = an.pooled_visibility(cm, key, region)
        vg = visibility_from_g2(g.value)
        pull = (vg - v.value) / math.hypot(v.stderr, 2 * g.stderr / (g.value + 1) ** 2)
        # the g2 relation assumes balanced branches; it is checked where the
        # branch-imbalance factor is still within 1e-3 of one
        balanced = key[1] <= 20.0
        if balanced:
            ok &= abs(pull) <= 3
        parts.append(f"t={key[1]:g}: {vg:.3f} vs {v.value:.3f} ({pull:+.1f} sigma{'' if balanced else ', not checked'})")
    record(10, ok, ", ".join(parts))


# --- 11: property suites ----------------------------------------------------------------


def test_c11_outcome_probabilities(record):
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10_000):
        st = WernerState(r.uniform(), r.uniform(-math.pi, math.pi))
        p = joint_outcome_probs(st, MeasurementSetting(*r.uniform(-math.pi, math.pi, 2)))
        worst = max(worst, abs(sum(p.values()) - 1))
        for a in (1, -1):
            worst = max(worst, abs(p[(a, 1)] + p[(a, -1)] - 0.5), abs(p[(1, a)] + p[(-1, a)] - 0.5))
    record(11, worst <= 1e-12, f"outcome probabilities exact to {worst:.1e}")


def test_c11_thread_determinism(record, tmp_path):
    plan = plan_from_config(preset("noisy"), seed=5, shots=20_000)
    blobs = set()
    for threads in (1, 4, 16):
        p = tmp_path / f"t{threads}.csv.gz"
        write_events(p, run_experiment(plan, threads=threads).events)
        blobs.add(p.read_bytes())
    record(11, len(blobs) == 1, "threads 1/4/16 byte-identical")


def test_c11_jacobian(record):
    geom = preset("reference").geometry
    vms = [an.model_visibility_map(t, geom, 0.92, 0.13, 6.26e3, se=0.02) for t in (0.3, 20.3, 40.3, 60.3)]
    fun, jac, _ = an.decoherence_problem(vms, geom)
    p = np.array([0.9, 0.12, 6.0e3])
    J = jac(p)
    worst = 0.0
    for i in range(3):
        h = 1e-6 * p[i]
        d = np.zeros(3)
        d[i] = h
        fd = (fun(p + d) - fun(p - d)) / (2 * h)
        worst = max(worst, np.linalg.norm(J[:, i] - fd) / np.linalg.norm(fd))
    record(11, worst < 1e-5, f"Jacobian relative error {worst:.1e}")


def test_c11_brute_force_pairing(record):
    cfg = preset("noisy")
    plan = plan_from_config(cfg, seed=6, shots=1000)
    ev = run_experiment(plan).events
    cm = an.accumulate_coincidences(ev, cfg.geometry, cfg.kernel)
    same = an.map_as_dict(cm) == an.brute_force_coincidences(ev, cfg.geometry, cm.window)
    record(11, same, "coincidences equal brute-force pairing on 1e3-shot streams")

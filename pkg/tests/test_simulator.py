import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from wvmux.analytic import DecoherenceParams, NoiseModel, SourceParams, bell_expectation, WernerState
from wvmux.core import CorrelationKernel, DetectorGeometry, MeasurementSetting, PhaseProfile, PhaseVariant
from wvmux.simulator import (
    DetectedRates,
    ModeGrid,
    ScheduleEntry,
    SimulationPlan,
    block_rng,
    detect_pair,
    detected_rates,
    group_shots,
    read_survival,
    run_experiment,
    sample_noise_hits,
    sample_pair_counts,
    sample_pair_kinematics,
    sample_polarization,
)

GEOM = DetectorGeometry()
KER = CorrelationKernel()
GRID = ModeGrid.for_geometry(GEOM, KER)


def rng(i=0):
    return block_rng(1234, 99, i)


def plan(**kw):
    base = dict(
        mode="physical",
        n_shots=2000,
        schedule=[ScheduleEntry(0, MeasurementSetting(0, 0), 0.3), ScheduleEntry(1, MeasurementSetting(0.5, 0), 20.0)],
        seed=5,
        source=SourceParams(chi=0.02, eta_w=0.5),
        noise=NoiseModel(b_w=1e-3, b_r0=2e-3, b_r_inf=4e-3),
        block_size=512,
    )
    base.update(kw)
    return SimulationPlan(**base)


# --- mode grid ---------------------------------------------------------------------------


def test_grid_partitions_region():
    (x0, x1), (y0, y1) = GEOM.x_range, GEOM.y_range
    assert GRID.x_edges[0] == x0 and GRID.x_edges[-1] == pytest.approx(x1)
    assert GRID.y_edges[0] == y0 and GRID.y_edges[-1] == pytest.approx(y1)
    assert np.all(np.diff(GRID.x_edges) > 0) and np.all(np.diff(GRID.y_edges) > 0)
    assert GRID.n_cells == 30
    assert GRID.alpha_effective(GEOM, KER) == pytest.approx(0.565 * 30 / 28.96, rel=1e-3)


# --- pair counts ------------------------------------------------------------------------


def test_pair_counts_vanish_as_chi_goes_to_zero():
    c = sample_pair_counts(rng(), GRID, 1e-9, 10_000)
    assert c.sum() == 0


@pytest.mark.parametrize("statistics", ["poisson", "thermal"])
def test_pair_count_mean_per_mode(statistics):
    chi = 0.01
    c = sample_pair_counts(rng(1), GRID, chi, 1_000_000 // GRID.n_cells * 2, statistics).ravel()
    per_mode = c / 2
    n_modes = c.size * 2
    se = math.sqrt(chi * (1 + chi) / n_modes)
    assert abs(per_mode.mean() - chi) < 4 * se


@pytest.mark.parametrize("statistics", ["poisson", "thermal"])
def test_pair_count_distribution(statistics):
    chi = 0.05
    c = sample_pair_counts(rng(2), GRID, chi, 20_000, statistics).ravel()
    n = np.arange(4)
    if statistics == "thermal":
        # sum of two geometric modes: negative binomial with r = 2
        pmf = stats.nbinom.pmf(n, 2, 1 / (1 + chi))
    else:
        pmf = stats.poisson.pmf(n, 2 * chi)
    obs = np.array([(c == k).sum() for k in n[:-1]] + [(c >= 3).sum()])
    exp = np.r_[pmf[:-1], 1 - pmf[:-1].sum()] * c.size
    # merge the sparse tail into the n = 2 bin
    obs = np.r_[obs[:2], obs[2:].sum()]
    exp = np.r_[exp[:2], exp[2:].sum()]
    assert stats.chisquare(obs, exp).pvalue > 0.01
    ratio = (c >= 2).sum() / (c == 1).sum()
    expect = (1 - pmf[0] - pmf[1]) / pmf[1]
    assert ratio == pytest.approx(expect, rel=0.15)


def test_thermal_two_photon_excess():
    chi = 0.1
    th = sample_pair_counts(rng(3), GRID, chi, 50_000, "thermal").ravel()
    po = sample_pair_counts(rng(4), GRID, chi, 50_000, "poisson").ravel()
    assert (th >= 2).mean() > (po >= 2).mean()


# --- kinematics -------------------------------------------------------------------------


def test_degenerate_kernel_gives_identical_wavevectors():
    xw, yw, xr, yr = sample_pair_kinematics(rng(), GRID, np.arange(30), CorrelationKernel(1e-300, 1e-300))
    assert np.array_equal(xw, xr) and np.array_equal(yw, yr)


def test_difference_coordinates_follow_density():
    cells = rng(5).integers(0, GRID.n_cells, 1_000_000)
    xw, yw, xr, yr = sample_pair_kinematics(rng(6), GRID, cells, KER)
    for d, s in ((xw - xr, KER.sigma_x), (yw - yr, KER.sigma_y)):
        edges = np.linspace(-3, 3, 25) * s
        obs, _ = np.histogram(d, edges)
        p = np.diff(stats.norm.cdf(edges / s))
        exp = p / p.sum() * obs.sum()
        assert stats.chisquare(obs, exp).pvalue > 0.01


def test_write_positions_uniform_over_region():
    cells = rng(7).integers(0, GRID.n_cells, 300_000)
    xw, yw, _, _ = sample_pair_kinematics(rng(8), GRID, cells, KER)
    ix, iy = GEOM.pixel_of(xw, yw)
    assert np.all(ix >= 0)
    obs = np.bincount(iy * GEOM.width_px + ix, minlength=GEOM.n_px)
    assert stats.chisquare(obs).pvalue > 0.01


# --- detection --------------------------------------------------------------------------


def test_lossless_detection_at_zero_time():
    x = np.linspace(-40, 40, 200)
    y = np.full_like(x, 40.0)
    kin = (x, y, x, y)
    w, r, *_ = detect_pair(rng(), kin, 0.0, DetectedRates(1, 1, 0, 0), GEOM, 6.26e3)
    assert w.all() and r.all()


def test_survival_vanishes_at_long_times():
    assert read_survival(1e5, np.array([0.0]), np.array([80.0]), GEOM.y_max, 6.26e3)[0] == 0


def test_survival_at_lifetime_on_balanced_line():
    n = 400_000
    x = np.zeros(n)
    y = np.full(n, GEOM.y_max / 2 - 1e-9)  # top edge of the folded grid
    tau = 6.26e3 / (GEOM.y_max / 2)
    q = 0.405
    _, r, *_ = detect_pair(rng(9), (x, y, x, y), tau, DetectedRates(1, q, 0, 0), GEOM, 6.26e3)
    p = q * math.exp(-1)
    assert abs(r.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_detect_pair_read_survival_statistics():
    n = 200_000
    x = np.zeros(n)
    y = np.full(n, GEOM.y_range[1] - 0.5)  # top row, nearly balanced
    t = 30.0
    w, r, *_ = detect_pair(rng(10), (x, y, x, y), t, DetectedRates(1, 0.405, 0, 0), GEOM, 6.26e3)
    p = 0.405 * read_survival(t, x[:1], y[:1], GEOM.y_max, 6.26e3)[0]
    assert abs(r.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_out_of_range_partners_dropped_and_counted():
    x = np.array([GEOM.x_range[0] + 0.1])
    kin = (x, np.array([20.0]), x - 10.0, np.array([20.0]))
    w, r, _, _, out_w, out_r = detect_pair(rng(), kin, 0.0, DetectedRates(1, 1, 0, 0), GEOM, 6.26e3)
    assert w[0] and not r[0]
    assert (out_w, out_r) == (0, 1)


# --- polarization -----------------------------------------------------------------------


def test_perfect_correlation():
    s = MeasurementSetting(0.3, 0.2)
    sw, sr = sample_polarization(rng(), np.full(10_000, -0.5), 1.0, s)
    assert np.all(sw == sr)


def test_depolarized_outcomes_uniform():
    sw, sr = sample_polarization(rng(11), np.zeros(100_000), 0.0, MeasurementSetting(0, 0))
    obs = [np.sum((sw == a) & (sr == b)) for a in (1, -1) for b in (1, -1)]
    assert stats.chisquare(obs).pvalue > 0.01


@pytest.mark.parametrize("i", range(4))
def test_polarization_expectation_matches_oracle(i):
    r = np.random.default_rng(100 + i)
    v, phi, xw, xr = r.uniform([0, -3, -3, -3], [1, 3, 3, 3])
    s = MeasurementSetting(xw, xr)
    sw, sr = sample_polarization(rng(20 + i), np.full(1_000_000, phi), v, s)
    prod = sw.astype(float) * sr
    target = bell_expectation(WernerState(v, phi), s)
    assert abs(prod.mean() - target) < 4 * prod.std() / 1000


# --- noise ------------------------------------------------------------------------------


def test_zero_noise_gives_no_hits():
    shot, *_ = sample_noise_hits(rng(), 1000, 0.0, GEOM)
    assert shot.size == 0


def test_noise_rate_and_plateau_ratio():
    src = SourceParams(chi=0.01, eta_w=1.0, eta_r0=0.405)
    noise = NoiseModel(b_w=1e-3, b_r0=0.0043, b_r_inf=0.0215, tau_b=13.0)
    m = GRID.n_cells * 2
    n = 1_000_000
    r0 = detected_rates(src, noise, 0.0)
    shot, port, ix, iy = sample_noise_hits(rng(12), n, r0.noise_w * m, GEOM)
    mean = 1e-3 * m
    assert abs(shot.size / n - mean) < 4 * math.sqrt(mean / n)
    assert np.all((ix >= 0) & (ix < GEOM.width_px) & (iy >= 0) & (iy < GEOM.height_px))
    late = detected_rates(src, noise, 1e3)
    assert late.noise_r / r0.noise_r == pytest.approx(5)
    s_late, *_ = sample_noise_hits(rng(13), 200_000, late.noise_r * m, GEOM)
    s_early, *_ = sample_noise_hits(rng(14), 200_000, r0.noise_r * m, GEOM)
    assert s_late.size / s_early.size == pytest.approx(5, rel=0.05)


# --- runs -------------------------------------------------------------------------------


def test_empty_stream_without_pairs_or_noise():
    res = run_experiment(plan(source=SourceParams(chi=0.0), noise=NoiseModel()))
    assert len(res.events) == 0


@pytest.mark.parametrize("threads", [1, 4, 16])
def test_output_independent_of_threads(threads):
    ref = run_experiment(plan(), threads=1).events
    assert run_experiment(plan(), threads=threads).events.equals(ref)


def test_same_seed_same_stream_different_seed_differs():
    a = run_experiment(plan()).events
    assert run_experiment(plan()).events.equals(a)
    assert not run_experiment(plan(seed=6)).events.equals(a)


def test_stream_invariants():
    p = plan(mode="effective", v_eff=0.9)
    ev = run_experiment(p).events
    key = ev.shot * 2 + ev.arm
    assert np.all(np.diff(key) >= 0)
    assert np.all((ev.ix >= 0) & (ev.ix < GEOM.width_px) & (ev.iy >= 0) & (ev.iy < GEOM.height_px))
    entry = ev.shot // p.n_shots
    assert np.array_equal(ev.basis, np.array([e.basis_index for e in p.schedule])[entry])
    assert np.array_equal(ev.t, np.array([e.storage_time for e in p.schedule])[entry])
    assert group_shots(p) == {(0, 0.3): 2000, (1, 20.0): 2000}


def test_block_size_changes_streams_but_not_statistics():
    a = run_experiment(plan(block_size=512))
    b = run_experiment(plan(block_size=2000))
    assert a.diagnostics.achieved_M == b.diagnostics.achieved_M == 30
    assert abs(len(a.events) - len(b.events)) < 6 * math.sqrt(len(a.events))


def test_sink_failure_carries_shot_range():
    def sink(table):
        raise OSError("disk full")

    with pytest.raises(RuntimeError, match="shots 0..511"):
        run_experiment(plan(), sink=sink)


def test_sink_receives_blocks_in_order():
    got = []
    run_experiment(plan(), threads=4, sink=got.append)
    shots = np.concatenate([t.shot for t in got])
    assert np.all(np.diff(shots) >= 0)


def test_plan_validation():
    with pytest.raises(ValueError):
        plan(schedule=[])
    with pytest.raises(ValueError):
        plan(mode="quantum")
    with pytest.raises(ValueError):
        plan(v_eff=1.5)
    with pytest.raises(ValueError):
        ScheduleEntry(0, MeasurementSetting(0, 0), -1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 300))
def test_hits_never_leave_the_grid(seed, shots):
    p = plan(seed=seed, n_shots=shots, block_size=128, profile=PhaseProfile(PhaseVariant.GRID))
    ev = run_experiment(p).events
    assert np.all((ev.ix >= 0) & (ev.ix < GEOM.width_px) & (ev.iy >= 0) & (ev.iy < GEOM.height_px))
    assert set(np.unique(ev.port)) <= {-1, 1}

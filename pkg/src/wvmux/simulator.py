"""Monte-Carlo generation of camera events for the multiplexed pair source.

Each folded observation cell carries two independent single-polarization
pair modes, each with mean pair number ``chi``. A pair puts its write-out
photon uniformly inside its cell and its read-out partner at a Gaussian
offset given by the correlation kernel. Photons are then thinned by the
detection/retrieval efficiencies, pixelated, and analysed in polarization.

Random numbers come from counter-based Philox streams keyed by
``(seed, schedule index, block index)`` with a fixed block of shots, so the
output depends only on the plan and never on the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .analytic import (
    DecoherenceParams,
    NoiseModel,
    SourceParams,
    imbalance_visibility_xy,
    mode_count,
    readout_noise,
)
from .core import (
    CorrelationKernel,
    DetectorGeometry,
    MeasurementSetting,
    PhaseProfile,
    branch_moduli_xy,
    phase_xy,
)
from .events import READ, WRITE, EventTable

MODES = ("effective", "physical")
PAIR_STATISTICS = ("poisson", "thermal")
MODES_PER_CELL = 2


@dataclass(frozen=True)
class ScheduleEntry:
    basis_index: int
    setting: MeasurementSetting
    storage_time: float

    def __post_init__(self):
        if self.storage_time < 0 or not math.isfinite(self.storage_time):
            raise ValueError("storage time must be finite and nonnegative")
        if self.basis_index < 0:
            raise ValueError("basis index must be nonnegative")


@dataclass(frozen=True)
class SimulationPlan:
    mode: str
    n_shots: int
    schedule: tuple[ScheduleEntry, ...]
    seed: int = 0
    source: SourceParams = field(default_factory=SourceParams)
    noise: NoiseModel = field(default_factory=NoiseModel)
    decoherence: DecoherenceParams = field(default_factory=DecoherenceParams)
    kernel: CorrelationKernel = field(default_factory=CorrelationKernel)
    profile: PhaseProfile = field(default_factory=PhaseProfile)
    geometry: DetectorGeometry = field(default_factory=DetectorGeometry)
    v_eff: float = 1.0
    pair_statistics: str = "poisson"
    block_size: int = 4096
    dedupe: bool = True

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.schedule:
            raise ValueError("schedule must not be empty")
        if self.n_shots < 0:
            raise ValueError("n_shots must be nonnegative")
        if not 0 <= self.v_eff <= 1:
            raise ValueError("v_eff must lie in [0, 1]")
        if self.pair_statistics not in PAIR_STATISTICS:
            raise ValueError(f"pair_statistics must be one of {PAIR_STATISTICS}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class ModeGrid:
    """Rectangular cells partitioning the folded region."""

    x_edges: np.ndarray
    y_edges: np.ndarray

    @classmethod
    def for_geometry(cls, geom: DetectorGeometry, kernel: CorrelationKernel, alpha: float = 0.565) -> "ModeGrid":
        (x0, x1), (y0, y1) = geom.x_range, geom.y_range
        m = mode_count(geom.area, kernel, alpha)
        nx = max(1, round(math.sqrt(m * (x1 - x0) / (y1 - y0))))
        ny = max(1, round(m / nx))
        return cls(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.y_edges) - 1, len(self.x_edges) - 1

    @property
    def n_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xc = 0.5 * (self.x_edges[1:] + self.x_edges[:-1])
        yc = 0.5 * (self.y_edges[1:] + self.y_edges[:-1])
        X, Y = np.meshgrid(xc, yc)
        return X.ravel(), Y.ravel()

    def alpha_effective(self, geom: DetectorGeometry, kernel: CorrelationKernel) -> float:
        """Geometric factor implied by the achieved tiling.

        Rounding the cell count changes the pair density per unit area, so
        closed-form oracles for a simulated run use this value of alpha.
        """
        return 4 * kernel.sigma_x * kernel.sigma_y * self.n_cells / geom.area

    def bounds(self, cell):
        """(x_lo, x_hi, y_lo, y_hi) of flat cell indices."""
        cell = np.asarray(cell)
        iy, ix = np.divmod(cell, self.shape[1])
        return self.x_edges[ix], self.x_edges[ix + 1], self.y_edges[iy], self.y_edges[iy + 1]


@dataclass
class Diagnostics:
    achieved_M: int = 0
    pairs: int = 0
    dropped_write: int = 0
    dropped_read: int = 0
    noise_hits: int = 0
    merged_hits: int = 0

    def merge(self, other: "Diagnostics") -> "Diagnostics":
        return Diagnostics(
            self.achieved_M or other.achieved_M,
            self.pairs + other.pairs,
            self.dropped_write + other.dropped_write,
            self.dropped_read + other.dropped_read,
            self.noise_hits + other.noise_hits,
            self.merged_hits + other.merged_hits,
        )

    @property
    def dropped(self) -> int:
        return self.dropped_write + self.dropped_read


@dataclass
class SimulationResult:
    events: EventTable
    diagnostics: Diagnostics
    plan: SimulationPlan


@dataclass(frozen=True)
class DetectedRates:
    """Per-shot detection probabilities in the detected-rate parameterization."""

    q_w: float
    q_r0: float
    noise_w: float  # detected write-arm noise per mode
    noise_r: float  # detected read-arm noise per mode


def group_shots(plan: SimulationPlan) -> dict[tuple[int, float], int]:
    """Shots taken per (basis index, storage time), empty shots included."""
    out: dict = {}
    for e in plan.schedule:
        key = (e.basis_index, float(e.storage_time))
        out[key] = out.get(key, 0) + plan.n_shots
    return out


def detected_rates(src: SourceParams, noise: NoiseModel, t: float) -> DetectedRates:
    b_r = readout_noise(t, src.chi, noise)
    return DetectedRates(src.eta_w, src.eta_r0 * src.eta_det_r, noise.b_w * src.eta_w, b_r * src.eta_det_r)


def block_rng(seed: int, entry: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(entry, block))
    return np.random.Generator(np.random.Philox(ss))


# --- sampling steps -----------------------------------------------------------


def sample_pair_counts(rng, grid: ModeGrid, chi: float, n_shots: int = 1, statistics: str = "poisson"):
    """Pair counts of shape (n_shots, n_cells); each cell sums two modes of mean chi."""
    if not 0 < chi <= 0.2:
        raise ValueError("chi must lie in (0, 0.2]")
    shape = (n_shots, grid.n_cells)
    if statistics == "poisson":
        return rng.poisson(MODES_PER_CELL * chi, size=shape)
    if statistics == "thermal":
        # P(n) = chi^n / (1+chi)^(n+1) per mode
        return (rng.geometric(1.0 / (1.0 + chi), size=shape + (MODES_PER_CELL,)) - 1).sum(axis=-1)
    raise ValueError(f"unknown pair statistics {statistics!r}")


def sample_pair_kinematics(rng, grid: ModeGrid, cells, kernel: CorrelationKernel):
    """Write and read wavevectors for pairs in the given cells.

    Returns ``(xw, yw, xr, yr)``; read-out partners outside the region are
    kept here and dropped at detection.
    """
    cells = np.asarray(cells)
    x0, x1, y0, y1 = grid.bounds(cells)
    u = rng.random((2, cells.size))
    xw = x0 + (x1 - x0) * u[0]
    yw = y0 + (y1 - y0) * u[1]
    g = rng.standard_normal((2, cells.size))
    return xw, yw, xw + kernel.sigma_x * g[0], yw + kernel.sigma_y * g[1]


def read_survival(t, xw, yw, y_max: float, gamma: float):
    """Branch-averaged retrieval ratio ``(c_H^2 + c_V^2)/2`` at the write position."""
    kh, kv = branch_moduli_xy(xw, yw, y_max)
    t2 = float(t) ** 2 / gamma**2
    return 0.5 * (np.exp(-t2 * kh**2) + np.exp(-t2 * kv**2))


def detect_pair(rng, kinematics, t: float, rates: DetectedRates, geom: DetectorGeometry, gamma: float):
    """Thin and pixelate a batch of pairs.

    Returns ``(w_ok, r_ok, (iwx, iwy), (irx, iry), out_w, out_r)`` where the
    ``*_ok`` masks mark recorded hits and ``out_*`` count photons that
    survived but fell outside the pixel grid.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    xw, yw, xr, yr = kinematics
    n = len(xw)
    u = rng.random((2, n))
    w_alive = u[0] < rates.q_w
    r_alive = u[1] < rates.q_r0 * read_survival(t, xw, yw, geom.y_max, gamma)
    iwx, iwy = geom.pixel_of(xw, yw)
    irx, iry = geom.pixel_of(xr, yr)
    w_in, r_in = iwx >= 0, irx >= 0
    out_w = int(np.count_nonzero(w_alive & ~w_in))
    out_r = int(np.count_nonzero(r_alive & ~r_in))
    return w_alive & w_in, r_alive & r_in, (iwx, iwy), (irx, iry), out_w, out_r


def sample_polarization(rng, phase, visibility, setting: MeasurementSetting):
    """Joint ports (s_w, s_r) with ``P = (1 + s_w s_r E)/4``, ``E = V cos(phase + xi_w + xi_r)``."""
    phase = np.asarray(phase, dtype=float)
    E = np.asarray(visibility) * np.cos(phase + setting.xi_w + setting.xi_r)
    u = rng.random((2,) + phase.shape)
    s_w = np.where(u[0] < 0.5, 1, -1)
    s_r = np.where(u[1] < 0.5 * (1 + E), s_w, -s_w)
    return s_w.astype(np.int8), s_r.astype(np.int8)


def sample_noise_hits(rng, n_shots: int, mean_per_shot: float, geom: DetectorGeometry):
    """Uniform, unpolarized noise: returns (shot index, port, ix, iy) arrays."""
    if mean_per_shot < 0:
        raise ValueError("noise rate must be nonnegative")
    counts = rng.poisson(mean_per_shot, size=n_shots) if mean_per_shot > 0 else np.zeros(n_shots, np.int64)
    total = int(counts.sum())
    shot = np.repeat(np.arange(n_shots), counts)
    pix = rng.integers(0, geom.n_px, size=total)
    port = np.where(rng.random(total) < 0.5, 1, -1).astype(np.int8)
    iy, ix = np.divmod(pix, geom.width_px)
    return shot, port, ix, iy


# --- orchestration ------------------------------------------------------------


def _block(plan: SimulationPlan, grid: ModeGrid, entry_idx: int, block_idx: int):
    entry = plan.schedule[entry_idx]
    lo = block_idx * plan.block_size
    n = min(plan.block_size, plan.n_shots - lo)
    rng = block_rng(plan.seed, entry_idx, block_idx)
    geom, t = plan.geometry, entry.storage_time
    rates = detected_rates(plan.source, plan.noise, t)
    diag = Diagnostics(achieved_M=grid.n_cells)

    if plan.mode == "effective":
        shot = np.arange(n)
        cells = rng.integers(0, grid.n_cells, size=n)
    elif plan.source.chi > 0:
        counts = sample_pair_counts(rng, grid, plan.source.chi, n, plan.pair_statistics)
        flat = counts.ravel()
        shot = np.repeat(np.arange(n).repeat(grid.n_cells), flat)
        cells = np.repeat(np.tile(np.arange(grid.n_cells), n), flat)
    else:
        shot = cells = np.zeros(0, dtype=np.int64)
    diag.pairs = len(shot)

    kin = sample_pair_kinematics(rng, grid, cells, plan.kernel)
    w_ok, r_ok, (iwx, iwy), (irx, iry), out_w, out_r = detect_pair(
        rng, kin, t, rates, geom, plan.decoherence.gamma
    )
    diag.dropped_write, diag.dropped_read = out_w, out_r
    xw, yw, xr, yr = kin
    vis = imbalance_visibility_xy(t, xw, yw, geom.y_max, plan.decoherence.gamma)
    if plan.mode == "effective":
        vis = plan.v_eff * vis
    s_w, s_r = sample_polarization(rng, phase_xy(plan.profile, xw, yw, xr, yr), vis, entry.setting)
    # a lone photon carries no partner information: its port is uniform
    lone = rng.random(len(shot)) < 0.5
    s_w = np.where(r_ok, s_w, np.where(lone, 1, -1)).astype(np.int8)
    s_r = np.where(w_ok, s_r, np.where(lone, 1, -1)).astype(np.int8)

    parts = [
        (shot[w_ok], WRITE, s_w[w_ok], iwx[w_ok], iwy[w_ok]),
        (shot[r_ok], READ, s_r[r_ok], irx[r_ok], iry[r_ok]),
    ]
    if plan.mode == "physical":
        m = grid.n_cells * MODES_PER_CELL
        for arm, rate in ((WRITE, rates.noise_w), (READ, rates.noise_r)):
            ns, npt, nx, ny = sample_noise_hits(rng, n, rate * m, geom)
            diag.noise_hits += len(ns)
            parts.append((ns, arm, npt, nx, ny))

    sh = np.concatenate([p[0] for p in parts])
    table = EventTable(
        sh + entry_idx * plan.n_shots + lo,
        np.concatenate([np.full(len(p[0]), p[1]) for p in parts]),
        np.full(len(sh), entry.basis_index),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
        np.full(len(sh), t),
    ).sorted()
    if plan.dedupe and len(table):
        # click detection: repeated (shot, arm, port, pixel) registers once
        key = np.stack([table.shot, table.arm, table.iy, table.ix, table.port])
        keep = np.r_[True, np.any(np.diff(key, axis=1) != 0, axis=0)]
        diag.merged_hits = int(len(table) - keep.sum())
        table = table.take(keep)
    return table, diag


def run_experiment(plan: SimulationPlan, threads: int = 1, sink=None) -> SimulationResult:
    """Simulate every schedule entry; shot ids are ``entry * n_shots + i``.

    With a ``sink`` callable, blocks are handed over in shot order instead of
    being collected; a failing sink is re-raised with the shot range.
    """
    grid = ModeGrid.for_geometry(plan.geometry, plan.kernel, plan.source.alpha)
    n_blocks = -(-plan.n_shots // plan.block_size)
    jobs = [(e, b) for e in range(len(plan.schedule)) for b in range(n_blocks)]
    diag = Diagnostics(achieved_M=grid.n_cells)
    tables = []

    def work(job):
        return _block(plan, grid, *job)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for (e, b), (table, d) in zip(jobs, pool.map(work, jobs)):
            diag = diag.merge(d)
            if sink is None:
                tables.append(table)
                continue
            try:
                sink(table)
            except Exception as exc:
                first = e * plan.n_shots + b * plan.block_size
                raise RuntimeError(f"event sink failed at shots {first}..{first + plan.block_size - 1}: {exc}") from exc
    events = EventTable.concat(tables) if sink is None else EventTable.empty()
    return SimulationResult(events, diag, plan)


def with_overrides(plan: SimulationPlan, **kw) -> SimulationPlan:
    return replace(plan, **kw)

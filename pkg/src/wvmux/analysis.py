"""From camera events to coincidence, expected-value, Bell and visibility maps.

Sum-coordinate maps are indexed ``[y_s, x_s]`` with sum pixel index
``i_w + i_r`` along each axis (half-pixel resolution), see
:meth:`DetectorGeometry.sum_pixel_center`. Port index 0 is ``+`` and 1 is
``-``. Coincidence and singles tallies are integers, so merging partial
maps is exact and order independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.optimize import least_squares, minimize_scalar

from .analytic import CHSH_THRESHOLD, storage_visibility, storage_visibility_jac, temperature_from_gamma, window_halfwidth_px
from .core import CorrelationKernel, DetectorGeometry, PhaseProfile, branch_moduli_xy
from .events import READ, WRITE, EventTable

CHSH_SIGNS = np.array([1.0, 1.0, 1.0, -1.0])


class FitError(RuntimeError):
    """A fit that did not converge; ``diagnostics`` holds the solver state."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


# --- coincidence maps ---------------------------------------------------------


@dataclass
class GroupCounts:
    """Tallies for one (basis index, storage time) group."""

    coinc: np.ndarray  # (2, 2, Ys, Xs) indexed [s_w, s_r]
    singles_w: np.ndarray  # (2, H, W)
    singles_r: np.ndarray  # (2, H, W)
    shots: int = 0

    @classmethod
    def zeros(cls, geom: DetectorGeometry) -> "GroupCounts":
        ys, xs = geom.sum_shape
        return cls(
            np.zeros((2, 2, ys, xs), np.int64),
            np.zeros((2, geom.height_px, geom.width_px), np.int64),
            np.zeros((2, geom.height_px, geom.width_px), np.int64),
        )

    def __add__(self, other: "GroupCounts") -> "GroupCounts":
        return GroupCounts(
            self.coinc + other.coinc,
            self.singles_w + other.singles_w,
            self.singles_r + other.singles_r,
            self.shots + other.shots,
        )

    @property
    def total(self) -> np.ndarray:
        return self.coinc.sum(axis=(0, 1))


@dataclass
class CoincidenceMap:
    geometry: DetectorGeometry
    n_sigma: float
    window: tuple[int, int]  # pixel half-widths (mx, my)
    groups: dict = field(default_factory=dict)  # (basis, t) -> GroupCounts
    skipped: int = 0

    def merge(self, other: "CoincidenceMap") -> "CoincidenceMap":
        if (self.geometry, self.window) != (other.geometry, other.window):
            raise ValueError("cannot merge maps with different geometry or window")
        groups = dict(self.groups)
        for k, g in other.groups.items():
            groups[k] = groups[k] + g if k in groups else g
        return CoincidenceMap(self.geometry, self.n_sigma, self.window, dict(sorted(groups.items())), self.skipped + other.skipped)

    def keys(self, basis: int | None = None) -> list[tuple[int, float]]:
        return [k for k in self.groups if basis is None or k[0] == basis]

    def group(self, basis: int, t: float | None = None) -> GroupCounts:
        keys = [k for k in self.groups if k[0] == basis and (t is None or k[1] == t)]
        if not keys:
            raise KeyError(f"no data for basis {basis}" + ("" if t is None else f" at t={t}"))
        out = self.groups[keys[0]]
        for k in keys[1:]:
            out = out + self.groups[k]
        return out

    @property
    def times(self) -> list[float]:
        return sorted({k[1] for k in self.groups})


def _pair_indices(w_shot: np.ndarray, r_shot: np.ndarray):
    """All (write, read) index pairs that share a shot; both inputs sorted."""
    lo = np.searchsorted(r_shot, w_shot, side="left")
    hi = np.searchsorted(r_shot, w_shot, side="right")
    n = hi - lo
    wi = np.repeat(np.arange(len(w_shot)), n)
    start = np.repeat(lo - np.r_[0, np.cumsum(n)[:-1]], n)
    ri = start + np.arange(wi.size)
    return wi, ri


def accumulate_coincidences(
    events: EventTable,
    geom: DetectorGeometry,
    kernel: CorrelationKernel,
    n_sigma: float = 1.0,
    basis_indices=None,
    shots: dict | None = None,
    chunk: int = 500_000,
) -> CoincidenceMap:
    """Bin every same-shot write/read hit pair inside the difference window.

    The window keeps pixel offsets with ``|di| * pitch <= n sigma`` per axis.
    ``shots`` maps (basis, t) to the number of shots taken, including shots
    without any hit; by default the distinct shot ids seen are counted.
    Records with a basis index outside ``basis_indices`` are skipped.
    """
    if n_sigma <= 0:
        raise ValueError("n_sigma must be positive")
    mx = window_halfwidth_px(n_sigma, kernel.sigma_x, geom.pixel_pitch)
    my = window_halfwidth_px(n_sigma, kernel.sigma_y, geom.pixel_pitch)
    cmap = CoincidenceMap(geom, n_sigma, (mx, my))
    if len(events) == 0:
        return cmap
    if np.any(events.ix >= geom.width_px) or np.any(events.iy >= geom.height_px) or np.any(events.ix < 0) or np.any(events.iy < 0):
        raise ValueError("event outside the pixel grid")
    if basis_indices is not None:
        ok = np.isin(events.basis, np.asarray(list(basis_indices)))
        cmap.skipped = int(np.count_nonzero(~ok))
        events = events.take(ok)
    order = np.lexsort((events.arm, events.shot))
    if np.any(order != np.arange(len(order))):
        events = events.take(order)

    ys, xs = geom.sum_shape
    H, W = geom.height_px, geom.width_px
    keys = sorted(set(zip(events.basis.tolist(), events.t.tolist())))
    for basis, t in keys:
        sel = (events.basis == basis) & (events.t == t)
        ev = events.take(sel)
        g = GroupCounts.zeros(geom)
        g.shots = int(shots[(basis, t)]) if shots and (basis, t) in shots else len(np.unique(ev.shot))
        pidx = (ev.port < 0).astype(np.int64)
        pix = ev.iy.astype(np.int64) * W + ev.ix
        for arm, target in ((WRITE, g.singles_w), (READ, g.singles_r)):
            m = ev.arm == arm
            target += np.bincount(pidx[m] * H * W + pix[m], minlength=2 * H * W).reshape(2, H, W)
        w = np.flatnonzero(ev.arm == WRITE)
        r = np.flatnonzero(ev.arm == READ)
        flat = np.zeros(4 * ys * xs, np.int64)
        # chunk over write hits; pairs never straddle a shot boundary
        for lo in range(0, len(w), chunk):
            wk = w[lo : lo + chunk]
            wi, ri = _pair_indices(ev.shot[wk], ev.shot[r])
            wi, ri = wk[wi], r[ri]
            dx = ev.ix[wi] - ev.ix[ri]
            dy = ev.iy[wi] - ev.iy[ri]
            keep = (np.abs(dx) <= mx) & (np.abs(dy) <= my)
            wi, ri = wi[keep], ri[keep]
            sx = ev.ix[wi].astype(np.int64) + ev.ix[ri]
            sy = ev.iy[wi].astype(np.int64) + ev.iy[ri]
            idx = ((pidx[wi] * 2 + pidx[ri]) * ys + sy) * xs + sx
            flat += np.bincount(idx, minlength=flat.size)
        g.coinc = flat.reshape(2, 2, ys, xs)
        cmap.groups[(int(basis), float(t))] = g
    return cmap


def brute_force_coincidences(events: EventTable, geom: DetectorGeometry, window: tuple[int, int]) -> dict:
    """Reference pairing loop: {(basis, t, s_w, s_r, sy, sx): count}."""
    out: dict = {}
    by_shot: dict = {}
    for i in range(len(events)):
        by_shot.setdefault(int(events.shot[i]), []).append(i)
    for idx in by_shot.values():
        for i in idx:
            if events.arm[i] != WRITE:
                continue
            for j in idx:
                if events.arm[j] != READ:
                    continue
                dx, dy = int(events.ix[i]) - int(events.ix[j]), int(events.iy[i]) - int(events.iy[j])
                if abs(dx) > window[0] or abs(dy) > window[1]:
                    continue
                key = (
                    int(events.basis[i]),
                    float(events.t[i]),
                    int(events.port[i] < 0),
                    int(events.port[j] < 0),
                    int(events.iy[i]) + int(events.iy[j]),
                    int(events.ix[i]) + int(events.ix[j]),
                )
                out[key] = out.get(key, 0) + 1
    return out


def map_as_dict(cmap: CoincidenceMap) -> dict:
    out = {}
    for (b, t), g in cmap.groups.items():
        for sw, sr, sy, sx in zip(*np.nonzero(g.coinc)):
            out[(b, t, int(sw), int(sr), int(sy), int(sx))] = int(g.coinc[sw, sr, sy, sx])
    return out


# --- g2 and expected values ------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    @property
    def missing(self) -> bool:
        return not math.isfinite(self.value)


MISSING = Estimate(math.nan, math.nan)


def g2_from_counts(n: float, n_wr: float, n_w: float, n_r: float) -> Estimate:
    """``g2 = N N_wr / (N_w N_r)`` with counting errors propagated in quadrature."""
    if n_w <= 0 or n_r <= 0 or n <= 0:
        return MISSING
    g2 = n * n_wr / (n_w * n_r)
    if n_wr == 0:
        return Estimate(0.0, n / (n_w * n_r))
    return Estimate(g2, g2 * math.sqrt(1 / n_wr + 1 / n_w + 1 / n_r))


def accidental_map(g: GroupCounts, window: tuple[int, int], ports=((0, 0), (0, 1), (1, 0), (1, 1))) -> np.ndarray:
    """Sum-coordinate map of singles products ``N_w N_r`` over in-window pixel pairs."""
    _, _, ys, xs = g.coinc.shape
    H, W = g.singles_w.shape[1:]
    out = np.zeros((ys, xs))
    mx, my = window
    for pw, pr in ports:
        a = g.singles_w[pw].astype(float)
        b = g.singles_r[pr].astype(float)
        for dy in range(-my, my + 1):
            for dx in range(-mx, mx + 1):
                # write pixel (y, x), read pixel (y - dy, x - dx)
                y0, y1 = max(0, dy), min(H, H + dy)
                x0, x1 = max(0, dx), min(W, W + dx)
                if y0 >= y1 or x0 >= x1:
                    continue
                prod = a[y0:y1, x0:x1] * b[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
                out[2 * y0 - dy : 2 * y1 - dy - 1 : 2, 2 * x0 - dx : 2 * x1 - dx - 1 : 2] += prod
    return out


def estimate_g2(cmap: CoincidenceMap, key, region=None, ports: str = "summed") -> Estimate:
    """Binned cross-correlation over a sum-coordinate region.

    ``ports="summed"`` adds all port pairs. ``"correlated"`` uses only the
    (+,+) and (-,-) coincidences against the matching singles products; this
    is the quantity for which ``V = (g2 - 1)/(g2 + 1)`` holds.
    """
    g = cmap.groups[key] if isinstance(key, tuple) else cmap.group(key)
    if ports == "summed":
        pp = ((0, 0), (0, 1), (1, 0), (1, 1))
    elif ports == "correlated":
        pp = ((0, 0), (1, 1))
    else:
        raise ValueError(f"unknown port selection {ports!r}")
    coinc = sum(g.coinc[a, b] for a, b in pp)
    acc = accidental_map(g, cmap.window, pp)
    mask = np.ones(coinc.shape, bool) if region is None else np.asarray(region, bool)
    n_wr = float(coinc[mask].sum())
    denom = float(acc[mask].sum())
    if denom <= 0 or g.shots <= 0:
        return MISSING
    g2 = g.shots * n_wr / denom
    # singles in the region are far more numerous than coincidences
    n_single = float(sum(g.singles_w[a].sum() + g.singles_r[b].sum() for a, b in pp))
    se = g2 * math.sqrt(1 / max(n_wr, 1) + 2 / max(n_single, 1))
    return Estimate(g2, se)


def expected_value_map(cmap: CoincidenceMap, basis: int, t: float | None = None) -> np.ndarray:
    """``(N++ - N+- - N-+ + N--)/(sum)`` per sum pixel; NaN where no counts."""
    c = cmap.group(basis, t).coinc.astype(float)
    return expected_value_from_ports(c)


def expected_value_from_ports(c: np.ndarray) -> np.ndarray:
    num = c[0, 0] - c[0, 1] - c[1, 0] + c[1, 1]
    den = c.sum(axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def visibility_two_setting(p_plus, p_minus):
    """``(p+ - p-)/(p+ + p-)``; NaN for a zero denominator."""
    p_plus, p_minus = np.asarray(p_plus, float), np.asarray(p_minus, float)
    s = p_plus + p_minus
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(s != 0, (p_plus - p_minus) / np.where(s != 0, s, 1), np.nan)
    return float(out) if out.ndim == 0 else out


def pooled_visibility(cmap: CoincidenceMap, key, region=None) -> Estimate:
    """Correlated-minus-anticorrelated fraction pooled over a region."""
    g = cmap.groups[key] if isinstance(key, tuple) else cmap.group(key)
    mask = np.ones(g.coinc.shape[2:], bool) if region is None else np.asarray(region, bool)
    plus = float(g.coinc[0, 0][mask].sum() + g.coinc[1, 1][mask].sum())
    minus = float(g.coinc[0, 1][mask].sum() + g.coinc[1, 0][mask].sum())
    n = plus + minus
    if n == 0:
        return MISSING
    e = (plus - minus) / n
    return Estimate(e, math.sqrt(max(1 - e * e, 1.0 / n) / n))


def interior_region(geom: DetectorGeometry, margin_px: int = 2) -> np.ndarray:
    """Sum-pixel mask excluding a margin (in camera pixels) at every edge."""
    ys, xs = geom.sum_shape
    m = 2 * margin_px
    mask = np.zeros((ys, xs), bool)
    mask[m : ys - m, m : xs - m] = True
    return mask


# --- smoothing and fringe geometry --------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at +-4 sigma and renormalised."""
    if sigma <= 0:
        return np.ones(1)
    r = int(math.ceil(4 * sigma))
    j = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (j / sigma) ** 2)
    return k / k.sum()


def kernel_transfer(kernel: np.ndarray, f: float) -> float:
    """Response of a symmetric kernel to a cosine of ``f`` cycles per pixel."""
    r = len(kernel) // 2
    return float(np.sum(kernel * np.cos(2 * math.pi * f * np.arange(-r, r + 1))))


def smooth(a: np.ndarray, sigma_y: float, sigma_x: float) -> np.ndarray:
    """Separable smoothing of ``[..., y, x]`` maps with reflect padding."""
    out = correlate1d(np.asarray(a, float), gaussian_kernel(sigma_y), axis=-2, mode="reflect")
    return correlate1d(out, gaussian_kernel(sigma_x), axis=-1, mode="reflect")


def fringe_gradient(profile: PhaseProfile, geom: DetectorGeometry) -> tuple[float, float]:
    """Phase advance per sum pixel along (x_s, y_s) for a linear profile."""
    gx, gy = profile.gradient
    return gx * 0.5 * geom.pixel_pitch, gy * 0.5 * geom.pixel_pitch


def pixel_mtf(profile: PhaseProfile, geom: DetectorGeometry) -> float:
    """Fringe contrast left after averaging the phase over both photons' pixels."""
    h = 0.5 * geom.pixel_pitch
    out = 1.0
    for a in (*profile.a_w, *profile.a_r):
        out *= float(np.sinc(a * h / math.pi))
    return out


# --- Bell parameter map -------------------------------------------------------------


@dataclass(frozen=True)
class SinusoidFit:
    """``A cos(theta) + B sin(theta) + c`` with ``theta = gx x_s + gy y_s``."""

    coef: np.ndarray  # (A, B, c)
    cov: np.ndarray
    gradient: tuple[float, float]
    residual: float

    @property
    def amplitude(self) -> float:
        return float(math.hypot(self.coef[0], self.coef[1]))

    def evaluate(self, shape) -> np.ndarray:
        sy, sx = np.indices(shape)
        th = self.gradient[0] * sx + self.gradient[1] * sy
        return self.coef[0] * np.cos(th) + self.coef[1] * np.sin(th) + self.coef[2]


def _design(shape, gradient):
    sy, sx = np.indices(shape)
    th = (gradient[0] * sx + gradient[1] * sy).ravel()
    return np.stack([np.cos(th), np.sin(th), np.ones_like(th)], axis=1)


def fit_sinusoid_2d(E: np.ndarray, n: np.ndarray, gradient) -> SinusoidFit:
    """Count-weighted linear fit of an expected-value map at a fixed gradient."""
    X = _design(E.shape, gradient)
    e, w = E.ravel(), np.asarray(n, float).ravel()
    ok = (w > 0) & np.isfinite(e)
    if ok.sum() < 3:
        raise FitError("fewer than three populated pixels for the sinusoid fit")
    X, e, w = X[ok], e[ok], w[ok]
    coef, *_ = np.linalg.lstsq(X * np.sqrt(w)[:, None], e * np.sqrt(w), rcond=None)
    pred = X @ coef
    # binomial variance (1 - E^2)/n per pixel
    iw = w / np.clip(1 - pred**2, 1e-3, None)
    cov = np.linalg.pinv((X * iw[:, None]).T @ X)
    return SinusoidFit(coef, cov, tuple(gradient), float(np.sum(w * (e - pred) ** 2)))


def _refine_scale(objective, bounds=(0.9, 1.1)) -> float:
    res = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": 1e-7})
    return float(res.x)


@dataclass(frozen=True)
class BellResult:
    s_map: np.ndarray
    trace: np.ndarray  # x_s-averaged Bell parameter along y_s
    amplitude: float
    stderr: float
    fits: tuple[SinusoidFit, ...]
    mtf: float

    @property
    def violation_sigmas(self) -> float:
        return (self.amplitude - 2) / self.stderr if self.stderr > 0 else math.inf


def bell_map(E_maps, counts, gradient, mtf: float = 1.0, refine: bool = True) -> BellResult:
    """Bell parameter from four expected-value maps in CHSH order.

    Order is (r1 w1, r1 w2, r2 w1, r2 w2), combined with signs (+, +, +, -).
    Each map is fitted with a sinusoid at a shared gradient; the reported
    amplitude is that of the combined sinusoid divided by ``mtf``.
    """
    E_maps = [np.asarray(e, float) for e in E_maps]
    counts = [np.asarray(c, float) for c in counts]
    if len(E_maps) != 4 or len(counts) != 4:
        raise ValueError("need four expected-value maps")
    gradient = tuple(float(g) for g in gradient)
    if refine and any(gradient):

        def total_resid(scale):
            g = (gradient[0] * scale, gradient[1] * scale)
            return sum(fit_sinusoid_2d(e, c, g).residual for e, c in zip(E_maps, counts))

        s = _refine_scale(total_resid)
        gradient = (gradient[0] * s, gradient[1] * s)
    fits = tuple(fit_sinusoid_2d(e, c, gradient) for e, c in zip(E_maps, counts))
    shape = E_maps[0].shape
    s_map = sum(sg * f.evaluate(shape) for sg, f in zip(CHSH_SIGNS, fits))
    populated = sum(counts) > 0
    with np.errstate(invalid="ignore"):
        trace = np.where(populated, s_map, 0).sum(axis=1) / populated.sum(axis=1)
    sa = sum(sg * f.coef[0] for sg, f in zip(CHSH_SIGNS, fits))
    sb = sum(sg * f.coef[1] for sg, f in zip(CHSH_SIGNS, fits))
    amp = math.hypot(sa, sb)
    if amp > 0:
        ua, ub = sa / amp, sb / amp
        var = sum(ua**2 * f.cov[0, 0] + ub**2 * f.cov[1, 1] + 2 * ua * ub * f.cov[0, 1] for f in fits)
    else:
        var = sum(f.cov[0, 0] + f.cov[1, 1] for f in fits) / 2
    return BellResult(s_map / mtf, trace / mtf, amp / mtf, math.sqrt(var) / mtf, fits, mtf)


def bell_map_from_coincidences(cmap: CoincidenceMap, bases, gradient, mtf: float = 1.0, t=None, refine=True):
    groups = [cmap.group(b, t) for b in bases]
    E = [expected_value_from_ports(g.coinc.astype(float)) for g in groups]
    return bell_map(E, [g.total for g in groups], gradient, mtf, refine)


# --- visibility maps ----------------------------------------------------------------


@dataclass
class VisibilityMap:
    """Segment-fit visibility on the sum grid, indexed ``[y_s, x_s]``.

    ``counts`` and ``windows`` describe how each value was formed and feed
    the forward model of :func:`fit_decoherence`; maps built from a model
    without them are fitted pointwise.
    """

    t: float
    v: np.ndarray
    se: np.ndarray
    residual: np.ndarray | None = None
    frequency: float = math.nan
    counts: np.ndarray | None = None
    windows: np.ndarray | None = None  # (Ys, 2) segment [lo, hi) per centre row
    sigma_x: float = 0.0

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.v) & np.isfinite(self.se) & (self.se > 0)

    @property
    def flags(self) -> np.ndarray:
        """Points numerically outside the physical range [0, 1]."""
        with np.errstate(invalid="ignore"):
            return self.mask & ((self.v < 0) | (self.v > 1))

    def values(self) -> np.ndarray:
        return self.v[self.mask]


def segment_windows(n: int, length: int, min_length: int | None = None, first: int = 0, stop: int | None = None) -> np.ndarray:
    """[lo, hi) per centre index inside rows [first, stop); others get (0, 0)."""
    min_length = length if min_length is None else min_length
    stop = n if stop is None else stop
    c = np.arange(n)
    lo = np.clip(c - length // 2, first, stop)
    hi = np.clip(c - length // 2 + length, first, stop)
    bad = ((hi - lo) < min_length) | (c < first) | (c >= stop)
    lo[bad] = hi[bad] = 0
    return np.stack([lo, hi], axis=1)


def visibility_map(
    cmap: CoincidenceMap,
    key,
    gradient,
    mtf: float = 1.0,
    segment: int = 50,
    min_segment: int | None = None,
    sigma_y: float = 1.0,
    sigma_x: float = 10.0,
    min_counts: float = 20.0,
    refine: bool = True,
    margins=(0, 0, 0, 0),
) -> VisibilityMap:
    """Visibility from sliding segment fits along y_s of a linear-phase run.

    Each port-pair map is smoothed, fitted segment by segment with
    ``A cos + B sin + c`` at a shared fringe frequency, and turned into
    ``hypot(A, B)/c``. The four port values are averaged and divided by the
    smoothing transfer and ``mtf``. Standard errors propagate Poisson
    variance of the raw counts through smoothing and fit.

    ``margins = (bottom, top, left, right)`` in sum pixels keeps segment
    windows and reported points away from the grid edges, where lost
    partners and a clipped accidental window raise the local visibility.
    """
    g = cmap.groups[key] if isinstance(key, tuple) else cmap.group(key)
    t = key[1] if isinstance(key, tuple) else cmap.keys(key)[0][1]
    raw = g.coinc.reshape(4, *g.coinc.shape[2:]).astype(float)
    ky, kx = gaussian_kernel(sigma_y), gaussian_kernel(sigma_x)
    data = smooth(raw, sigma_y, sigma_x)
    ys, xs = raw.shape[1:]
    gx, gy = (float(v) for v in gradient)
    if gy == 0:
        raise ValueError("visibility maps need a phase gradient along y_s")
    mb, mt, ml, mr = (int(m) for m in margins)
    windows = segment_windows(ys, segment, min_segment, mb, ys - mt)
    col_ok = np.zeros(xs, bool)
    col_ok[ml : xs - mr] = True
    f0 = gy / (2 * math.pi)

    def fit_all(f):
        out = []
        for c in range(ys):
            lo, hi = windows[c]
            if hi <= lo:
                out.append(None)
                continue
            th = 2 * math.pi * f * np.arange(lo, hi)
            X = np.stack([np.cos(th), np.sin(th), np.ones_like(th)], axis=1)
            P = np.linalg.pinv(X)  # (3, len)
            d = data[:, lo:hi, :]  # (4, len, xs)
            coef = np.einsum("kl,plx->kpx", P, d)
            resid = d - np.einsum("lk,kpx->plx", X, coef)
            out.append((lo, hi, P, coef, np.sum(resid**2, axis=1)))
        return out

    f = f0
    if refine:
        f = f0 * _refine_scale(lambda s: sum(float(o[4].sum()) for o in fit_all(f0 * s) if o is not None))
    fits = fit_all(f)
    corr = kernel_transfer(ky, f) * kernel_transfer(kx, gx / (2 * math.pi)) * mtf

    v = np.full((ys, xs), np.nan)
    se = np.full((ys, xs), np.nan)
    res = np.full((ys, xs), np.nan)
    kx2 = kx**2
    r = len(ky) // 2
    for c, o in enumerate(fits):
        if o is None:
            continue
        lo, hi, P, coef, rs = o
        A, B, C0 = coef
        amp = np.hypot(A, B)
        with np.errstate(invalid="ignore", divide="ignore"):
            vp = amp / C0
            ua, ub = np.where(amp > 0, A / amp, 0), np.where(amp > 0, B / amp, 0)
        # transpose of the y smoothing applied to each fit functional
        Hm = np.zeros((3, hi - lo + 2 * r))
        for k in range(3):
            Hm[k] = np.convolve(P[k], ky[::-1], mode="full")
        ylo, yhi = lo - r, hi + r
        a, b = max(ylo, 0), min(yhi, ys)
        Hm = Hm[:, a - ylo : Hm.shape[1] - (yhi - b)]
        seg_raw = raw[:, a:b, :]
        Q = np.einsum("il,jl,plx->ijpx", Hm, Hm, seg_raw)
        Q = correlate1d(Q, kx2, axis=-1, mode="reflect")
        L = np.stack([ua, ub, -vp]) / C0  # gradient of V_p w.r.t. (A, B, c)
        var_p = np.einsum("ipx,jpx,ijpx->px", L, L, Q)
        good = (C0 > 0).all(axis=0) & (data[:, lo:hi, :].sum(axis=(0, 1)) >= min_counts) & col_ok
        v[c] = np.where(good, vp.mean(axis=0) / corr, np.nan)
        se[c] = np.where(good, np.sqrt(np.clip(var_p.sum(axis=0), 0, None)) / 4 / abs(corr), np.nan)
        res[c] = np.where(good, np.sqrt(rs.sum(axis=0)), np.nan)
    return VisibilityMap(float(t), v, se, res, f, g.total.astype(float), windows, sigma_x)


def visibility_map_constant(cmap: CoincidenceMap, key, phase: float, min_counts: float = 1.0) -> VisibilityMap:
    """Per-pixel visibility for a flat phase: ``E / cos(phase)`` with binomial errors.

    ``phase`` is the total phase ``phi0 + xi_w + xi_r`` of the setting.
    """
    g = cmap.groups[key]
    c = np.cos(phase)
    if abs(c) < 1e-3:
        raise ValueError("setting leaves no fringe contrast (cos(phase) ~ 0)")
    n = g.total.astype(float)
    E = expected_value_from_ports(g.coinc.astype(float))
    ok = n >= max(min_counts, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(ok, E / c, np.nan)
        se = np.where(ok, np.sqrt(np.maximum(1 - E**2, 1 / np.maximum(n, 1)) / np.maximum(n, 1)) / abs(c), np.nan)
    return VisibilityMap(float(key[1]), v, se)


def model_visibility_map(t, geom: DetectorGeometry, v0, w, gamma, tau_mode="survival", se: float = 1.0) -> VisibilityMap:
    """Noise-free map straight from the storage model (no segment forward model)."""
    from .analytic import model_map

    v = model_map(t, geom, v0, w, gamma, tau_mode)
    return VisibilityMap(float(t), v, np.full_like(v, se))


# --- decoherence fits ---------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    params: np.ndarray
    stderr: np.ndarray
    cov: np.ndarray
    residual_sum: float
    dof: int
    nfev: int
    message: str

    def __getitem__(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def error(self, name: str) -> float:
        return float(self.stderr[self.names.index(name)])

    @property
    def temperature(self) -> tuple[float, float]:
        """Temperature and its error from a fitted ``gamma``."""
        g, dg = self["gamma"], self.error("gamma")
        T = float(temperature_from_gamma(g))
        return T, 2 * T * dg / g


def _sum_grid_moduli(geom: DetectorGeometry):
    ys, xs = geom.sum_shape
    x, y = geom.sum_pixel_center(np.arange(xs), np.arange(ys))
    X, Y = np.meshgrid(x, y)
    kh, kv = branch_moduli_xy(X, Y, geom.y_max)
    return X, Y, kh, kv


class _ForwardOperator:
    """Count-weighted average over each point's segment window and x smoothing."""

    def __init__(self, vmap: VisibilityMap):
        self.counts = vmap.counts
        self.lo, self.hi = vmap.windows[:, 0], vmap.windows[:, 1]
        self.kx = gaussian_kernel(vmap.sigma_x)
        self.den = self._raw(np.ones_like(self.counts))

    def _raw(self, f):
        cs = np.concatenate([np.zeros((1,) + f.shape[1:]), np.cumsum(self.counts * f, axis=0)])
        seg = cs[self.hi] - cs[self.lo]
        return correlate1d(seg, self.kx, axis=-1, mode="reflect")

    def __call__(self, f):
        with np.errstate(invalid="ignore", divide="ignore"):
            return self._raw(f) / self.den


class _ResidualCorrelation:
    """Correlation of the whitened residuals of one map, applied to columns.

    A map point averages raw per-pixel estimates, each with variance
    ``1/counts``, over its segment window and the x kernel, so nearby
    points share data. With ``A`` that average and ``D`` the raw variances
    the map covariance is ``A D A^T``; it is returned normalised to a unit
    diagonal and restricted to the fitted points.
    """

    def __init__(self, vmap: VisibilityMap, mask: np.ndarray):
        c = np.where(np.isfinite(vmap.counts), vmap.counts, 0.0)
        ys, xs = c.shape
        self.mask = mask
        self.c = c
        self.seg = np.zeros((ys, ys))
        for i, (lo, hi) in enumerate(vmap.windows):
            self.seg[i, lo:hi] = 1.0
        self.kx = correlate1d(np.eye(xs), gaussian_kernel(vmap.sigma_x), axis=0, mode="reflect")
        self.den = self.seg @ c @ self.kx.T
        var = self.seg @ c @ (self.kx**2).T
        with np.errstate(invalid="ignore", divide="ignore"):
            self.norm = np.sqrt(var) / self.den  # point standard deviation up to a constant

    def __call__(self, cols: np.ndarray) -> np.ndarray:
        out = np.empty_like(cols)
        for k in range(cols.shape[1]):
            z = np.zeros(self.mask.shape)
            z[self.mask] = cols[:, k] / (self.norm[self.mask] * self.den[self.mask])
            back = self.seg.T @ z @ self.kx  # D A^T z; D = 1/counts cancels the counts in A^T
            fwd = (self.seg @ (self.c * back) @ self.kx.T)[self.mask]
            out[:, k] = fwd / (self.den[self.mask] * self.norm[self.mask])
        return out


def _correlation(vmaps, masks):
    """Block-diagonal residual correlation over maps, or None when no map carries windows."""
    blocks = [
        _ResidualCorrelation(vm, m) if vm.counts is not None and vm.windows is not None else None
        for vm, m in zip(vmaps, masks)
    ]
    if all(b is None for b in blocks):
        return None
    sizes = [int(m.sum()) for m in masks]

    def apply(J):
        parts, i = [], 0
        for b, n in zip(blocks, sizes):
            parts.append(J[i : i + n] if b is None else b(J[i : i + n]))
            i += n
        return np.concatenate(parts)

    return apply


def _collect(vmaps, stride):
    pts = []
    for i, vm in enumerate(vmaps):
        m = vm.mask.copy()
        if stride != (1, 1):
            keep = np.zeros_like(m)
            keep[:: stride[1], :: stride[0]] = True
            m &= keep
        pts.append(m)
    return pts


def _solve(fun, jac, x0, names, n_points, scale, max_nfev, bounds=None, corr=None):
    # Levenberg-Marquardt unless bounds are needed, then a trust-region reflective solve
    kw = {"method": "lm"} if bounds is None else {"method": "trf", "bounds": bounds, "x_scale": "jac"}
    try:
        res = least_squares(fun, x0, jac=jac, xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev, **kw)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitError(f"least squares failed: {exc}", {"x0": x0}) from exc
    diag = {"status": res.status, "message": res.message, "nfev": res.nfev, "x": res.x * scale, "cost": res.cost}
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitError(f"fit did not converge: {res.message}", diag)
    J = res.jac
    dof = n_points - len(x0)
    if dof <= 0:
        raise FitError("not enough points for the number of parameters", diag)
    s2 = 2 * res.cost / dof
    try:
        bread = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise FitError("singular Jacobian at the optimum", diag) from exc
    # correlated residuals: sandwich with their correlation matrix
    cov = s2 * (bread if corr is None else bread @ (J.T @ corr(J)) @ bread)
    if np.any(np.diag(cov) < 0):
        raise FitError("negative variance at the optimum", diag)
    cov = cov * np.outer(scale, scale)
    return FitResult(tuple(names), res.x * scale, np.sqrt(np.diag(cov)), cov, float(2 * res.cost), dof, res.nfev, res.message)


def fit_decoherence(
    vmaps,
    geom: DetectorGeometry,
    p0=(0.9, 0.1, 6.0e3),
    tau_mode: str = "survival",
    imbalance: bool = True,
    forward: bool = True,
    stride=(1, 1),
    max_nfev: int = 200,
) -> FitResult:
    """Weighted fit of (V0, W, gamma) shared over all maps and storage times.

    Residuals are ``(V_meas - V_pred)/se``. When a map carries its counts
    and segment windows, the prediction passes through the same
    count-weighted segment and x-smoothing average as the measurement.
    The covariance is scaled by the reduced chi-square. Neighbouring map
    points share data through the segment windows and x smoothing; maps
    that carry their counts and windows get a sandwich covariance with that
    correlation, and ``stride`` can thin the points as well.
    Raises :class:`FitError` on non-convergence.
    """
    vmaps = list(vmaps)
    if len({vm.t for vm in vmaps}) < 3:
        raise ValueError("need at least three storage times")
    fun, jac, n = decoherence_problem(vmaps, geom, tau_mode, imbalance, forward, stride)
    scale = np.array([1.0, 1.0, 1e3])
    return _solve(
        lambda x: fun(x * scale),
        lambda x: jac(x * scale) * scale,
        np.asarray(p0, float) / scale,
        ("v0", "w", "gamma"),
        n,
        scale,
        max_nfev,
        corr=_correlation(vmaps, _collect(vmaps, tuple(stride))),
    )


def decoherence_problem(vmaps, geom: DetectorGeometry, tau_mode="survival", imbalance=True, forward=True, stride=(1, 1)):
    """Weighted residuals and their Jacobian in (V0, W, gamma), plus the point count."""
    vmaps = list(vmaps)
    _, _, kh, kv = _sum_grid_moduli(geom)
    if any(vm.v.shape != kh.shape for vm in vmaps):
        raise ValueError("visibility maps do not match the geometry")
    masks = _collect(vmaps, tuple(stride))
    ops = [_ForwardOperator(vm) if forward and vm.counts is not None else None for vm in vmaps]

    def model(p):
        v0, w, g = p
        out, jac = [], []
        for vm, m, op in zip(vmaps, masks, ops):
            val, d = storage_visibility_jac(vm.t, kh, kv, v0, w, g, tau_mode, imbalance)
            if op is not None:
                val = op(val)
                d = np.stack([op(d[..., k]) for k in range(3)], axis=-1)
            out.append((vm.v[m] - val[m]) / vm.se[m])
            jac.append(-d[m] / vm.se[m][:, None])
        return np.concatenate(out), np.concatenate(jac)

    n = int(sum(m.sum() for m in masks))
    return (lambda p: model(p)[0]), (lambda p: model(p)[1]), n


@dataclass(frozen=True)
class TauResult:
    k: np.ndarray  # mean |k| per used bin
    tau: np.ndarray
    tau_se: np.ndarray
    gamma: float
    gamma_se: float
    temperature: float
    joint: FitResult
    excluded: tuple[int, ...]

    @property
    def v0(self) -> float:
        return self.joint["v0"]

    @property
    def w(self) -> float:
        return self.joint["w"]


def tau_vs_k(
    vmaps,
    geom: DetectorGeometry,
    band: float = 6.0,
    n_bins: int = 5,
    p0=(0.9, 0.1, 6.0e3),
    forward: bool = True,
    max_nfev: int = 400,
) -> TauResult:
    """Per-|k| lifetimes from points near the balanced line ``y_s = y_max/2``.

    Points with ``y_s >= y_max/2 - band`` are binned by ``|k|``. A joint fit
    shares (V0, W) and gives every bin its own lifetime, written as
    ``gamma_b / |k_b|`` so the branch survival and imbalance keep their
    shape. ``tau = gamma/|k|`` is then fitted to the bin lifetimes.
    Bins seen at fewer than three storage times are excluded.
    """
    vmaps = list(vmaps)
    X, Y, kh, kv = _sum_grid_moduli(geom)
    kmod = np.hypot(X, Y)
    in_band = Y >= 0.5 * geom.y_max - band
    # every pixel takes the bin of its column on the balanced line, so a
    # segment window running along y_s stays inside one bin
    k_line = np.hypot(X, 0.5 * geom.y_max)
    masks = [vm.mask & in_band for vm in vmaps]
    usable = np.logical_or.reduce(masks)
    if not usable.any():
        raise FitError("no unmasked points in the balanced band", {"band": band})
    kb = k_line[usable]
    edges = np.linspace(kb.min(), kb.max(), n_bins + 1)
    pix_bin = np.clip(np.searchsorted(edges, k_line, side="right") - 1, 0, n_bins - 1)
    used, excluded = [], []
    for b in range(n_bins):
        n_t = len({vm.t for vm, m in zip(vmaps, masks) if np.any(m & (pix_bin == b))})
        (used if n_t >= 3 else excluded).append(b)
    if len(used) < 2:
        raise FitError(f"only {len(used)} |k| bins have three or more storage times", {"excluded": excluded})
    # pixels of excluded bins borrow the nearest used bin
    remap = np.array([used[int(np.argmin([abs(u - b) for u in used]))] for b in range(n_bins)])
    slot = np.searchsorted(used, remap[pix_bin])
    masks = [m & np.isin(pix_bin, used) for m in masks]
    ops = [_ForwardOperator(vm) if forward and vm.counts is not None else None for vm in vmaps]
    nb = len(used)
    scale = np.r_[1.0, 1.0, np.full(nb, 1e3)]

    def model(x):
        v0, w = x[:2]
        gam = x[2:][slot] * 1e3
        out, jac = [], []
        for vm, m, op in zip(vmaps, masks, ops):
            val, d = storage_visibility_jac(vm.t, kh, kv, v0, w, gam, "survival", True)
            cols = [d[..., 0], d[..., 1]] + [np.where(slot == j, d[..., 2] * 1e3, 0.0) for j in range(nb)]
            if op is not None:
                val = op(val)
                cols = [op(c) for c in cols]
            out.append((vm.v[m] - val[m]) / vm.se[m])
            jac.append(-np.stack([c[m] for c in cols], axis=1) / vm.se[m][:, None])
        return np.concatenate(out), np.concatenate(jac)

    x0 = np.r_[p0[0], p0[1], np.full(nb, p0[2] / 1e3)]
    n = int(sum(m.sum() for m in masks))
    names = ("v0", "w") + tuple(f"gamma_{b}" for b in used)
    # bounded lifetimes keep a bin from drifting onto the flat no-decay plateau
    lower = np.r_[0.0, 0.0, np.full(nb, 0.1)]
    upper = np.r_[2.0, 10.0, np.full(nb, 100.0)]
    joint = _solve(lambda x: model(x)[0], lambda x: model(x)[1], x0, names, n, np.ones_like(scale), max_nfev, (lower, upper), _correlation(vmaps, masks))
    joint = FitResult(joint.names, joint.params * scale, joint.stderr * scale, joint.cov * np.outer(scale, scale), joint.residual_sum, joint.dof, joint.nfev, joint.message)

    kbar = np.array([kmod[usable & (pix_bin == b)].mean() for b in used])
    gam, gam_se = joint.params[2:], joint.stderr[2:]
    tau, tau_se = gam / kbar, gam_se / kbar
    # tau = gamma / |k| is linear in gamma: weighted least squares through the origin
    wts = 1 / tau_se**2
    u = 1 / kbar
    gamma = float(np.sum(wts * u * tau) / np.sum(wts * u * u))
    chi2 = float(np.sum(wts * (tau - gamma * u) ** 2))
    gamma_se = float(math.sqrt(max(1.0, chi2 / max(nb - 1, 1)) / np.sum(wts * u * u)))
    return TauResult(kbar, tau, tau_se, gamma, gamma_se, float(temperature_from_gamma(gamma)), joint, tuple(excluded))


# --- mode summaries -----------------------------------------------------------------


@dataclass(frozen=True)
class ModeSummary:
    fraction: Estimate
    mean_violating: Estimate
    mean_all: Estimate
    n_modes: int


def _summary_stats(v: np.ndarray):
    viol = v > CHSH_THRESHOLD
    frac = viol.mean(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mv = np.where(viol.any(axis=-1), (v * viol).sum(axis=-1) / viol.sum(axis=-1), np.nan)
    return frac, mv, v.mean(axis=-1)


def mode_summary(vmap, n_boot: int = 200, seed: int = 0) -> ModeSummary | None:
    """Fraction of points above ``1/sqrt(2)`` and mean visibilities, with bootstrap errors.

    Accepts a :class:`VisibilityMap` or an array (NaN is masked). Returns
    ``None`` for a fully masked map.
    """
    v = vmap.values() if isinstance(vmap, VisibilityMap) else np.asarray(vmap, float)
    v = v[np.isfinite(v)].ravel()
    if v.size == 0:
        return None
    point = _summary_stats(v)
    if n_boot > 1:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        boot = v[rng.integers(0, v.size, size=(n_boot, v.size))]
        errs = [float(np.nanstd(s, ddof=1)) if np.isfinite(s).sum() > 1 else math.nan for s in _summary_stats(boot)]
    else:
        errs = [math.nan] * 3
    return ModeSummary(*(Estimate(float(p), e) for p, e in zip(point, errs)), v.size)

"""Closed-form model of the multiplexed Bell-state source.

Everything here is a pure function of immutable parameter records. The
simulator is validated against these formulas and the analysis fits use
them as models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf
from scipy.stats import norm

from .core import CorrelationKernel, DetectorGeometry, MeasurementSetting, Wavevector, branch_moduli_xy

SQRT2 = math.sqrt(2.0)
CHSH_THRESHOLD = 1.0 / SQRT2
TAU_MODES = ("survival", "mean", "min", "max", "H")


@dataclass(frozen=True)
class SourceParams:
    """Pair source and retrieval efficiencies.

    ``chi`` is the pair probability per single-polarization mode; each
    observed (folded) mode pair superimposes two of them. ``eta_det_r`` is
    the read-arm filtering/detection efficiency, which scales signal and
    read-out noise alike and therefore never enters the visibility.
    """

    chi: float = 0.01
    M: int = 550
    eta_w: float = 0.08
    eta_r0: float = 0.405
    alpha: float = 0.565
    eta_det_r: float = 1.0

    def __post_init__(self):
        if not 0 <= self.chi <= 0.2:
            raise ValueError("chi must lie in [0, 0.2]")
        for name in ("eta_w", "eta_r0", "eta_det_r"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class NoiseModel:
    """Per-mode noise probabilities before detection.

    ``b_r_chi_mode`` selects how ``b_r_chi`` is read: ``"coefficient"``
    multiplies it by chi, ``"absolute"`` takes it as the chi-dependent noise
    at the operating point.
    """

    b_w: float = 0.0
    b_r0: float = 0.0
    b_r_inf: float = 0.0
    b_r_chi: float = 0.0
    tau_b: float = 13.0
    b_r_chi_mode: str = "coefficient"

    def __post_init__(self):
        for name in ("b_w", "b_r0", "b_r_inf", "b_r_chi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.tau_b <= 0:
            raise ValueError("tau_b must be positive")
        if self.b_r_inf < self.b_r0:
            raise ValueError("b_r_inf < b_r0 would make the read-out noise decrease in time")
        if self.b_r_chi_mode not in ("coefficient", "absolute"):
            raise ValueError(f"unknown b_r_chi_mode {self.b_r_chi_mode!r}")

    def chi_term(self, chi: float) -> float:
        return self.b_r_chi * chi if self.b_r_chi_mode == "coefficient" else self.b_r_chi


# Calibration T = c / gamma^2 anchored at gamma = 6.26e3 us rad/mm <-> 47 uK.
TEMP_CAL = 47.0 * 6.26e3**2


@dataclass(frozen=True)
class DecoherenceParams:
    gamma: float = 6.26e3
    temp_cal: float = TEMP_CAL

    def __post_init__(self):
        if self.gamma <= 0 or self.temp_cal <= 0:
            raise ValueError("gamma and temp_cal must be positive")


@dataclass(frozen=True)
class WernerState:
    visibility: float
    phase: float = 0.0

    def __post_init__(self):
        if not 0 <= self.visibility <= 1:
            raise ValueError("visibility must lie in [0, 1]")


# --- dense two-qubit helpers (internal oracle) ------------------------------
#
# Basis order is (V, H) on each qubit, qubit order (read, write). With this
# ordering Tr[(Pi_w x Pi_r) rho] = V cos(phi + xi_w + xi_r).

_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_I2 = np.eye(2, dtype=complex)


def analyzer(xi: float) -> np.ndarray:
    return _SX * math.cos(xi) + _SY * math.sin(xi)


def bell_vector(phi: float) -> np.ndarray:
    # |H>_r|H>_w + e^{i phi}|V>_r|V>_w with V = index 0, H = index 1
    v = np.zeros(4, dtype=complex)
    v[3] = 1.0
    v[0] = np.exp(1j * phi)
    return v / SQRT2


def werner_matrix(state: WernerState) -> np.ndarray:
    psi = bell_vector(state.phase)
    return (1 - state.visibility) / 4 * np.eye(4) + state.visibility * np.outer(psi, psi.conj())


def dense_expectation(state: WernerState, setting: MeasurementSetting) -> float:
    op = np.kron(analyzer(setting.xi_r), analyzer(setting.xi_w))
    return float(np.real(np.trace(op @ werner_matrix(state))))


def dense_outcome_probs(state: WernerState, setting: MeasurementSetting) -> dict[tuple[int, int], float]:
    """Diagonal of the Werner matrix in the analyzers' eigenbases."""
    rho = werner_matrix(state)
    _, ur = np.linalg.eigh(analyzer(setting.xi_r))
    _, uw = np.linalg.eigh(analyzer(setting.xi_w))
    u = np.kron(ur, uw)  # eigh sorts eigenvalues ascending: column 0 is -1, column 1 is +1
    diag = np.real(np.diag(u.conj().T @ rho @ u))
    sign = (-1, 1)
    return {(sign[j], sign[i]): float(diag[2 * i + j]) for i in range(2) for j in range(2)}


def dense_concurrence(rho: np.ndarray) -> float:
    yy = np.kron(_SY, _SY)
    r = rho @ yy @ rho.conj() @ yy
    lam = np.sqrt(np.clip(np.sort(np.real(np.linalg.eigvals(r)))[::-1], 0, None))
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def dense_negativity(rho: np.ndarray) -> float:
    pt = rho.reshape(2, 2, 2, 2).transpose(0, 3, 2, 1).reshape(4, 4)
    ev = np.linalg.eigvalsh(pt)
    return float(-ev[ev < 0].sum())


# --- Bell measurement -------------------------------------------------------


def bell_expectation(state: WernerState, setting: MeasurementSetting) -> float:
    return state.visibility * math.cos(state.phase + setting.xi_r + setting.xi_w)


def joint_outcome_probs(state: WernerState, setting: MeasurementSetting) -> dict[tuple[int, int], float]:
    """P(s_w, s_r) for the four port pairs, keyed by ``(s_w, s_r)``."""
    e = bell_expectation(state, setting)
    return {(sw, sr): 0.25 * (1 + sw * sr * e) for sw in (1, -1) for sr in (1, -1)}


def bell_parameter(E) -> float:
    """CHSH combination; ``E[i][j]`` pairs read basis i with write basis j."""
    E = np.asarray(E, dtype=float)
    if E.shape != (2, 2):
        raise ValueError("E must be a 2x2 matrix")
    if np.any(np.abs(E) > 1 + 1e-12):
        raise ValueError("expectation values must lie in [-1, 1]")
    return float(E[0, 0] + E[0, 1] + E[1, 0] - E[1, 1])


def optimal_bases(phi: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Write and read analyzer angles maximising S for phase ``phi``.

    Returns ``((xi_w1, xi_w2), (xi_r1, xi_r2))``.
    """
    return (-phi, 0.5 * math.pi - phi), (-0.25 * math.pi, 0.25 * math.pi)


def chsh_settings(phi: float) -> list[MeasurementSetting]:
    """The four settings in CHSH order (r1w1, r1w2, r2w1, r2w2)."""
    (w1, w2), (r1, r2) = optimal_bases(phi)
    return [MeasurementSetting(w, r) for r in (r1, r2) for w in (w1, w2)]


def chsh_value(state: WernerState, bases_w, bases_r) -> float:
    E = [[bell_expectation(state, MeasurementSetting(w, r)) for w in bases_w] for r in bases_r]
    return bell_parameter(E)


# --- visibility -------------------------------------------------------------


def visibility_from_g2(g2):
    g2 = np.asarray(g2, dtype=float)
    if np.any(g2 < 1):
        raise ValueError("g2 < 1 (anti-correlated input) is outside the model")
    out = (g2 - 1) / (g2 + 1)
    return float(out) if out.ndim == 0 else out


def g2_from_visibility(v):
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or np.any(v >= 1):
        raise ValueError("visibility must lie in [0, 1)")
    out = (1 + v) / (1 - v)
    return float(out) if out.ndim == 0 else out


def binning_factor(n_sigma: float, alpha: float = 0.565) -> float:
    """Coincidence-window penalty ``erf(n/sqrt2)^2 / (alpha n^2)``.

    Tends to its supremum ``2/(alpha pi)`` as the window shrinks.
    """
    if n_sigma <= 0:
        raise ValueError("n_sigma must be positive")
    return float(erf(n_sigma / SQRT2) ** 2 / (alpha * n_sigma**2))


def _pixel_capture(sigma_px: float, m: int) -> float:
    # P(|floor(u + g)| <= m), u ~ U[0,1), g ~ N(0, sigma_px^2)
    def cdf(z):
        a, b = z / sigma_px, (z - 1) / sigma_px
        anti = lambda x: x * norm.cdf(x) + norm.pdf(x)  # noqa: E731
        return sigma_px * (anti(a) - anti(b))

    return float(cdf(m + 1) - cdf(-m))


def window_halfwidth_px(n_sigma: float, sigma: float, pitch: float) -> int:
    """Largest pixel offset m with m * pitch <= n_sigma * sigma."""
    return int(math.floor(n_sigma * sigma / pitch + 1e-9))


def binning_factor_pixelated(n_sigma: float, kernel: CorrelationKernel, pitch: float, alpha: float = 0.565) -> float:
    """Binning factor for a pixel grid with uniform sub-pixel positions.

    The window keeps pixel offsets ``|di| * pitch <= n sigma``; the captured
    fraction of true partners and the accidental window area are both
    evaluated on the grid. Tends to :func:`binning_factor` as
    ``pitch -> 0``.
    """
    mx = window_halfwidth_px(n_sigma, kernel.sigma_x, pitch)
    my = window_halfwidth_px(n_sigma, kernel.sigma_y, pitch)
    cap = _pixel_capture(kernel.sigma_x / pitch, mx) * _pixel_capture(kernel.sigma_y / pitch, my)
    area = (2 * mx + 1) * (2 * my + 1) * pitch**2
    return cap / (alpha * area / (4 * kernel.sigma_x * kernel.sigma_y))


def visibility_model(chi, b_w, b_r, eta_r, F):
    """Visibility of binned coincidences for given per-mode noise."""
    chi = np.asarray(chi, dtype=float)
    return 1.0 / (1.0 + 2 * (chi + b_w) * (1 + b_r / (chi * eta_r)) / F)


def visibility_for(src: SourceParams, noise: NoiseModel, n_sigma: float = 1.0, t: float = 0.0) -> float:
    F = binning_factor(n_sigma, src.alpha)
    return float(visibility_model(src.chi, noise.b_w, readout_noise(t, src.chi, noise), src.eta_r0, F))


def readout_noise(t, chi: float, noise: NoiseModel):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    out = noise.b_r0 + noise.chi_term(chi) + (noise.b_r_inf - noise.b_r0) * (-np.expm1(-t / noise.tau_b))
    return float(out) if out.ndim == 0 else out


def readout_noise_plateau(chi: float, noise: NoiseModel) -> float:
    return noise.b_r_inf + noise.chi_term(chi)


# --- decoherence --------------------------------------------------------------


def decoherence(t: float, k_modulus: float, dec: DecoherenceParams) -> tuple[float, float]:
    """Lifetime ``gamma/|k|`` and the retrieval ratio ``exp(-t^2/tau^2)``."""
    if t < 0 or k_modulus < 0:
        raise ValueError("t and |k| must be nonnegative")
    if k_modulus == 0:
        return math.inf, 1.0
    tau = dec.gamma / k_modulus
    return tau, math.exp(-(t / tau) ** 2)


def imbalance_visibility_xy(t, x, y, y_max, gamma):
    kh, kv = branch_moduli_xy(x, y, y_max)
    arg = np.asarray(t, dtype=float) ** 2 * (kv**2 - kh**2) / (2 * gamma**2)
    return 1.0 / np.cosh(np.clip(arg, -700, 700))


def imbalance_visibility(t: float, k_obs: Wavevector, geom: DetectorGeometry, dec: DecoherenceParams) -> float:
    return float(imbalance_visibility_xy(t, k_obs.x, k_obs.y, geom.y_max, dec.gamma))


def imbalance_visibility_from_weights(t, kh, kv, gamma):
    """Same quantity written as ``2 c_H c_V / (c_H^2 + c_V^2)``."""
    ch2 = np.exp(-((t * kh / gamma) ** 2))
    cv2 = np.exp(-((t * kv / gamma) ** 2))
    return 2 * np.sqrt(ch2 * cv2) / (ch2 + cv2)


def _inverse_survival(t, kh, kv, gamma, tau_mode):
    """1/s and d(1/s)/dgamma, where s is the retrieval ratio."""
    t2 = np.asarray(t, dtype=float) ** 2
    if tau_mode == "survival":
        ah, av = t2 * kh**2 / gamma**2, t2 * kv**2 / gamma**2
        amin = np.minimum(ah, av)
        # s = (e^-ah + e^-av)/2 factored around the slower branch
        eh, ev = np.exp(amin - ah), np.exp(amin - av)
        inv = 2 * np.exp(np.clip(amin, None, 700)) / (eh + ev)
        ds = (eh * 2 * ah + ev * 2 * av) / gamma / (eh + ev)  # (ds/dgamma)/s
        return inv, -inv * ds
    if tau_mode == "mean":
        k = 0.5 * (kh + kv)
    elif tau_mode == "min":
        k = np.minimum(kh, kv)
    elif tau_mode == "max":
        k = np.maximum(kh, kv)
    elif tau_mode == "H":
        k = kh
    else:
        raise ValueError(f"unknown tau_mode {tau_mode!r}")
    a = t2 * k**2 / gamma**2
    inv = np.exp(np.clip(a, None, 700))
    return inv, -inv * 2 * a / gamma


def storage_visibility(t, kh, kv, v0, w, gamma, tau_mode="survival", imbalance=True):
    """Total visibility for storage time ``t`` at branch moduli (kh, kv)."""
    inv, _ = _inverse_survival(t, kh, kv, gamma, tau_mode)
    v = v0 / (1 + (w / v0) * inv)
    if imbalance:
        arg = np.asarray(t, dtype=float) ** 2 * (kv**2 - kh**2) / (2 * gamma**2)
        v = v / np.cosh(np.clip(arg, -700, 700))
    return v


def storage_visibility_jac(t, kh, kv, v0, w, gamma, tau_mode="survival", imbalance=True):
    """Value and derivatives with respect to (v0, w, gamma)."""
    inv, dinv = _inverse_survival(t, kh, kv, gamma, tau_mode)
    D = 1 + (w / v0) * inv
    vt = v0 / D
    d_v0 = 1 / D + w * inv / (v0 * D**2)
    d_w = -inv / D**2
    d_g = -(w / D**2) * dinv
    if imbalance:
        u = np.asarray(t, dtype=float) ** 2 * (kv**2 - kh**2) / (2 * gamma**2)
        u = np.clip(u, -700, 700)
        sech = 1 / np.cosh(u)
        dsech = sech * np.tanh(u) * 2 * u / gamma
        d_g = d_g * sech + vt * dsech
        d_v0, d_w, vt = d_v0 * sech, d_w * sech, vt * sech
    return vt, np.stack(np.broadcast_arrays(d_v0, d_w, d_g), axis=-1)


def storage_parameters(src: SourceParams, noise: NoiseModel, t=None, n_sigma=1.0, F=None, noise_mode="exact"):
    """(V0, W) of the storage-time model for a physical parameter set.

    With ``noise_mode="exact"`` the read-out noise is taken at ``t``;
    ``"plateau"`` uses the long-time value. Write-arm noise is kept, so with
    ``b_w = 0`` this reduces to V0 = 1/(1 + 2 chi/F) and
    W = 2 F B / (eta_r0 (2 chi + F)^2).
    """
    if F is None:
        F = binning_factor(n_sigma, src.alpha)
    if noise_mode == "exact":
        b = readout_noise(0.0 if t is None else t, src.chi, noise)
    elif noise_mode == "plateau":
        b = readout_noise_plateau(src.chi, noise)
    else:
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    v0 = 1.0 / (1 + 2 * (src.chi + noise.b_w) / F)
    w = v0**2 * 2 * (src.chi + noise.b_w) * b / (src.chi * src.eta_r0 * F)
    return v0, w


def source_for_targets(v0: float, w: float, eta_r0: float = 0.405, n_sigma: float = 1.0, alpha: float = 0.565, F=None):
    """Inverse of :func:`storage_parameters` with no write noise: (chi, B)."""
    if F is None:
        F = binning_factor(n_sigma, alpha)
    chi = 0.5 * F * (1 / v0 - 1)
    b = w * eta_r0 * (2 * chi + F) ** 2 / (2 * F)
    return chi, b


def visibility_vs_time(
    t,
    k_obs: Wavevector,
    src: SourceParams,
    noise: NoiseModel,
    dec: DecoherenceParams,
    n_sigma: float,
    geom: DetectorGeometry,
    tau_mode: str = "survival",
    noise_mode: str = "exact",
    F=None,
) -> float:
    v0, w = storage_parameters(src, noise, t, n_sigma, F, noise_mode)
    kh, kv = branch_moduli_xy(k_obs.x, k_obs.y, geom.y_max)
    return float(storage_visibility(t, kh, kv, v0, w, dec.gamma, tau_mode))


def model_map(t, geom: DetectorGeometry, v0, w, gamma, tau_mode="survival", sum_grid=True):
    """Model visibility sampled on the (sum-coordinate) pixel grid."""
    if sum_grid:
        ny, nx = geom.sum_shape
        x, y = geom.sum_pixel_center(np.arange(nx), np.arange(ny))
    else:
        x, y = geom.pixel_center(np.arange(geom.width_px), np.arange(geom.height_px))
    X, Y = np.meshgrid(x, y)
    kh, kv = branch_moduli_xy(X, Y, geom.y_max)
    return storage_visibility(t, kh, kv, v0, w, gamma, tau_mode)


# --- mode counting and scalar estimates -------------------------------------


def mode_count(area: float, kernel: CorrelationKernel, alpha: float = 0.565) -> float:
    if area <= 0:
        raise ValueError("area must be positive")
    return alpha * area / (4 * kernel.sigma_x * kernel.sigma_y)


def temperature_from_gamma(gamma, temp_cal: float = TEMP_CAL):
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError("gamma must be positive")
    return temp_cal / np.asarray(gamma, dtype=float) ** 2 if np.ndim(gamma) else temp_cal / gamma**2


def gamma_from_temperature(T, temp_cal: float = TEMP_CAL):
    if np.any(np.asarray(T) <= 0):
        raise ValueError("temperature must be positive")
    return np.sqrt(temp_cal / np.asarray(T, dtype=float)) if np.ndim(T) else math.sqrt(temp_cal / T)


def collision_probability(n_px: int, k_photons: int) -> float:
    """Probability that k photons on n_px pixels share at least one pixel."""
    if k_photons < 0 or n_px < 1:
        raise ValueError("need n_px >= 1 and k_photons >= 0")
    if k_photons > n_px:
        return 1.0
    i = np.arange(k_photons)
    return float(-np.expm1(np.log1p(-i / n_px).sum()))


def crosstalk_probability(src: SourceParams, sigma_px: float, n_px: int, M: int | None = None) -> float:
    M = src.M if M is None else M
    per_mode = src.chi * src.eta_r0 * src.eta_w * math.pi * (3 * sigma_px) ** 2 / n_px
    if not 0 <= per_mode <= 1:
        raise ValueError(f"per-mode cross-talk term {per_mode} outside [0, 1]")
    return float(-np.expm1((M - 1) * np.log1p(-per_mode))) if per_mode < 1 else float(M > 1)


def success_probability(eta: float, chi: float, M: int) -> float:
    p = eta * chi
    if not 0 <= p <= 1 or M < 0:
        raise ValueError("need eta*chi in [0, 1] and M >= 0")
    if p == 1:
        return 1.0 if M >= 1 else 0.0
    return float(-np.expm1(M * math.log1p(-p)))


def werner_monotones(state: WernerState, check: bool = True) -> tuple[float, float]:
    """(concurrence, negativity) of a Werner state.

    With ``check`` the linear closed forms are compared with the dense
    route (Wootters eigenvalues, partial transpose).
    """
    v = state.visibility
    c = max(0.0, (3 * v - 1) / 2)
    n = max(0.0, (3 * v - 1) / 4)
    if check:
        rho = werner_matrix(state)
        cd, nd = dense_concurrence(rho), dense_negativity(rho)
        if abs(cd - c) > 1e-9 or abs(nd - n) > 1e-9:
            raise ArithmeticError(f"closed form ({c}, {n}) disagrees with dense route ({cd}, {nd})")
    return c, n

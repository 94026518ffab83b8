"""Geometry, phase profiles and the write/read correlation kernel.

Wavevectors are always in rad/mm. Pixels are derived through
``DetectorGeometry.pixel_pitch``. Coordinates follow the correlated
convention: a write-out photon at ``k`` is most likely accompanied by a
read-out photon at the same ``k``.

Sum/difference convention: ``s = (k_w + k_r)/2`` and ``d = k_w - k_r``.
Per axis the map (k_w, k_r) -> (s, d) has unit Jacobian determinant, so
densities carry over between the two planes without rescaling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class Branch(str, enum.Enum):
    H = "H"
    V = "V"


class Arm(str, enum.Enum):
    WRITE = "w"
    READ = "r"


@dataclass(frozen=True)
class Wavevector:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite wavevector ({self.x}, {self.y})")

    @property
    def modulus(self) -> float:
        return math.hypot(self.x, self.y)

    def __add__(self, other: "Wavevector") -> "Wavevector":
        return Wavevector(self.x + other.x, self.y + other.y)


@dataclass(frozen=True)
class DetectorGeometry:
    """Folded observation region on the camera.

    ``origin`` is the wavevector of the centre of pixel (0, 0). Absolute
    offsets of the origin only translate the maps; the fold itself is fixed
    by ``y_max``.
    """

    pixel_pitch: float = 2.38
    width_px: int = 40
    height_px: int = 36
    y_max: float = 171.36
    origin: Wavevector = field(default_factory=lambda: Wavevector(-46.41, 1.19))

    def __post_init__(self):
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("detector must have at least one pixel")
        if self.y_max <= 0:
            raise ValueError("y_max must be positive")
        lo = self.origin.y - 0.5 * self.pixel_pitch
        hi = self.origin.y + (self.height_px - 0.5) * self.pixel_pitch
        eps = 1e-9 * self.y_max
        if lo < -eps or hi > 0.5 * self.y_max + eps:
            raise ValueError(
                f"folded region y in [{lo:.4g}, {hi:.4g}] exceeds [0, y_max/2={0.5 * self.y_max:.4g}]"
            )

    @property
    def n_px(self) -> int:
        return self.width_px * self.height_px

    @property
    def x_range(self) -> tuple[float, float]:
        x0 = self.origin.x - 0.5 * self.pixel_pitch
        return x0, x0 + self.width_px * self.pixel_pitch

    @property
    def y_range(self) -> tuple[float, float]:
        y0 = self.origin.y - 0.5 * self.pixel_pitch
        return y0, y0 + self.height_px * self.pixel_pitch

    @property
    def area(self) -> float:
        return self.width_px * self.height_px * self.pixel_pitch**2

    def pixel_of(self, x, y):
        """Pixel indices of continuous wavevectors; out-of-range gives -1."""
        ix = np.floor((np.asarray(x) - self.x_range[0]) / self.pixel_pitch).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.y_range[0]) / self.pixel_pitch).astype(np.int64)
        bad = (ix < 0) | (ix >= self.width_px) | (iy < 0) | (iy >= self.height_px)
        ix = np.where(bad, -1, ix)
        iy = np.where(bad, -1, iy)
        return ix, iy

    def pixel_center(self, ix, iy):
        return (
            self.origin.x + np.asarray(ix) * self.pixel_pitch,
            self.origin.y + np.asarray(iy) * self.pixel_pitch,
        )

    def sum_pixel_center(self, sx, sy):
        """Wavevector of a sum-coordinate pixel; sum index is ``i_w + i_r``."""
        return (
            self.origin.x + 0.5 * np.asarray(sx) * self.pixel_pitch,
            self.origin.y + 0.5 * np.asarray(sy) * self.pixel_pitch,
        )

    @property
    def sum_shape(self) -> tuple[int, int]:
        """(rows, cols) = (y, x) shape of sum-coordinate maps."""
        return 2 * self.height_px - 1, 2 * self.width_px - 1


@dataclass(frozen=True)
class CorrelationKernel:
    sigma_x: float = 2.65 * 2.38
    sigma_y: float = 2.65 * 2.38

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("correlation widths must be positive")


class PhaseVariant(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    GRID = "grid"


@dataclass(frozen=True)
class PhaseProfile:
    """Wavevector-dependent MZI phase.

    linear: ``a_w . k_w + a_r . k_r + phi0``.
    grid: ``pi`` or ``0`` per rectangular cell of size ``cell`` evaluated at
    ``k_w``; ``cells`` holds the 0/1 pattern (rows along y) and tiles
    periodically. Without a pattern the cells alternate like a checkerboard.
    """

    variant: PhaseVariant = PhaseVariant.CONSTANT
    a_w: tuple[float, float] = (0.0, 0.0)
    a_r: tuple[float, float] = (0.0, 0.0)
    phi0: float = 0.0
    cell: float = 10.0
    cells: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", PhaseVariant(self.variant))
        if self.variant is PhaseVariant.GRID and self.cell <= 0:
            raise ValueError("grid cell size must be positive")

    @property
    def gradient(self) -> tuple[float, float]:
        """Phase gradient in sum coordinates, ``a_w + a_r``."""
        return (self.a_w[0] + self.a_r[0], self.a_w[1] + self.a_r[1])


@dataclass(frozen=True)
class MeasurementSetting:
    xi_w: float
    xi_r: float

    def __post_init__(self):
        object.__setattr__(self, "xi_w", float(self.xi_w) % (2 * math.pi))
        object.__setattr__(self, "xi_r", float(self.xi_r) % (2 * math.pi))


@dataclass(frozen=True)
class PhotonHit:
    shot_id: int
    arm: Arm
    basis_index: int
    port: int  # +1 or -1
    ix: int
    iy: int
    storage_time: float

    def __post_init__(self):
        object.__setattr__(self, "arm", Arm(self.arm))
        if self.shot_id < 0:
            raise ValueError("shot_id must be nonnegative")
        if self.port not in (1, -1):
            raise ValueError("port must be +1 or -1")
        if self.storage_time < 0:
            raise ValueError("storage_time must be nonnegative")

    def check_bounds(self, geom: DetectorGeometry):
        if not (0 <= self.ix < geom.width_px and 0 <= self.iy < geom.height_px):
            raise ValueError(f"hit at ({self.ix}, {self.iy}) outside the pixel grid")


# --- operations -------------------------------------------------------------


def fold_coordinates(k_raw: Wavevector, geom: DetectorGeometry) -> tuple[Wavevector, Branch]:
    """Map an unfolded wavevector onto the observed half; ties go to H."""
    if not 0 <= k_raw.y <= geom.y_max:
        raise ValueError(f"y={k_raw.y} outside [0, y_max={geom.y_max}]")
    if k_raw.y < 0.5 * geom.y_max:
        return k_raw, Branch.H
    return Wavevector(k_raw.x, geom.y_max - k_raw.y), Branch.V


def unfold_coordinates(k_obs: Wavevector, branch: Branch, geom: DetectorGeometry) -> Wavevector:
    branch = Branch(branch)
    if branch is Branch.H:
        return k_obs
    return Wavevector(k_obs.x, geom.y_max - k_obs.y)


def branch_moduli_xy(x, y, y_max):
    """Array form of :func:`branch_moduli`."""
    return np.hypot(x, y), np.hypot(x, y_max - np.asarray(y))


def branch_moduli(k_obs: Wavevector, geom: DetectorGeometry) -> tuple[float, float]:
    if not -1e-9 <= k_obs.y <= 0.5 * geom.y_max * (1 + 1e-12):
        raise ValueError(f"y={k_obs.y} outside the folded region")
    kh, kv = branch_moduli_xy(k_obs.x, k_obs.y, geom.y_max)
    return float(kh), float(kv)


def phase_xy(profile: PhaseProfile, xw, yw, xr, yr):
    """Vectorised phase for arrays of write/read wavevector components."""
    xw = np.asarray(xw, dtype=float)
    if profile.variant is PhaseVariant.CONSTANT:
        return np.full(np.broadcast(xw, yw, xr, yr).shape, profile.phi0)
    if profile.variant is PhaseVariant.LINEAR:
        aw, ar = profile.a_w, profile.a_r
        return aw[0] * xw + aw[1] * np.asarray(yw) + ar[0] * np.asarray(xr) + ar[1] * np.asarray(yr) + profile.phi0
    cx = np.floor(xw / profile.cell).astype(np.int64)
    cy = np.floor(np.asarray(yw, dtype=float) / profile.cell).astype(np.int64)
    if profile.cells is None:
        bit = (cx + cy) % 2
    else:
        pattern = np.asarray(profile.cells, dtype=np.int64)
        bit = pattern[cy % pattern.shape[0], cx % pattern.shape[1]]
    out = np.where(bit == 1, math.pi, 0.0)
    return np.broadcast_to(out, np.broadcast(xw, yw, xr, yr).shape).copy()


def phase_at(profile: PhaseProfile, k_w: Wavevector, k_r: Wavevector) -> float:
    return float(phase_xy(profile, k_w.x, k_w.y, k_r.x, k_r.y))


def correlation_density_xy(kernel: CorrelationKernel, dx, dy):
    """Normalised Gaussian density over difference coordinates."""
    sx, sy = kernel.sigma_x, kernel.sigma_y
    return np.exp(-0.5 * (np.asarray(dx) / sx) ** 2 - 0.5 * (np.asarray(dy) / sy) ** 2) / (2 * math.pi * sx * sy)


def correlation_density(kernel: CorrelationKernel, k_w: Wavevector, k_r: Wavevector) -> float:
    return float(correlation_density_xy(kernel, k_w.x - k_r.x, k_w.y - k_r.y))


def sum_diff_coords(k_w: Wavevector, k_r: Wavevector) -> tuple[float, float, float, float]:
    return (
        0.5 * (k_w.x + k_r.x),
        0.5 * (k_w.y + k_r.y),
        k_w.x - k_r.x,
        k_w.y - k_r.y,
    )


def from_sum_diff(xs: float, ys: float, xd: float, yd: float) -> tuple[Wavevector, Wavevector]:
    return Wavevector(xs + 0.5 * xd, ys + 0.5 * yd), Wavevector(xs - 0.5 * xd, ys - 0.5 * yd)

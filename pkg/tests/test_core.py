import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from wvmux.core import (
    Arm,
    Branch,
    CorrelationKernel,
    DetectorGeometry,
    MeasurementSetting,
    PhaseProfile,
    PhaseVariant,
    PhotonHit,
    Wavevector,
    branch_moduli,
    correlation_density,
    fold_coordinates,
    from_sum_diff,
    phase_at,
    sum_diff_coords,
    unfold_coordinates,
)

G300 = DetectorGeometry(y_max=300.0)
finite = st.floats(-500, 500, allow_nan=False)


def test_fold_below_half_is_identity():
    assert fold_coordinates(Wavevector(0, 0), G300) == (Wavevector(0, 0), Branch.H)


def test_fold_reflects_upper_half():
    k, b = fold_coordinates(Wavevector(5, 250), G300)
    assert b is Branch.V
    assert (k.x, k.y) == pytest.approx((5, 50))


def test_fold_rejects_out_of_range():
    with pytest.raises(ValueError):
        fold_coordinates(Wavevector(0, 301), G300)
    with pytest.raises(ValueError):
        fold_coordinates(Wavevector(0, -1), G300)


@given(st.floats(-200, 200), st.floats(0, 149.9))
def test_fold_of_v_preimage_is_identity(x, y):
    k = Wavevector(x, y)
    back, branch = fold_coordinates(unfold_coordinates(k, Branch.V, G300), G300)
    assert branch is Branch.V
    assert back.x == k.x and back.y == pytest.approx(k.y, abs=1e-12)


def test_branch_moduli_examples():
    kh, kv = branch_moduli(Wavevector(0, G300.y_max / 2), G300)
    assert kh == kv == pytest.approx(150)
    assert branch_moduli(Wavevector(0, 100), G300) == pytest.approx((100, 200))
    kh, kv = branch_moduli(Wavevector(30, 40), G300)
    assert kh == pytest.approx(50)
    assert kv == pytest.approx(math.sqrt(30**2 + 260**2))
    assert kv == pytest.approx(261.7, abs=0.05)


def test_branch_moduli_rejects_unfolded_input():
    with pytest.raises(ValueError):
        branch_moduli(Wavevector(0, 200), G300)


@given(st.floats(-100, 100), st.floats(0, 150))
def test_v_branch_never_shorter(x, y):
    kh, kv = branch_moduli(Wavevector(x, y), G300)
    assert kv >= kh - 1e-9


def test_linear_phase_zero_gradients():
    p = PhaseProfile(PhaseVariant.LINEAR)
    assert phase_at(p, Wavevector(3, 7), Wavevector(-2, 9)) == 0


def test_linear_phase_arithmetic():
    p = PhaseProfile(PhaseVariant.LINEAR, a_w=(0, 0), a_r=(0, 0.5), phi0=0.1)
    assert phase_at(p, Wavevector(9, 9), Wavevector(0, 2)) == pytest.approx(1.1)


@given(st.floats(0, 199), st.floats(0, 199))
def test_grid_phase_follows_write_cell(x, y):
    p = PhaseProfile(PhaseVariant.GRID, cell=10.0)
    phi = phase_at(p, Wavevector(x, y), Wavevector(0, 0))
    assert phi in (0.0, math.pi)
    assert (phi == math.pi) == ((int(x // 10) + int(y // 10)) % 2 == 1)


def test_grid_phase_explicit_pattern():
    p = PhaseProfile(PhaseVariant.GRID, cell=1.0, cells=((0, 1, 1),))
    got = [phase_at(p, Wavevector(x + 0.5, 0.5), Wavevector(0, 0)) for x in range(6)]
    assert got == [0, math.pi, math.pi, 0, math.pi, math.pi]


def test_density_peak_and_offset():
    ker = CorrelationKernel(2.0, 3.0)
    peak = 1 / (2 * math.pi * 2.0 * 3.0)
    k = Wavevector(10, 20)
    assert correlation_density(ker, k, k) == pytest.approx(peak)
    assert correlation_density(ker, Wavevector(12, 20), k) == pytest.approx(peak * math.exp(-0.5))


def test_density_integrates_to_one():
    ker = CorrelationKernel(1.7, 2.9)
    k0 = Wavevector(0, 0)
    val, _ = integrate.dblquad(
        lambda y, x: correlation_density(ker, Wavevector(x, y), k0),
        -6 * ker.sigma_x, 6 * ker.sigma_x, -6 * ker.sigma_y, 6 * ker.sigma_y,
        epsabs=1e-12, epsrel=1e-12,
    )
    assert val == pytest.approx(1, abs=1e-6)


def test_sum_diff_examples():
    assert sum_diff_coords(Wavevector(3, 4), Wavevector(3, 4)) == (3, 4, 0, 0)
    assert sum_diff_coords(Wavevector(1, 0), Wavevector(0, 1)) == (0.5, 0.5, 1, -1)


@given(finite, finite, finite, finite)
def test_sum_diff_roundtrip(a, b, c, d):
    kw, kr = from_sum_diff(*sum_diff_coords(Wavevector(a, b), Wavevector(c, d)))
    assert (kw.x, kw.y, kr.x, kr.y) == pytest.approx((a, b, c, d), abs=1e-9)


def test_geometry_pixel_mapping_roundtrip():
    g = DetectorGeometry()
    ix, iy = np.meshgrid(np.arange(g.width_px), np.arange(g.height_px))
    x, y = g.pixel_center(ix, iy)
    jx, jy = g.pixel_of(x, y)
    assert np.array_equal(jx, ix) and np.array_equal(jy, iy)
    assert g.pixel_of(g.x_range[0] - 0.1, 10.0) == (-1, -1)
    assert g.sum_shape == (71, 79)


def test_geometry_rejects_region_beyond_fold():
    with pytest.raises(ValueError):
        DetectorGeometry(height_px=80)


def test_setting_angles_wrap():
    s = MeasurementSetting(-math.pi / 2, 5 * math.pi)
    assert s.xi_w == pytest.approx(1.5 * math.pi)
    assert s.xi_r == pytest.approx(math.pi)


def test_photon_hit_validation():
    h = PhotonHit(0, "w", 0, 1, 3, 4, 0.0)
    assert h.arm is Arm.WRITE
    h.check_bounds(DetectorGeometry())
    with pytest.raises(ValueError):
        PhotonHit(0, "r", 0, 0, 3, 4, 0.0)
    with pytest.raises(ValueError):
        PhotonHit(0, "r", 0, 1, 99, 4, 0.0).check_bounds(DetectorGeometry())

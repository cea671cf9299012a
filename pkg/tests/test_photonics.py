import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from homsync.photonics import (DEFAULT_COHERENCE_TIME, DEFAULT_VISIBILITY, FitDivergedError, GridUnderresolvedError,
                               HomDipModel, JointSpectralAmplitude, QuadratureGrid, dip_envelope, dip_from_jsa,
                               hom_coincidence_probability, jsa_for_dip, jsa_norm_integral)
from homsync.timebase import PS, S

W0 = 2 * math.pi * 190e12


def trapezoid_oracle(jsa, delay_fs, pps=64, span=8.0):
    """Eq. (4) on a full 2-D trapezoid grid in (u, v) = (ws + wi, ws - wi).

    Independent of the library's separable midpoint sum: evaluates the JSA
    through its public amplitude() at both (ws, wi) and the swapped point.
    """
    tau = delay_fs / S
    sp, sm = jsa.sigma_plus, jsa.sigma_minus
    u = np.linspace(jsa.u0 - span * sp, jsa.u0 + span * sp, int(2 * span * pps) + 1)
    vhalf = span * sm + abs(jsa.v0)
    # fine enough that the cosine is resolved as well
    nv = int(2 * vhalf / min(sm / pps, 2 * math.pi / (abs(tau) + 1e-30) / 16)) + 1
    v = np.linspace(-vhalf, vhalf, nv)
    U, V = np.meshgrid(u, v, indexing="ij")
    ws, wi = (U + V) / 2, (U - V) / 2
    a = jsa.amplitude(ws, wi)
    a_swap = jsa.amplitude(wi, ws)
    direct = trapezoid(trapezoid(np.abs(a) ** 2, v, axis=1), u)
    cross = trapezoid(trapezoid(np.abs(a * a_swap) * np.cos((ws - wi) * tau), v, axis=1), u)
    return (direct - cross) / direct


def test_envelope_paper_point():
    m = HomDipModel(0.68, 3 * PS)
    assert dip_envelope(m, 0) == pytest.approx(0.32, abs=1e-15)


def test_envelope_far_delay_is_one():
    m = HomDipModel(0.68, 3 * PS)
    assert dip_envelope(m, 10**9) == 1.0


@given(st.floats(0, 1), st.integers(1, 10**5), st.integers(-10**6, 10**6))
def test_envelope_bounds(v, tc, tau):
    m = HomDipModel(v, tc)
    y = dip_envelope(m, tau)
    assert 1 - v - 1e-15 <= y <= 1.0
    assert dip_envelope(m, 0) <= y


def test_model_validation():
    with pytest.raises(ValueError):
        HomDipModel(1.2, 3 * PS)
    with pytest.raises(ValueError):
        HomDipModel(0.5, 0)


def test_symmetric_jsa_perfect_dip():
    jsa = JointSpectralAmplitude(W0, W0, 2.8e13, 4.7e11)
    assert jsa.is_exchange_symmetric()
    assert hom_coincidence_probability(jsa, 0) < 1e-6


def test_far_delay_limit():
    jsa = jsa_for_dip(DEFAULT_VISIBILITY, DEFAULT_COHERENCE_TIME)
    assert hom_coincidence_probability(jsa, 10**6 * DEFAULT_COHERENCE_TIME) == pytest.approx(1.0, abs=1e-3)


def test_quadrature_matches_trapezoid_oracle_at_tc():
    jsa = jsa_for_dip(0.68, 3 * PS)
    got = hom_coincidence_probability(jsa, 3 * PS)
    assert got == pytest.approx(trapezoid_oracle(jsa, 3 * PS), abs=1e-4)


def test_quadrature_matches_oracle_for_asymmetric_widths():
    # a round JSA, far from the default aspect ratio
    jsa = JointSpectralAmplitude(W0 + 2e11, W0 - 2e11, 1.5e12, 5e11)
    for tau in (0, 1500, 4000):
        assert hom_coincidence_probability(jsa, tau) == pytest.approx(trapezoid_oracle(jsa, tau), abs=1e-4)


def test_envelope_agrees_with_quadrature_at_tc():
    jsa = jsa_for_dip(0.68, 3 * PS)
    m = HomDipModel(0.68, 3 * PS)
    assert abs(dip_envelope(m, 3 * PS) - hom_coincidence_probability(jsa, 3 * PS)) <= 1e-3


def test_jsa_is_normalised():
    jsa = jsa_for_dip(0.68, 3 * PS)
    assert jsa_norm_integral(jsa) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=25)
@given(st.floats(0.05, 1.0), st.integers(500, 20 * PS), st.floats(-1, 1))
def test_symmetry_in_delay(v, tc, frac):
    jsa = jsa_for_dip(v, tc)
    tau = int(frac * 5 * tc)
    assert hom_coincidence_probability(jsa, tau) == pytest.approx(hom_coincidence_probability(jsa, -tau), abs=1e-12)


def test_grid_convergence():
    jsa = jsa_for_dip(0.68, 3 * PS)
    coarse = QuadratureGrid(points_per_sigma=16)
    fine = QuadratureGrid(points_per_sigma=32)
    for tau in (0, 1000, 3000, 7000):
        assert abs(hom_coincidence_probability(jsa, tau, coarse) - hom_coincidence_probability(jsa, tau, fine)) < 1e-4


def test_underresolved_grid_rejected():
    jsa = jsa_for_dip(0.68, 3 * PS)
    with pytest.raises(GridUnderresolvedError):
        hom_coincidence_probability(jsa, 0, QuadratureGrid(points_per_sigma=4))
    with pytest.raises(GridUnderresolvedError):
        hom_coincidence_probability(jsa, 0, QuadratureGrid(span_sigmas=3))


def test_dip_from_jsa_recovers_design_point():
    fit = dip_from_jsa(jsa_for_dip(0.68, 3 * PS))
    assert fit.model.visibility == pytest.approx(0.68, abs=1e-4)
    assert fit.model.coherence_time == pytest.approx(3 * PS, abs=2)
    assert fit.residual_rms < 1e-6


def test_dip_from_jsa_symmetric_gives_unit_visibility():
    fit = dip_from_jsa(JointSpectralAmplitude(W0, W0, 2.8e13, 4.7e11))
    assert fit.model.visibility == pytest.approx(1.0, abs=0.01)


def test_dip_from_jsa_offset_centres_reduce_visibility():
    fit = dip_from_jsa(JointSpectralAmplitude(W0 + 3e11, W0 - 3e11, 2.8e13, 4.7e11))
    assert fit.model.visibility < 1.0
    # closed form for the Gaussian JSA: V = exp(-v0^2 / (2 sm^2))
    assert fit.model.visibility == pytest.approx(math.exp(-(6e11) ** 2 / (2 * 4.7e11**2)), abs=1e-3)


def test_coherence_time_scales_inversely_with_sigma_minus():
    sp = 5e13
    tcs = []
    for sm in (2e11, 4e11, 8e11):
        tcs.append(dip_from_jsa(JointSpectralAmplitude(W0, W0, sp, sm)).model.coherence_time)
    assert tcs[0] / tcs[1] == pytest.approx(2.0, rel=0.1)
    assert tcs[1] / tcs[2] == pytest.approx(2.0, rel=0.1)


class TwoLobeJSA(JointSpectralAmplitude):
    """Two narrow spectral lobes: the dip beats and is far from Gaussian."""

    def _v_factor(self, v):
        s = self.sigma_minus / 4
        return np.exp(-((v - 16 * s) ** 2) / (4 * s**2)) + np.exp(-((v + 16 * s) ** 2) / (4 * s**2))


def test_non_gaussian_dip_fit_diverges():
    with pytest.raises(FitDivergedError):
        dip_from_jsa(TwoLobeJSA(W0, W0, 2.8e13, 4.7e11))

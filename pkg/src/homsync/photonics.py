"""HOM interferogram: midpoint quadrature over a Gaussian joint spectrum, and
the two-parameter dip envelope the event simulator runs on.

The joint spectral amplitude is written in sum/difference frequencies
``u = ws + wi`` and ``v = ws - wi``::

    A(ws, wi) = N exp(-(u - u0)**2 / (4 sp**2)) exp(-(v - v0)**2 / (4 sm**2))

so ``|A|**2`` has standard deviations ``sp`` along ``u`` and ``sm`` along
``v``.  Exchanging signal and idler maps ``v -> -v``; a non-zero ``v0``
(unequal centre frequencies) is what makes the two photons distinguishable
and lowers the visibility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .timebase import Duration, PS, S


class GridUnderresolvedError(ValueError):
    pass


class FitDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class JointSpectralAmplitude:
    center_s: float  # rad/s
    center_i: float  # rad/s
    sigma_plus: float  # rad/s, std of |A|^2 along ws + wi
    sigma_minus: float  # rad/s, std of |A|^2 along ws - wi
    normalization: float = float("nan")

    def __post_init__(self):
        if not (self.sigma_plus > 0 and self.sigma_minus > 0):
            raise ValueError("sigma_plus and sigma_minus must be positive")
        if math.isnan(self.normalization):
            # integral of the unnormalised |A|^2 over ws, wi is pi * sp * sm
            norm = 1.0 / math.sqrt(math.pi * self.sigma_plus * self.sigma_minus)
            object.__setattr__(self, "normalization", norm)

    @property
    def u0(self) -> float:
        return self.center_s + self.center_i

    @property
    def v0(self) -> float:
        return self.center_s - self.center_i

    def amplitude(self, ws, wi):
        u = np.asarray(ws) + np.asarray(wi)
        v = np.asarray(ws) - np.asarray(wi)
        return self.normalization * self._u_factor(u) * self._v_factor(v)

    def _u_factor(self, u):
        return np.exp(-((u - self.u0) ** 2) / (4 * self.sigma_plus**2))

    def _v_factor(self, v):
        return np.exp(-((v - self.v0) ** 2) / (4 * self.sigma_minus**2))

    def is_exchange_symmetric(self) -> bool:
        return self.center_s == self.center_i


@dataclass(frozen=True)
class HomDipModel:
    visibility: float
    coherence_time: Duration
    baseline_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")
        if self.coherence_time <= 0:
            raise ValueError("coherence_time must be positive")
        if self.baseline_rate <= 0:
            raise ValueError("baseline_rate must be positive")


@dataclass(frozen=True)
class QuadratureGrid:
    """Uniform midpoint grid in (u, v), sized in units of the JSA widths.

    The ``v`` spacing is tightened further when the delay is long enough
    that ``cos(v * tau)`` would alias back onto the dip.
    """

    points_per_sigma: int = 16
    span_sigmas: float = 8.0

    def check(self):
        if self.points_per_sigma < 8 or self.span_sigmas < 5:
            raise GridUnderresolvedError(
                f"grid needs >= 8 points per sigma and >= 5 sigma span, "
                f"got {self.points_per_sigma} and {self.span_sigmas}"
            )


def _midpoints(lo, hi, n):
    h = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * h, h


def _v_grid(jsa, grid, tau_s):
    sm = jsa.sigma_minus
    half = grid.span_sigmas * sm
    lo = min(-half, jsa.v0 - half, -jsa.v0 - half)
    hi = max(half, jsa.v0 + half, -jsa.v0 + half)
    h = sm / grid.points_per_sigma
    # keep the first alias of the cosine (at 2*pi/h) well clear of tau
    guard = grid.span_sigmas / sm
    h_alias = 2 * math.pi / (abs(tau_s) + guard)
    h = min(h, h_alias)
    n = int(math.ceil((hi - lo) / h))
    return _midpoints(lo, hi, n)


def hom_coincidence_probability(jsa: JointSpectralAmplitude, delay: Duration, grid: QuadratureGrid | None = None) -> float:
    """Relative coincidence probability P_c(delay)/P_c(inf) by midpoint quadrature.

    Integrates ``|A(ws,wi)|^2 - |A(ws,wi) A(wi,ws)| cos((ws - wi) tau)`` over a
    rectangular grid in (u, v).  The Gaussian JSA factorises in u and v, so the
    2-D midpoint sum is evaluated as the product of its two 1-D sums; this is
    the same number as the full double sum, just cheaper for long delays.
    """
    grid = grid or QuadratureGrid()
    grid.check()
    tau_s = delay / S

    u, hu = _midpoints(jsa.u0 - grid.span_sigmas * jsa.sigma_plus, jsa.u0 + grid.span_sigmas * jsa.sigma_plus,
                       int(math.ceil(2 * grid.span_sigmas * grid.points_per_sigma)))
    fu = jsa._u_factor(u)
    su = np.sum(fu * fu) * hu

    v, hv = _v_grid(jsa, grid, tau_s)
    fv = jsa._v_factor(v)
    fv_swap = jsa._v_factor(-v)
    direct = np.sum(fv * fv) * hv
    cross = np.sum(fv * fv_swap * np.cos(v * tau_s)) * hv

    # dws dwi = du dv / 2; the common factors cancel in the ratio but are kept
    # so both terms are the literal integrals
    jac = 0.5 * jsa.normalization**2
    p_tau = jac * su * (direct - cross)
    p_inf = jac * su * direct
    return float(p_tau / p_inf)


def jsa_norm_integral(jsa: JointSpectralAmplitude, grid: QuadratureGrid | None = None) -> float:
    """Midpoint estimate of the double integral of |A|^2 (should be 1)."""
    grid = grid or QuadratureGrid()
    u, hu = _midpoints(jsa.u0 - grid.span_sigmas * jsa.sigma_plus, jsa.u0 + grid.span_sigmas * jsa.sigma_plus,
                       int(math.ceil(2 * grid.span_sigmas * grid.points_per_sigma)))
    v, hv = _v_grid(jsa, grid, 0.0)
    su = np.sum(jsa._u_factor(u) ** 2) * hu
    sv = np.sum(jsa._v_factor(v) ** 2) * hv
    return float(0.5 * jsa.normalization**2 * su * sv)


def dip_envelope(model: HomDipModel, delay) -> float | np.ndarray:
    """``1 - V exp(-(tau/Tc)^2)``; scale by ``baseline_rate`` for a count rate."""
    x = np.asarray(delay, dtype=float) / model.coherence_time
    out = 1.0 - model.visibility * np.exp(-x * x)
    return float(out) if out.ndim == 0 else out


def jsa_for_dip(visibility: float, coherence_time: Duration, *, center: float = 2 * math.pi * 190e12,
                sigma_plus: float = 2.8e13) -> JointSpectralAmplitude:
    """A Gaussian JSA whose interferogram has the requested visibility and width.

    For this family the dip is exactly ``1 - exp(-v0^2 / 2sm^2) exp(-sm^2 tau^2 / 2)``.
    ``sigma_plus`` defaults to a 22 nm pump bandwidth at 789 nm.
    """
    if not 0 < visibility <= 1:
        raise ValueError("visibility must be in (0, 1]")
    tc_s = coherence_time / S
    sm = math.sqrt(2.0) / tc_s
    v0 = sm * math.sqrt(-2.0 * math.log(visibility))
    return JointSpectralAmplitude(center + v0 / 2, center - v0 / 2, sigma_plus, sm)


@dataclass(frozen=True)
class DipFit:
    model: HomDipModel
    residual_rms: float


def dip_from_jsa(jsa: JointSpectralAmplitude, grid: QuadratureGrid | None = None, n_points: int = 201) -> DipFit:
    """Least-squares (V, Tc) of the envelope against the quadrature curve.

    The fit range is +-5 Tc around zero, with Tc first guessed from the
    difference-frequency width.
    """
    tc_guess = math.sqrt(2.0) / jsa.sigma_minus * S
    taus = np.linspace(-5 * tc_guess, 5 * tc_guess, n_points)
    curve = np.array([hom_coincidence_probability(jsa, int(round(t)), grid) for t in taus])

    def envelope(t, vis, tc):
        return 1.0 - vis * np.exp(-((t / tc) ** 2))

    try:
        (vis, tc), _ = curve_fit(envelope, taus, curve, p0=(1.0 - curve.min(), tc_guess), maxfev=2000)
    except RuntimeError as exc:
        raise FitDivergedError(str(exc)) from exc
    rms = float(np.sqrt(np.mean((envelope(taus, vis, tc) - curve) ** 2)))
    if rms > 0.05 or not np.isfinite(rms):
        raise FitDivergedError(f"envelope fit residual rms {rms:.3g} exceeds 0.05")
    vis = float(min(max(vis, 0.0), 1.0))
    return DipFit(HomDipModel(vis, max(1, int(round(abs(tc))))), rms)


def dip_curve(model: HomDipModel, delays, jsa: JointSpectralAmplitude | None = None, grid=None):
    """Envelope and (optionally) quadrature values over an array of delays."""
    delays = [int(d) for d in delays]
    env = [dip_envelope(model, d) for d in delays]
    quad = None
    if jsa is not None:
        quad = [hom_coincidence_probability(jsa, d, grid) for d in delays]
    return delays, env, quad


DEFAULT_VISIBILITY = 0.68
DEFAULT_COHERENCE_TIME = 3 * PS

"""Empirical microstructure and mechanical-property models.

Per-cell thermal histories reduce to a cooling rate over the local
solidification window, which feeds a dendrite-arm-spacing power law, a
Hall-Petch style yield strength, and a diffusion-limited grain growth
law integrated over the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solidify import MaterialModel


class MicrostructureError(Exception):
    pass


@dataclass
class MicroParams:
    """Coefficients of the empirical models.

    The spacing law produces micrometers from a rate in K/s; strength
    comes out in MPa.  r0 is the seed grain radius in meters (the growth
    rate law is singular at zero radius).
    """

    a_lambda: float = 39.4
    b_lambda: float = -0.317
    a_sigma: float = 59.0
    b_sigma: float = 120.3
    r0: float = 1e-6

    def __post_init__(self):
        if self.a_lambda <= 0:
            raise MicrostructureError("spacing prefactor must be positive")
        if self.b_lambda >= 0:
            raise MicrostructureError("spacing exponent must be negative")
        if self.r0 <= 0:
            raise MicrostructureError("seed grain radius must be positive")


def _elementwise(values, name):
    arr = np.asarray(values, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr).astype(float)
    if np.any(np.isfinite(arr) & (arr <= 0.0)):
        raise MicrostructureError(f"{name} must be positive")
    return arr, scalar


def sdas(cooling_rate, params: MicroParams | None = None):
    """Secondary dendrite arm spacing in micrometers for a cooling rate
    in K/s.  NaN rates (cells that never solidified) pass through."""
    p = params if params is not None else MicroParams()
    rate, scalar = _elementwise(cooling_rate, "cooling rate")
    lam = p.a_lambda * rate ** p.b_lambda
    return float(lam[0]) if scalar else lam


def yield_strength(lambda2, params: MicroParams | None = None):
    """0.2% yield strength in MPa for an arm spacing in micrometers."""
    p = params if params is not None else MicroParams()
    lam, scalar = _elementwise(lambda2, "arm spacing")
    sig = p.a_sigma * lam ** -0.5 + p.b_sigma
    return float(sig[0]) if scalar else sig


def cooling_rate_field(t_liq_cross, t_sol_cross, mat: MaterialModel):
    """Average cooling rate over each cell's solidification window.

    Cells that never crossed both thresholds, or crossed them in the
    same instant, get NaN and are meant to be excluded from reductions.
    """
    t0 = np.asarray(t_liq_cross, dtype=float)
    t1 = np.asarray(t_sol_cross, dtype=float)
    if t0.shape != t1.shape:
        raise MicrostructureError("crossing-time arrays differ in shape")
    span = t1 - t0
    rate = np.full(t0.shape, np.nan)
    ok = np.isfinite(span) & (span > 0.0)
    rate[ok] = (mat.t_liq - mat.t_sol) / span[ok]
    return rate


def solute_supersaturation(fs, k_p: float):
    """Interface supersaturation from the local solid fraction.

    Built on the Scheil interface concentrations; the nominal
    concentration cancels out of the ratio.  Negative while the
    interfacial solid stays leaner than the nominal composition.
    """
    fs = np.asarray(fs, dtype=float)
    scalar = fs.ndim == 0
    fs = np.atleast_1d(fs)
    S = np.empty_like(fs)
    done = fs >= 1.0
    S[done] = 2.0 * k_p / (1.0 - k_p)
    q = (1.0 - fs[~done]) ** (k_p - 1.0)
    S[~done] = 2.0 * (k_p * q - 1.0) / (q * (1.0 - k_p))
    return float(S[0]) if scalar else S


def growth_coefficient(S):
    """Invariant-size growth coefficient; NaN where the supersaturation
    is out of the valid (negative) range."""
    S = np.asarray(S, dtype=float)
    scalar = S.ndim == 0
    S = np.atleast_1d(S)
    lam = np.full_like(S, np.nan)
    ok = S < 0.0
    lam[ok] = (-S[ok] / (2.0 * np.sqrt(np.pi))
               + np.sqrt(S[ok] ** 2 / (4.0 * np.pi) - S[ok]))
    return float(lam[0]) if scalar else lam


def integrate_growth(times, lam, d_s: float, r0: float) -> float:
    """RK4 integration of dr/dt = lam(t)^2 d_s / (2 r) with the
    coefficient piecewise linear between samples."""
    t = np.asarray(times, dtype=float)
    g = np.asarray(lam, dtype=float)
    if t.shape != g.shape or t.ndim != 1 or t.size < 1:
        raise MicrostructureError("times and coefficients must match 1-D")
    if np.any(np.diff(t) < 0.0):
        raise MicrostructureError("times must be non-decreasing")
    if r0 <= 0.0:
        raise MicrostructureError("r0 must be positive")
    r = float(r0)
    half = 0.5 * d_s
    for i in range(t.size - 1):
        h = t[i + 1] - t[i]
        if h == 0.0:
            continue
        a0 = half * g[i] ** 2
        a1 = half * g[i + 1] ** 2
        am = half * (0.5 * (g[i] + g[i + 1])) ** 2
        k1 = a0 / r
        k2 = am / (r + 0.5 * h * k1)
        k3 = am / (r + 0.5 * h * k2)
        k4 = a1 / (r + h * k3)
        r += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return r


def grain_growth(times, fs, mat: MaterialModel,
                 params: MicroParams | None = None, return_flag: bool = False):
    """Final grain radius for one cell's solid-fraction history.

    Integration runs from the first sample with fs > 0 until fs reaches
    one (or the history ends).  Steps where fs jumps by more than 0.1
    are refined tenfold.  Once the supersaturation leaves its valid
    range the coefficient is frozen at its last valid value; a history
    that starts invalid yields NaN.  With return_flag the frozen-tail
    condition is reported alongside the radius.
    """
    p = params if params is not None else MicroParams()
    t = np.asarray(times, dtype=float)
    f = np.asarray(fs, dtype=float)
    if t.shape != f.shape or t.ndim != 1 or t.size == 0:
        raise MicrostructureError("times and fs must match 1-D")
    if np.any(np.diff(t) < 0.0):
        raise MicrostructureError("times must be non-decreasing")
    if np.any(np.diff(f) < -1e-12):
        raise MicrostructureError("fs history must not decrease")

    started = np.nonzero(f > 0.0)[0]
    if started.size == 0:
        return (p.r0, False) if return_flag else p.r0
    i0 = int(started[0])
    done = np.nonzero(f >= 1.0)[0]
    i1 = int(done[0]) if done.size else t.size - 1
    if i1 <= i0:
        return (p.r0, False) if return_flag else p.r0

    tn, fn = [t[i0]], [f[i0]]
    for i in range(i0, i1):
        nsub = 10 if f[i + 1] - f[i] > 0.1 else 1
        for j in range(1, nsub + 1):
            w = j / nsub
            tn.append(t[i] + w * (t[i + 1] - t[i]))
            fn.append(f[i] + w * (f[i + 1] - f[i]))
    S = solute_supersaturation(np.array(fn), mat.k_partition)
    lam = growth_coefficient(S)
    if np.isnan(lam[0]):
        return (np.nan, True) if return_flag else np.nan
    frozen = False
    for i in range(1, lam.size):
        if np.isnan(lam[i]):
            lam[i] = lam[i - 1]
            frozen = True
    r = integrate_growth(np.array(tn), lam, mat.solute_diff, p.r0)
    return (r, frozen) if return_flag else r


def grain_size_field(mush_times, mush_fs, mat: MaterialModel,
                     params: MicroParams | None = None):
    """Per-cell final grain radius from the recorded mush history.

    mush_times is a list of sample times and mush_fs the matching list
    of per-cell solid-fraction snapshots, as accumulated by the flow
    solver.  Returns (radius array, frozen-coefficient flag array).
    """
    t = np.asarray(mush_times, dtype=float)
    fs_hist = np.asarray(mush_fs, dtype=float)
    if fs_hist.ndim != 2 or fs_hist.shape[0] != t.size:
        raise MicrostructureError("history shapes do not line up")
    # solver-tolerance wiggles can dip a sample by ~1e-9; growth history
    # is cumulative, so flatten them with a running maximum
    fs_hist = np.maximum.accumulate(fs_hist, axis=0)
    nc = fs_hist.shape[1]
    r = np.empty(nc)
    flags = np.zeros(nc, dtype=bool)
    for c in range(nc):
        r[c], flags[c] = grain_growth(t, fs_hist[:, c], mat, params,
                                      return_flag=True)
    return r, flags

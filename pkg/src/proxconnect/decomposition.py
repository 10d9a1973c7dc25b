"""Numerical test of whether a forward/backward pair factors as (T o P, T' o P).

The pair factors iff both F and B are functions of

    P(w) = integral_{-inf}^{w} dF(omega) / B(omega)

and P is monotone.  :func:`integrate_P` samples P on a grid: the absolutely
continuous part of dF is integrated with the trapezoid rule on F'/B, and
every detected jump of F adds ``jump / B(omega_0)``.  Where both F' and B
vanish the integrand is 0/0 and P is not determined; the analyzer fills
those stretches with a monotone linear completion and flags them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .quantizers import ANALYTIC_DERIVATIVES, QuantizerPair

SUPPORT_EPS = 1e-9      # |B| above this counts as B's support
JUMP_RATIO = 10.0       # candidate jump: |dF| > JUMP_RATIO * h * local median slope
JUMP_RESOLUTION = 1e-9  # bisection width when locating a jump
JUMP_MIN = 1e-6         # residual jump after bisection that counts as a discontinuity
SLOPE_EPS = 1e-6        # |F'| below this (where B vanishes) is treated as zero
SMALL_B = 1e-6          # F'/B with both below this is numerically 0/0
BUCKET = 1e-6           # level-set bucket width for the function-of-P test


@dataclass
class Jump:
    index: int          # grid cell [grid[index], grid[index + 1]]
    location: float
    magnitude: float
    b_value: float


@dataclass
class SampledCurve:
    grid: np.ndarray
    values: np.ndarray          # P
    forward: np.ndarray         # F on the grid
    backward: np.ndarray        # B on the grid
    jumps: list[Jump] = field(default_factory=list)
    poles: list[tuple[float, str]] = field(default_factory=list)
    free: np.ndarray | None = None  # True where P was completed (0/0 region)

    @property
    def support(self) -> np.ndarray:
        return np.abs(self.backward) > SUPPORT_EPS


@dataclass
class DecompositionVerdict:
    status: str                 # "admits" | "fails"
    reason: str                 # "none" | "non-monotone-P" | "B-not-function-of-P" | ...
    curve: SampledCurve
    detail: str = ""

    @property
    def admits(self) -> bool:
        return self.status == "admits"


class SmoothnessError(ValueError):
    """The forward map is not continuously differentiable."""

    def __init__(self, message: str, location: float):
        super().__init__(message)
        self.location = location


# ---------------------------------------------------------------- jump detection

def _local_median(x: np.ndarray, k: int = 5) -> np.ndarray:
    padded = np.pad(x, k, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * k + 1)
    # drop the centre element so a jump does not vote for itself
    windows = np.delete(windows, k, axis=1)
    return np.median(windows, axis=1)


def _locate_jump(f: Callable, a: float, b: float, fa: float, fb: float) -> tuple[float, float, float]:
    while b - a > JUMP_RESOLUTION:
        m = 0.5 * (a + b)
        fm = float(f(m))
        if abs(fm - fa) >= abs(fb - fm):
            b, fb = m, fm
        else:
            a, fa = m, fm
    return a, b, fb - fa


def find_jumps(f: Callable, grid: np.ndarray, values: np.ndarray) -> list[tuple[int, float, float]]:
    """Cells of ``grid`` where ``f`` jumps, as (cell index, location, magnitude)."""
    h = grid[1] - grid[0]
    dF = np.diff(values)
    slopes = np.abs(dF) / h
    med = _local_median(slopes)
    candidates = np.flatnonzero((np.abs(dF) > JUMP_RATIO * h * med) & (np.abs(dF) > 1e-12))
    found = []
    for i in candidates:
        a, b, mag = _locate_jump(f, grid[i], grid[i + 1], values[i], values[i + 1])
        if abs(mag) > JUMP_MIN:
            found.append((int(i), 0.5 * (a + b), mag))
    return found


# ---------------------------------------------------------------- P reconstruction

def integrate_P(pair: QuantizerPair, lo: float = -3.0, hi: float = 3.0, n_points: int = 10001) -> SampledCurve:
    if n_points < 1001:
        raise ValueError("integrate_P needs at least 1001 grid points")
    grid = np.linspace(lo, hi, n_points)
    h = grid[1] - grid[0]
    Fv = pair.F(grid)
    Bv = pair.B(grid)
    f = pair.F

    curve = SampledCurve(grid, np.zeros_like(grid), Fv, Bv)
    for i, loc, mag in find_jumps(f, grid, Fv):
        b0 = float(pair.B(loc))
        curve.jumps.append(Jump(i, loc, mag, b0))
        if abs(b0) <= SUPPORT_EPS:
            curve.poles.append((loc, "jump"))

    # F' by central differences, one-sided next to a jump
    delta = 1e-6 * (1.0 + np.abs(grid))
    Fp, Fm = f(grid + delta), f(grid - delta)
    dF = (Fp - Fm) / (2 * delta)
    for jump in curve.jumps:
        near = np.flatnonzero(np.abs(grid - jump.location) <= 2 * delta)
        for j in near:
            if grid[j] >= jump.location:
                dF[j] = (Fp[j] - Fv[j]) / delta[j]
            else:
                dF[j] = (Fv[j] - Fm[j]) / delta[j]

    support = np.abs(Bv) > SUPPORT_EPS
    ratio = np.zeros_like(grid)
    ratio[support] = dF[support] / Bv[support]
    flat = (np.abs(Bv) <= SMALL_B) & (np.abs(dF) <= SLOPE_EPS)
    ratio[flat] = 0.0
    support &= ~flat
    for j in np.flatnonzero(~support & ~flat):
        curve.poles.append((float(grid[j]), "slope"))
    # monotone linear completion of the 0/0 region: interpolate the integrand
    # between the bounding support points, constant beyond the outermost ones
    if flat.any() and support.any():
        ratio[flat] = np.maximum(np.interp(grid[flat], grid[support], ratio[support]), 0.0)
    curve.free = flat

    inc = 0.5 * h * (ratio[:-1] + ratio[1:])
    for jump in curve.jumps:
        if abs(jump.b_value) > SUPPORT_EPS:
            inc[jump.index] += jump.magnitude / jump.b_value
    curve.values = np.concatenate([[0.0], np.cumsum(inc)])
    return curve


def check_factorization(pair: QuantizerPair, curve: SampledCurve, tol: float = 1e-6) -> DecompositionVerdict:
    """Decide whether the pair admits the F = T o P, B = T' o P factorization."""
    if curve.poles:
        loc, kind = curve.poles[0]
        return DecompositionVerdict("fails", "jump-outside-B-support", curve,
                                    f"F moves ({kind}) at w={loc:.6g} where B vanishes")
    P = curve.values
    drops = np.diff(P)
    if drops.size and drops.min() < -tol:
        at = curve.grid[int(np.argmin(drops))]
        return DecompositionVerdict("fails", "non-monotone-P", curve, f"P decreases near w={at:.6g}")

    mask = curve.support & ~curve.free
    keys = np.round(P[mask] / BUCKET).astype(np.int64)
    Bs, Fs = curve.backward[mask], curve.forward[mask]
    order = np.argsort(keys, kind="stable")
    keys, Bs, Fs = keys[order], Bs[order], Fs[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    ends = np.r_[starts[1:], keys.size]
    b_tol = tol * max(1.0, float(np.abs(curve.backward).max(initial=0.0)))
    f_tol = tol * max(1.0, float(np.abs(curve.forward).max(initial=0.0)))
    for s, e in zip(starts, ends):
        if e - s < 2:
            continue
        if np.ptp(Bs[s:e]) > b_tol:
            return DecompositionVerdict("fails", "B-not-function-of-P", curve,
                                        f"B spans [{Bs[s:e].min():.4g}, {Bs[s:e].max():.4g}] "
                                        f"on the level set P={keys[s] * BUCKET:.6g}")
        if np.ptp(Fs[s:e]) > f_tol:
            return DecompositionVerdict("fails", "F-not-function-of-P", curve,
                                        f"F spans [{Fs[s:e].min():.4g}, {Fs[s:e].max():.4g}] "
                                        f"on the level set P={keys[s] * BUCKET:.6g}")
    return DecompositionVerdict("admits", "none", curve)


def analyze_pair(pair: QuantizerPair, lo: float = -3.0, hi: float = 3.0,
                 n_points: int = 10001, tol: float = 1e-6) -> DecompositionVerdict:
    return check_factorization(pair, integrate_P(pair, lo, hi, n_points), tol)


def write_curve_csv(curve: SampledCurve, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["w", "P", "F", "B"])
        for row in zip(curve.grid, curve.values, curve.forward, curve.backward):
            writer.writerow([repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------- derivative rule

def _stencil_derivative(f: Callable) -> Callable:
    def deriv(w, mu=None):
        w = np.asarray(w, dtype=np.float64)
        h = 1e-4 * (1.0 + np.abs(w))
        return (f(w - 2 * h) - 8 * f(w - h) + 8 * f(w + h) - f(w + 2 * h)) / (12 * h)
    return deriv


def _kink_size(f: Callable, a: float, b: float) -> tuple[float, float]:
    """Bisect [a, b] towards a slope discontinuity; return (location, slope jump)."""
    def left(x):
        eps = 1e-7 * (1.0 + abs(x))
        return (float(f(x)) - float(f(x - eps))) / eps

    def right(x):
        eps = 1e-7 * (1.0 + abs(x))
        return (float(f(x + eps)) - float(f(x))) / eps

    while b - a > 1e-7:
        m = 0.5 * (a + b)
        fa, fm, fb = float(f(a)), float(f(m)), float(f(b))
        s1 = (fm - fa) / (m - a)
        s2 = (fb - fm) / (b - m)
        if abs(s1 - left(a)) >= abs(s2 - right(b)):
            b = m
        else:
            a = m
    return 0.5 * (a + b), right(b) - left(a)


def smoothness_probe(f: Callable, lo: float = -3.0, hi: float = 3.0, n_points: int = 2001) -> None:
    """Raise :class:`SmoothnessError` if ``f`` jumps or has a kink on [lo, hi]."""
    grid = np.linspace(lo, hi, n_points)
    values = np.asarray(f(grid), dtype=np.float64)
    jumps = find_jumps(f, grid, values)
    if jumps:
        _, loc, mag = jumps[0]
        raise SmoothnessError(f"forward map jumps by {mag:.4g} at w={loc:.6g}", loc)
    D = _stencil_derivative(f)(grid)
    dD = np.abs(np.diff(D))
    scale = 1.0 + float(np.abs(D).max())
    med = _local_median(dD)
    for i in np.flatnonzero(dD > JUMP_RATIO * med + 1e-6 * scale):
        loc, size = _kink_size(f, grid[i], grid[i + 1])
        if abs(size) > 1e-3 * scale:
            raise SmoothnessError(f"forward map has a kink (slope jump {size:.4g}) at w={loc:.6g}", loc)


def derivative_rule_pair(forward: Callable, mu: float | None = None, name: str | None = None,
                         lo: float = -3.0, hi: float = 3.0) -> QuantizerPair:
    """Pair a continuously differentiable forward map with its own derivative.

    ``forward`` is ``f(w)`` or, when ``mu`` is given, ``f(w, mu)``.  A
    registered analytic derivative is used when available, otherwise a
    5-point stencil.
    """
    if mu is None:
        fwd = lambda w, _mu=None: np.asarray(forward(np.asarray(w, dtype=np.float64)), dtype=np.float64)  # noqa: E731
        single = fwd
    else:
        fwd = forward
        single = lambda w: np.asarray(forward(np.asarray(w, dtype=np.float64), mu), dtype=np.float64)  # noqa: E731
    smoothness_probe(single, lo, hi)
    if forward in ANALYTIC_DERIVATIVES and mu is not None:
        bwd = ANALYTIC_DERIVATIVES[forward]
    else:
        stencil = _stencil_derivative(single)
        bwd = lambda w, _mu=None: stencil(w)  # noqa: E731
    label = name or getattr(forward, "__name__", "F")
    return QuantizerPair(f"{label}'", fwd, bwd, mu=1.0 if mu is None else mu)


# ---------------------------------------------------------------- Moreau envelope

def moreau_env(w, mu: float):
    """Moreau envelope of the indicator of {-1, +1}: min distance^2 / (2 mu)."""
    if not mu > 0:
        raise ValueError("moreau_env needs mu > 0")
    w = np.asarray(w, dtype=np.float64)
    return np.minimum((w - 1.0) ** 2, (w + 1.0) ** 2) / (2.0 * mu)

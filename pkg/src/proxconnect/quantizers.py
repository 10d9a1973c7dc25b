"""Proximal quantizers and forward/backward quantizer pairs.

All maps are elementwise and accept scalars or numpy arrays.  Pair maps
take ``(w, mu)`` where ``mu`` is the pair's smoothing/ramp parameter (the
sign-Swish sharpness, the LinearQuantizer horizontal shift, the polynomial
coefficient or the tanh temperature, depending on the pair).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError

ScalarMap = Callable[[np.ndarray, float], np.ndarray]


def _arr(w):
    return np.asarray(w, dtype=np.float64)


def _sech2(z):
    # overflow-free sech^2
    e = np.exp(-2.0 * np.abs(z))
    return 4.0 * e / (1.0 + e) ** 2


# ---------------------------------------------------------------- proximal maps

def sign_q(w):
    """Projection onto {-1, +1}; ``sign_q(0) == +1``."""
    return np.where(_arr(w) < 0, -1.0, 1.0)


def identity(w):
    return _arr(w).copy()


def hard_tanh(w):
    return np.clip(_arr(w), -1.0, 1.0)


def linear_quantizer(w, rho: float = 0.0, varrho: float = 0.0):
    """Piecewise-linear proximal quantizer LP_rho for Q = {-1, +1}.

    ``rho`` shifts the saturation points horizontally towards 0, ``varrho``
    lifts the value at the midpoint 0 vertically.  With rho = varrho = 0 this
    is the identity on [-1, 1]; with rho >= 1 it is the sign map (except at
    0).  Inputs outside [-1, 1] saturate.  At w == 0 with varrho > 0 the map
    is set-valued; we return +varrho, matching the sign tie-break.
    """
    if rho < 0 or varrho < 0:
        raise ValueError("linear_quantizer needs rho >= 0 and varrho >= 0")
    w = _arr(w)
    q1, q2, p2 = -1.0, 1.0, 0.0
    q1_plus = min(p2, q1 + rho)
    q2_minus = max(p2, q2 - rho)
    p2_minus = max(q1, p2 - varrho)
    p2_plus = min(q2, p2 + varrho)
    neg_den = p2 - q1_plus
    pos_den = q2_minus - p2
    with np.errstate(divide="ignore", invalid="ignore"):
        neg = q1 + (w - q1_plus) * ((p2_minus - q1) / neg_den if neg_den > 0 else 0.0)
        pos = p2_plus + (w - p2) * ((q2 - p2_plus) / pos_den if pos_den > 0 else 0.0)
    return np.select(
        [w == p2, w <= q1_plus, w < p2, w < q2_minus],
        [np.full_like(w, p2_plus), np.full_like(w, q1), neg, pos],
        default=q2,
    )


def bnn_prox(w, mu: float):
    """Proximal quantizer behind BNN: sign on [-1, 1], slope 1/mu outside."""
    if not mu > 1:
        raise ValueError(f"bnn_prox needs mu > 1, got {mu}")
    w = _arr(w)
    s = sign_q(w)
    return np.where(np.abs(w) <= 1.0, s, w / mu + s * (1.0 - 1.0 / mu))


@dataclass(frozen=True)
class ProximalQuantizer:
    """A monotone scalar quantizer P: identity, sign, linear (LP_rho) or bnn."""
    kind: str
    rho: float = 0.0
    varrho: float = 0.0
    mu: float = 2.0

    def __post_init__(self):
        if self.kind not in PROX_KINDS:
            raise ConfigError(f"unknown proximal quantizer {self.kind!r}; "
                              f"expected one of {sorted(PROX_KINDS)}")
        if self.kind == "bnn" and not self.mu > 1:
            raise ConfigError("bnn proximal quantizer needs mu > 1")

    def __call__(self, w):
        if self.kind == "identity":
            return identity(w)
        if self.kind == "sign":
            return sign_q(w)
        if self.kind == "linear":
            return linear_quantizer(w, self.rho, self.varrho)
        return bnn_prox(w, self.mu)


PROX_KINDS = frozenset({"identity", "sign", "linear", "bnn"})


# ---------------------------------------------------------------- smooth forwards and derivatives

def ss_forward(w, mu: float):
    """sign-Swish: (mu w / 2) sech^2(mu w / 2) + tanh(mu w / 2)."""
    z = 0.5 * mu * _arr(w)
    return z * _sech2(z) + np.tanh(z)


def ss_backward(w, mu: float):
    """Derivative of sign-Swish: mu [1 - z tanh z] sech^2 z with z = mu w / 2."""
    z = 0.5 * mu * _arr(w)
    return mu * (1.0 - z * np.tanh(z)) * _sech2(z)


def poly_forward(w, a: float = 1.0):
    """Piecewise quadratic sign approximation 2aw - a^2 w|w| on |w| <= 1/a, saturated outside."""
    w = _arr(w)
    inside = np.abs(w) <= 1.0 / a
    return np.where(inside, 2.0 * a * w - a * a * w * np.abs(w), sign_q(w))


def poly_backward(w, a: float = 1.0):
    w = _arr(w)
    return np.where(np.abs(w) <= 1.0 / a, 2.0 * a - 2.0 * a * a * np.abs(w), 0.0)


def _ede_k(t):
    return max(1.0 / t, 1.0)


def ede_forward(w, t: float = 10.0):
    """k tanh(t w) with k = max(1/t, 1)."""
    return _ede_k(t) * np.tanh(t * _arr(w))


def ede_backward(w, t: float = 10.0):
    """k t (1 - tanh^2(t w))."""
    return _ede_k(t) * t * _sech2(t * _arr(w))


# registered analytic derivatives for the derivative rule
ANALYTIC_DERIVATIVES: dict[Callable, Callable] = {
    ss_forward: ss_backward,
    poly_forward: poly_backward,
    ede_forward: ede_backward,
}


# ---------------------------------------------------------------- pairs

@dataclass
class QuantizerPair:
    """Forward map F and backward multiplier B, both ``(w, mu) -> array``."""
    name: str
    forward: ScalarMap
    backward: ScalarMap
    mu: float = 1.0
    params: dict = field(default_factory=dict)

    def F(self, w):
        return np.asarray(self.forward(_arr(w), self.mu), dtype=np.float64)

    def B(self, w):
        return np.broadcast_to(np.asarray(self.backward(_arr(w), self.mu), dtype=np.float64),
                               np.shape(w)).copy()

    def at(self, mu: float) -> "QuantizerPair":
        return replace(self, mu=float(mu))


def _ones(w, mu=None):
    return np.ones_like(_arr(w))


def _indicator(lo, hi):
    def ind(w, mu=None):
        w = _arr(w)
        return ((w >= lo) & (w <= hi)).astype(np.float64)
    return ind


def _ignore_mu(fn):
    def mapped(w, mu=None):
        return fn(w)
    mapped.__name__ = fn.__name__
    return mapped


def fp_pair() -> QuantizerPair:
    return QuantizerPair("fp", _ignore_mu(identity), _ones)


def bc_pair() -> QuantizerPair:
    return QuantizerPair("bc", _ignore_mu(sign_q), _ones)


def pc_pair(rho: float = 0.01, varrho: float = 0.0) -> QuantizerPair:
    """(LP_rho, 1); ``mu`` carries rho so the rho-ramp drives it."""
    def lp(w, r):
        return linear_quantizer(w, r, varrho)
    return QuantizerPair("pc", lp, _ones, mu=rho, params={"varrho": varrho})


def bnn_pair() -> QuantizerPair:
    return QuantizerPair("bnn", _ignore_mu(sign_q), _indicator(-1.0, 1.0))


def bnn_plus_pair(mu: float = 5.0) -> QuantizerPair:
    return QuantizerPair("bnn+", _ignore_mu(sign_q), ss_backward, mu=mu)


def bnn_plus_plus_pair(mu: float = 5.0) -> QuantizerPair:
    return QuantizerPair("bnn++", ss_forward, ss_backward, mu=mu)


def _rbnn_backward(w, mu=None):
    # sharper polynomial (a = sqrt 2) drawn at half amplitude
    return 0.5 * poly_backward(w, math.sqrt(2.0))


def _react_forward(tau):
    def fwd(w, mu=None):
        return sign_q(_arr(w) - tau)
    return fwd


def appendix_pairs(name: str, **params) -> QuantizerPair:
    """Extra pairs: bireal, rbnn, poly_plus, ede, ede_plus, react.

    ``poly_plus`` uses ``mu`` as the polynomial coefficient (default 1),
    ``ede``/``ede_plus`` use it as the tanh temperature t (default 10),
    ``react`` takes the threshold ``tau`` (default 0.5).
    """
    key = name.replace("+", "_plus").replace("-", "_").lower()
    if key == "bireal":
        return QuantizerPair("bireal", _ignore_mu(sign_q), lambda w, mu=None: poly_backward(w, 1.0))
    if key == "rbnn":
        return QuantizerPair("rbnn", _ignore_mu(sign_q), _rbnn_backward)
    if key in ("poly_plus", "polyplus"):
        return QuantizerPair("poly+", poly_forward, poly_backward, mu=params.get("mu", 1.0))
    if key == "ede":
        return QuantizerPair("ede", _ignore_mu(sign_q), ede_backward, mu=params.get("mu", 10.0))
    if key in ("ede_plus", "edeplus"):
        return QuantizerPair("ede+", ede_forward, ede_backward, mu=params.get("mu", 10.0))
    if key in ("react", "reactnet"):
        tau = float(params.get("tau", 0.5))
        return QuantizerPair("react", _react_forward(tau), _indicator(tau - 1.0, tau + 1.0),
                             params={"tau": tau})
    raise ConfigError(f"unknown quantizer pair {name!r}")


_CORE = {
    "fp": fp_pair,
    "identity": fp_pair,
    "bc": bc_pair,
    "pc": pc_pair,
    "bnn": bnn_pair,
    "bnn+": bnn_plus_pair,
    "bnn++": bnn_plus_plus_pair,
}

PAIR_NAMES = ("fp", "bc", "pc", "bnn", "bnn+", "bnn++",
              "bireal", "rbnn", "poly+", "ede", "ede+", "react")


def get_pair(name: str, **params) -> QuantizerPair:
    """Look a pair up by its algorithm name."""
    key = name.lower()
    if key in _CORE:
        return _CORE[key](**params)
    return appendix_pairs(key, **params)


def compose_with_prox(pair: QuantizerPair, prox: ProximalQuantizer | Callable) -> QuantizerPair:
    """The pair (F o P, B o P)."""
    fwd, bwd = pair.forward, pair.backward

    def forward(w, mu):
        return fwd(prox(w), mu)

    def backward(w, mu):
        return bwd(prox(w), mu)

    label = getattr(prox, "kind", getattr(prox, "__name__", "prox"))
    return QuantizerPair(f"{pair.name}o{label}", forward, backward, mu=pair.mu, params=dict(pair.params))

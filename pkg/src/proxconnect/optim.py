"""Update rules, schedules and Bregman-gap diagnostics.

All rules act on a :class:`TrainerState` holding one continuous weight
array per layer.  ``grad_fn`` receives a list of arrays (one per layer) and
returns the loss gradient at those arrays in the same layout.

==========  ==================================================  ==================
rule        quantized weights w_t                               w*_{t+1}
==========  ==================================================  ==================
pcpp        F(w*_t)                                             w*_t - eta B(w*_t) grad(w_t)
pc          P(w*_t)                                             w*_t - eta grad(w_t)
bc          sign(w*_t)                                          w*_t - eta grad(w_t)
pq          P(w*_t)                                             w_t  - eta grad(w_t)
rpc         P(w*_t)                                             w_t  - eta grad(w*_t)
==========  ==================================================  ==================

Step indices: ``state.t`` counts completed updates.  The update taken at
``state.t == k`` uses ``eta(k)``, ``mu(k)`` and ``rho(k)``; see
:class:`Schedule`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .quantizers import ProximalQuantizer, QuantizerPair, sign_q

GradFn = Callable[[list], list]


# ---------------------------------------------------------------- schedules

def linear_ramp(start: float, end: float, t: float, T: int) -> float:
    """Linear interpolation from ``start`` (t=0) to ``end`` (t>=T), exact at both ends."""
    a = min(max(t, 0), T) / T if T > 0 else 1.0
    if a == 0.0:
        return float(start)
    if a == 1.0:
        return float(end)
    return (1.0 - a) * start + a * end


@dataclass
class Schedule:
    """Step size, mu and rho sequences over ``T`` updates.

    eta_rule: constant | cosine | step | invsqrt
    mu_rule:  fixed | accumulate (mu(t) = 1 + sum_{k<t} eta(k)) | linear (mu0 -> muT)
    rho_rule: fixed | linear (rho0 -> rhoT)
    """
    T: int
    eta0: float = 0.1
    eta_rule: str = "constant"
    eta_gamma: float = 0.1
    eta_every: int = 0
    mu_rule: str = "fixed"
    mu0: float = 5.0
    muT: float = 30.0
    rho_rule: str = "fixed"
    rho0: float = 0.01
    rhoT: float = 10.0
    _acc: list = field(default_factory=lambda: [1.0], init=False, repr=False, compare=False)
    _acc_err: list = field(default_factory=lambda: [0.0], init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 0:
            raise ConfigError("schedule needs T >= 0")
        if self.eta_rule not in ("constant", "cosine", "step", "invsqrt"):
            raise ConfigError(f"unknown eta rule {self.eta_rule!r}")
        if self.mu_rule not in ("fixed", "accumulate", "linear"):
            raise ConfigError(f"unknown mu rule {self.mu_rule!r}")
        if self.rho_rule not in ("fixed", "linear"):
            raise ConfigError(f"unknown rho rule {self.rho_rule!r}")

    def eta(self, t: int) -> float:
        if self.eta_rule == "constant":
            return self.eta0
        if self.eta_rule == "cosine":
            a = min(t, self.T) / self.T if self.T else 1.0
            return 0.5 * self.eta0 * (1.0 + math.cos(math.pi * a))
        if self.eta_rule == "step":
            every = self.eta_every or max(1, self.T // 3)
            return self.eta0 * self.eta_gamma ** (t // every)
        return self.eta0 / math.sqrt(t + 1)

    def mu(self, t: int) -> float:
        if self.mu_rule == "fixed":
            return self.mu0
        if self.mu_rule == "linear":
            return linear_ramp(self.mu0, self.muT, t, self.T)
        # Neumaier-compensated running sum keeps mu(t) - mu(0) within an ulp of sum(eta)
        acc, err = self._acc, self._acc_err
        while len(acc) <= t:
            total, eta = acc[-1], self.eta(len(acc) - 1)
            new = total + eta
            if abs(total) >= abs(eta):
                c = (total - new) + eta
            else:
                c = (eta - new) + total
            err.append(err[-1] + c)
            acc.append(new)
        return acc[t] + err[t]

    def rho(self, t: int) -> float:
        if self.rho_rule == "fixed":
            return self.rho0
        return linear_ramp(self.rho0, self.rhoT, t, self.T)


def schedule_mu(schedule: Schedule, t: int) -> float:
    """mu_t in the textbook indexing.

    For the accumulate rule ``t`` is 1-based (mu_1 = 1, mu_t = 1 + sum_{k<t} eta_k);
    for linear ramps ``t`` runs over [0, T] and is clamped beyond T.
    """
    if schedule.mu_rule == "accumulate":
        if t < 1:
            raise ValueError("accumulated mu_t is defined for t >= 1")
        return schedule.mu(t - 1)
    return schedule.mu(t)


# ---------------------------------------------------------------- state and rules

@dataclass
class TrainerState:
    w_star: list
    schedule: Schedule
    rule: str = "pcpp"
    seed: int = 0
    t: int = 0
    w: list = field(default_factory=list)
    momentum: float = 0.0
    clip: float | None = None
    velocity: list | None = None
    last: dict | None = None    # eta, mu, w, w_star, direction of the latest update

    @classmethod
    def create(cls, weights, schedule: Schedule, rule: str = "pcpp", **kw) -> "TrainerState":
        if isinstance(weights, np.ndarray):
            weights = [weights]
        ws = [np.array(w, dtype=np.float64) for w in weights]
        return cls(ws, schedule, rule, w=[w.copy() for w in ws], **kw)


def _check_finite(grads, t):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at step {t}", step=t)


def _direction(state: TrainerState, d: list) -> list:
    if state.clip is not None:
        out = []
        for g in d:
            n = float(np.linalg.norm(g))
            out.append(g * (state.clip / n) if n > state.clip else g)
        d = out
    if state.momentum:
        if state.velocity is None:
            state.velocity = [np.zeros_like(g) for g in d]
        state.velocity = [state.momentum * v + g for v, g in zip(state.velocity, d)]
        d = state.velocity
    return d


def _finish(state: TrainerState, base: list, w: list, d: list, eta: float, mu: float, record: bool):
    if record:
        state.last = {"eta": eta, "mu": mu, "w": [x.copy() for x in w],
                      "w_star": [x.copy() for x in state.w_star], "direction": [x.copy() for x in d]}
    state.w_star = [b - eta * g for b, g in zip(base, d)]
    state.w = w
    state.t += 1
    return state


def pair_param(pair: QuantizerPair, schedule: Schedule, t: int) -> float:
    """The value driving ``pair.mu`` at step t: rho for LP-based pairs, mu otherwise."""
    if pair.name == "pc":
        return schedule.rho(t) if schedule.rho_rule != "fixed" else pair.mu
    return schedule.mu(t) if schedule.mu_rule != "fixed" else pair.mu


def pcpp_step(state: TrainerState, pair: QuantizerPair, grad_fn: GradFn, record: bool = False):
    t = state.t
    eta = state.schedule.eta(t)
    p = pair.at(pair_param(pair, state.schedule, t))
    w = [p.F(x) for x in state.w_star]
    grads = grad_fn(w)
    _check_finite(grads, t)
    d = _direction(state, [p.B(x) * g for x, g in zip(state.w_star, grads)])
    return _finish(state, state.w_star, w, d, eta, p.mu, record)


def _prox_at(prox: ProximalQuantizer | Callable, schedule: Schedule, t: int):
    if isinstance(prox, ProximalQuantizer) and prox.kind == "linear" and schedule.rho_rule != "fixed":
        return replace(prox, rho=schedule.rho(t))
    return prox


def pc_step(state: TrainerState, prox, grad_fn: GradFn, record: bool = False):
    """ProxConnect: gradient at P(w*), applied to w*."""
    t = state.t
    eta = state.schedule.eta(t)
    P = _prox_at(prox, state.schedule, t)
    w = [np.asarray(P(x), dtype=np.float64) for x in state.w_star]
    grads = grad_fn(w)
    _check_finite(grads, t)
    d = _direction(state, list(grads))
    return _finish(state, state.w_star, w, d, eta, state.schedule.mu(t), record)


def bc_step(state: TrainerState, grad_fn: GradFn, record: bool = False):
    """BinaryConnect: gradient at sign(w*), applied to w*."""
    return pc_step(state, sign_q, grad_fn, record)


def pq_step(state: TrainerState, prox, grad_fn: GradFn, record: bool = False):
    """ProxQuant: gradient at P(w*), applied to P(w*)."""
    t = state.t
    eta = state.schedule.eta(t)
    P = _prox_at(prox, state.schedule, t)
    w = [np.asarray(P(x), dtype=np.float64) for x in state.w_star]
    grads = grad_fn(w)
    _check_finite(grads, t)
    d = _direction(state, list(grads))
    return _finish(state, w, w, d, eta, state.schedule.mu(t), record)


def rpc_step(state: TrainerState, prox, grad_fn: GradFn, record: bool = False):
    """Reversed ProxConnect: gradient at w*, applied to P(w*)."""
    t = state.t
    eta = state.schedule.eta(t)
    P = _prox_at(prox, state.schedule, t)
    w = [np.asarray(P(x), dtype=np.float64) for x in state.w_star]
    grads = grad_fn([x.copy() for x in state.w_star])
    _check_finite(grads, t)
    d = _direction(state, list(grads))
    return _finish(state, w, w, d, eta, state.schedule.mu(t), record)


# ---------------------------------------------------------------- Bregman diagnostics

R_KINDS = ("zero", "indicator")


def _in_q(w) -> bool:
    return bool(np.all(np.abs(np.asarray(w)) == 1.0))


def _r(w, r_kind: str) -> float:
    if r_kind == "zero":
        return 0.0
    return 0.0 if _in_q(w) else math.inf


def bregman_delta(w, w_next, w_star_next, mu_next: float, r_kind: str = "zero") -> float:
    """r_tau(w) - r_tau(w_next) - <w - w_next, w*_next> with r_tau = mu r + |.|^2 / 2."""
    if r_kind not in R_KINDS:
        raise ConfigError(f"r_kind must be one of {R_KINDS}")
    w = np.ravel(np.asarray(w, dtype=np.float64))
    w_next = np.ravel(np.asarray(w_next, dtype=np.float64))
    w_star_next = np.ravel(np.asarray(w_star_next, dtype=np.float64))
    r_w, r_n = _r(w, r_kind), _r(w_next, r_kind)
    if math.isinf(r_w) or math.isinf(r_n):
        return math.inf
    rt_w = mu_next * r_w + 0.5 * float(w @ w)
    rt_n = mu_next * r_n + 0.5 * float(w_next @ w_next)
    return rt_w - rt_n - float((w - w_next) @ w_star_next)


@dataclass
class TrajectoryRecord:
    t: int
    eta: float
    mu: float
    w: np.ndarray        # quantized iterate w_t (flattened)
    w_star: np.ndarray   # continuous iterate w*_t
    g: np.ndarray        # applied update direction at step t


@dataclass
class BregmanRecord:
    t: int
    delta: float          # Delta_t(w_ref)
    gap_summand: float    # eta_t [<w_t - w, g_t> + r(w_t) - r(w)]
    running_bound: float  # RHS of the window inequality up to t


@dataclass
class AuditResult:
    s: int
    t: int
    records: list
    lhs: float
    rhs: float
    slack: float
    convex: dict = field(default_factory=dict)


def record_run(state: TrainerState, step: Callable[[TrainerState], TrainerState], steps: int) -> list:
    """Run ``steps`` updates (each ``step(state)`` must pass ``record=True``) and collect records."""
    out = []
    for _ in range(steps):
        t = state.t
        step(state)
        last = state.last
        out.append(TrajectoryRecord(
            t + 1, last["eta"], last["mu"],
            np.concatenate([x.ravel() for x in last["w"]]),
            np.concatenate([x.ravel() for x in last["w_star"]]),
            np.concatenate([x.ravel() for x in last["direction"]]),
        ))
    return out


def gap_audit(trajectory: Sequence[TrajectoryRecord], w_ref, r_kind: str = "zero",
              s: int | None = None, t: int | None = None,
              f: Callable | None = None) -> AuditResult:
    """Evaluate both sides of the Bregman window bound over steps [s, t].

    Records are 1-indexed by position (record k holds step k).  Delta_tau needs
    step tau + 1, so ``t`` is at most ``len(trajectory) - 1``.  With ``f`` and
    ``r_kind == 'zero'`` the convex min-iterate and averaged-iterate bounds are
    also checked.
    """
    n = len(trajectory)
    s = 1 if s is None else s
    t = n - 1 if t is None else t
    if t > n - 1:
        raise ValueError(f"window end {t} needs step {t + 1}; trajectory has {n} steps")
    w_ref = np.ravel(np.asarray(w_ref, dtype=np.float64))
    rec = lambda k: trajectory[k - 1]  # noqa: E731

    def delta(k, w):
        nxt = rec(k + 1)
        return bregman_delta(w, nxt.w, nxt.w_star, nxt.mu, r_kind)

    if s > t:
        return AuditResult(s, t, [], 0.0, 0.0, 0.0)

    r_ref = _r(w_ref, r_kind)
    head = delta(s - 1, w_ref)  # Delta_0 pairs with step 1
    lhs, acc, records = 0.0, 0.0, []
    for k in range(s, t + 1):
        r_k = rec(k)
        summand = r_k.eta * (float((r_k.w - w_ref) @ r_k.g) + _r(r_k.w, r_kind) - r_ref)
        lhs += summand
        acc += delta(k, r_k.w)
        d_ref = delta(k, w_ref)
        records.append(BregmanRecord(k, d_ref, summand, head - d_ref + acc))
    rhs = records[-1].running_bound
    result = AuditResult(s, t, records, lhs, rhs, rhs - lhs)

    if f is not None and r_kind == "zero":
        etas = np.array([rec(k).eta for k in range(s, t + 1)])
        ws = np.stack([rec(k).w for k in range(s, t + 1)])
        gsq = np.array([float(rec(k).g @ rec(k).g) for k in range(s, t + 1)])
        denom = float(etas.sum())
        bound = (head + float(np.sum(etas ** 2 / 2 * gsq))) / denom
        f_ref = float(f(w_ref))
        min_gap = min(float(f(w)) for w in ws) - f_ref
        w_bar = (etas[:, None] * ws).sum(axis=0) / denom
        avg_gap = float(f(w_bar)) - f_ref
        result.convex = {
            "bound_general": rhs / denom,
            "bound": bound,
            "min_gap": min_gap,
            "avg_gap": avg_gap,
            "slack_general": rhs / denom - min_gap,
            "slack_min": bound - min_gap,
            "slack_avg": bound - avg_gap,
        }
    return result


# ---------------------------------------------------------------- trajectory file

def dump_trajectory(trajectory: Sequence[TrajectoryRecord], path, shapes=None, meta=None) -> Path:
    """Little-endian f64 records (t, eta, mu, w, w*, g) plus a JSON sidecar."""
    path = Path(path)
    dim = int(trajectory[0].w.size) if trajectory else 0
    rows = np.array([np.concatenate([[r.t, r.eta, r.mu], r.w, r.w_star, r.g]) for r in trajectory],
                    dtype="<f8").reshape(len(trajectory), 3 + 3 * dim)
    path.write_bytes(rows.tobytes())
    side = {"records": len(trajectory), "dim": dim,
            "fields": ["t", "eta", "mu", "w", "w_star", "g"],
            "shapes": shapes if shapes is not None else [[dim]],
            "dtype": "<f8"}
    if meta:
        side.update(meta)
    path.with_name(path.name + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_trajectory(path) -> tuple[list, dict]:
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    dim = side["dim"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    width = 3 + 3 * dim
    if raw.size != side["records"] * width:
        raise ValueError(f"trajectory {path} holds {raw.size} floats, sidecar promises "
                         f"{side['records']} x {width}")
    rows = raw.reshape(side["records"], width)
    out = [TrajectoryRecord(int(r[0]), float(r[1]), float(r[2]),
                            r[3:3 + dim].copy(), r[3 + dim:3 + 2 * dim].copy(), r[3 + 2 * dim:].copy())
           for r in rows]
    return out, side

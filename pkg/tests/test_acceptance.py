"""Acceptance criteria, one printed PASS/FAIL line each.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly
(``python tests/test_acceptance.py``).  Criteria 6 and 7 need the MNIST IDX
files; point ``MNIST_DIR`` at them.  Without the files those two criteria
fail with the reason stated, after printing what a desk-scale stand-in run
(sklearn's 8x8 digits) gives for orientation.
"""
import math
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from proxconnect import autodiff as ad
from proxconnect import quantizers as qz
from proxconnect.cli import main as cli_main
from proxconnect.data import Dataset, find_mnist
from proxconnect.decomposition import analyze_pair, derivative_rule_pair, integrate_P
from proxconnect.harness import ExperimentConfig, run_experiment
from proxconnect.nn import build_model, mlp_spec, QuantContext
from proxconnect.optim import (Schedule, TrainerState, bc_step, gap_audit, linear_ramp, pc_step,
                               pcpp_step, record_run, schedule_mu)
from proxconnect.packing import (memory_report, model_to_bqw, pack_weights, read_bqw,
                                 unpack_weights, write_bqw)

BW_ALGORITHMS = ("bc", "pc", "bnn", "bnn+", "bnn++")


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------- 1

def criterion_1():
    t0 = time.perf_counter()
    verdicts = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("bnn", "bnn+", "bnn++"):
            code = cli_main(["analyze", name, "--out", str(Path(tmp) / "p.csv")])
            verdicts[name] = (code, analyze_pair(qz.get_pair(name)).status)
    expected = {"bnn": "admits", "bnn+": "fails", "bnn++": "admits"}
    named_ok = all(verdicts[k] == (0, v) for k, v in expected.items())

    # (F, F') for every smooth forward of the zoo, over the parameter values used in training
    smooth = [(f, mu) for f in (qz.ss_forward, qz.ede_forward) for mu in (1.0, 5.0, 10.0, 30.0)]
    smooth += [(qz.poly_forward, a) for a in (0.5, 1.0, 2.0)]
    smooth_ok, stable = True, True
    for f, mu in smooth:
        pair = derivative_rule_pair(f, mu=mu)
        a, b = analyze_pair(pair), analyze_pair(pair, n_points=20001)
        smooth_ok &= a.admits
        stable &= a.status == b.status
    for name in qz.PAIR_NAMES:
        p = qz.get_pair(name)
        stable &= analyze_pair(p).status == analyze_pair(p, n_points=20001).status
    elapsed = time.perf_counter() - t0
    ok = named_ok and smooth_ok and stable and elapsed < 5.0
    return report(1, ok, f"named verdicts {({k: v[1] for k, v in verdicts.items()})}, "
                         f"{len(smooth)} smooth (F, F') pairs admit={smooth_ok}, "
                         f"stable under 2x refinement={stable}, {elapsed:.2f}s (limit 5s)")


# ---------------------------------------------------------------- 2

def criterion_2():
    curve = integrate_P(qz.bnn_pair(), -3.0, 3.0, 10001)
    sup = curve.support
    g, P = curve.grid[sup], curve.values[sup]
    c = P[0] + 1.0                       # integration constant fixed by P(-1) = -1
    oracle = np.where(g >= 0, 1.0, -1.0)  # prox of the BNN regularizer on [-1, 1]
    exact = bool(np.array_equal(P - c, oracle))
    step_at_zero = len(curve.jumps) == 1 and abs(curve.jumps[0].location) < 1e-8
    return report(2, exact and step_at_zero,
                  f"{int(sup.sum())} support points, max |P - c - oracle| = {np.max(np.abs(P - c - oracle)):.1e}, "
                  f"single jump at {curve.jumps[0].location:.1e}")


# ---------------------------------------------------------------- 3

def _fd(f, w, h):
    """Five-point central difference."""
    return (-f(w + 2 * h) + 8 * f(w + h) - 8 * f(w - h) + f(w - 2 * h)) / (12 * h)


def criterion_3():
    t0 = time.perf_counter()
    w = np.linspace(-3.0, 3.0, 6001)
    worst, worst_point, rows = 0.0, 0.0, []
    for name, fwd, bwd in (("bnn++", qz.ss_forward, qz.ss_backward),
                           ("ede+", qz.ede_forward, qz.ede_backward),
                           ("poly+", qz.poly_forward, qz.poly_backward)):
        for mu in (1.0, 5.0, 10.0, 30.0):
            h = 1e-7 / mu  # small: poly+ has kinks in F' where a wider stencil errs by O(h)
            fd = _fd(lambda v: fwd(v, mu), w, h)
            exact = bwd(w, mu)
            # normwise relative error; pointwise is undefined at the zeros of B
            rel = np.max(np.abs(fd - exact)) / np.max(np.abs(exact))
            big = np.abs(exact) > 1e-3 * np.max(np.abs(exact))
            point = np.max(np.abs(fd - exact)[big] / np.abs(exact[big]))
            worst, worst_point = max(worst, rel), max(worst_point, point)
            rows.append(rel)
    elapsed = time.perf_counter() - t0
    return report(3, worst < 1e-6 and elapsed < 1.0,
                  f"max relative error {worst:.1e} over {len(rows)} (map, mu) cases "
                  f"(pointwise where |B| > 1e-3 max|B|: {worst_point:.1e}), {elapsed:.3f}s (limit 1s)")


# ---------------------------------------------------------------- 4

def _mlp_problem(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((64, 10))
    y = rng.integers(0, 4, 64)
    w0 = [rng.standard_normal((10, 16)) * 0.4, rng.standard_normal((16, 4)) * 0.4]

    def grad(ws):
        a = ad.Tensor(ws[0], requires_grad=True)
        b = ad.Tensor(ws[1], requires_grad=True)
        ad.softmax_cross_entropy(ad.matmul(ad.relu(ad.matmul(ad.Tensor(x), a)), b), y).backward()
        return [a.grad, b.grad]
    return w0, grad


def _run(step, steps=100):
    w0, grad = _mlp_problem()
    s = TrainerState.create(w0, Schedule(T=steps, eta0=0.05, rho_rule="linear", rho0=0.01, rhoT=10.0),
                            momentum=0.9)
    for _ in range(steps):
        step(s, grad)
    return s.w_star


def criterion_4():
    lp = qz.ProximalQuantizer("linear", rho=0.01)
    a = _run(lambda s, g: pcpp_step(s, qz.pc_pair(0.01), g))
    b = _run(lambda s, g: pc_step(s, lp, g))
    c = _run(lambda s, g: pcpp_step(s, qz.bc_pair(), g))
    d = _run(lambda s, g: bc_step(s, g))
    pc_eq = all(np.array_equal(x, y) for x, y in zip(a, b))
    bc_eq = all(np.array_equal(x, y) for x, y in zip(c, d))
    moved = not np.array_equal(a[0], _mlp_problem()[0][0])
    return report(4, pc_eq and bc_eq and moved,
                  f"100 steps on a seeded 2-layer MLP: PC++(LP_rho, 1) == PC bitwise: {pc_eq}; "
                  f"PC++(sign, 1) == BC bitwise: {bc_eq}")


# ---------------------------------------------------------------- 5

def criterion_5():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    d = 10
    M = rng.standard_normal((d, d))
    A = M @ M.T / d + 0.1 * np.eye(d)
    b = rng.standard_normal(d)
    w_ref = np.linalg.solve(A, b)
    f = lambda w: 0.5 * w @ A @ w - b @ w  # noqa: E731
    state = TrainerState.create(rng.standard_normal(d), Schedule(T=500, eta0=0.05))
    traj = record_run(state, lambda s: pcpp_step(s, qz.fp_pair(), lambda ws: [A @ ws[0] - b], record=True), 500)
    worst = math.inf
    for _ in range(20):
        s, t = sorted(int(v) for v in rng.integers(1, len(traj), size=2))
        worst = min(worst, gap_audit(traj, w_ref, "zero", s, t).slack)
    full = gap_audit(traj, w_ref, "zero", 1, len(traj) - 1, f=f)
    avg_slack = full.convex["slack_avg"]
    elapsed = time.perf_counter() - t0
    return report(5, worst >= -1e-9 and avg_slack >= -1e-9 and elapsed < 5.0,
                  f"worst window slack {worst:.2e} over 20 windows, averaged-iterate bound slack "
                  f"{avg_slack:.3e}, {elapsed:.2f}s (limit 5s)")


# ---------------------------------------------------------------- 6, 7

def _digits():
    from sklearn.datasets import load_digits
    d = load_digits()
    x, y = (d.images / 16.0).reshape(-1, 1, 8, 8), d.target.astype(np.int64)
    idx = np.random.default_rng(0).permutation(len(y))
    return (Dataset(x[idx[:1400]], y[idx[:1400]], "digits", "train"),
            Dataset(x[idx[1400:]], y[idx[1400:]], "digits", "test"))


def _cnn_cfg(out, **kw):
    return ExperimentConfig(model="cnn", cnn_widths=[8, 16], cnn_hidden=64, out=str(out), **kw)


def _protocol_6(datasets, tmp, epochs, seeds):
    acc = {}
    t0 = time.perf_counter()
    for alg in ("fp",) + BW_ALGORITHMS:
        acc[alg] = float(np.mean([
            run_experiment(_cnn_cfg(Path(tmp) / f"{alg}-{s}", algorithm=alg, seed=s, epochs=epochs),
                           datasets)["final"]["test_acc"] for s in seeds]))
    return acc, time.perf_counter() - t0


def _verdict_6(acc, elapsed):
    fp = acc["fp"]
    within = {a: fp - acc[a] <= 0.03 for a in BW_ALGORITHMS}
    ok = fp >= 0.98 and all(within.values()) and acc["bnn++"] >= acc["bc"] and elapsed < 1800
    return ok, within


def _projected_mnist_minutes():
    """Time one epoch on 2,000 MNIST-shaped images and scale to the full protocol."""
    rng = np.random.default_rng(0)
    tr = Dataset(rng.random((2000, 1, 28, 28)), rng.integers(0, 10, 2000))
    te = Dataset(rng.random((10, 1, 28, 28)), rng.integers(0, 10, 10))
    with tempfile.TemporaryDirectory() as tmp:
        t0 = time.perf_counter()
        run_experiment(_cnn_cfg(Path(tmp) / "p", algorithm="bnn++", epochs=1), (tr, te))
        per_image = (time.perf_counter() - t0) / 2000
    return per_image * 60000 * 10 * 3 * (1 + len(BW_ALGORITHMS)) / 60


def criterion_6():
    mnist = find_mnist()
    with tempfile.TemporaryDirectory() as tmp:
        if mnist is None:
            acc, elapsed = _protocol_6(_digits(), tmp, epochs=10, seeds=(0, 1, 2))
            ok, within = _verdict_6(acc, elapsed)
            summary = ", ".join(f"{k}={v:.3f}" for k, v in acc.items())
            print(f"  stand-in (sklearn digits, same protocol): {summary}; "
                  f"stand-in verdict would be {'PASS' if ok else 'FAIL'}", flush=True)
            print(f"  projected full-MNIST runtime on this machine: {_projected_mnist_minutes():.0f} min",
                  flush=True)
            return report(6, False, "MNIST IDX files not available (set MNIST_DIR); criterion not evaluated")
        acc, elapsed = _protocol_6(mnist, tmp, epochs=10, seeds=(0, 1, 2))
    ok, within = _verdict_6(acc, elapsed)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in acc.items())
    return report(6, ok, f"3-seed mean test accuracy {summary}; within 3 points of fp: {within}; "
                         f"bnn++ >= bc: {acc['bnn++'] >= acc['bc']}; {elapsed / 60:.1f} min (limit 30)")


def _protocol_7(datasets, tmp):
    bwa = run_experiment(_cnn_cfg(Path(tmp) / "bwa", algorithm="bnn++", task_mode="BWA", epochs=10),
                         datasets)
    bwaa = run_experiment(_cnn_cfg(Path(tmp) / "bwaa", algorithm="bnn++", task_mode="BWAA", epochs=2,
                                   pipeline="fine-tune", checkpoint=str(Path(tmp) / "bwa" / "model.ckpt")),
                          datasets)
    rates = bwaa["overflow"]
    ok = bwa["final"]["test_acc"] >= 0.90 and bwaa["divergence"] is None and all(r < 0.05 for r in rates.values())
    return ok, bwa["final"]["test_acc"], bwaa["final"]["test_acc"], rates


def criterion_7():
    mnist = find_mnist()
    with tempfile.TemporaryDirectory() as tmp:
        if mnist is None:
            ok, a, b, rates = _protocol_7(_digits(), tmp)
            print(f"  stand-in (sklearn digits): BWA acc {a:.3f}, BWAA acc {b:.3f}, overflow {rates}; "
                  f"stand-in verdict would be {'PASS' if ok else 'FAIL'}", flush=True)
            return report(7, False, "MNIST IDX files not available (set MNIST_DIR); criterion not evaluated")
        ok, a, b, rates = _protocol_7(mnist, tmp)
    return report(7, ok, f"BWA test acc {a:.4f} (need 0.90); BWAA fine-tune acc {b:.4f}, "
                         f"per-layer overflow {rates} (need < 0.05)")


# ---------------------------------------------------------------- 8

def criterion_8():
    rng = np.random.default_rng(0)
    round_trip = True
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 12, size=rng.integers(1, 5)))
        s = float(np.float32(rng.uniform(1e-3, 2.0)))
        w = s * np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        round_trip &= bool(np.array_equal(unpack_weights(pack_weights(w, s)), w))
    model = build_model(mlp_spec((784, 1024, 1024, 10)), "BW", seed=0, keep_fp_ends=False)
    with tempfile.TemporaryDirectory() as tmp:
        path = write_bqw(Path(tmp) / "m.bqw", model_to_bqw(model, QuantContext(pair=qz.bc_pair())))
        rows, total_fp, total_file = memory_report(read_bqw(path))
        on_disk = path.stat().st_size
    ratio = total_fp / total_file
    ok = round_trip and total_file == on_disk and 30.0 <= ratio <= 32.0
    return report(8, ok, f"1000 random layers round-trip: {round_trip}; all-binarized "
                         f"{sum(r.numel for r in rows)}-weight model: {total_fp} B fp32 vs {on_disk} B file, "
                         f"ratio {ratio:.3f}")


# ---------------------------------------------------------------- 9

def criterion_9():
    worst = 0.0
    for rule in ("constant", "cosine", "step", "invsqrt"):
        s = Schedule(T=1000, eta0=0.1, eta_rule=rule, mu_rule="accumulate")
        for t in range(1, 1001):
            worst = max(worst, abs((schedule_mu(s, t + 1) - schedule_mu(s, 1)) - math.fsum(s.eta(k) for k in range(t))))
    acc5 = schedule_mu(Schedule(T=10, eta0=0.1, mu_rule="accumulate"), 5)
    mu_s = Schedule(T=777, mu_rule="linear", mu0=5.0, muT=30.0)
    rho_s = Schedule(T=777, rho_rule="linear", rho0=0.01, rhoT=10.0)
    ends = (mu_s.mu(0) == 5.0 and mu_s.mu(777) == 30.0 and rho_s.rho(0) == 0.01 and rho_s.rho(777) == 10.0
            and linear_ramp(0.01, 10.0, 0, 3) == 0.01 and linear_ramp(0.01, 10.0, 3, 3) == 10.0)
    ok = worst <= 1e-12 and ends and abs(acc5 - 1.4) <= 1e-12
    return report(9, ok, f"accumulate telescoping max error {worst:.1e} (limit 1e-12); mu_5 = {acc5!r}; "
                         f"ramp endpoints exact: {ends}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_acceptance(criterion, capsys):
    with capsys.disabled():
        print()
        ok = criterion()
    assert ok


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria pass")

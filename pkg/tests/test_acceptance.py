"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line with the measured quantities
before asserting.  Expensive experiment results are cached per module so the
criteria that share a trained model train it once.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from conftest import random_drrnn_instance, worst_gradient_error
from drmor import experiments as ex
from drmor.cli import main as cli_main
from drmor.config import parse_string, with_overrides
from drmor.drrnn import DrRnnModel, bptt_gradients, count_parameters
from drmor.problems import fractional_flow
from drmor.reduction import (assemble_snapshots, build_deim_operator,
                             compute_pod_basis, deim_select)
from drmor.uq import kde_estimate, kde_l1_distance, shared_grid

pytestmark = pytest.mark.slow

# restarts per DR-RNN fit; the kept run has the lowest training mse
RESTARTS = 4


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok
    return emit


def config(problem, **overrides):
    return with_overrides(parse_string(f"[problem]\nid = {problem}\n"), **overrides)


@lru_cache(maxsize=None)
def workspace(problem, dt=None):
    cfg = config(problem, dt=dt, restarts=RESTARTS)
    return ex.prepare(cfg)


@lru_cache(maxsize=None)
def drrnn_fit(problem, layers, multiplier=1):
    """Trained DR-RNN plus its test-split predictions and wall time."""
    ws = workspace(problem)
    _, test_idx = ex.split(ws.cfg)
    t0 = time.perf_counter()
    model, history = ex.fit_drrnn(ws, layers=layers, multiplier=multiplier)
    elapsed = time.perf_counter() - t0
    pred = ex.drrnn_predict(ws, model, test_idx, multiplier)
    ref = ws.fom.stacked()[test_idx][:, ::multiplier]
    return model, pred, ex.trajectory_mse(pred, ref), elapsed


def probe_kde_distance(values, reference):
    grid = shared_grid([values, reference])
    return kde_l1_distance(kde_estimate(values, grid), kde_estimate(reference, grid))


# 1 -----------------------------------------------------------------------------------


def test_criterion_1_layer_accuracy(report):
    mse = {}
    elapsed = 0.0
    for K in (1, 2, 4):
        _, _, mse[K], t = drrnn_fit("P1", K)
        elapsed += t
    limits = {1: 1e-2, 2: 1e-3, 4: 1e-4}
    within = {K: mse[K] <= limits[K] for K in limits}
    ordered = mse[4] < mse[2] < mse[1]
    fast = elapsed < 300
    ok = all(within.values()) and ordered and fast
    report(1, ok, f"P1 test mse K1={mse[1]:.3e} (<=1e-2 {within[1]}), "
                  f"K2={mse[2]:.3e} (<=1e-3 {within[2]}), K4={mse[4]:.3e} (<=1e-4 {within[4]}), "
                  f"ordered={ordered}, training time {elapsed:.0f}s (<300s {fast})")
    assert ok


# 2 -----------------------------------------------------------------------------------


def test_criterion_2_parameter_counts(report):
    counts = [count_parameters(DrRnnModel.zeros(3, K)) for K in (1, 2, 4)]
    ok = counts == [3, 4, 6]
    report(2, ok, f"d(K=1, 2, 4) = {counts}, expected [3, 4, 6]")
    assert ok


# 3 -----------------------------------------------------------------------------------


@lru_cache(maxsize=None)
def rnn_test_mse(problem):
    ws = workspace(problem)
    _, history = ex.fit_rnn(ws)
    return history.test_mse[-1]


def test_criterion_3_baseline_gap(report):
    parts = []
    ok = True
    for problem in ("P1", "P2", "P3"):
        rnn = rnn_test_mse(problem)
        dr2 = drrnn_fit(problem, 2)[2]
        ratio = rnn / dr2
        ok &= bool(ratio >= 100)
        parts.append(f"{problem} RNN_n {rnn:.3e} / DR-RNN2 {dr2:.3e} = {ratio:.3g}")
    report(3, ok, "; ".join(parts) + " (each ratio >= 100)")
    assert ok


# 4 -----------------------------------------------------------------------------------


def test_criterion_4_large_time_steps(report):
    parts = []
    ok = True
    for problem in ("P1", "P2", "P3"):
        ws = workspace(problem)
        _, test_idx = ex.split(ws.cfg)
        var, tj, _ = ex.probe_location(ws.cfg)
        fine = ws.fom.stacked()[test_idx][:, tj, var]
        dist = {}
        finite = True
        for K, mult in ((4, 2), (4, 5), (2, 5)):
            pred = drrnn_fit(problem, K, mult)[1]
            if K == 4:
                finite &= bool(np.isfinite(pred).all()) and pred.shape[0] == 1000
            probe = pred[:, -1, var]
            dist[K, mult] = probe_kde_distance(probe, fine) if np.isfinite(probe).all() else np.inf
        better = dist[4, 2] < dist[2, 5] and dist[4, 5] < dist[2, 5]
        ok &= finite and better
        parts.append(f"{problem} finite={finite} L1 K4x2={dist[4, 2]:.4f} K4x5={dist[4, 5]:.4f} "
                     f"K2x5={dist[2, 5]:.4f}")
    report(4, ok, "; ".join(parts) + " (K4 distances below K2x5)")
    assert ok


# 5 -----------------------------------------------------------------------------------


POD_RANKS = {"P4": (2, 4, 5, 7, 15), "P5": (15, 35, 55)}


def _pod_identities(problem):
    """Identity errors at every rank the experiments use.

    ``scale`` is the size of the float64 rounding in the computed residual,
    ``(eps |X|_F)^2``, relative to the tail; it bounds what any check can see.
    """
    ws = workspace(problem, 0.03 if problem == "P5" else None)
    train_idx, _ = ex.split(ws.cfg)
    X = assemble_snapshots([ws.fom.trajectories[i] for i in train_idx]).data
    full = compute_pod_basis(X, max(POD_RANKS[problem]))
    norm2 = np.linalg.norm(X) ** 2
    rows = []
    for r in POD_RANKS[problem]:
        U = full.truncate(r).basis
        ortho = np.abs(U.T @ U - np.eye(r)).max()
        lhs = np.linalg.norm(X - U @ (U.T @ X)) ** 2
        rhs = np.sum(full.singular_values[r:] ** 2)
        rel = abs(lhs - rhs) / max(rhs, np.finfo(float).tiny)
        scale = np.finfo(float).eps ** 2 * norm2 / max(rhs, np.finfo(float).tiny)
        rows.append((r, ortho, rel, scale))
    return X.shape, rows


def test_criterion_5_pod_identities(report):
    parts = []
    ok = True
    t0 = time.perf_counter()
    for problem in ("P4", "P5"):
        shape, rows = _pod_identities(problem)
        for r, ortho, rel, scale in rows:
            ok &= bool(ortho < 1e-10 and rel < 1e-8)
        parts.append(f"{problem} X{shape}: " + ", ".join(
            f"r={r} ortho {o:.1e} tail rel {rel:.1e} (rounding scale {sc:.0e})"
            for r, o, rel, sc in rows))
    report(5, ok, "; ".join(parts) + f" (limits 1e-10 / 1e-8; {time.perf_counter() - t0:.1f}s)")
    assert ok


# 6 -----------------------------------------------------------------------------------


def test_criterion_6_deim_identities(report):
    ws = workspace("P5", 0.03)
    train_idx, _ = ex.split(ws.cfg)
    trajs = [ws.fom.trajectories[i] for i in train_idx]
    V = compute_pod_basis(assemble_snapshots(trajs, map=ex.nonlinearity_map(ws.cfg)),
                          ws.cfg.deim_m).basis
    basis = compute_pod_basis(assemble_snapshots(trajs), ws.cfg.rank)
    op = build_deim_operator(V, deim_select(V), basis)
    rng = np.random.default_rng(0)
    interp = max(np.abs(op.approximate(F)[op.indices] - F[op.indices]).max()
                 for F in rng.normal(size=(50, V.shape[0])))
    span = max(np.abs(op.approximate(V @ c) - V @ c).max() for c in rng.normal(size=(50, V.shape[1])))
    # hand run: column 1 peaks at row 0; c = 0 so the residual of column 2 is
    # (0, 1, 0.5, -0.1) and peaks at row 1
    small = deim_select(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.2, -0.1]])).tolist()
    ok = interp < 1e-10 and span < 1e-10 and small == [0, 1]
    report(6, ok, f"P5 m={op.m}: row interpolation error {interp:.1e}, span recovery error "
                  f"{span:.1e} (both < 1e-10); 4x2 instance -> {small} (expected [0, 1])")
    assert ok


# 7 -----------------------------------------------------------------------------------


def _rom_mse(ws, basis, deim=None):
    _, test_idx = ex.split(ws.cfg)
    res, _ = ex.run_rom(ws.cfg, ws.samples[test_idx], basis, deim)
    return ex.trajectory_mse(res.stacked(), ws.fom.stacked()[test_idx])


def _mass_and_bounds(ws):
    cfg = ws.cfg
    tol = 1e-9      # Newton residual tolerance
    worst = 0.0
    lo, hi = ex.two_phase_spec(cfg).s_bounds
    states = ws.fom.stacked()
    for i, phi in enumerate(ws.samples[:, 0]):
        spec = ex.two_phase_spec(cfg, phi)
        s = states[i]
        stored = spec.porosity * spec.dx * np.sum(np.diff(s, axis=0), axis=1)
        produced = -spec.q_prod * fractional_flow(s[1:, -1], spec)[0]
        flux = cfg.dt * (spec.q_inj - produced)
        # |imbalance| <= phi dx sqrt(n) |r| for a converged step
        allowed = spec.porosity * spec.dx * np.sqrt(spec.n_cells) * tol
        worst = max(worst, float(np.max(np.abs(stored - flux)) / allowed))
    in_bounds = bool(states.min() >= lo - 1e-9 and states.max() <= hi + 1e-9)
    return worst, in_bounds, float(states.min()), float(states.max())


def test_criterion_7_monotone_rom_error(report):
    p4 = workspace("P4")
    full4 = compute_pod_basis(assemble_snapshots(
        [p4.fom.trajectories[i] for i in ex.split(p4.cfg)[0]]), 15)
    mse4 = [_rom_mse(p4, full4.truncate(r)) for r in (2, 4, 5, 7, 15)]
    mono4 = all(b <= a for a, b in zip(mse4, mse4[1:]))

    p5 = workspace("P5", 0.03)
    train_idx, _ = ex.split(p5.cfg)
    trajs = [p5.fom.trajectories[i] for i in train_idx]
    full5 = compute_pod_basis(assemble_snapshots(trajs), 55)
    V = compute_pod_basis(assemble_snapshots(trajs, map=ex.nonlinearity_map(p5.cfg)), 35).basis
    idx = deim_select(V)
    mse5, gal5 = [], []
    for r in (15, 35, 55):
        basis = full5.truncate(r)
        mse5.append(_rom_mse(p5, basis, build_deim_operator(V, idx, basis)))
        gal5.append(_rom_mse(p5, basis))
    mono5 = all(b <= a for a, b in zip(mse5, mse5[1:]))
    mass, bounded, smin, smax = _mass_and_bounds(p5)
    conserved = mass <= 1.0
    ok = mono4 and mono5 and conserved and bounded
    fmt = lambda v: ", ".join(f"{x:.3e}" for x in v)  # noqa: E731
    report(7, ok, f"P4 POD mse r=2,4,5,7,15: [{fmt(mse4)}] monotone={mono4}; "
                  f"P5 POD-DEIM(m=35) mse r=15,35,55: [{fmt(mse5)}] monotone={mono5} "
                  f"(Galerkin: [{fmt(gal5)}]); mass imbalance {mass:.2f} x Newton bound "
                  f"(<= 1 {conserved}); s in [{smin:.4f}, {smax:.4f}] bounded={bounded}")
    assert ok


# 8 -----------------------------------------------------------------------------------


def test_criterion_8_gradient_suite(report):
    t0 = time.perf_counter()
    errors = []
    for seed in range(100):
        model, data = random_drrnn_instance(np.random.default_rng(10_000 + seed))
        errors.append(worst_gradient_error(model, data, bptt_gradients(model, data)))
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    ok = worst < 1e-5 and elapsed < 30
    report(8, ok, f"100 random instances: worst relative error {worst:.2e} (< 1e-5), "
                  f"{elapsed:.1f}s (< 30s)")
    assert ok


# 9 -----------------------------------------------------------------------------------


def test_criterion_9_drrnn_as_rom(report):
    ws = workspace("P4")
    _, test_idx = ex.split(ws.cfg)
    pod = _rom_mse(ws, ws.basis)
    _, pred, dr, _ = drrnn_fit("P4", 4)
    var, tj, label = ex.probe_location(ws.cfg)
    dist = probe_kde_distance(pred[:, tj, var], ws.fom.stacked()[test_idx][:, tj, var])
    close = dr <= 10 * pod
    ok = close and dist < 0.1
    report(9, ok, f"P4 DR-RNN4 (r=15) mse {dr:.3e} vs POD r=15 mse {pod:.3e} "
                  f"(ratio {dr / pod:.3g}, <= 10 {close}); KDE L1 at {label} = {dist:.4f} (< 0.1)")
    assert ok


# 10 ----------------------------------------------------------------------------------


def test_criterion_10_stability_check(report, tmp_path, capsys):
    ini = tmp_path / "p5.ini"
    ini.write_text("[problem]\nid = P5\n[grid]\ndt = 0.03\n")
    status = cli_main(["stability-check", "--config", str(ini), "--out", str(tmp_path)])
    out = capsys.readouterr().out
    bound = float(out.split("dt <= ")[1].split()[0])
    ws = workspace("P5", 0.03)
    converged = not ws.fom.failures and bool(np.isfinite(ws.fom.stacked()).all())
    ok = status == 0 and bound < 0.03 and converged
    report(10, ok, f"stability-check bound dt <= {bound:.5f} (< 0.03); implicit FOM at dt=0.03: "
                   f"{len(ws.fom) - len(ws.fom.failures)}/{len(ws.fom)} runs converged")
    assert ok

"""Acceptance criteria 1-9; each test prints one PASS/FAIL line."""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from submhe.analysis import empirical_rges_check, gain_table, reactor_theory_params
from submhe.harness import RunConfig, monte_carlo, run_single
from submhe.mhe import CostWeights, Decision, Window
from submhe.model import linear_model, reactor_model, reactor_observer_domain
from submhe.observer import contraction_check, derive_rges_constants, eioss_slacks, reactor_observer
from submhe.solver import NlpView, SolverSettings, brute_force_reference, solve

# every record produced here is re-checked by criterion 4
_RECORDS = []


def _report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")


def _keep(records, project=True):
    _RECORDS.extend((r, project) for r in records)
    return records


def test_criterion_1_observer_certificate(capsys):
    t0 = time.perf_counter()
    obs, sys_ = reactor_observer(), reactor_model()
    cert = contraction_check(obs, sys_, reactor_observer_domain())
    C = derive_rges_constants(obs, cert)
    dt = time.perf_counter() - t0
    ok_norm = cert.valid and cert.max_vertex_norm <= 0.985 + 1e-9
    ok_consts = all(abs(c - e) <= 0.005 * e for c, e in zip(C, (4.282, 4.347, 1.322)))
    ok = ok_norm and ok_consts and dt < 1.0
    _report(capsys, 1, ok, f"max vertex norm {cert.max_vertex_norm:.6f}, (C_p, C_w, C_v) = "
                           f"({C[0]:.4f}, {C[1]:.4f}, {C[2]:.4f}), {dt:.2f} s")
    assert ok


TABLE = {
    ("nominal", "quadratic"): (64.95, 69.24, 21.05, 15.17, 277),
    ("nominal", "discounted"): (36.55, 40.83, 12.42, 8.54, 239),
    ("observer", "quadratic"): (193.35, 197.64, 60.10, 29.37, 349),
    ("observer", "discounted"): (87.48, 91.76, 27.91, 10.00, 296),
}


def test_criterion_2_gain_table(capsys):
    t0 = time.perf_counter()
    params = reactor_theory_params()  # H = sqrt(3), kappa = |K|_2, F from vertex analysis
    reports = {(r.variant, r.cost): r for r in gain_table(params)}
    dt = time.perf_counter() - t0
    bad = []
    for key, ref in TABLE.items():
        r = reports[key]
        got = (r.C1, r.C2, r.C3, r.C_eps, r.T_min)
        for name, g, e in zip(("C1", "C2", "C3", "C_eps"), got[:4], ref[:4]):
            if abs(g - e) > 0.10 * e:
                bad.append(f"{key[0]}/{key[1]} {name} {g:.2f} vs {e}")
        if abs(got[4] - ref[4]) > 10:
            bad.append(f"{key[0]}/{key[1]} T_min {got[4]} vs {ref[4]}")
    order_ok = all(
        reports[(v, "discounted")].__getattribute__(c) < reports[(v, "quadratic")].__getattribute__(c)
        for v in ("nominal", "observer") for c in ("C1", "C2", "C3")
    )
    tm = [reports[k].T_min for k in
          [("nominal", "discounted"), ("nominal", "quadratic"), ("observer", "discounted"), ("observer", "quadratic")]]
    tmin_order_ok = tm[0] < tm[1] < tm[2] < tm[3]
    ok = not bad and order_ok and tmin_order_ok and dt < 1.0
    detail = (f"F={params.F:.4f} H={params.H:.4f} kappa={params.kappa:.4f}; {20 - len(bad)}/20 reference cells in tolerance; "
              f"orderings {'hold' if order_ok and tmin_order_ok else 'violated'} (T_min {tm}); {dt:.2f} s")
    if bad:
        detail += "; out of tolerance: " + ", ".join(bad[:4]) + (" ..." if len(bad) > 4 else "")
    _report(capsys, 2, ok, detail)
    assert ok


@pytest.fixture(scope="module")
def case_study():
    t0 = time.perf_counter()
    cells = {
        "observer": RunConfig(candidate_kind="luenberger", budget=0, T=None),
        "i0": RunConfig(budget=0),
        "i2": RunConfig(budget=2),
        "q50": RunConfig(budget=50),
        "d50": RunConfig(budget=50, cost_kind="discounted"),
    }
    out = {}
    for name, cfg in cells.items():
        table, recs = monte_carlo(cfg)
        _keep(recs, cfg.candidate_kind != "luenberger")
        out[name] = table.rows[0]
    return out, time.perf_counter() - t0


def test_criterion_3_case_study(case_study, capsys):
    rows, dt = case_study
    sse = {k: r.SSE for k, r in rows.items()}
    a = 4.5 <= sse["observer"] <= 8.5
    b = 0.5 <= sse["i2"] <= 1.5
    c = sse["i2"] < sse["i0"] < sse["observer"]
    d = rows["d50"].SNE < rows["q50"].SNE
    ok = a and b and c and d and dt < 120
    _report(capsys, 3, ok,
            f"SSE observer {sse['observer']:.3f} [{a}], i=2 {sse['i2']:.3f} [{b}], i=0 {sse['i0']:.3f} chain [{c}]; "
            f"SNE(i=50) discounted {rows['d50'].SNE:.3f} < quadratic {rows['q50'].SNE:.3f} [{d}]; {dt:.1f} s")
    assert ok


@pytest.fixture(scope="module")
def rges_runs():
    t0 = time.perf_counter()
    params = reactor_theory_params()
    out = []
    for r in gain_table(params):
        cfg = RunConfig(N=3, T=r.T_min, cost_kind=r.cost, candidate_kind=r.variant, budget=2,
                        sim_length=2 * r.T_min, n_runs=20)
        recs = [run_single(cfg, k, keep_eps_log=True) for k in range(cfg.n_runs)]
        _keep(recs)
        out.append((r, recs))
    return out, time.perf_counter() - t0


def test_criterion_5_rges_bound(rges_runs, capsys):
    runs, dt0 = rges_runs
    t0 = time.perf_counter()
    worst = {}
    for rep, recs in runs:
        worst[rep.tag] = min(float(empirical_rges_check(rec, rep).min()) for rec in recs)
    dt = dt0 + time.perf_counter() - t0
    ok = all(m >= 0 for m in worst.values()) and dt < 300
    _report(capsys, 5, ok, "min margin " + ", ".join(f"{k} {v:.3g}" for k, v in worst.items()) + f"; {dt:.1f} s")
    assert ok


def test_criterion_6_eioss(capsys):
    s = eioss_slacks(reactor_observer(), reactor_model(), reactor_observer_domain(), n_samples=10_000, seed=2024)
    ok = s.min() >= -1e-9
    _report(capsys, 6, ok, f"min slack {s.min():.4g} over {s.size} samples")
    assert ok


def test_criterion_7_oracle(capsys):
    windows = []
    for rep in range(20):
        got = []
        run_single(RunConfig(N=1, T=5, budget=0, sim_length=41, master_seed=7), rep,
                   on_problem=lambda v, c: got.append((v, c)))
        windows += got[3::4][:10]
    hits = 0
    for view, cand in windows:
        _, info = solve(view, cand, SolverSettings(budget=50))
        _, ref = brute_force_reference(view, candidate=cand)
        hits += (info.cost - ref) <= 1e-4 * abs(ref)
    frac = hits / len(windows)

    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    Cm = np.array([[1.0, 0.5]])
    sys_ = linear_model(A, Cm)
    rng = np.random.default_rng(0)
    ys = rng.normal(0, 1, (3, 1))
    prior = rng.normal(0, 1, 2)

    w = CostWeights(2.0, 5.0, 3.0, 7.0)
    view = NlpView(sys_, Window(3, 3, 5, np.zeros((3, 0)), ys, np.zeros(2)), prior, w, "quadratic")
    dec, _ = solve(view, Decision.zeros(np.zeros(2), 3, 2, 1), SolverSettings(budget=1, damping=1e-15))
    theta = _least_squares_oracle(A, Cm, w, ys, prior)
    gn_err = float(np.max(np.abs(dec.vector() - theta)))
    ok = len(windows) == 200 and frac >= 0.95 and gn_err <= 1e-8
    _report(capsys, 7, ok, f"{hits}/{len(windows)} windows within 1e-4 of the reference ({frac:.1%}); "
                           f"linear toy GN step error {gn_err:.2e}")
    assert ok


def _least_squares_oracle(A, C, w, ys, prior):
    N, nx = ys.shape[0], A.shape[0]
    dim = nx + N * nx + N
    rows, rhs = [], []
    for i in range(nx):
        e = np.zeros(dim)
        e[i] = 1
        rows.append(math.sqrt(w.c_p) * e)
        rhs.append(math.sqrt(w.c_p) * prior[i])
    for j in range(N * nx + N):
        e = np.zeros(dim)
        e[nx + j] = 1
        s = w.c_w if j < N * nx else w.c_v
        rows.append(math.sqrt(s) * e)
        rhs.append(0.0)
    for k in range(N):
        row = np.zeros(dim)
        row[:nx] = (C @ np.linalg.matrix_power(A, k))[0]
        for j in range(k):
            row[nx + j * nx: nx + (j + 1) * nx] = (C @ np.linalg.matrix_power(A, k - 1 - j))[0]
        row[nx + N * nx + k] = 1.0
        rows.append(math.sqrt(w.c_y) * row)
        rhs.append(math.sqrt(w.c_y) * ys[k, 0])
    M, b = np.array(rows), np.array(rhs)
    return np.linalg.solve(M.T @ M, M.T @ b)


def test_criterion_8_reinitialization(case_study, capsys):
    rows, _ = case_study
    table, recs = monte_carlo(RunConfig(budget=2, T=None))
    _keep(recs)
    sse_t, sse_5 = table.rows[0].SSE, rows["i2"].SSE
    ok = sse_5 * 1.5 <= sse_t
    _report(capsys, 8, ok, f"SSE T=5 {sse_5:.3f}, T=t {sse_t:.3f}, ratio {sse_t / sse_5:.2f}")
    assert ok


def test_criterion_9_determinism(tmp_path, capsys):
    flags = ["-m", "submhe.cli", "simulate", "--model", "reactor", "-N", "3", "-T", "5", "--cost", "quadratic",
             "--candidate", "nominal", "--iters", "2", "--runs", "100", "--seed", "42"]
    outs = []
    for name, workers in (("a1", 1), ("b1", 1), ("a8", 8), ("b8", 8)):
        path = tmp_path / f"{name}.csv"
        subprocess.run([sys.executable, *flags, "--out", str(path), "--workers", str(workers)], check=True,
                       capture_output=True)
        outs.append(path.read_bytes())
    ok = outs[0] == outs[1] and outs[2] == outs[3] and outs[0] == outs[2]
    _report(capsys, 9, ok, f"4 CSVs ({len(outs[0])} bytes) byte-identical across repeat and 1/8 workers: {ok}")
    assert ok


def test_criterion_4_invariants(case_study, rges_runs, capsys):
    # runs after 3, 5 and 8 so every acceptance record is covered
    steps = 0
    bad = 0
    for rec, project in _RECORDS:
        steps += len(rec)
        bad += int(np.sum(rec.cost_accepted > rec.cost_candidate))
        if project:
            bad += int(np.sum(np.any((rec.x_hat < 0.0) | (rec.x_hat > 4.0), axis=1)))
    ok = bad == 0 and steps > 0
    _report(capsys, 4, ok, f"{bad} violations over {steps} steps in {len(_RECORDS)} runs")
    assert ok

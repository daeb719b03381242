"""End-to-end acceptance checks, one test per criterion.

Each test records a verdict; the terminal summary prints one PASS/FAIL line
per criterion.  The desk-scale runs are shared through module fixtures.
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from qmrdl import bloch, cli, data, dictlearn, forward, solver

DESK = data.PRESETS["desk"]
SEEDS = (0, 1, 2)


def random_orthogonal(rng, K):
    Q, R = np.linalg.qr(rng.standard_normal((K, K)))
    return Q * np.sign(np.diag(R))


def rel_gap(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# -- 1 -------------------------------------------------------------------------

def test_criterion_01_adjoints(verdict):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = {"A": 0.0, "P": 0.0, "grad": 0.0, "F'": 0.0}
    for _ in range(100):
        n1, n2 = (int(v) for v in rng.integers(2, 17, size=2))
        L = int(rng.integers(1, 9))
        r = int(rng.integers(1, min(n1, 4) + 1))
        masks = data.make_masks(n1, n2, L, r, int(rng.integers(1000)))
        x = rng.standard_normal((n1, n2, L)) + 1j * rng.standard_normal((n1, n2, L))
        y = forward.KSpaceData(
            (rng.standard_normal((n1, n2, L)) + 1j * rng.standard_normal((n1, n2, L)))
            * masks.masks, masks)
        lhs = np.vdot(y.data, forward.apply_A(x, masks).data)
        rhs = np.vdot(forward.apply_A_adjoint(y), x)
        worst["A"] = max(worst["A"], abs(lhs - rhs) / max(abs(lhs), 1e-300))

        p = int(rng.integers(1, min(n1, n2) + 1))
        pc = forward.PatchConfig(p, n1, n2)
        img = rng.standard_normal((n1, n2))
        Y = rng.standard_normal((p * p, n1 * n2))
        worst["P"] = max(worst["P"], rel_gap(np.sum(forward.patch_extract(img, pc) * Y),
                                             np.sum(img * forward.patch_adjoint(Y, pc))))

        v = rng.standard_normal((n1, n2, 2))
        h = float(rng.uniform(0.5, 2))
        worst["grad"] = max(worst["grad"], rel_gap(np.sum(forward.grad_h(img, h) * v),
                                                   -np.sum(img * forward.div_h(v, h))))

        seq = bloch.default_sequence(L, int(rng.integers(1000)))
        u = np.stack([rng.uniform(1, 110, (n1, n2)), rng.uniform(10, 300, (n1, n2)),
                      rng.uniform(10, 300, (n1, n2))], axis=-1)
        dh = rng.standard_normal(u.shape)
        lin = forward.linearize(u, seq, masks)
        worst["F'"] = max(worst["F'"], rel_gap(np.vdot(y.data, lin.jvp(dh).data).real,
                                               np.sum(dh * lin.vjp(y))))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-10 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s"
    verdict(1, "adjoint identities", ok, detail)
    assert ok, detail


# -- 2 -------------------------------------------------------------------------

def test_criterion_02_jacobian(verdict):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    seq = bloch.default_sequence(100, 7)
    n = 1000
    u = np.stack([rng.uniform(1, 110, n), rng.uniform(10, 300, n), rng.uniform(10, 300, n)], -1)
    jac = bloch.signal_jacobian(u, seq)
    fd = np.empty_like(jac)
    for c in range(3):
        step = 1e-5 * np.maximum(1.0, np.abs(u[:, c]))
        e = np.zeros_like(u)
        e[:, c] = step
        fd[..., c] = (bloch.signal(u + e, seq) - bloch.signal(u - e, seq)) / (2 * step[:, None])
    err = np.linalg.norm(fd - jac, axis=(1, 2)) / np.linalg.norm(jac, axis=(1, 2))
    elapsed = time.perf_counter() - start
    ok = err.max() < 1e-6 and elapsed < 30
    detail = f"max relative error {err.max():.2e} over {n} points, L=100; {elapsed:.1f} s"
    verdict(2, "Jacobian vs central differences", ok, detail)
    assert ok, detail


# -- 3 -------------------------------------------------------------------------

def o2_grid(n_each):
    th = np.linspace(0, 2 * np.pi, n_each, endpoint=False)
    c, s = np.cos(th), np.sin(th)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    ref = np.stack([np.stack([c, s], -1), np.stack([s, -c], -1)], -2)
    return np.concatenate([rot, ref]), 2 * np.pi / n_each


def test_criterion_03_closed_forms(verdict):
    rng = np.random.default_rng(303)
    grid, resolution = o2_grid(5000)
    dict_gap = -math.inf
    for _ in range(50):
        M = int(rng.integers(1, 20))
        X, C = rng.standard_normal((2, M)), rng.standard_normal((2, M))
        D_prev = random_orthogonal(rng, 2)
        lam = float(rng.uniform(0, 3))

        def obj(D):
            return (0.5 * np.sum((D @ C - X) ** 2, axis=(-2, -1))
                    + 0.5 * lam * np.sum((D - D_prev) ** 2, axis=(-2, -1)))

        D = dictlearn.update_dictionary(X, C, D_prev, lam)
        dict_gap = max(dict_gap, float(obj(D) - obj(grid).min()))

    values = np.linspace(-6, 6, 120_001)
    step = values[1] - values[0]
    code_err = 0.0
    for _ in range(20):
        K, M = 4, 5
        D = random_orthogonal(rng, K)
        X = rng.standard_normal((K, M))
        C_prev = rng.standard_normal((K, M))
        beta, lam_C = float(rng.uniform(0.01, 1)), float(rng.uniform(0, 2))
        C = dictlearn.update_codes(X, D, C_prev, beta, lam_C)
        target = D.T @ X  # D orthogonal: 1/2||DC - X||^2 = 1/2||C - D^T X||^2
        for i in range(K):
            for j in range(M):
                f = (0.5 * (values - target[i, j]) ** 2
                     + 0.5 * lam_C * (values - C_prev[i, j]) ** 2 + beta * np.abs(values))
                code_err = max(code_err, abs(C[i, j] - values[np.argmin(f)]))

    K, M = 16, 200
    X = rng.standard_normal((K, M))
    D, C = np.eye(K), np.zeros((K, M))
    drift = 0.0
    for _ in range(1000):
        D = dictlearn.update_dictionary(X, C, D, 1.0)
        C = dictlearn.update_codes(X, D, C, 0.1, 1.0)
        drift = max(drift, dictlearn.orthogonality_error(D))

    ok = dict_gap <= resolution and code_err <= step and drift < 1e-10
    detail = (f"dictionary gap {dict_gap:.2e} (grid {resolution:.2e}), code error "
              f"{code_err:.1e} (step {step:.0e}), orthogonality drift {drift:.1e}")
    verdict(3, "dictionary closed forms", ok, detail)
    assert ok, detail


# -- 4 -------------------------------------------------------------------------

def test_criterion_04_descent_sequence(verdict):
    rng = np.random.default_rng(404)
    worst_decrease, worst_ratio, failures = 0.0, 0.0, 0
    for _ in range(20):
        p = int(rng.integers(2, 9))
        K, M = p * p, int(rng.integers(10, 300))
        X = rng.standard_normal((K, M))
        params = dictlearn.DictLearnParams(beta=float(rng.uniform(0.01, 1)),
                                           lambda_D=float(rng.uniform(0.2, 3)),
                                           lambda_C=float(rng.uniform(0.2, 3)),
                                           eta=1e-8, max_iters=200)
        _, _, cert = dictlearn.dict_learn(X, (random_orthogonal(rng, K), np.zeros((K, M))),
                                          params)
        scale = max(1.0, cert.objective[0])
        gaps = cert.sufficient_decrease_gaps()
        worst_decrease = min(worst_decrease, float(gaps.min()) / scale)
        ratios = np.asarray(cert.residual) / (cert.sigma2 * cert.steps)
        ratios = ratios[cert.steps > 0]
        worst_ratio = max(worst_ratio, float(ratios.max()))
        failures += int(np.any(gaps < -1e-12 * scale) or np.any(ratios > 1 + 1e-12))
    ok = failures == 0
    detail = (f"{failures}/20 problems violate; min decrease gap {worst_decrease:.1e}, "
              f"max residual/(sigma2 step) {worst_ratio:.3f}")
    verdict(4, "descent-sequence certificate", ok, detail)
    assert ok, detail


# -- desk runs shared by 5, 6, 7, 9, 10 -----------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_seed0")
    start = time.perf_counter()
    phantom, seq, kdata = data.write_inputs(str(out), DESK)
    timings, traces, recon = {}, {}, {}
    for variant in DESK.variants:
        t0 = time.perf_counter()
        recon[variant], traces[variant] = data.reconstruct_into(str(out), variant, DESK, seq,
                                                                kdata, phantom.u)
        timings[variant] = time.perf_counter() - t0
    data.compile_report(str(out), DESK)
    return {"dir": str(out), "traces": traces, "recon": recon, "truth": phantom.u,
            "timings": timings, "total": time.perf_counter() - start}


@pytest.fixture(scope="module")
def seed_runs(desk_run):
    runs = {0: {v: desk_run["recon"][v] for v in ("nested", "lm")}}
    truths = {0: desk_run["truth"]}
    traces = {0: desk_run["traces"]["nested"]}
    for seed in SEEDS[1:]:
        spec = DESK.with_seed(seed)
        phantom, seq, kdata = spec.build()
        truths[seed] = phantom.u
        runs[seed] = {}
        for variant in ("nested", "lm"):
            u, trace, _ = data.run_variant(variant, spec, seq, kdata)
            runs[seed][variant] = u
            if variant == "nested":
                traces[seed] = trace
    return runs, truths, traces


# -- 5 -------------------------------------------------------------------------

def test_criterion_05_outer_monotonicity(desk_run, verdict):
    trace = desk_run["traces"]["nested"]
    J = trace.J
    rows = trace.rows[1:]
    monotone = bool(np.all(np.diff(J) <= 0))
    descent = all(r["J"] <= r["J_mid"] - 0.5 * r["sigma_BT"] * r["lambda_k"] * r["step_u_sq"]
                  for r in rows)
    report = cli.diagnose(desk_run["dir"], ("nested",))
    diag_ok = all(ok for _, _, ok, _, _ in report)
    seconds = desk_run["timings"]["nested"]
    ok = monotone and descent and diag_ok and seconds < 600
    failed = [name for _, name, good, _, _ in report if not good]
    detail = (f"{len(rows)} iterations, J {J[0]:.4g} -> {J[-1]:.4g}, monotone={monotone}, "
              f"descent={descent}, diagnose={'pass' if diag_ok else failed}, {seconds:.0f} s")
    verdict(5, "outer monotonicity on desk preset", ok, detail)
    assert ok, detail


# -- 6 -------------------------------------------------------------------------

def test_criterion_06_nested_vs_one_step(desk_run, verdict):
    Jn = desk_run["traces"]["nested"].J
    Jo = desk_run["traces"]["one-step"].J
    n = min(len(Jn), len(Jo))
    bad = [k for k in range(5, n) if Jn[k] > Jo[k]]
    worst = max((Jn[k] / Jo[k] - 1 for k in range(5, n)), default=0.0)
    ok = not bad
    detail = (f"{len(bad)} of {max(n - 5, 0)} indices k>=5 with J(nested) > J(one-step)"
              + (f", first k={bad[0]}, worst excess {100 * worst:.2f}%" if bad else ""))
    verdict(6, "nested J_d <= one-step J_d for k >= 5", ok, detail)
    assert ok, detail


# -- 7 -------------------------------------------------------------------------

def test_criterion_07_error_ordering(seed_runs, verdict):
    runs, truths, _ = seed_runs
    mean = {}
    for variant in ("nested", "lm"):
        errs = [[data.relative_error(runs[s][variant], truths[s], ch) for ch in ("t1", "t2")]
                for s in SEEDS]
        mean[variant] = np.mean(errs, axis=0)
    ok = bool(mean["nested"][0] < mean["lm"][0] and mean["nested"][1] < mean["lm"][1])
    detail = (f"mean T1/T2 error nested {mean['nested'][0]:.3f}/{mean['nested'][1]:.3f}, "
              f"LM {mean['lm'][0]:.3f}/{mean['lm'][1]:.3f} over seeds {SEEDS}")
    verdict(7, "nested beats vanilla LM on T1 and T2", ok, detail)
    assert ok, detail


# -- 8 -------------------------------------------------------------------------

def test_criterion_08_noise_free(verdict):
    cfg = replace(DESK.solver, alpha=1e-6, lam=(1e-6,) * 3, beta=(1e-6,) * 3, r=1,
                  max_outer=30)
    spec = replace(DESK, r=1, sigma=0.0, solver=cfg)
    phantom, seq, kdata = spec.build()
    rng = np.random.default_rng(808)
    u0 = np.clip(phantom.u * (1 + 0.1 * rng.uniform(-1, 1, phantom.u.shape)),
                 cfg.lower, cfg.upper)
    res = solver.nested_solve(kdata, cfg, seq, u0=u0)
    residual = res.trace.column("data_residual")
    ratio = residual[0] / max(residual[-1], 1e-300)
    ok = ratio >= 1e4 and len(res.trace) - 1 <= 30
    detail = (f"data residual {residual[0]:.3e} -> {residual[-1]:.3e} "
              f"(factor {ratio:.1e}) in {len(res.trace) - 1} iterations")
    verdict(8, "noise-free data-residual reduction", ok, detail)
    assert ok, detail


# -- 9 -------------------------------------------------------------------------

def test_criterion_09_inner_complexity(seed_runs, verdict):
    _, _, traces = seed_runs
    checked, violations, example = 0, 0, None
    for seed, trace in traces.items():
        for row in trace.rows[1:]:
            for name in solver.CHANNELS:
                n_k = row[f"n_inner_{name}"]
                if n_k == 0:
                    continue
                checked += 1
                bound = 2 * row[f"g_drop_{name}"] / (row["sigma1"] * row["eta"] ** 2)
                if n_k > bound:
                    violations += 1
                    example = example or (seed, int(row["k"]), name, int(n_k), bound)
    ok = violations == 0
    detail = f"{violations} of {checked} inner runs exceed the bound"
    if example:
        detail += (f"; e.g. seed {example[0]} k={example[1]} {example[2]}: "
                   f"n_k={example[3]} > {example[4]:.3f}")
    verdict(9, "inner-loop iteration bound", ok, detail)
    assert ok, detail


# -- 10 -------------------------------------------------------------------------

def test_criterion_10_determinism(desk_run, tmp_path, verdict):
    data.run_experiment(DESK, str(tmp_path))
    names = ["report.csv"] + [f"trace_{v}.csv" for v in DESK.variants]
    same = {name: (open(os.path.join(desk_run["dir"], name), "rb").read()
                   == (tmp_path / name).read_bytes()) for name in names}
    ok = all(same.values())
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
    verdict(10, "byte-identical CSVs on rerun", ok, detail)
    assert ok, detail

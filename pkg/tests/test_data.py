import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from qmrdl import bloch, data, forward, solver
from qmrdl.config import ConfigError


def tiny_spec(**kw):
    cfg = solver.SolverConfig(p=4, lam=(5.0,) * 3, beta=(0.5,) * 3, max_outer=2, max_inner=20,
                              lm_iters=2)
    base = dict(name="tiny", n1=16, n2=16, L=4, r=2, sigma=0.5, solver=cfg)
    base.update(kw)
    return data.ExperimentSpec(**base)


# -- phantom ----------------------------------------------------------------------

def test_phantom_deterministic():
    a = data.make_phantom(64, 64, 3)
    b = data.make_phantom(64, 64, 3)
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.u, data.make_phantom(64, 64, 4).u)


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_phantom_ranges(seed):
    ph = data.make_phantom(64, 48, seed)
    cfg = solver.SolverConfig()
    assert np.all(ph.u >= cfg.lower) and np.all(ph.u <= cfg.upper)
    assert np.all(ph.u[..., 1:] <= 250) and np.all(ph.u[..., 0] <= 100)


@pytest.mark.parametrize("seed", [0, 5])
def test_phantom_regions_connected(seed):
    ph = data.make_phantom(64, 64, seed)
    present = set(np.unique(ph.labels))
    assert present == {reg.label for reg in ph.regions}
    for reg in ph.regions:
        _, count = ndimage.label(ph.labels == reg.label)
        assert count == 1, reg.name
        np.testing.assert_array_equal(ph.u[ph.labels == reg.label][0], reg.values)


def test_phantom_minimum_size():
    with pytest.raises(ValueError):
        data.make_phantom(8, 32)


# -- masks ----------------------------------------------------------------------

def test_masks_full_sampling():
    assert np.all(data.make_masks(10, 12, 5, 1).masks)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 40), st.integers(1, 9), st.integers(1, 12), st.integers(0, 100),
       st.sampled_from([0, 1]))
def test_mask_properties(n, r, L, seed, axis):
    r = min(r, n)  # valid for both axes since n2 > n1
    ms = data.make_masks(n, n + 3, L, r, seed, axis).masks
    lines = ms.any(axis=1 - axis)  # which lines are sampled per step
    n = (n, n + 3)[axis]
    for t in range(L):
        # lines are complete
        m = ms[..., t] if axis == 0 else ms[..., t].T
        assert np.all(m.all(axis=1) == m.any(axis=1))
        count = lines[:, t].sum()
        assert count in (n // r, -(-n // r))
        if t + r < L:
            np.testing.assert_array_equal(ms[..., t + r], ms[..., t])
        if t + 1 < L and n % r == 0:
            np.testing.assert_array_equal(np.roll(lines[:, t], 1), lines[:, t + 1])
    if L >= r:
        assert np.all(lines[:, :r].sum(axis=1) == 1)


def test_mask_fraction_when_divisible():
    ms = data.make_masks(64, 64, 20, 8)
    np.testing.assert_allclose(ms.masks.mean(axis=(0, 1)), 1 / 8)


def test_mask_rejects_bad_factor():
    with pytest.raises(ValueError):
        data.make_masks(8, 8, 2, 0)
    with pytest.raises(ValueError):
        data.make_masks(8, 8, 2, 9)


# -- synthesis -------------------------------------------------------------------

def test_noise_free_equals_forward():
    ph = data.make_phantom(16, 16, 0)
    seq = bloch.default_sequence(4, 0)
    masks = data.make_masks(16, 16, 4, 2)
    f = data.synthesize(ph, seq, masks, 0.0)
    np.testing.assert_array_equal(f.data, forward.forward(ph.u, seq, masks).data)


@pytest.mark.parametrize("squared", [False, True])
def test_noise_statistics(squared):
    n, L, sigma = 64, 50, 1.7
    u = np.zeros((n, n, 3))  # rho = 0 gives zero signal
    seq = bloch.default_sequence(L, 0)
    masks = data.make_masks(n, n, L, 2)
    f = data.synthesize(u, seq, masks, sigma, noise_seed=11, sigma_squared=squared).data
    sampled = f[masks.masks]
    assert sampled.size >= 10 ** 5
    std = sigma ** 2 if squared else sigma
    for part in (sampled.real, sampled.imag):
        assert abs(part.std() / std - 1) < 0.02
        assert abs(part.mean()) < 0.02 * std
    assert np.all(f[~masks.masks] == 0)


def test_noise_deterministic_and_validated():
    ph = data.make_phantom(16, 16, 0)
    seq = bloch.default_sequence(3, 0)
    masks = data.make_masks(16, 16, 3, 4)
    a = data.synthesize(ph, seq, masks, 1.0, noise_seed=5).data
    b = data.synthesize(ph, seq, masks, 1.0, noise_seed=5).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        data.synthesize(ph, seq, masks, -1.0)


# -- metrics ----------------------------------------------------------------------

def test_relative_error_cases():
    rng = np.random.default_rng(0)
    truth = rng.random((5, 6, 3)) + 0.1
    assert data.relative_error(truth, truth) == 0.0
    assert data.relative_error(np.zeros_like(truth), truth, "t1") == pytest.approx(1.0)
    assert data.relative_error(2 * truth, truth, 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        data.relative_error(truth, truth, "pd")
    with pytest.raises(ValueError):
        data.relative_error(truth, np.zeros_like(truth))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_relative_error_scale_equivariant(scale, seed):
    rng = np.random.default_rng(seed)
    truth = rng.random((4, 4, 3)) + 0.1
    recon = truth + 0.1 * rng.standard_normal(truth.shape)
    for ch in ("rho", "t1", "t2"):
        assert data.relative_error(scale * recon, scale * truth, ch) == pytest.approx(
            data.relative_error(recon, truth, ch), rel=1e-12)


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 10, 35).reshape(5, 7)
    path = tmp_path / "x.pgm"
    data.write_pgm(path, img, 0.0, 10.0)
    back = data.read_pgm(path)
    np.testing.assert_array_equal(back, np.round(img / 10 * 255).astype(np.uint8))


# -- specs and configs ------------------------------------------------------------------

def test_seeds_derived_and_distinct():
    spec = data.PRESETS["desk"].with_seed(3)
    seeds = [spec.seed_for(s) for s in ("phantom", "sequence", "mask", "noise")]
    assert len(set(seeds)) == 4
    assert seeds == [data.PRESETS["desk"].with_seed(3).seed_for(s)
                     for s in ("phantom", "sequence", "mask", "noise")]


def test_presets():
    desk = data.PRESETS["desk"]
    assert (desk.n1, desk.n2, desk.L, desk.r, desk.sigma) == (64, 64, 20, 8, 1.0)
    p16 = data.PRESETS["paper16x"]
    assert (p16.n1, p16.L, p16.r, p16.sigma) == (256, 100, 16, 2.0)
    assert data.PRESETS["paper32x"].r == 32


def test_spec_mapping_roundtrip():
    spec = tiny_spec(seed=4)
    sections = {}
    for key, value in spec.to_mapping().items():
        sec, name = key.split(".", 1)
        sections.setdefault(sec, {})[name] = value
    back = data.spec_from_mapping(sections, data.PRESETS["desk"])
    assert back.to_mapping() == spec.to_mapping()


@pytest.mark.parametrize("sections", [
    {"data": {"colour": "red"}},
    {"seq": {"TE": "3"}},
    {"data": {"r": "eight"}},
    {"seq": {"L": "4", "tr": "1, 2, 3, 4"}},
    {"solver": {"lambda": "1 2"}},
])
def test_spec_mapping_errors(sections):
    with pytest.raises(ConfigError):
        data.spec_from_mapping(sections)


def test_spec_validation():
    with pytest.raises(ValueError):
        tiny_spec(variants=("nested", "admm"))
    with pytest.raises(ValueError):
        tiny_spec(sigma=-1.0)


# -- experiment runner ---------------------------------------------------------------------

def test_run_experiment_schema(tmp_path):
    spec = tiny_spec()
    results = data.run_experiment(spec, str(tmp_path))
    assert set(results) == set(spec.variants)
    files = set(os.listdir(tmp_path))
    for name in ("config_resolved.txt", "truth.npy", "kspace.bin", "report.csv"):
        assert name in files
    for v in spec.variants:
        assert {f"recon_{v}.npy", f"trace_{v}.csv", f"summary_{v}.txt"} <= files
        for ch in data.CHANNELS:
            assert {f"{ch}_{v}.pgm", f"abserr_{ch}_{v}.pgm"} <= files
            assert data.read_pgm(tmp_path / f"{ch}_{v}.pgm").shape == (16, 16)
    rows = data.read_report(tmp_path / "report.csv")
    assert list(rows[0]) == list(data.REPORT_COLUMNS)
    assert sum(r["kind"] == "result" for r in rows) == len(spec.variants)
    assert sum(r["kind"] == "reference-only" for r in rows) == len(data.REFERENCE_ROWS)
    nested = [r for r in rows if r["kind"] == "reference-only" and r["variant"] == "nested"]
    assert {(r["r"], r["rel_t1"], r["rel_t2"], r["rel_rho"]) for r in nested} == {
        ("16", "0.086", "0.077", "0.12"), ("32", "0.184", "0.185", "0.134")}
    for v in spec.variants:
        trace = solver.IterationTrace.from_csv(tmp_path / f"trace_{v}.csv")
        assert 2 <= len(trace) <= 3
    kd = forward.load_kspace(tmp_path / "kspace.bin")
    assert kd.data.shape == (16, 16, 4)


def test_run_experiment_reproducible(tmp_path):
    spec = tiny_spec(variants=("nested",))
    data.run_experiment(spec, str(tmp_path / "a"))
    data.run_experiment(spec, str(tmp_path / "b"))
    for name in ("report.csv", "trace_nested.csv", "config_resolved.txt", "kspace.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_inputs_shape_check(tmp_path):
    spec = tiny_spec()
    data.write_inputs(str(tmp_path), spec)
    with pytest.raises(ConfigError):
        data.load_inputs(str(tmp_path), replace(spec, L=5))


def test_mean_errors_and_table():
    rows = [
        {"kind": "result", "variant": "nested", "r": "8", "rel_t1": "0.1", "rel_t2": "0.2",
         "rel_rho": "0.3"},
        {"kind": "result", "variant": "nested", "r": "8", "rel_t1": "0.3", "rel_t2": "0.4",
         "rel_rho": "0.5"},
        {"kind": "reference-only", "variant": "lm", "r": "16", "rel_t1": "0.155",
         "rel_t2": "0.177", "rel_rho": "0.222"},
    ]
    means = data.mean_errors(rows)
    assert list(means) == ["nested"]
    np.testing.assert_allclose(means["nested"], (0.2, 0.3, 0.4))
    table = data.format_table(rows)
    assert len(table.splitlines()) == 4

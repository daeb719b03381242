"""Synthetic experiments: phantom, sampling masks, noisy data, metrics and
the report writer.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import bloch, forward, solver
from .config import ConfigError, format_keyvalue, read_keyvalue

__all__ = [
    "Region",
    "Phantom",
    "ExperimentSpec",
    "PRESETS",
    "REFERENCE_ROWS",
    "derive_seed",
    "make_phantom",
    "make_masks",
    "synthesize",
    "relative_error",
    "write_pgm",
    "read_pgm",
    "run_experiment",
    "spec_from_mapping",
]

CHANNELS = ("rho", "t1", "t2")


def derive_seed(base, subsystem):
    """Independent seed for one subsystem (phantom, sequence, mask, noise)."""
    tag = {"phantom": 1, "sequence": 2, "mask": 3, "noise": 4}[subsystem]
    return int(np.random.SeedSequence([int(base), tag]).generate_state(1)[0])


# -- phantom ---------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Axis-aligned ellipse in normalized coordinates ``[-1, 1]^2``.

    The filling region has ``center = axes = None``.
    """

    name: str
    label: int
    center: tuple
    axes: tuple
    values: tuple  # (rho, T1, T2)


# Painted in order.  The head sits in a weak gel so that every pixel carries
# signal; with rho = 0 the relaxation times would be unidentifiable there.
# Inner structures are disjoint from one another so every label stays one
# connected region.
_ANATOMY = (
    ("gel", None, None, (30.0, 80.0, 40.0)),
    ("scalp", (0.0, 0.0), (0.92, 0.74), (100.0, 60.0, 70.0)),
    ("brain", (0.0, 0.0), (0.80, 0.62), (70.0, 110.0, 60.0)),
    ("grey_left", (-0.10, -0.38), (0.28, 0.12), (80.0, 160.0, 90.0)),
    ("grey_right", (-0.10, 0.38), (0.28, 0.12), (80.0, 160.0, 90.0)),
    ("csf_left", (0.05, -0.11), (0.22, 0.07), (100.0, 250.0, 250.0)),
    ("csf_right", (0.05, 0.11), (0.22, 0.07), (100.0, 250.0, 250.0)),
    ("lesion", (0.50, 0.25), (0.09, 0.09), (90.0, 200.0, 150.0)),
)
_JITTER = 0.02


@dataclass(frozen=True)
class Phantom:
    """Piecewise-constant ground truth.

    ``u`` has shape (n1, n2, 3) with channels (rho, T1, T2); ``labels``
    marks the region of each pixel, starting at 1 for the surrounding gel.
    """

    u: np.ndarray
    labels: np.ndarray
    regions: tuple
    seed: int

    @property
    def shape(self):
        return self.u.shape[:2]


def make_phantom(n1, n2, seed=0):
    """Head-like phantom of nested ellipses with slightly seed-dependent geometry.

    T1 and T2 lie in [0, 250] and rho in [0, 100].
    """
    if n1 < 16 or n2 < 16:
        raise ValueError("phantom needs at least 16x16 pixels")
    rng = np.random.default_rng(seed)
    y = (np.arange(n1) + 0.5) / n1 * 2 - 1
    x = (np.arange(n2) + 0.5) / n2 * 2 - 1
    Y, X = np.meshgrid(y, x, indexing="ij")
    u = np.zeros((n1, n2, 3))
    labels = np.zeros((n1, n2), dtype=np.int32)
    regions = []
    for label, (name, center, axes, values) in enumerate(_ANATOMY, 1):
        if center is None:
            u[:] = values
            labels[:] = label
            regions.append(Region(name, label, None, None, values))
            continue
        shift = rng.uniform(-_JITTER, _JITTER, size=2) if label > 3 else np.zeros(2)
        cy, cx = center[0] + shift[0], center[1] + shift[1]
        inside = ((Y - cy) / axes[0]) ** 2 + ((X - cx) / axes[1]) ** 2 <= 1.0
        u[inside] = values
        labels[inside] = label
        regions.append(Region(name, label, (float(cy), float(cx)), axes, values))
    return Phantom(u=u, labels=labels, regions=tuple(regions), seed=int(seed))


# -- masks and data -----------------------------------------------------------------

def make_masks(n1, n2, L, r, offset_seed=0, axis=0):
    """Equidistant Cartesian line masks that shift by one line per time step.

    At time step t the sampled lines along `axis` are the indices
    ``i = offset + t (mod r)``.  The masks are r-periodic in t, any r
    consecutive masks cover every line once, and each mask holds
    ``ceil(n/r)`` or ``floor(n/r)`` lines (exactly ``n/r`` when r divides n).
    The offset is drawn from `offset_seed`.
    """
    r = int(r)
    if r < 1:
        raise ValueError("undersampling factor must be >= 1")
    n = (n1, n2)[axis]
    if r > n:
        raise ValueError(f"undersampling factor {r} exceeds {n} lines")
    offset = int(np.random.default_rng(offset_seed).integers(r))
    index = np.arange(n)
    masks = np.zeros((n1, n2, L), dtype=bool)
    for t in range(L):
        lines = index[(index - offset - t) % r == 0]
        if axis == 0:
            masks[lines, :, t] = True
        else:
            masks[:, lines, t] = True
    return forward.SamplingMaskSet(masks, r=r, seed=int(offset_seed))


def synthesize(phantom, seq, masks, sigma, noise_seed=0, sigma_squared=False):
    """Noisy undersampled k-space of the phantom.

    Each sampled entry receives complex Gaussian noise whose real and
    imaginary parts have standard deviation `sigma` (``sigma**2`` with
    `sigma_squared`).  Unsampled entries stay exactly zero.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    u = phantom.u if isinstance(phantom, Phantom) else np.asarray(phantom, dtype=float)
    clean = forward.forward(u, seq, masks)
    if sigma == 0:
        return clean
    amp = sigma ** 2 if sigma_squared else sigma
    rng = np.random.default_rng(noise_seed)
    noise = rng.standard_normal(clean.data.shape) + 1j * rng.standard_normal(clean.data.shape)
    return forward.KSpaceData(clean.data + amp * noise * masks.masks, masks)


def _channel_index(channel):
    if isinstance(channel, str):
        key = channel.lower()
        if key not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        return CHANNELS.index(key)
    return int(channel)


def relative_error(recon, truth, channel=None):
    """``||recon - truth|| / ||truth||`` over one channel (or all of them).

    `channel` is an index or one of ``"rho"``, ``"t1"``, ``"t2"``.
    """
    recon = np.asarray(recon, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if channel is not None:
        c = _channel_index(channel)
        recon, truth = recon[..., c], truth[..., c]
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValueError("ground truth is zero")
    return float(np.linalg.norm(recon - truth) / denom)


# -- images ----------------------------------------------------------------------------

def write_pgm(path, img, vmin, vmax):
    """8-bit binary PGM, linearly mapping ``[vmin, vmax]`` to ``[0, 255]``."""
    img = np.asarray(img, dtype=float)
    scaled = np.clip((img - vmin) / (vmax - vmin), 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4], dtype=np.uint8, count=width * height).reshape(height, width)


# -- experiments -------------------------------------------------------------------------

# Published relative errors (T1, T2, rho); context only, never compared against.
REFERENCE_ROWS = (
    (16, "lm", 0.155, 0.177, 0.222),
    (16, "one-step", 0.091, 0.090, 0.120),
    (16, "nested", 0.086, 0.077, 0.120),
    (16, "blip", 0.231, 0.260, 0.250),
    (32, "lm", 0.838, 0.400, 0.305),
    (32, "one-step", 0.192, 0.204, 0.136),
    (32, "nested", 0.184, 0.185, 0.134),
    (32, "blip", 1.195, 0.733, 0.236),
)

VARIANTS = ("nested", "one-step", "lm")


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one experiment.

    Subsystem seeds default to values derived from `seed`.
    """

    name: str = "desk"
    n1: int = 64
    n2: int = 64
    L: int = 20
    r: int = 8
    sigma: float = 1.0
    sigma_squared: bool = False
    seed: int = 0
    phantom_seed: int | None = None
    sequence_seed: int | None = None
    mask_seed: int | None = None
    noise_seed: int | None = None
    mask_axis: int = 0
    variants: tuple = VARIANTS
    solver: solver.SolverConfig = field(default_factory=lambda: solver.PRESETS["desk"])

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        if self.sigma < 0 or self.r < 1 or self.L < 1:
            raise ValueError("need sigma >= 0, r >= 1, L >= 1")

    def seed_for(self, subsystem):
        explicit = getattr(self, f"{subsystem}_seed")
        return derive_seed(self.seed, subsystem) if explicit is None else explicit

    def with_seed(self, seed):
        return replace(self, seed=int(seed), phantom_seed=None, sequence_seed=None,
                       mask_seed=None, noise_seed=None)

    def sequence(self):
        return bloch.default_sequence(self.L, seed=self.seed_for("sequence"))

    def build(self):
        """Return ``(phantom, sequence, data)``."""
        ph = make_phantom(self.n1, self.n2, self.seed_for("phantom"))
        seq = self.sequence()
        masks = make_masks(self.n1, self.n2, self.L, self.r, self.seed_for("mask"),
                           self.mask_axis)
        data = synthesize(ph, seq, masks, self.sigma, self.seed_for("noise"),
                          self.sigma_squared)
        return ph, seq, data

    def to_mapping(self):
        out = {"data.name": self.name, "data.n1": str(self.n1), "data.n2": str(self.n2),
               "data.r": str(self.r), "data.sigma": repr(float(self.sigma)),
               "data.sigma_squared": str(self.sigma_squared).lower(),
               "data.seed": str(self.seed)}
        for sub in ("phantom", "mask", "noise"):
            out[f"data.{sub}_seed"] = str(self.seed_for(sub))
        out["data.mask_axis"] = str(self.mask_axis)
        out["data.variants"] = ", ".join(self.variants)
        seq = self.sequence()
        out["seq.L"] = str(self.L)
        out["seq.seed"] = str(self.seed_for("sequence"))
        out["seq.tr"] = ", ".join(repr(float(v)) for v in seq.tr)
        out["seq.flip_deg"] = ", ".join(repr(float(v)) for v in np.rad2deg(seq.flip))
        for key, value in self.solver.to_mapping().items():
            out[f"solver.{key}"] = value
        return out


PRESETS = {
    "desk": ExperimentSpec(),
    "paper16x": ExperimentSpec(name="paper16x", n1=256, n2=256, L=100, r=16, sigma=2.0,
                               solver=solver.PRESETS["paper16x"]),
    "paper32x": ExperimentSpec(name="paper32x", n1=256, n2=256, L=100, r=32, sigma=5.0,
                               solver=solver.PRESETS["paper32x"]),
}

_DATA_KEYS = {"name", "n1", "n2", "r", "sigma", "sigma_squared", "seed", "phantom_seed",
              "mask_seed", "noise_seed", "mask_axis", "variants", "size"}


def spec_from_mapping(sections, base=None):
    """Apply ``{"data": {...}, "seq": {...}, "solver": {...}}`` onto a spec.

    The sequence section accepts ``L`` and ``seed``; explicit ``tr`` and
    ``flip_deg`` lists must match what those two regenerate.
    """
    spec = base or PRESETS["desk"]
    d = dict(sections.get("data", {}))
    unknown = set(d) - _DATA_KEYS
    if unknown:
        raise ConfigError(f"unknown data keys: {sorted(unknown)}")
    kw = {}
    try:
        for key in ("n1", "n2", "r", "seed", "phantom_seed", "mask_seed", "noise_seed",
                    "mask_axis"):
            if key in d:
                kw[key] = int(d[key])
        if "size" in d:
            kw["n1"] = kw["n2"] = int(d["size"])
        if "sigma" in d:
            kw["sigma"] = float(d["sigma"])
        if "sigma_squared" in d:
            kw["sigma_squared"] = d["sigma_squared"].lower() in ("1", "true", "yes")
        if "name" in d:
            kw["name"] = d["name"]
        if "variants" in d:
            kw["variants"] = tuple(v.strip() for v in d["variants"].split(",") if v.strip())
        s = dict(sections.get("seq", {}))
        unknown = set(s) - {"L", "seed", "tr", "flip_deg"}
        if unknown:
            raise ConfigError(f"unknown seq keys: {sorted(unknown)}")
        if "L" in s:
            kw["L"] = int(s["L"])
        if "seed" in s:
            kw["sequence_seed"] = int(s["seed"])
        seed_changed = "seed" in kw
        if seed_changed:
            spec = spec.with_seed(kw.pop("seed"))
        if "solver" in sections:
            kw["solver"] = solver.SolverConfig.from_mapping(sections["solver"], spec.solver)
        spec = replace(spec, **kw)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if "tr" in s or "flip_deg" in s:
        seq = spec.sequence()
        try:
            explicit = bloch.sequence_from_mapping({k: s[k] for k in ("tr", "flip_deg") if k in s})
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid sequence: {exc}") from exc
        if not (np.allclose(explicit.tr, seq.tr, rtol=1e-12, atol=0)
                and np.allclose(explicit.flip, seq.flip, rtol=1e-12, atol=1e-15)):
            raise ConfigError("seq.tr/seq.flip_deg do not match the sequence generated "
                              "from seq.L and seq.seed")
    return spec


REPORT_COLUMNS = ("kind", "variant", "r", "sigma", "seed", "rel_t1", "rel_t2", "rel_rho",
                  "J_final", "n_outer", "converged")


def _error_row(variant, spec, u, truth, final_J, n_outer, converged):
    return {
        "kind": "result", "variant": variant, "r": spec.r, "sigma": repr(float(spec.sigma)),
        "seed": spec.seed,
        "rel_t1": repr(relative_error(u, truth, "t1")),
        "rel_t2": repr(relative_error(u, truth, "t2")),
        "rel_rho": repr(relative_error(u, truth, "rho")),
        "J_final": repr(float(final_J)), "n_outer": int(n_outer),
        "converged": str(bool(converged)).lower(),
    }


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
        for r, variant, t1, t2, rho in REFERENCE_ROWS:
            w.writerow({"kind": "reference-only", "variant": variant, "r": r,
                        "sigma": "2.0" if r == 16 else "5.0", "seed": "",
                        "rel_t1": t1, "rel_t2": t2, "rel_rho": rho, "J_final": "",
                        "n_outer": "", "converged": ""})


def read_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_variant(variant, spec, seq, data, u0=None):
    """Reconstruct with one variant; returns ``(u, trace, converged)``."""
    cfg = spec.solver
    if variant == "lm":
        u, trace = solver.vanilla_lm_solve(data, cfg, seq, u0)
        return u, trace, False
    fn = solver.nested_solve if variant == "nested" else solver.one_step_solve
    res = fn(data, cfg, seq, u0)
    return res.u, res.trace, res.converged


def save_images(out_dir, tag, u, truth, cfg):
    upper = cfg.upper
    for c, name in enumerate(CHANNELS):
        write_pgm(os.path.join(out_dir, f"{name}_{tag}.pgm"), u[..., c], 0.0, upper[c])
        if truth is not None:
            write_pgm(os.path.join(out_dir, f"abserr_{name}_{tag}.pgm"),
                      np.abs(u[..., c] - truth[..., c]), 0.0, 0.5 * upper[c])


# -- run directories ---------------------------------------------------------------------
#
# A run directory holds
#   config_resolved.txt      every parameter, enough to redo the run
#   truth.npy                ground truth (n1, n2, 3)
#   kspace.bin               measured data (see forward.save_kspace)
#   recon_<variant>.npy      reconstruction
#   trace_<variant>.csv      iteration trace (see solver.IterationTrace)
#   summary_<variant>.txt    converged / n_outer / J_final as key = value
#   report.csv               relative errors per variant plus reference rows
#   *.pgm                    parameter maps and absolute errors

def write_inputs(out_dir, spec):
    """Write the resolved config, ground truth and k-space; return ``(phantom, seq, data)``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.txt"), "w") as fh:
        fh.write(format_keyvalue(spec.to_mapping()))
    phantom, seq, data = spec.build()
    np.save(os.path.join(out_dir, "truth.npy"), phantom.u)
    forward.save_kspace(data, os.path.join(out_dir, "kspace.bin"))
    save_images(out_dir, "truth", phantom.u, None, spec.solver)
    return phantom, seq, data


def load_inputs(out_dir, spec):
    """Counterpart of :func:`write_inputs`; the sequence is regenerated from `spec`."""
    truth = np.load(os.path.join(out_dir, "truth.npy"))
    data = forward.load_kspace(os.path.join(out_dir, "kspace.bin"))
    if data.data.shape != (spec.n1, spec.n2, spec.L):
        raise ConfigError(f"k-space shape {data.data.shape} does not match the config")
    return truth, spec.sequence(), data


def reconstruct_into(out_dir, variant, spec, seq, data, truth=None):
    """Run one variant and write its reconstruction, trace, summary and images."""
    u, trace, converged = run_variant(variant, spec, seq, data)
    np.save(os.path.join(out_dir, f"recon_{variant}.npy"), u)
    trace.to_csv(os.path.join(out_dir, f"trace_{variant}.csv"))
    summary = {"converged": str(bool(converged)).lower(), "n_outer": str(len(trace) - 1),
               "J_final": repr(float(trace.J[-1]))}
    with open(os.path.join(out_dir, f"summary_{variant}.txt"), "w") as fh:
        fh.write(format_keyvalue(summary))
    save_images(out_dir, variant, u, truth, spec.solver)
    return u, trace


def compile_report(out_dir, spec, variants=None):
    """Collect the finished variants of a run directory into ``report.csv``."""
    truth = np.load(os.path.join(out_dir, "truth.npy"))
    rows = []
    for variant in variants or spec.variants:
        path = os.path.join(out_dir, f"recon_{variant}.npy")
        if not os.path.exists(path):
            continue
        summary = read_keyvalue(os.path.join(out_dir, f"summary_{variant}.txt"))
        rows.append(_error_row(variant, spec, np.load(path), truth,
                               float(summary["J_final"]), int(summary["n_outer"]),
                               summary["converged"] == "true"))
    write_report(os.path.join(out_dir, "report.csv"), rows)
    return rows


def run_experiment(spec, out_dir, log=None):
    """Simulate, reconstruct with every variant of `spec` and write the report.

    Returns
    -------
    dict mapping variant to ``(u, trace)``
    """
    phantom, seq, data = write_inputs(out_dir, spec)
    results = {}
    for variant in spec.variants:
        if log:
            log(f"running {variant}")
        results[variant] = reconstruct_into(out_dir, variant, spec, seq, data, phantom.u)
    compile_report(out_dir, spec)
    return results


def mean_errors(report_rows):
    """Average the result rows per variant: ``{variant: (t1, t2, rho)}``."""
    acc = {}
    for row in report_rows:
        if row["kind"] != "result":
            continue
        acc.setdefault(row["variant"], []).append(
            (float(row["rel_t1"]), float(row["rel_t2"]), float(row["rel_rho"])))
    return {k: tuple(np.mean(v, axis=0)) for k, v in acc.items()}


def format_table(report_rows):
    lines = [f"{'variant':<10} {'kind':<15} {'r':>3} {'T1':>8} {'T2':>8} {'rho':>8}"]
    for row in report_rows:
        lines.append(f"{row['variant']:<10} {row['kind']:<15} {row['r']:>3} "
                     f"{float(row['rel_t1']):8.4f} {float(row['rel_t2']):8.4f} "
                     f"{float(row['rel_rho']):8.4f}")
    return "\n".join(lines)

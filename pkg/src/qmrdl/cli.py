"""Command-line front end: ``qmrdl {phantom,simulate,reconstruct,compare,diagnose}``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
numerical failures (including a failed ``diagnose``).  Errors are reported
on stderr as one line::

    qmrdl-error code=<code> message=<json string>
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as datamod
from . import solver
from .boxqp import QPNotConverged
from .config import ConfigError, read_keyvalue, split_sections

__all__ = ["main", "diagnose", "build_parser"]

SECTIONS = ("data", "seq", "solver")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


class NumericalFailure(RuntimeError):
    pass


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value file (data., seq., solver.)")
    common.add_argument("--preset", choices=sorted(datamod.PRESETS), default=None,
                        help="base parameter set (default: desk)")
    common.add_argument("--out", metavar="DIR", default="run", help="run directory")
    common.add_argument("--seed", type=int, default=None, help="base seed override")

    parser = _Parser(prog="qmrdl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="write a ground-truth phantom")
    p.add_argument("--size", type=int, default=None, help="image side length")

    sub.add_parser("simulate", parents=[common], help="synthesize noisy k-space data")

    p = sub.add_parser("reconstruct", parents=[common], help="run solver variants")
    p.add_argument("--variant", choices=("nested", "one-step", "lm", "all"), default="all")

    sub.add_parser("compare", parents=[common], help="tabulate relative errors of a run")

    p = sub.add_parser("diagnose", parents=[common], help="check descent properties of traces")
    p.add_argument("--variant", choices=("nested", "one-step", "lm", "all"), default="all")
    return parser


def resolve_spec(args, run_dir_config=False):
    """Preset, then config file, then ``--seed``.

    With `run_dir_config` and no ``--config``, ``<out>/config_resolved.txt``
    is used when it exists.
    """
    config = args.config
    resolved = os.path.join(args.out, "config_resolved.txt")
    if config is None and run_dir_config and os.path.exists(resolved):
        config = resolved
    spec = datamod.PRESETS[args.preset or "desk"]
    if config is not None:
        if not os.path.exists(config):
            raise ConfigError(f"config file not found: {config}")
        sections = split_sections(read_keyvalue(config), SECTIONS)
        spec = datamod.spec_from_mapping(sections, spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    if getattr(args, "size", None):
        spec = replace(spec, n1=args.size, n2=args.size)
    return spec


def _variants(args, spec):
    return spec.variants if args.variant == "all" else (args.variant,)


def cmd_phantom(args, out):
    spec = resolve_spec(args)
    ph = datamod.make_phantom(spec.n1, spec.n2, spec.seed_for("phantom") if args.seed is None
                              else args.seed)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "phantom.npy"), ph.u)
    np.save(os.path.join(args.out, "labels.npy"), ph.labels)
    datamod.save_images(args.out, "phantom", ph.u, None, spec.solver)
    with open(os.path.join(args.out, "regions.csv"), "w") as fh:
        fh.write("label,name,rho,t1,t2\n")
        for reg in ph.regions:
            fh.write(f"{reg.label},{reg.name},{reg.values[0]!r},{reg.values[1]!r},{reg.values[2]!r}\n")
    print(f"phantom {spec.n1}x{spec.n2} seed={ph.seed} regions={len(ph.regions)} -> {args.out}",
          file=out)
    return 0


def cmd_simulate(args, out):
    spec = resolve_spec(args)
    _, _, data = datamod.write_inputs(args.out, spec)
    frac = data.masks.masks.mean()
    print(f"simulated {spec.n1}x{spec.n2}x{spec.L} r={spec.r} sigma={spec.sigma} "
          f"sampled={frac:.4f} -> {args.out}", file=out)
    return 0


def cmd_reconstruct(args, out):
    spec = resolve_spec(args, run_dir_config=True)
    if not os.path.exists(os.path.join(args.out, "kspace.bin")):
        datamod.write_inputs(args.out, spec)
    truth, seq, data = datamod.load_inputs(args.out, spec)
    for variant in _variants(args, spec):
        u, trace = datamod.reconstruct_into(args.out, variant, spec, seq, data, truth)
        print(f"{variant}: {len(trace) - 1} iterations, J_d {trace.J[0]:.6g} -> {trace.J[-1]:.6g}",
              file=out)
    return 0


def cmd_compare(args, out):
    spec = resolve_spec(args, run_dir_config=True)
    if not os.path.exists(os.path.join(args.out, "truth.npy")):
        raise ConfigError(f"{args.out} is not a run directory (no truth.npy)")
    rows = datamod.compile_report(args.out, spec)
    if not rows:
        raise ConfigError(f"no reconstructions found in {args.out}")
    print(datamod.format_table(datamod.read_report(os.path.join(args.out, "report.csv"))),
          file=out)
    return 0


def diagnose(run_dir, variants=None):
    """Check every trace in `run_dir`.

    Returns a list of ``(variant, name, passed, first_failing_k, detail)``.
    Raises :class:`ConfigError` when there is no usable trace.
    """
    paths = sorted(glob.glob(os.path.join(run_dir, "trace_*.csv")))
    if variants:
        paths = [p for p in paths if os.path.basename(p)[6:-4] in variants]
    if not paths:
        raise ConfigError(f"no trace files in {run_dir}")
    report = []
    for path in paths:
        variant = os.path.basename(path)[6:-4]
        try:
            trace = solver.IterationTrace.from_csv(path, variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(trace) < 2:
            raise ConfigError(f"{path}: trace has no iterations")
        for name, ok, k, detail in solver.check_trace(trace, strict_inner_bound=False):
            report.append((variant, name, ok, k, detail))
    return report


def cmd_diagnose(args, out):
    variants = None if args.variant == "all" else (args.variant,)
    report = diagnose(args.out, variants)
    failed = 0
    for variant, name, ok, k, detail in report:
        status = "PASS" if ok else f"FAIL k={k}"
        print(f"{variant:<9} {name:<20} {status:<10} {detail}", file=out)
        failed += not ok
    if failed:
        raise NumericalFailure(f"{failed} diagnostic check(s) failed")
    return 0


COMMANDS = {"phantom": cmd_phantom, "simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "compare": cmd_compare, "diagnose": cmd_diagnose}


def _fail(code, message, status, err):
    print(f"qmrdl-error code={code} message={json.dumps(str(message))}", file=err)
    return status


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        return _fail("config", exc, 1, err)
    except (solver.BacktrackingFailed, QPNotConverged, NumericalFailure,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", exc, 2, err)
    except (ValueError, KeyError) as exc:
        # invalid parameter values surface as ValueError from the library
        return _fail("config", exc, 1, err)


if __name__ == "__main__":
    sys.exit(main())

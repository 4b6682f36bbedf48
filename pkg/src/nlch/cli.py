"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 solver failure,
3 invariant violation (a discrete energy increased).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .io import (
    KEYS,
    ConfigError,
    _convert,
    config_from_spec,
    load_config,
    render_config,
    write_snapshot,
    write_telemetry,
)
from .krylov import SolverError
from .sav import InvariantViolation

log = logging.getLogger("nlch")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INVARIANT = 0, 1, 2, 3
COMMANDS = ("run", "conv-time", "conv-space", "bench", "energy-decay")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--preset", choices=ex.PRESETS, help="built-in example setup")
    common.add_argument("--paper-scale", action="store_true",
                        help="use the full-size grids and ladders (slow)")
    common.add_argument("--solver", choices=("fast", "direct"))
    common.add_argument("--scheme", choices=("sav1", "sav2"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nlch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="integrate one simulation")
    sub.add_parser("conv-time", parents=[common], help="temporal self-convergence table")
    sub.add_parser("conv-space", parents=[common], help="spatial self-convergence table")
    bench = sub.add_parser("bench", parents=[common], help="fast vs direct timings")
    bench.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    decay = sub.add_parser("energy-decay", parents=[common], help="coarsening power law")
    decay.add_argument("--t1", type=float, default=0.5)
    decay.add_argument("--t2", type=float, default=10.0)
    return parser


def _default_preset(command: str) -> str:
    return "example3" if command == "energy-decay" else "example1"


def _build(args):
    """Resolve ``(config, spec)`` from config file, preset and flags."""
    name = args.preset
    study = {"conv-time": "temporal", "conv-space": "spatial"}.get(args.command, "run")
    if args.config:
        cfg = load_config(args.config)
        name = name or cfg.init
        base = ex.preset(name, paper_scale=args.paper_scale, study=study)
        spec = cfg.to_spec(base)
    else:
        name = name or _default_preset(args.command)
        spec = ex.preset(name, paper_scale=args.paper_scale, study=study)
        cfg = config_from_spec(spec)

    for item in args.set:
        key, sep, raw = (part.strip() for part in item.partition("="))
        if not sep or key not in KEYS:
            raise ConfigError(f"--set expects KEY=VALUE with a known key, got {item!r}")
        attr, value = _convert(key, raw, 0)
        if attr in ("output_dir", "snapshot_every", "version"):
            cfg = replace(cfg, **{attr: value})
        else:
            spec = replace(spec, **{"preset" if attr == "init" else attr: value})

    overrides = {}
    if args.solver:
        overrides["solver"] = "fast_cg" if args.solver == "fast" else "direct"
    if args.scheme:
        overrides["scheme"] = args.scheme
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.command == "run" and args.paper_scale and not spec.snapshot_times:
        times = {"example2": ex.EXAMPLE2_SNAPSHOTS, "example3": ex.EXAMPLE3_SNAPSHOTS}
        overrides["snapshot_times"] = times.get(spec.preset, ())
    spec = replace(spec, **overrides)
    if args.command in ("run", "energy-decay"):
        ex.check_runnable(spec)  # fail before any output is written
    out = Path(args.out or cfg.output_dir)
    return cfg, spec, out


def _cmd_run(spec, cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    samples = []

    def snap(step, t, phi):
        write_snapshot(out / f"snapshot_{step:07d}.txt", t, phi, L=spec.L)

    try:
        res = ex.run_simulation(spec, on_sample=samples.append, on_snapshot=snap,
                                snapshot_every=cfg.snapshot_every)
    finally:
        write_telemetry(out / "telemetry.csv", samples)
    (out / "config.txt").write_text(
        render_config(config_from_spec(spec, output_dir=str(out),
                                       snapshot_every=cfg.snapshot_every)))
    last = res.samples[-1]
    print(f"{spec.preset} {spec.scheme}: {last.step} steps to t={last.t:g} in "
          f"{res.seconds:.1f}s; modified energy {last.modified_energy:.10g}, "
          f"mass {last.mass:.12g}")


def _cmd_conv(spec, out: Path, kind: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    study = ex.temporal_study if kind == "time" else ex.spatial_study
    table = study(spec)
    table.to_csv(out / f"conv_{kind}.csv")
    print(table.format())


def _cmd_bench(spec, out: Path, sizes) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = ex.benchmark(spec, Ms=sizes)
    ex.write_bench_csv(out / "bench.csv", rows)
    print(f"{'M':>5} {'N':>8} {'P':>5} {'matvec s':>11} {'cg s':>11} {'it':>4} {'direct s':>11}")
    for r in rows:
        direct = "skipped" if r.direct_seconds is None else f"{r.direct_seconds:.4e}"
        print(f"{r.M:>5} {r.N:>8} {r.P:>5} {r.matvec_seconds:>11.4e} "
              f"{r.fast_seconds:>11.4e} {r.cg_iterations:>4} {direct:>11}")


def _cmd_energy_decay(spec, out: Path, t1: float, t2: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    res = ex.energy_decay_study(spec, t1=t1, t2=t2)
    with open(out / "energy_decay.csv", "w") as fh:
        fh.write("t,original_energy,modified_energy\n")
        for t, e, m in zip(res.t, res.original, res.modified):
            fh.write(f"{t!r},{e!r},{m!r}\n")
    print(f"log-log slope of the original energy on [{t1:g}, {t2:g}]: {res.slope:.4f}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ex.tune_allocator()
    try:
        cfg, spec, out = _build(args)
    except (ConfigError, ValueError) as exc:
        print(f"nlch: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            _cmd_run(spec, cfg, out)
        elif args.command == "conv-time":
            _cmd_conv(spec, out, "time")
        elif args.command == "conv-space":
            _cmd_conv(spec, out, "space")
        elif args.command == "bench":
            _cmd_bench(spec, out, args.sizes)
        else:
            _cmd_energy_decay(spec, out, args.t1, args.t2)
    except InvariantViolation as exc:
        print(f"nlch: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except SolverError as exc:
        print(f"nlch: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, ValueError) as exc:
        print(f"nlch: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

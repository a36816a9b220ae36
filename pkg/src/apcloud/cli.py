"""Command-line driver for the field solvers and the benchmark experiments.

Every subcommand writes its CSVs and a ``summary.txt`` into the output
directory. Settings come from flags, then from an optional ``key = value``
file given with ``--config``, then from defaults. Exit codes: 0 success,
2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from apcloud import benchmark as bm
from apcloud._csv import write_csv
from apcloud.geometry import KeyCapacityError, OutOfDomainError
from apcloud.gfd import DegenerateStencilError, IllConditionedStencilError
from apcloud.octree import DepthExhaustedError, EmptyTreeError, StencilStarvationError
from apcloud.solver import PartitionError
from apcloud.sparse import ConvergenceError

SUBCOMMANDS = (
    "solve-pic", "solve-apcloud", "benchmark-2d", "benchmark-3d",
    "convergence", "self-force", "timing",
)
METHODS = ("apcloud", "pic", "both")
WEIGHT_FORMS = ("normalized", "literal")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

NUMERICAL_ERRORS = (
    ConvergenceError, DegenerateStencilError, IllConditionedStencilError,
    StencilStarvationError, DepthExhaustedError, EmptyTreeError, PartitionError,
    OutOfDomainError, KeyCapacityError, bm.ReferenceRangeError, FloatingPointError,
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause, code):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.code = code


@dataclass
class RunConfig:
    subcommand: str = "benchmark-2d"
    dim: int = 2
    N: int = 1_000_000
    seed: int = 42
    method: str = "apcloud"
    c: float = 0.04
    k: int = 2
    grid: int = 41
    out: str = "out"
    tol: float = 1e-10
    weight_form: str = "normalized"
    levels: int = 4
    finest_level: int = 6
    steps: int = 31

    def validate(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.N < 1:
            raise ConfigError("N must be positive")
        if self.c <= 0:
            raise ConfigError("c must be positive")
        if self.grid < 3:
            raise ConfigError("grid needs at least 3 nodes per dimension")
        if not 0 < self.tol < 1:
            raise ConfigError("tol must lie in (0, 1)")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        if self.weight_form not in WEIGHT_FORMS:
            raise ConfigError(f"weight_form must be one of {', '.join(WEIGHT_FORMS)}")
        if self.levels < 2:
            raise ConfigError("levels must be at least 2")
        if not 2 <= self.finest_level <= 12:
            raise ConfigError("finest_level must lie in [2, 12]")
        if self.steps < 3:
            raise ConfigError("steps must be at least 3")
        return self


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}

# settings that differ from the shared defaults for one subcommand
SUBCOMMAND_DEFAULTS = {
    "benchmark-3d": {"dim": 3},
    # the first rung of the ladder has about 240 nodes
    "convergence": {"c": 2.4},
}
DIM3_DEFAULTS = {"N": 100_000, "grid": 65}


def _cast(key, raw):
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        return _CASTS[kind](raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES or key == "subcommand":
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _cast(key, raw)
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="apcloud", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="file of 'key = value' lines")
    sup = argparse.SUPPRESS
    parser.add_argument("--dim", type=int, default=sup)
    parser.add_argument("--N", "-N", dest="N", type=float, default=sup,
                        help="particle count (1e6 in 2D, 1e5 in 3D)")
    parser.add_argument("--seed", type=int, default=sup)
    parser.add_argument("--method", default=sup, help="apcloud, pic or both")
    parser.add_argument("--c", type=float, default=sup, help="error-balance tuning parameter")
    parser.add_argument("--k", type=int, default=sup, help="GFD order (>= 2)")
    parser.add_argument("--grid", type=int, default=sup, help="PIC nodes per dimension")
    parser.add_argument("--out", default=sup, help="output directory")
    parser.add_argument("--tol", type=float, default=sup, help="relative Krylov tolerance")
    parser.add_argument("--weight-form", dest="weight_form", default=sup)
    parser.add_argument("--levels", type=int, default=sup, help="convergence ladder rungs")
    parser.add_argument("--finest-level", dest="finest_level", type=int, default=sup)
    parser.add_argument("--steps", type=int, default=sup, help="self-force path samples")
    return parser


def parse_config(argv, config_file=None):
    """Merge flags, config file and defaults into a validated :class:`RunConfig`."""
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    sub = args.pop("subcommand")
    path = args.pop("config", None) or config_file
    from_file = read_config_file(path) if path else {}
    values = dict(SUBCOMMAND_DEFAULTS.get(sub, {}))
    values.update(from_file)
    if "N" in args:
        args["N"] = _cast("N", args["N"])
    values.update(args)
    dim = values.get("dim", 2)
    for key, val in DIM3_DEFAULTS.items():
        if dim == 3 and key not in values:
            values[key] = val
    return RunConfig(subcommand=sub, **values).validate()


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except NUMERICAL_ERRORS as exc:
        raise StageError(name, exc, EXIT_NUMERICAL) from exc
    except OSError as exc:
        raise StageError(name, exc, EXIT_IO) from exc


def _out(cfg):
    out = Path(cfg.out)
    with stage("prepare output"):
        out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(out, lines):
    with stage("write summary"):
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def _error_note():
    return ("errors: RMS over particles of (computed - reference), divided by the "
            "largest reference magnitude on the particles")


def _setup(cfg):
    with stage("sample particles and reference"):
        return bm.beam_setup(cfg.dim, cfg.N, cfg.seed)


def _run_methods(cfg, particles, domain, ref):
    reports, sols = [], []
    if cfg.method in ("apcloud", "both"):
        with stage("AP-Cloud solve"):
            rep, sol = bm.run_apcloud(particles, domain, ref, cfg.c, cfg.k, cfg.seed,
                                      cfg.weight_form, tol=cfg.tol)
        reports.append(rep)
        sols.append(sol)
    if cfg.method in ("pic", "both"):
        with stage("PIC solve"):
            rep, sol = bm.run_pic(particles, domain, ref, cfg.grid, cfg.seed)
        reports.append(rep)
        sols.append(sol)
    return reports, sols


def _report_lines(cfg, reports):
    lines = [f"{cfg.subcommand}: dim={cfg.dim} N={cfg.N} seed={cfg.seed}", _error_note()]
    for r in reports:
        extra = f"c={r.c:g} " if r.method == "apcloud" else f"grid={cfg.grid}^{cfg.dim} "
        lines.append(f"  {r.method:8s} {extra}n={r.n_nodes} err_phi={r.err_phi:.4g} "
                     f"err_gradx={r.err_gradx:.4g} time={r.wall_time:.3g}s")
    return lines


def cmd_benchmark(cfg):
    out = _out(cfg)
    _, domain, particles, ref = _setup(cfg)
    reports, _ = _run_methods(cfg, particles, domain, ref)
    with stage("write results"):
        bm.write_results(out / "results.csv", reports)
    _write_summary(out, _report_lines(cfg, reports))


def cmd_solve_apcloud(cfg):
    out = _out(cfg)
    _, domain, particles, ref = _setup(cfg)
    cfg = dataclasses.replace(cfg, method="apcloud")
    (rep,), (sol,) = _run_methods(cfg, particles, domain, ref)
    with stage("write results"):
        bm.write_results(out / "results.csv", [rep])
        sol.dump_nodes_csv(out / "nodes.csv")
        sol.dump_particles_csv(out / "particles.csv")
        sol.dump_timing_csv(out / "timing.csv")
    _write_summary(out, _report_lines(cfg, [rep]) + [
        f"  linear residuals: rho {sol.residuals['rho']:.3g}, phi {sol.residuals['phi']:.3g}",
    ])


def cmd_solve_pic(cfg):
    out = _out(cfg)
    _, domain, particles, ref = _setup(cfg)
    cfg = dataclasses.replace(cfg, method="pic")
    (rep,), (sol,) = _run_methods(cfg, particles, domain, ref)
    with stage("write results"):
        bm.write_results(out / "results.csv", [rep])
        sol.dump_csv(out / "grid.csv")
        write_csv(out / "timing.csv", ["stage", "seconds"], [["Total running time", rep.wall_time]])
    _write_summary(out, _report_lines(cfg, [rep]))


def cmd_timing(cfg):
    out = _out(cfg)
    _, domain, particles, ref = _setup(cfg)
    with stage("AP-Cloud solve"):
        rep, sol = bm.run_apcloud(particles, domain, ref, cfg.c, cfg.k, cfg.seed,
                                  cfg.weight_form, tol=cfg.tol)
    with stage("write results"):
        sol.dump_timing_csv(out / "timing.csv")
        bm.write_results(out / "results.csv", [rep])
    lines = [f"timing: dim={cfg.dim} N={cfg.N} c={cfg.c:g} n={rep.n_nodes}"]
    for label, sec in sol.timings.items():
        lines.append(f"  {label:32s} {sec:8.3f} s")
    lines.append(f"  {'Total running time':32s} {sol.total_time:8.3f} s")
    _write_summary(out, lines)


def cmd_convergence(cfg):
    out = _out(cfg)
    with stage("benchmark reference"):
        params = bm.BeamParams.benchmark(cfg.dim)
        ref = bm.radial_reference_solve(params, cfg.dim)
    with stage("convergence ladder"):
        rows = bm.convergence_study_noise_free(params, cfg.c, cfg.levels, cfg.N, cfg.k,
                                               ref=ref, weight_form=cfg.weight_form)
    with stage("write results"):
        write_csv(out / "convergence.csv", bm.CONVERGENCE_HEADER, [r.row() for r in rows])
    fmt = lambda v: "-" if v is None else f"{v:.2f}"  # noqa: E731
    lines = [f"convergence: dim={cfg.dim}, exact cell averages, base c={cfg.c:g}, "
             f"{cfg.levels} nested levels", _error_note(),
             "  n        err_phi     err_gradx   order_phi order_gradx"]
    for r in rows:
        lines.append(f"  {r.n:<8d} {r.err_phi:<11.4g} {r.err_gradx:<11.4g} "
                     f"{fmt(r.order_phi):9s} {fmt(r.order_gradx)}")
    if len(rows) > 2:
        n = np.array([r.n for r in rows], dtype=float)
        h = n ** (-1.0 / cfg.dim)
        for name, key in (("phi", "err_phi"), ("gradx", "err_gradx")):
            e = np.array([getattr(r, key) for r in rows])
            slope = np.polyfit(np.log(h), np.log(e), 1)[0]
            lines.append(f"  least-squares order over all levels ({name}): {slope:.2f}")
    _write_summary(out, lines)


def self_force_path(cfg):
    x = np.linspace(-0.15, 0.15, cfg.steps)
    path = np.zeros((cfg.steps, cfg.dim))
    path[:, 0] = x
    return path


def cmd_self_force(cfg):
    out = _out(cfg)
    path = self_force_path(cfg)
    with stage("self-force scan"):
        res = bm.self_force_scan(path, finest_level=cfg.finest_level, dim=cfg.dim)
    axes = "xyz"[: cfg.dim]
    header = ([f"{a}" for a in axes] + [f"apcloud_F{a}" for a in axes]
              + [f"pic_F{a}" for a in axes] + ["n_nodes"])
    rows = [list(p) + list(a) + list(q) + [n]
            for p, a, q, n in zip(path, res.apcloud, res.pic, res.n_nodes)]
    with stage("write results"):
        write_csv(out / "self_force.csv", header, rows)
    ap = np.linalg.norm(res.apcloud, axis=1) / res.field_scale
    pc = np.linalg.norm(res.pic, axis=1) / res.field_scale
    _write_summary(out, [
        f"self-force: dim={cfg.dim}, blob width 6 cells of level {cfg.finest_level}, "
        f"{cfg.steps} positions on x in [-0.15, 0.15]",
        f"  field scale (max |E| of the blob): {res.field_scale:.4g}",
        f"  AP-Cloud |F|/scale: max {ap.max():.3g}, mean {ap.mean():.3g}, "
        f"jump ratio {bm.jump_ratio(res.apcloud):.3g}",
        f"  PIC      |F|/scale: max {pc.max():.3g}, mean {pc.mean():.3g}, "
        f"jump ratio {bm.jump_ratio(res.pic):.3g}",
        "  jump ratio: largest successive change of the force vector over the median change",
    ])


COMMANDS = {
    "solve-pic": cmd_solve_pic,
    "solve-apcloud": cmd_solve_apcloud,
    "benchmark-2d": cmd_benchmark,
    "benchmark-3d": cmd_benchmark,
    "convergence": cmd_convergence,
    "self-force": cmd_self_force,
    "timing": cmd_timing,
}


def run(cfg):
    """Execute one configured run; return the process exit status."""
    t0 = time.perf_counter()
    try:
        COMMANDS[cfg.subcommand](cfg)
    except StageError as exc:
        print(f"apcloud {cfg.subcommand}: error {exc}", file=sys.stderr)
        return exc.code
    print(f"done in {time.perf_counter() - t0:.1f} s; outputs in {cfg.out}", file=sys.stderr)
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"apcloud: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())

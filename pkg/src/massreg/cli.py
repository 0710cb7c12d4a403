"""Command-line entry point.

Three subcommands:

``register``
    Load a reference/template PGM pair, preprocess, run the constrained
    solver (single- or multi-level), and write the iteration trace plus
    visual artifacts into the output directory.

``synth``
    Generate a benchmark pair (analytic warp with known displacement, or a
    shifted blob pair) and dump it in the formats ``register`` consumes.

``compare``
    Run the constrained solver once and the quadratic-penalty solver for
    each requested weight alpha; write a combined per-iteration trace.

Exit status: 0 converged, 2 terminated without convergence, 1 error (bad
usage, unreadable input, solver failure).  All outputs are deterministic
functions of the inputs, flags, and seed.

Output formats are documented in :mod:`massreg.io`; report.csv and
sweep.csv headers are fixed (io.REPORT_HEADER / io.SWEEP_HEADER).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from massreg import io as mio
from massreg.constraint import volume
from massreg.grid import CellField, GridGeometry, StaggeredField
from massreg.image import fit, preprocess, warp
from massreg.sqp import (RegistrationReport, SQPConfig, register_multilevel,
                         register_one_level, solve_regularized)
from massreg.synthetic import build_ex1, build_ex2_synthetic


@dataclass
class RunConfig:
    """Everything a run depends on; serialized verbatim into run.json."""

    command: str = ""
    reference: str = ""
    template: str = ""
    outdir: str = "."
    truth_u1: str = ""
    truth_u2: str = ""
    problem: str = "ex1"
    n: int = 64
    seed: int = 0
    levels: int = 1
    alphas: list[float] = field(default_factory=list)
    delta: float = 0.03
    smooth: bool = False
    feasibility_only: bool = False
    emit_csv: bool = True
    emit_svg: bool = True
    emit_fields: bool = True
    solver: SQPConfig = field(default_factory=SQPConfig)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def geometry_for(self, shape: tuple[int, int]) -> GridGeometry:
        """Unit-square convention: h = 1/max(n1, n2), origin (0, 0)."""
        n2, n1 = shape
        return GridGeometry(n1, n2, 1.0 / max(n1, n2), (0.0, 0.0))


class _Parser(argparse.ArgumentParser):
    # Usage problems are errors (exit 1), same as I/O failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    defaults = SQPConfig()
    g = p.add_argument_group("solver", "stopping rules and inner solver")
    g.add_argument("--mu", type=float, default=defaults.mu,
                   help="first elastic parameter (default %(default)s)")
    g.add_argument("--lam", type=float, default=defaults.lam,
                   help="second elastic parameter (default %(default)s)")
    g.add_argument("--dmp-tolerance", type=float, default=defaults.dmp_tolerance,
                   help="finest-level feasibility target (default %(default)s)")
    g.add_argument("--level-tol-growth", type=float,
                   default=defaults.level_tol_growth,
                   help="coarse levels stop at growth^level * tolerance "
                        "(default %(default)s)")
    g.add_argument("--max-outer", type=int, default=defaults.max_outer,
                   help="outer iteration cap per level (default %(default)s)")
    g.add_argument("--sigma0", type=float, default=defaults.sigma0,
                   help="initial merit penalty (default %(default)s)")
    g.add_argument("--eta", type=float, default=defaults.eta,
                   help="Armijo fraction (default %(default)s)")
    g.add_argument("--backtrack", type=float, default=defaults.backtrack,
                   help="step shrink factor (default %(default)s)")
    g.add_argument("--max-backtracks", type=int, default=defaults.max_backtracks,
                   help="line-search halvings (default %(default)s)")
    g.add_argument("--delta-fold", type=float, default=defaults.delta_fold,
                   help="cell-volume floor for accepting a step "
                        "(default %(default)s)")
    g.add_argument("--inner-tol", type=float, default=defaults.inner_tol,
                   help="fixed inner relative tolerance (default: adaptive)")
    g.add_argument("--inner-floor", type=float, default=defaults.inner_floor,
                   help="tightest adaptive inner tolerance (default %(default)s)")
    g.add_argument("--inner-max-iter", type=int, default=defaults.inner_max_iter,
                   help="inner iteration cap (default %(default)s)")
    g.add_argument("--inner-restart", type=int, default=defaults.inner_restart,
                   help="GMRES restart length (default %(default)s)")
    g.add_argument("--inner-method", choices=("gmres", "direct"),
                   default=defaults.inner_method,
                   help="saddle-point solver (default %(default)s)")
    g.add_argument("--max-step-retries", type=int,
                   default=defaults.max_step_retries,
                   help="tolerance tightenings before giving up on a step "
                        "(default %(default)s)")
    g.add_argument("--stationarity-rtol", type=float,
                   default=defaults.stationarity_rtol,
                   help="relative gradient tolerance (default %(default)s)")
    g.add_argument("--alpha", type=float, default=defaults.alpha,
                   help="penalty weight for the regularized solver "
                        "(default %(default)s)")
    g.add_argument("--reg-stop-on-dmp", action="store_true",
                   default=defaults.reg_stop_on_dmp,
                   help="regularized solver also stops at the feasibility "
                        "target")


def _solver_config(ns: argparse.Namespace) -> SQPConfig:
    fields = {f.name for f in dataclasses.fields(SQPConfig)}
    return SQPConfig(**{k: v for k, v in vars(ns).items() if k in fields})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="massreg",
                description="Mass-preserving elastic registration of 2d "
                            "grayscale images.")
    sub = p.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", parents=[], help="register two images",
                         description="Register template onto reference so "
                                     "the deformed template carries the "
                                     "reference's local mass.")
    reg.add_argument("reference", help="reference image (binary PGM)")
    reg.add_argument("template", help="template image (binary PGM)")
    reg.add_argument("-o", "--outdir", default=".", help="output directory")
    reg.add_argument("--levels", type=int, default=1,
                     help="pyramid depth; 1 = single level (default 1)")
    reg.add_argument("--delta", type=float, default=0.03,
                     help="preprocessing intensity offset (default 0.03)")
    reg.add_argument("--smooth", action="store_true",
                     help="Gaussian smoothing during preprocessing")
    reg.add_argument("--truth-u1", default="",
                     help="ground-truth u1 dump for the DE column")
    reg.add_argument("--truth-u2", default="",
                     help="ground-truth u2 dump for the DE column")
    reg.add_argument("--feasibility-only", action="store_true",
                     help="stop on the feasibility target alone, without "
                          "the gradient test")
    reg.add_argument("--no-csv", dest="emit_csv", action="store_false",
                     help="skip report.csv")
    reg.add_argument("--no-svg", dest="emit_svg", action="store_false",
                     help="skip grid.svg")
    reg.add_argument("--no-fields", dest="emit_fields", action="store_false",
                     help="skip u1.f64/u2.f64")
    _add_solver_flags(reg)

    syn = sub.add_parser("synth", help="generate a benchmark pair",
                         description="Write a synthetic reference/template "
                                     "pair plus ground truth when known.")
    syn.add_argument("problem", choices=("ex1", "ex2"),
                     help="ex1: analytic warp with known displacement; "
                          "ex2: shifted blob pair")
    syn.add_argument("-n", type=int, default=64, help="cells per side "
                     "(default 64)")
    syn.add_argument("--seed", type=int, default=0,
                     help="blob layout seed for ex2 (default 0)")
    syn.add_argument("-o", "--outdir", default=".", help="output directory")
    _add_solver_flags(syn)

    cmp_ = sub.add_parser("compare", help="constrained vs penalty sweep",
                          description="Run the constrained solver once and "
                                      "the quadratic-penalty solver per "
                                      "alpha; write sweep.csv.")
    cmp_.add_argument("reference", help="reference image (binary PGM)")
    cmp_.add_argument("template", help="template image (binary PGM)")
    cmp_.add_argument("-o", "--outdir", default=".", help="output directory")
    cmp_.add_argument("--alphas", type=float, nargs="*", default=[],
                      help="penalty weights, e.g. --alphas 1e-1 1e-2 1e-3")
    cmp_.add_argument("--delta", type=float, default=0.03,
                      help="preprocessing intensity offset (default 0.03)")
    cmp_.add_argument("--smooth", action="store_true",
                      help="Gaussian smoothing during preprocessing")
    cmp_.add_argument("--truth-u1", default="",
                      help="ground-truth u1 dump for the DE column")
    cmp_.add_argument("--truth-u2", default="",
                      help="ground-truth u2 dump for the DE column")
    cmp_.add_argument("--feasibility-only", action="store_true",
                      help="constrained run stops on feasibility alone")
    _add_solver_flags(cmp_)

    return p


def parse_args(argv=None) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = RunConfig(command=ns.command, solver=_solver_config(ns))
    for name in ("reference", "template", "outdir", "truth_u1", "truth_u2",
                 "problem", "n", "seed", "levels", "alphas", "delta",
                 "smooth", "feasibility_only", "emit_csv", "emit_svg",
                 "emit_fields"):
        if hasattr(ns, name):
            setattr(cfg, name, getattr(ns, name))
    return cfg


# ---------------------------------------------------------------------------
# Shared pieces


def _load_pair(cfg: RunConfig):
    for path in (cfg.reference, cfg.template):
        if not os.path.exists(path):
            raise FileNotFoundError(f"no such file: {path}")
    ref_raw = mio.read_image(cfg.reference)
    tmp_raw = mio.read_image(cfg.template)
    if ref_raw.shape != tmp_raw.shape:
        raise ValueError(f"dimension mismatch: reference {ref_raw.shape} vs "
                         f"template {tmp_raw.shape}")
    geom = cfg.geometry_for(ref_raw.shape)
    reference = mio.image_to_cells(geom, ref_raw)
    template = mio.image_to_cells(geom, tmp_raw)
    reference, template, _ = preprocess(reference, template, delta=cfg.delta,
                                        smooth=cfg.smooth)
    if reference.values.min() <= 0 or template.values.min() <= 0:
        raise ValueError("non-positive intensities after preprocessing")
    truth = None
    if cfg.truth_u1 or cfg.truth_u2:
        if not (cfg.truth_u1 and cfg.truth_u2):
            raise ValueError("--truth-u1 and --truth-u2 must be given together")
        truth = mio.read_displacement(geom, cfg.truth_u1, cfg.truth_u2)
    return geom, reference, template, truth


def _write_registration_outputs(cfg: RunConfig, report: RegistrationReport,
                                template: CellField) -> None:
    os.makedirs(cfg.outdir, exist_ok=True)
    pgm_maps = {}
    u = report.u
    if u is not None:
        warped = warp(fit(template), u)
        lo, hi = mio.write_pgm(os.path.join(cfg.outdir, "warped.pgm"),
                               warped.as_matrix())
        pgm_maps["warped.pgm"] = [lo, hi]
        vol = volume(u)
        lo, hi = mio.write_pgm(os.path.join(cfg.outdir, "volume.pgm"),
                               vol.as_matrix())
        pgm_maps["volume.pgm"] = [lo, hi]
        if cfg.emit_svg:
            mio.write_grid_svg(os.path.join(cfg.outdir, "grid.svg"), u)
        if cfg.emit_fields:
            mio.write_displacement(cfg.outdir, u)
    if cfg.emit_csv:
        mio.write_report_csv(os.path.join(cfg.outdir, "report.csv"),
                             report.records)
    mio.write_run_json(os.path.join(cfg.outdir, "run.json"), cfg.as_dict(),
                       pgm_maps,
                       {"converged": report.converged,
                        "message": report.message,
                        "stationarity": report.stationarity})


# ---------------------------------------------------------------------------
# Subcommands


def cmd_register(cfg: RunConfig) -> int:
    geom, reference, template, truth = _load_pair(cfg)
    if cfg.levels > 1:
        report = register_multilevel(reference, template, cfg.solver,
                                     num_levels=cfg.levels,
                                     ground_truth=truth)
    else:
        report = register_one_level(
            reference, template, cfg.solver, ground_truth=truth,
            require_stationarity=not cfg.feasibility_only)
    _write_registration_outputs(cfg, report, template)
    if not report.converged:
        print(f"not converged: {report.message or 'iteration limit'}",
              file=sys.stderr)
        return 2
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.problem == "ex1":
        prob = build_ex1(cfg.n, mu=cfg.solver.mu, lam=cfg.solver.lam)
    else:
        prob = build_ex2_synthetic(cfg.n, seed=cfg.seed)
    os.makedirs(cfg.outdir, exist_ok=True)
    pgm_maps = {}
    for name, img in (("reference.pgm", prob.reference),
                      ("template.pgm", prob.template)):
        lo, hi = mio.write_pgm(os.path.join(cfg.outdir, name),
                               img.as_matrix())
        pgm_maps[name] = [lo, hi]
    extra = {"ground_truth": prob.ground_truth is not None}
    if prob.ground_truth is not None:
        mio.write_field(os.path.join(cfg.outdir, "truth_u1.f64"),
                        prob.ground_truth.u1_matrix())
        mio.write_field(os.path.join(cfg.outdir, "truth_u2.f64"),
                        prob.ground_truth.u2_matrix())
    if prob.elas_max is not None:
        with open(os.path.join(cfg.outdir, "elas_max.txt"), "w",
                  encoding="ascii") as f:
            f.write(f"{prob.elas_max:.17e}\n")
        extra["elas_max"] = prob.elas_max
    mio.write_run_json(os.path.join(cfg.outdir, "run.json"), cfg.as_dict(),
                       pgm_maps, extra)
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    if not cfg.alphas:
        print("massreg compare: error: at least one --alphas value is "
              "required", file=sys.stderr)
        return 1
    geom, reference, template, truth = _load_pair(cfg)
    runs = []
    constrained = register_one_level(
        reference, template, cfg.solver, ground_truth=truth,
        require_stationarity=not cfg.feasibility_only)
    runs.append(("constrained", float("nan"), constrained))
    ok = constrained.converged
    for a in cfg.alphas:
        rep = solve_regularized(reference, template,
                                dataclasses.replace(cfg.solver, alpha=a),
                                ground_truth=truth)
        runs.append((f"alpha={a:g}", a, rep))
        ok = ok and rep.converged
    os.makedirs(cfg.outdir, exist_ok=True)
    mio.write_sweep_csv(os.path.join(cfg.outdir, "sweep.csv"), runs)
    mio.write_run_json(os.path.join(cfg.outdir, "run.json"), cfg.as_dict(),
                       {}, {"converged": ok})
    return 0 if ok else 2


def main(argv=None) -> int:
    try:
        cfg = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if cfg.command == "register":
            return cmd_register(cfg)
        if cfg.command == "synth":
            return cmd_synth(cfg)
        return cmd_compare(cfg)
    except Exception as e:
        print(f"massreg {cfg.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

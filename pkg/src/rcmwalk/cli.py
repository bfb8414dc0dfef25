"""Command-line front end.

Subcommands: ``generate``, ``decompose``, ``simulate``, ``exact``,
``spectrum``, ``exponent``, ``bounds``, ``report``.  Every run writes a
manifest next to its CSVs.  Exit codes: 0 success, 2 validation problem,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericalError, RcmError, ValidationError
from .experiments import (
    load_config,
    run_annealed_exponent,
    run_bound_suite,
    run_quenched_exponent,
    write_csv,
    write_manifest,
)
from .heatkernel import default_time_grid, return_prob_curve_exact, return_prob_mc
from .lattice import (
    BoxGeometry,
    derive_environment_seeds,
    homogeneous_environment,
    load_environment,
    sample_environment,
    save_environment,
)
from .percolation import (
    hole_volume_report,
    percolation_density_warning,
    strong_cluster,
    threshold_for_density,
    write_decomposition_csv,
)
from .spectral import OperatorSpec, eigenvalue_floor, lambda1, prescribed_killing_rate


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for ensembles")


def _out_dir(args, default: str = "out") -> Path:
    out = Path(args.out if args.out is not None else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_env_arg(args):
    if getattr(args, "env", None):
        return load_environment(args.env)
    if getattr(args, "homog", False):
        if args.d is None or args.N is None:
            raise ValidationError("--homog needs --d and --N")
        # --N names the operator box; the stored environment is one layer wider
        return homogeneous_environment(args.d, args.N + 1)
    if getattr(args, "d", None) is not None and getattr(args, "N", None) is not None:
        gamma = getattr(args, "gamma", None)
        if gamma is None:
            raise ValidationError("sampling an environment needs --gamma (or use --homog)")
        seed = args.seed if args.seed is not None else 1
        return sample_environment(BoxGeometry(args.d, args.N + 1), gamma, seed)
    raise ValidationError("provide --env FILE, or --homog/--gamma with --d and --N")


def _cmd_generate(args) -> int:
    start = time.monotonic()
    out = _out_dir(args)
    if not args.homog and args.gamma is None:
        raise ValidationError("generate needs --gamma or --homog")
    master = args.seed if args.seed is not None else 1
    names = []
    if args.homog:
        env = homogeneous_environment(args.d, args.N)
        name = "env_homog.rcmenv"
        save_environment(env, out / name)
        names.append(name)
    else:
        seeds = derive_environment_seeds(master, args.count)
        for k, seed in enumerate(seeds):
            env = sample_environment(BoxGeometry(args.d, args.N), args.gamma, int(seed))
            name = f"env_{k:04d}.rcmenv"
            save_environment(env, out / name)
            names.append(name)
    write_manifest(
        out,
        "generate",
        None,
        names,
        time.monotonic() - start,
        extra={"master_seed": str(master), "d": str(args.d), "N": str(args.N)},
    )
    print(f"wrote {len(names)} environment(s) to {out}")
    return 0


def _cmd_decompose(args) -> int:
    start = time.monotonic()
    out = _out_dir(args)
    env = _load_env_arg(args)
    if args.xi is not None:
        xi = args.xi
    else:
        if not math.isfinite(env.gamma):
            raise ValidationError("homogeneous environments need an explicit --xi")
        xi = threshold_for_density(env.gamma, args.p)
        warning = percolation_density_warning(env.geometry.d, args.p)
        if warning:
            print(f"warning: {warning}", file=sys.stderr)
    decomp = strong_cluster(env, xi)
    write_decomposition_csv(decomp, out / "decomposition.csv")
    report = hole_volume_report(decomp)
    rows = [
        [int(n), int(v), b, bool(v > b)]
        for n, v, b in zip(report.n_values, report.max_volume_by_n, report.bound_by_n)
    ]
    write_csv(out / "holes_report.csv", ["n", "max_volume", "bound", "exceeds"], rows)
    write_manifest(
        out,
        "decompose",
        None,
        ["decomposition.csv", "holes_report.csv"],
        time.monotonic() - start,
        extra={"xi": str(xi), "cluster_sites": str(decomp.cluster_size), "holes": str(len(decomp.holes))},
    )
    print(
        f"strong cluster: {decomp.cluster_size}/{env.geometry.n_sites} sites, "
        f"{len(decomp.holes)} hole(s), max volume {report.max_volume}"
    )
    return 0


def _cmd_simulate(args) -> int:
    start = time.monotonic()
    out = _out_dir(args)
    env = _load_env_arg(args)
    seed = args.seed if args.seed is not None else 1
    rng = np.random.default_rng([seed, 0x51A1])
    grid = default_time_grid(args.t_min, args.t_max, args.points_per_decade)
    curve = return_prob_mc(env, grid, args.n_paths, rng)
    rows = [
        [curve.t[j], curve.p[j], curve.stderr[j], args.n_paths, seed] for j in range(len(grid))
    ]
    write_csv(out / "trajectory_summary.csv", ["t", "estimate", "stderr", "n_paths", "seed"], rows)
    files = ["trajectory_summary.csv"]
    if args.dump_paths:
        rng2 = np.random.default_rng([seed, 0x51A1])
        from .walk import ensemble_walk

        res = ensemble_walk(env, env.geometry.origin, args.n_paths, float(grid.max()), rng2, real_grid=grid)
        np.savez_compressed(out / "paths.npz", t=grid, site_at=res.site_at, tau=res.tau, seed=seed)
        files.append("paths.npz")
    write_manifest(
        out,
        "simulate",
        None,
        files,
        time.monotonic() - start,
        extra={"master_seed": str(seed), "n_paths": str(args.n_paths)},
    )
    print(f"MC return curve on {len(grid)} grid points written to {out}")
    return 0


def _cmd_exact(args) -> int:
    start = time.monotonic()
    out = _out_dir(args)
    env = _load_env_arg(args)
    box = env.geometry.N - 1 if args.box_radius is None else args.box_radius
    if args.t is not None:
        grid = np.array([args.t], dtype=float)
    else:
        grid = default_time_grid(args.t_min, args.t_max, args.points_per_decade)
    curve = return_prob_curve_exact(env, grid, tol=args.tol, box_radius=box)
    rows = [
        [curve.t[j], curve.p[j], curve.stderr[j], curve.method, curve.d, curve.N, curve.gamma, curve.seed]
        for j in range(len(grid))
    ]
    write_csv(out / "exact_curve.csv", ["t", "p", "stderr", "method", "d", "N", "gamma", "seed"], rows)
    write_manifest(out, "exact", None, ["exact_curve.csv"], time.monotonic() - start)
    if args.t is not None:
        print(repr(float(curve.p[0])))
    else:
        print(f"exact curve on {len(grid)} grid points written to {out}")
    return 0


def _cmd_spectrum(args) -> int:
    start = time.monotonic()
    out = _out_dir(args)
    env = _load_env_arg(args)
    d = env.geometry.d
    box = env.geometry.N - 1 if args.box_radius is None else args.box_radius
    decomp = None
    xi = args.xi
    if math.isfinite(env.gamma):
        xi = xi if xi is not None else threshold_for_density(env.gamma, args.p)
        decomp = strong_cluster(env, xi)
    if args.lam is not None:
        lam = args.lam
    elif math.isfinite(env.gamma):
        lam = prescribed_killing_rate(d, env.gamma, box, args.mu, xi)
    else:
        lam = 0.0
    spec = OperatorSpec(env=env, decomp=decomp, box_radius=box, lam=lam, mu=args.mu)
    rep = lambda1(spec, tol=args.tol)
    m_n = eigenvalue_floor(d, env.gamma, box, args.mu)
    ok = rep.Lambda1 >= m_n
    write_csv(
        out / "spectral_report.csv",
        ["gamma", "d", "N", "xi_hat", "lambda", "Lambda1", "bound_m_N", "pass", "residual", "iterations"],
        [[env.gamma, d, box, xi if xi is not None else "", lam, rep.Lambda1, m_n, ok, rep.residual, rep.iterations]],
    )
    write_manifest(out, "spectrum", None, ["spectral_report.csv"], time.monotonic() - start)
    print(f"Lambda1 = {rep.Lambda1!r} (floor m(N) = {m_n!r}, pass = {bool(ok)})")
    return 0


def _cmd_exponent(args) -> int:
    if args.config is None:
        raise ValidationError("exponent needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out is not None:
        cfg.directory = args.out
    runner = run_annealed_exponent if args.annealed else run_quenched_exponent
    report = runner(cfg, threads=args.threads)
    for agg in report.quenched:
        print(
            f"gamma={agg.gamma}: quenched slope {agg.slope:.4f} "
            f"[{agg.ci_low:.4f}, {agg.ci_high:.4f}] over {agg.n_envs} envs"
        )
    for agg in report.annealed:
        print(f"gamma={agg.gamma}: annealed slope {agg.slope:.4f} [{agg.ci_low:.4f}, {agg.ci_high:.4f}]")
    print(f"report written to {cfg.directory}")
    return 0


def _cmd_bounds(args) -> int:
    if args.config is None:
        raise ValidationError("bounds needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out is not None:
        cfg.directory = args.out
    report = run_bound_suite(cfg, threads=args.threads)
    for name, rate in report.pass_rates.items():
        print(f"{name}: pass rate {rate:.3f}")
    print(f"report written to {cfg.directory}")
    return 0


def _cmd_report(args) -> int:
    root = Path(args.out if args.out is not None else "out")
    manifests = sorted(root.glob("**/manifest.txt"))
    if not manifests:
        raise ValidationError(f"no manifests found under {root}")
    lines = []
    bad = 0
    for mpath in manifests:
        lines.append(f"run: {mpath.parent}")
        for raw in mpath.read_text().splitlines():
            if raw.startswith("file="):
                name, digest = raw[len("file=") :].rsplit(" sha256:", 1)
                fpath = mpath.parent / name
                if not fpath.is_file():
                    status = "MISSING"
                    bad += 1
                elif hashlib.sha256(fpath.read_bytes()).hexdigest() != digest:
                    status = "HASH-MISMATCH"
                    bad += 1
                else:
                    status = "ok"
                lines.append(f"  {name}: {status}")
            elif raw.startswith(("command=", "config_hash=", "master_seed=", "pass_rate_")):
                lines.append(f"  {raw}")
        lines.append("")
    text = "\n".join(lines)
    (root / "report.txt").write_text(text)
    print(text)
    print(f"{len(manifests)} run(s), {bad} stale file(s); report.txt written to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcmwalk",
        description="Random walks among i.i.d. random conductances: simulation and verification",
    )
    parser.add_argument("--version", action="version", version=f"rcmwalk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="sample environments to binary files")
    _common_flags(p_gen)
    p_gen.add_argument("--d", type=int, required=True)
    p_gen.add_argument("--N", type=int, required=True, help="environment box radius")
    p_gen.add_argument("--gamma", type=float, default=None)
    p_gen.add_argument("--homog", action="store_true", help="all-ones conductances")
    p_gen.add_argument("--count", type=int, default=1)
    p_gen.set_defaults(func=_cmd_generate)

    p_dec = sub.add_parser("decompose", help="strong cluster and holes of an environment")
    _common_flags(p_dec)
    p_dec.add_argument("--env", type=str, default=None)
    p_dec.add_argument("--d", type=int, default=None)
    p_dec.add_argument("--N", type=int, default=None)
    p_dec.add_argument("--gamma", type=float, default=None)
    p_dec.add_argument("--homog", action="store_true")
    p_dec.add_argument("--p", type=float, default=0.95, help="strong-bond density")
    p_dec.add_argument("--xi", type=float, default=None, help="explicit threshold")
    p_dec.set_defaults(func=_cmd_decompose)

    p_sim = sub.add_parser("simulate", help="Monte Carlo return-probability curve")
    _common_flags(p_sim)
    p_sim.add_argument("--env", type=str, default=None)
    p_sim.add_argument("--d", type=int, default=None)
    p_sim.add_argument("--N", type=int, default=None)
    p_sim.add_argument("--gamma", type=float, default=None)
    p_sim.add_argument("--homog", action="store_true")
    p_sim.add_argument("--t-min", type=float, default=1.0)
    p_sim.add_argument("--t-max", type=float, default=50.0)
    p_sim.add_argument("--points-per-decade", type=int, default=12)
    p_sim.add_argument("--n-paths", type=int, default=2000)
    p_sim.add_argument("--dump-paths", action="store_true", help="also write raw grid positions (npz)")
    p_sim.set_defaults(func=_cmd_simulate)

    p_ex = sub.add_parser("exact", help="exact return probability (uniformization)")
    _common_flags(p_ex)
    p_ex.add_argument("--env", type=str, default=None)
    p_ex.add_argument("--d", type=int, default=None)
    p_ex.add_argument("--N", type=int, default=None, help="operator box radius")
    p_ex.add_argument("--gamma", type=float, default=None)
    p_ex.add_argument("--homog", action="store_true")
    p_ex.add_argument("--t", type=float, default=None, help="single time; prints the value")
    p_ex.add_argument("--t-min", type=float, default=1.0)
    p_ex.add_argument("--t-max", type=float, default=50.0)
    p_ex.add_argument("--points-per-decade", type=int, default=12)
    p_ex.add_argument("--tol", type=float, default=1e-12)
    p_ex.add_argument("--box-radius", type=int, default=None)
    p_ex.set_defaults(func=_cmd_exact)

    p_sp = sub.add_parser("spectrum", help="principal eigenvalue of the killed operator")
    _common_flags(p_sp)
    p_sp.add_argument("--env", type=str, default=None)
    p_sp.add_argument("--d", type=int, default=None)
    p_sp.add_argument("--N", type=int, default=None, help="operator box radius")
    p_sp.add_argument("--gamma", type=float, default=None)
    p_sp.add_argument("--homog", action="store_true")
    p_sp.add_argument("--p", type=float, default=0.95)
    p_sp.add_argument("--xi", type=float, default=None)
    p_sp.add_argument("--lam", type=float, default=None, help="killing rate (default: prescribed)")
    p_sp.add_argument("--mu", type=float, default=0.1)
    p_sp.add_argument("--tol", type=float, default=1e-10)
    p_sp.add_argument("--box-radius", type=int, default=None)
    p_sp.set_defaults(func=_cmd_spectrum)

    p_expo = sub.add_parser("exponent", help="quenched/annealed exponent study from a config")
    _common_flags(p_expo)
    p_expo.add_argument("--annealed", action="store_true", help="average curves before fitting")
    p_expo.set_defaults(func=_cmd_exponent)

    p_bnd = sub.add_parser("bounds", help="hole/spectral/survival/exit bound suite from a config")
    _common_flags(p_bnd)
    p_bnd.set_defaults(func=_cmd_bounds)

    p_rep = sub.add_parser("report", help="verify manifests and summarize runs")
    _common_flags(p_rep)
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except RcmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

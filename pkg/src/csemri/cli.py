"""Command-line interface.

Subcommands: model-info, analyze, solve, phantom, corrupt, reconstruct,
metrics, experiment. Inputs and outputs are JSON configs, CSIR containers
and CSV tables; errors are reported as one JSON object on stderr with
exit code 2 for input problems and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import errors
from .containers import (
    constraint_from_config,
    flow_config_from_dict,
    grid_from_csir,
    model_from_config,
    read_csir,
    write_csir,
)
from .imaging import metrics_table, pdff_map, reconstruct, reconstruct_noisy
from .lattice import delta_zero_set, fieldmap_lattice, rationalize_echoes, sigma_min_profile
from .phantom import CorruptionSpec, corrupt, default_phantom_spec, generate_phantom
from .residual import make_residual_operator
from .solver import FlowConfig, wirtinger_flow
from .species import check_J_full_rank, check_submatrices_nonsingular
from .experiments import experiment_curvature, experiment_solution_set, write_matrix_csv

INPUT_ERRORS = (
    errors.SpecError,
    errors.InvalidSpecies,
    errors.DimensionError,
    errors.DomainError,
    FileNotFoundError,
    KeyError,
    json.JSONDecodeError,
)
NUMERICAL_ERRORS = (
    errors.RankDeficient,
    errors.NonConvergence,
    errors.OverflowRisk,
    errors.DegenerateCurvature,
    errors.NonBracketed,
    errors.CombinatorialLimit,
    errors.PolynomialDegreeLimit,
)

DEFAULT_ACQUISITION = {
    "echo_times_ms": [1.238 + 0.986 * k for k in range(6)],
    "species": ["water", "fat6", "silicone"],
    "hz_per_ppm": 3.0 * 42.57747892,
}


def _load_acquisition(path):
    if path is None:
        return model_from_config(DEFAULT_ACQUISITION), dict(DEFAULT_ACQUISITION)
    with open(path) as fh:
        config = json.load(fh)
    return model_from_config(config), config


def _dump(obj, path=None):
    text = json.dumps(obj, indent=1)
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def cmd_model_info(args):
    model, config = _load_acquisition(args.config)
    sub = check_submatrices_nonsingular(model, tol=args.tol)
    jr = check_J_full_rank(model, tol=args.tol)
    _dump(
        {
            "n_e": model.n_e,
            "n_s": model.n_s,
            "echo_times_ms": [1e3 * t for t in model.echoes.times_s],
            "species": [sp.name for sp in model.species],
            "submatrices": {
                "min_abs_det": sub.min_abs_det,
                "worst_selection": list(sub.worst_selection),
                "scale": sub.scale,
                "ok": sub.ok,
            },
            "j_full_rank": {
                "sigma_min": jr.sigma_min,
                "sigma_max": jr.sigma_max,
                "ok": jr.ok,
                "reason": jr.reason,
            },
        },
        args.out,
    )
    return 0


def cmd_analyze(args):
    model, _ = _load_acquisition(args.config)
    structure = rationalize_echoes(model.echoes)
    lattice = fieldmap_lattice(structure)
    zero_set = delta_zero_set(model, search_band_hz=tuple(args.band))
    report = {
        "lattice": {
            "commensurable": structure.commensurable,
            "period_hz": lattice.period_hz if not lattice.trivial else None,
        },
        "w_period_hz": zero_set.w_period_hz if np.isfinite(zero_set.w_period_hz) else None,
        "zeros": [
            {
                "eta_hz": z.eta_hz,
                "sigma_min": z.sigma_min,
                "kernel_dim": z.kernel_dim,
                "classification": z.classification,
                "phases": [[p.real, p.imag] for p in z.swap_phases]
                if z.swap_phases is not None
                else None,
            }
            for z in zero_set.zeros
        ],
    }
    _dump(report, args.out)
    if args.csv:
        grid = np.arange(args.band[0], args.band[1] + args.grid_step / 2, args.grid_step)
        write_matrix_csv(
            args.csv,
            np.column_stack([grid, sigma_min_profile(model, grid)]),
            header=("eta_hz", "sigma_min"),
        )
    return 0


def cmd_solve(args):
    with open(args.input) as fh:
        doc = json.load(fh)
    model = model_from_config(doc["acquisition"])
    signal = np.array([complex(re, im) for re, im in doc["signal"]])
    init = complex(*doc.get("init", [1.0, 0.0]))
    cfg = flow_config_from_dict(doc.get("flow", {}))
    if args.trajectory:
        cfg = FlowConfig(
            step=cfg.step,
            max_iters=cfg.max_iters,
            grad_tol=cfg.grad_tol,
            rho=cfg.rho,
            certified=cfg.certified,
            keep_trajectory=True,
        )
    op = make_residual_operator(model)
    res = wirtinger_flow(op, signal, init, cfg)
    _dump(
        {
            "xi_hat": [res.xi_hat.real, res.xi_hat.imag],
            "c_hat": [[c.real, c.imag] for c in res.c_hat],
            "iterations": res.iterations,
            "final_grad_norm": res.final_grad_norm,
            "converged": res.converged,
        },
        args.out,
    )
    if args.trajectory and res.trajectory is not None:
        write_matrix_csv(
            args.trajectory,
            [(k, z.real, z.imag) for k, z in enumerate(res.trajectory)],
            header=("iteration", "fieldmap_hz", "r2star_hz"),
        )
    return 0


def cmd_phantom(args):
    model, config = _load_acquisition(args.config)
    spec = default_phantom_spec(
        width=args.width, height=args.height, fieldmap_amplitude_hz=args.fieldmap_amplitude
    )
    truth = generate_phantom(spec, model)
    write_csir(
        args.out,
        truth.grid.signal,
        [1e3 * t for t in model.echoes.times_s],
        extra_header={"n_s": model.n_s},
    )
    if args.truth:
        np.savez(
            args.truth,
            c0_map=truth.c0_map,
            xi0_map=truth.xi0_map,
            mask=truth.mask,
        )
    return 0


def cmd_corrupt(args):
    signal, header = read_csir(args.input)
    from .imaging import ImageGrid

    grid = ImageGrid.from_signal(signal, mask_threshold=args.mask_threshold)
    mismatch_species = None
    mismatch_c = None
    xi0 = None
    times = None
    if args.mismatch_species:
        from .species import load_species

        hz_per_ppm = header.get("hz_per_ppm", DEFAULT_ACQUISITION["hz_per_ppm"])
        mismatch_species = load_species(args.mismatch_species, hz_per_ppm=hz_per_ppm)
        mismatch_c = complex(args.mismatch_concentration)
        if not args.truth:
            raise errors.SpecError("model mismatch needs --truth for the true xi map")
        xi0 = np.load(args.truth)["xi0_map"]
        times = [1e-3 * t for t in header["echo_times_ms"]]
    sigma = args.sigma
    if args.relative:
        sigma = sigma * float(np.max(np.abs(signal)))
    noisy, report = corrupt(
        grid,
        CorruptionSpec(
            sigma=sigma,
            mismatch_species=mismatch_species,
            mismatch_concentration=mismatch_c,
        ),
        seed=args.seed,
        xi0_map=xi0,
        echo_times_s=times,
    )
    write_csir(args.out, noisy.signal, header["echo_times_ms"], extra_header={"sigma": sigma})
    print(
        json.dumps(
            {
                "sigma": sigma,
                "max_budget": float(np.max(report.budget)),
                "max_empirical": float(np.max(report.empirical)),
            }
        )
    )
    return 0


def cmd_reconstruct(args):
    model, _ = _load_acquisition(args.config)
    grid, header = grid_from_csir(args.input, mask_threshold=args.mask_threshold)
    constraint = constraint_from_config(
        {"eps_on_mask_hz": args.eps_on_mask, "eps_off_mask_hz": args.eps_off_mask}, grid.mask
    )
    flow_doc = {}
    if args.flow:
        with open(args.flow) as fh:
            flow_doc = json.load(fh)
    cfg = flow_config_from_dict(flow_doc) if flow_doc else FlowConfig(certified=True, max_iters=args.max_iters)
    xi_init = np.full((grid.height, grid.width), complex(args.init_re, args.init_im))
    if args.delta is not None:
        res = reconstruct_noisy(grid, model, constraint, args.delta, cfg, xi_init)
    else:
        res = reconstruct(grid, model, constraint, cfg, xi_init)
    out = {
        "xi_map": res.xi_map,
        "c_map": res.c_map,
        "pdff": pdff_map(res.c_map, args.water_index, args.fat_index),
        "objective_trace": np.asarray(res.objective_trace),
        "mask": grid.mask,
    }
    if res.s_map is not None:
        out["s_map"] = res.s_map
    np.savez(args.out, **out)
    summary = {
        "iterations": res.iterations,
        "converged": res.converged,
        "constraint_violation": res.constraint_violation,
        "final_objective": res.objective_trace[-1],
    }
    if args.truth:
        truth = np.load(args.truth)
        names = [sp.name for sp in model.species]
        truth_maps = {
            name: truth["c0_map"][..., k] for k, name in enumerate(names)
        }
        truth_maps["fieldmap"] = np.real(truth["xi0_map"])
        truth_maps["r2star"] = np.imag(truth["xi0_map"])
        est_maps = {name: res.c_map[..., k] for k, name in enumerate(names)}
        est_maps["fieldmap"] = np.real(res.xi_map)
        est_maps["r2star"] = np.imag(res.xi_map)
        summary["metrics"] = metrics_table(truth_maps, est_maps)
    _dump(summary, args.metrics_out)
    return 0


def cmd_metrics(args):
    truth = np.load(args.truth)
    recon = np.load(args.recon)
    truth_maps = {}
    est_maps = {}
    n_s = truth["c0_map"].shape[-1]
    for k in range(n_s):
        truth_maps[f"species_{k}"] = truth["c0_map"][..., k]
        est_maps[f"species_{k}"] = recon["c_map"][..., k]
    truth_maps["fieldmap"] = np.real(truth["xi0_map"])
    est_maps["fieldmap"] = np.real(recon["xi_map"])
    truth_maps["r2star"] = np.imag(truth["xi0_map"])
    est_maps["r2star"] = np.imag(recon["xi_map"])
    _dump(metrics_table(truth_maps, est_maps), args.out)
    return 0


def cmd_experiment(args):
    model, _ = _load_acquisition(args.config)
    if args.study == "solution-set":
        experiment_solution_set(model.species, args.out)
    elif args.study == "curvature":
        spec = default_phantom_spec(width=args.width, height=args.height)
        truth = generate_phantom(spec, model)
        experiment_curvature(truth, model, args.out, stride=args.stride)
    else:
        raise errors.SpecError(f"unknown study {args.study!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="csemri")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model-info", help="model matrix diagnostics")
    p.add_argument("--config")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_model_info)

    p = sub.add_parser("analyze", help="solution lattice and Delta zero set")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--band", type=float, nargs=2, default=(-1100.0, 1100.0))
    p.add_argument("--grid-step", type=float, default=0.25)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("solve", help="single-voxel recovery")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--trajectory")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("phantom", help="generate the default in-silico phantom")
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.add_argument("--config")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fieldmap-amplitude", type=float, default=20.0)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("corrupt", help="add noise / model mismatch to a container")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--relative", action="store_true", help="sigma relative to peak |signal|")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-threshold", type=float, default=0.0)
    p.add_argument("--mismatch-species")
    p.add_argument("--mismatch-concentration", type=float, default=0.0)
    p.add_argument("--truth")
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("reconstruct", help="constrained image reconstruction")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-out")
    p.add_argument("--truth")
    p.add_argument("--flow")
    p.add_argument("--delta", type=float, default=None, help="per-voxel noise ball radius")
    p.add_argument("--eps-on-mask", type=float, default=30.0)
    p.add_argument("--eps-off-mask", type=float, default=1000.0)
    p.add_argument("--mask-threshold", type=float, default=0.0)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--init-re", type=float, default=1.0)
    p.add_argument("--init-im", type=float, default=0.0)
    p.add_argument("--water-index", type=int, default=0)
    p.add_argument("--fat-index", type=int, default=1)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("metrics", help="error metric table from truth and recon files")
    p.add_argument("--truth", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("experiment", help="write experiment artifact files")
    p.add_argument("study", choices=("solution-set", "curvature"))
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--stride", type=int, default=4)
    p.set_defaults(fn=cmd_experiment)
    return parser


def _limit_threads():
    n = os.environ.get("CSI_THREADS")
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))
    except Exception:
        pass  # thread capping is best effort


def cli_main(argv=None):
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except INPUT_ERRORS as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    except NUMERICAL_ERRORS as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 3


def main():
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()

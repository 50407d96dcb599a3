"""Experiment drivers emitting CSV/JSON artifacts for external plotting.

Two studies are packaged: the solution-set scan (weighting-matrix error
and smallest singular value of the stacked matrix over a fieldmap band,
with classified zeros) and the per-voxel curvature study (Q profiles,
half-reduction radii and the certified radius maps over a phantom).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .lattice import (
    delta_zero_set,
    fieldmap_lattice,
    rationalize_echoes,
    sigma_min_profile,
    weighting_error_profile,
)
from .residual import make_residual_operator
from .solver import curvature_profile, radius_lambert, radius_tight
from .species import EchoSpec, build_model

__all__ = [
    "experiment_solution_set",
    "experiment_curvature",
    "write_matrix_csv",
]


def write_matrix_csv(path, matrix, header=None):
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row in np.atleast_2d(matrix):
            writer.writerow([f"{v:.12g}" for v in row])
    return Path(path)


def experiment_solution_set(
    species,
    out_dir,
    first_echo_ms=1.3,
    spacing_ms=1.05,
    echo_counts=(4, 6, 7, 8),
    band_hz=(-1100.0, 1100.0),
    grid_step_hz=0.25,
):
    """Scan the weighting error and sigma_min(Delta) over a fieldmap band.

    Writes, per echo count: ``w_error_ne{n}.csv`` (phi_hz, frobenius error
    of I - W(phi)), ``sigma_min_ne{n}.csv`` (eta_hz, sigma_min) and
    ``zeros_ne{n}.json`` (classified zero set). Returns the artifact paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = np.arange(band_hz[0], band_hz[1] + grid_step_hz / 2, grid_step_hz)
    artifacts = []
    for n in echo_counts:
        echoes = EchoSpec.uniform_ms(first_echo_ms, spacing_ms, n)
        model = build_model(species, echoes)
        w_err = weighting_error_profile(grid, np.ones(n), echoes.array())
        artifacts.append(
            write_matrix_csv(
                out_dir / f"w_error_ne{n}.csv",
                np.column_stack([grid, w_err]),
                header=("phi_hz", "frobenius_error"),
            )
        )
        smin = sigma_min_profile(model, grid)
        artifacts.append(
            write_matrix_csv(
                out_dir / f"sigma_min_ne{n}.csv",
                np.column_stack([grid, smin]),
                header=("eta_hz", "sigma_min"),
            )
        )
        zero_set = delta_zero_set(model, search_band_hz=band_hz)
        payload = {
            "lattice_period_hz": fieldmap_lattice(rationalize_echoes(echoes)).period_hz,
            "w_period_hz": zero_set.w_period_hz,
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
        path = out_dir / f"zeros_ne{n}.json"
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
        artifacts.append(path)
    return artifacts


def half_reduction_radius(profile):
    """Smallest radius with Q <= 1/2, linearly interpolated."""
    prev_r, prev_q = None, None
    for r, q in profile:
        if q <= 0.5:
            if prev_r is None:
                return float(r)
            return float(prev_r + (r - prev_r) * (prev_q - 0.5) / (prev_q - q))
        prev_r, prev_q = r, q
    return float("inf")


def experiment_curvature(
    truth,
    model,
    out_dir,
    rho=0.5,
    radii=None,
    angular_samples=16,
    stride=1,
):
    """Per-voxel curvature study over a phantom's masked voxels.

    Emits ``q_profiles.csv`` (x, y, radius_hz, q), plus the Lambert and
    tight radius maps and the 50%-reduction radius map as CSV matrices
    (off-mask entries are NaN). Returns the artifact paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    op = make_residual_operator(model)
    if radii is None:
        radii = np.geomspace(0.5, 120.0, 18)
    h, w = truth.mask.shape
    lam_map = np.full((h, w), np.nan)
    tight_map = np.full((h, w), np.nan)
    half_map = np.full((h, w), np.nan)
    rows = []
    ys, xs = np.nonzero(truth.mask)
    for i, j in zip(ys[::stride], xs[::stride]):
        xi0 = truth.xi0_map[i, j]
        s0 = truth.grid.signal[i, j]
        lam_map[i, j] = radius_lambert(op, xi0, s0, rho)
        tight_map[i, j] = radius_tight(op, xi0, s0, rho, angular_samples=angular_samples)
        prof = curvature_profile(op, xi0, s0, radii, angular_samples=angular_samples)
        half_map[i, j] = half_reduction_radius(prof)
        for r, q in prof:
            rows.append((j, i, r, q))
    artifacts = [
        write_matrix_csv(out_dir / "q_profiles.csv", rows, header=("x", "y", "radius_hz", "q")),
        write_matrix_csv(out_dir / "radius_lambert_map.csv", lam_map),
        write_matrix_csv(out_dir / "radius_tight_map.csv", tight_map),
        write_matrix_csv(out_dir / "radius_half_reduction_map.csv", half_map),
    ]
    summary = {
        "rho": rho,
        "max_radius_lambert_hz": float(np.nanmax(lam_map)),
        "max_radius_tight_hz": float(np.nanmax(tight_map)),
        "empirical_band_hz": [
            float(np.nanmin(half_map)),
            float(np.nanmax(half_map[np.isfinite(half_map)], initial=0.0)),
        ],
    }
    path = out_dir / "curvature_summary.json"
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1)
    artifacts.append(path)
    return artifacts

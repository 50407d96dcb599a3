"""File formats: acquisition/constraint/flow configs and the CSIR container.

The CSIR image container is a pair of files: a JSON header

    {"width": W, "height": H, "n_e": E, "echo_times_ms": [...],
     "dtype": "f64",
     "layout": "row-major, per-voxel interleaved re/im, echo-major",
     "payload": "<name>.bin", ...}

and a raw little-endian float64 payload of exactly W*H*E*2*8 bytes laid
out voxel by voxel in row-major order, echoes in order within a voxel and
(re, im) within an echo.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SpecError
from .imaging import FieldmapConstraint, ImageGrid
from .solver import FlowConfig
from .species import EchoSpec, build_model, load_species, species_from_dict, PRESET_NAMES

__all__ = [
    "model_from_config",
    "load_acquisition_config",
    "flow_config_from_dict",
    "constraint_from_config",
    "write_csir",
    "read_csir",
    "grid_from_csir",
]

CSIR_LAYOUT = "row-major, per-voxel interleaved re/im, echo-major"


def model_from_config(config):
    """Build an acquisition model from a config dict.

    Expected keys: ``echo_times_ms`` (list), ``species`` (preset names or
    inline species dicts) and, when any species is given in ppm,
    ``hz_per_ppm``.
    """
    try:
        echoes = EchoSpec.from_ms(config["echo_times_ms"])
    except KeyError as exc:
        raise SpecError("acquisition config needs echo_times_ms") from exc
    hz_per_ppm = config.get("hz_per_ppm")
    species = []
    for entry in config.get("species", []):
        if isinstance(entry, str):
            if entry not in PRESET_NAMES:
                raise SpecError(f"unknown species preset {entry!r}")
            species.append(load_species(entry, hz_per_ppm=hz_per_ppm))
        else:
            species.append(species_from_dict(entry, hz_per_ppm=hz_per_ppm))
    if not species:
        raise SpecError("acquisition config needs at least one species")
    return build_model(species, echoes)


def load_acquisition_config(path):
    with open(path) as fh:
        config = json.load(fh)
    return model_from_config(config), config


def flow_config_from_dict(doc):
    return FlowConfig(
        step=doc.get("step"),
        max_iters=int(doc.get("max_iters", 100_000)),
        grad_tol=doc.get("grad_tol"),
        rho=float(doc.get("rho", 0.5)),
        certified=bool(doc.get("certified", doc.get("step") is None)),
        keep_trajectory=bool(doc.get("keep_trajectory", False)),
    )


def constraint_from_config(doc, mask):
    return FieldmapConstraint.from_mask(
        mask,
        float(doc.get("eps_on_mask_hz", 30.0)),
        float(doc.get("eps_off_mask_hz", 1000.0)),
    )


def write_csir(header_path, signal, echo_times_ms, extra_header=None):
    """Write a complex (height, width, n_e) array as a CSIR pair.

    The payload file sits next to the header with a ``.bin`` suffix.
    """
    header_path = Path(header_path)
    signal = np.asarray(signal, dtype=complex)
    if signal.ndim != 3:
        raise SpecError(f"signal must be (height, width, n_e), got {signal.shape}")
    h, w, n_e = signal.shape
    if len(echo_times_ms) != n_e:
        raise SpecError("echo_times_ms length does not match the echo axis")
    payload_path = header_path.with_suffix(".bin")
    buf = np.empty((h, w, n_e, 2), dtype="<f8")
    buf[..., 0] = signal.real
    buf[..., 1] = signal.imag
    buf.tofile(payload_path)
    header = {
        "width": w,
        "height": h,
        "n_e": n_e,
        "echo_times_ms": [float(x) for x in echo_times_ms],
        "dtype": "f64",
        "layout": CSIR_LAYOUT,
        "payload": payload_path.name,
    }
    if extra_header:
        header.update(extra_header)
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=1)
    return header_path, payload_path


def read_csir(header_path):
    """Read a CSIR pair; returns (signal array, header dict).

    Validates the payload byte length against width*height*n_e*2*8.
    """
    header_path = Path(header_path)
    with open(header_path) as fh:
        header = json.load(fh)
    for key in ("width", "height", "n_e", "echo_times_ms", "dtype", "layout", "payload"):
        if key not in header:
            raise SpecError(f"CSIR header misses {key!r}")
    if header["dtype"] != "f64":
        raise SpecError(f"unsupported dtype {header['dtype']!r}")
    if header["layout"] != CSIR_LAYOUT:
        raise SpecError(f"unsupported layout {header['layout']!r}")
    w, h, n_e = int(header["width"]), int(header["height"]), int(header["n_e"])
    payload_path = header_path.parent / header["payload"]
    expected = w * h * n_e * 2 * 8
    actual = payload_path.stat().st_size
    if actual != expected:
        raise SpecError(f"payload has {actual} bytes, expected {expected}")
    buf = np.fromfile(payload_path, dtype="<f8").reshape(h, w, n_e, 2)
    return buf[..., 0] + 1j * buf[..., 1], header


def grid_from_csir(header_path, mask_threshold=0.0):
    signal, header = read_csir(header_path)
    return ImageGrid.from_signal(signal, mask_threshold=mask_threshold), header

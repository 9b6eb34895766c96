"""Directory conversion from SOFA files to the raw bundle format.

A bundle directory holds ``manifest.json`` plus one raw little-endian
float32 payload per subject, row-major ``[direction][channel][sample]``
with channel 0 the left ear.  The manifest records the schema version,
sample rate, HRIR length, channel names, the shared grid as
``[azimuth_rad, elevation_rad]`` pairs, and the subject payload files.

SOFA azimuths are already counter-clockwise with zero at the front, so
coordinates only change from degrees to radians (azimuth wrapped into
``[0, 2*pi)``).  Samples are cast to float32 once, at write time, so the
payload is bit-equal to ``source.astype(float32)``.

No free-field compensation is applied in either direction; the
``compensated`` flag only records which release variant was ingested and
lands in a ``conversion.json`` sidecar next to the manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sofa import SUPPORTED_CONVENTION, SofaData, SofaFormatError, read_sofa, subject_id_for

BUNDLE_SCHEMA_VERSION = 1
CHANNELS = ("left", "right")
MANIFEST_NAME = "manifest.json"
SIDECAR_NAME = "conversion.json"
DEFAULT_EXCLUSIONS = ("P0079",)
#: Corresponding grid directions may differ by at most this angle.
GRID_TOLERANCE_RAD = 1e-6

_TWO_PI = 2.0 * math.pi
_ELEVATION_TOL_RAD = 1e-9


@dataclass(frozen=True)
class ConvertOptions:
    exclusions: tuple[str, ...] = DEFAULT_EXCLUSIONS
    compensated: bool = True
    pattern: str = "*.sofa"


def grid_radians(positions_deg: np.ndarray, source: str) -> np.ndarray:
    """``[n, 2]`` (azimuth, elevation) radians from SOFA degree rows."""
    azimuth = np.radians(positions_deg[:, 0]) % _TWO_PI
    azimuth[azimuth >= _TWO_PI] = 0.0  # float mod can round up to the modulus
    elevation = np.radians(positions_deg[:, 1])
    if np.any(np.abs(elevation) > np.pi / 2 + _ELEVATION_TOL_RAD):
        worst = float(np.degrees(np.max(np.abs(elevation))))
        raise SofaFormatError(
            f"{source}: elevation {worst!r} degrees outside [-90, 90]"
        )
    elevation = np.clip(elevation, -np.pi / 2, np.pi / 2)
    return np.stack([azimuth, elevation], axis=1)


def _unit_vectors(grid_rad: np.ndarray) -> np.ndarray:
    azimuth, elevation = grid_rad[:, 0], grid_rad[:, 1]
    cos_el = np.cos(elevation)
    return np.stack(
        [cos_el * np.cos(azimuth), cos_el * np.sin(azimuth), np.sin(elevation)],
        axis=1,
    )


def _grid_mismatch_rad(a: np.ndarray, b: np.ndarray) -> float:
    """Largest angle between corresponding directions of two grids."""
    dots = np.clip(np.sum(_unit_vectors(a) * _unit_vectors(b), axis=1), -1.0, 1.0)
    return float(np.max(np.arccos(dots))) if len(a) else 0.0


def _check_consistency(
    reference: SofaData, reference_grid: np.ndarray, data: SofaData, name: str
) -> None:
    if data.sample_rate != reference.sample_rate:
        raise SofaFormatError(
            f"{name}: sample rate {data.sample_rate} differs from "
            f"{reference.sample_rate} in the rest of the set"
        )
    if data.impulse_responses.shape[2] != reference.impulse_responses.shape[2]:
        raise SofaFormatError(
            f"{name}: HRIR length {data.impulse_responses.shape[2]} differs "
            f"from {reference.impulse_responses.shape[2]} in the rest of the set"
        )
    grid = grid_radians(data.positions_deg, name)
    if len(grid) != len(reference_grid):
        raise SofaFormatError(
            f"{name}: {len(grid)} directions, expected {len(reference_grid)}"
        )
    worst = _grid_mismatch_rad(grid, reference_grid)
    if worst > GRID_TOLERANCE_RAD:
        raise SofaFormatError(
            f"{name}: grid differs from the rest of the set by "
            f"{worst:.3e} rad (tolerance {GRID_TOLERANCE_RAD:.0e})"
        )


def convert(
    sofa_dir: str | Path,
    out_dir: str | Path,
    options: ConvertOptions = ConvertOptions(),
) -> dict:
    """Convert every matching SOFA file under ``sofa_dir`` into one bundle.

    Subjects named by ``options.exclusions`` are skipped.  All remaining
    files must agree on sample rate, HRIR length, and grid (within
    :data:`GRID_TOLERANCE_RAD` per direction); the grid of the
    lexicographically first subject is written to the manifest.  Returns a
    summary dict with counts and the exclusion record.
    """
    sofa_dir = Path(sofa_dir)
    files = sorted(sofa_dir.glob(options.pattern))
    if not files:
        raise SofaFormatError(f"no files matching {options.pattern!r} in {sofa_dir}")

    excluded: list[str] = []
    kept: dict[str, tuple[Path, SofaData]] = {}
    for file in files:
        sid = subject_id_for(file)
        if sid in options.exclusions:
            excluded.append(sid)
            continue
        if sid in kept:
            raise SofaFormatError(
                f"duplicate subject id {sid!r} ({kept[sid][0].name} and {file.name})"
            )
        kept[sid] = (file, read_sofa(file))
    if not kept:
        raise SofaFormatError("every subject is excluded; nothing to convert")

    order = sorted(kept)
    ref_file, reference = kept[order[0]]
    reference_grid = grid_radians(reference.positions_deg, ref_file.name)
    for sid in order[1:]:
        file, data = kept[sid]
        _check_consistency(reference, reference_grid, data, file.name)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    source_files = {}
    for sid in order:
        file, data = kept[sid]
        payload = np.ascontiguousarray(data.impulse_responses, dtype="<f4")
        (out / f"{sid}.f32").write_bytes(payload.tobytes())
        subjects.append({"id": sid, "file": f"{sid}.f32"})
        source_files[sid] = file.name

    manifest = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "sample_rate_hz": int(reference.sample_rate),
        "hrir_length": int(reference.impulse_responses.shape[2]),
        "channels": list(CHANNELS),
        "grid": [[float(az), float(el)] for az, el in reference_grid],
        "subjects": subjects,
    }
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )
    record = {
        "compensated": bool(options.compensated),
        "excluded": sorted(set(excluded)),
        "source_convention": SUPPORTED_CONVENTION,
        "source_files": source_files,
    }
    (out / SIDECAR_NAME).write_text(
        json.dumps(record, indent=1, sort_keys=True), encoding="utf-8"
    )
    return {
        "subjects": len(subjects),
        "directions": len(reference_grid),
        "sample_rate_hz": manifest["sample_rate_hz"],
        "hrir_length": manifest["hrir_length"],
        "excluded": record["excluded"],
        "compensated": record["compensated"],
        "out": str(out),
    }

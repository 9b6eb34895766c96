"""Reading SOFA (HDF5) HRTF measurement files.

Only the SimpleFreeFieldHRIR convention is accepted for conversion: two
receivers (channel 0 the left ear), impulse responses ``Data.IR`` shaped
``[measurement, receiver, sample]``, and spherical ``SourcePosition``
rows ``(azimuth deg, elevation deg, distance m)`` with azimuth counted
counter-clockwise from straight ahead.  ``read_summary`` is laxer so the
inspection tool can describe files of other conventions too.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np

SUPPORTED_CONVENTION = "SimpleFreeFieldHRIR"


class SofaFormatError(Exception):
    """The file is unreadable as SOFA or violates the convention."""


def _attr(node, name: str) -> str | None:
    value = node.attrs.get(name)
    if value is None:
        return None
    if isinstance(value, np.ndarray) and value.size == 1:
        value = value.reshape(-1)[0]
    if isinstance(value, bytes):
        return value.decode("utf-8", "replace")
    return str(value)


def _open(path: Path) -> h5py.File:
    try:
        return h5py.File(path, "r")
    except OSError as exc:
        raise SofaFormatError(f"cannot open {path} as an HDF5/SOFA file: {exc}") from exc


def _dataset(handle: h5py.File, name: str, path: Path):
    if name not in handle:
        raise SofaFormatError(f"{path}: missing dataset {name!r}")
    return handle[name]


def _values(dataset, path: Path) -> np.ndarray:
    try:
        return np.asarray(dataset[()])
    except OSError as exc:
        raise SofaFormatError(f"{path}: unreadable dataset {dataset.name!r}: {exc}") from exc


def _sample_rate(handle: h5py.File, path: Path) -> int:
    values = _values(_dataset(handle, "Data.SamplingRate", path), path)
    values = values.astype(np.float64).reshape(-1)
    if values.size == 0:
        raise SofaFormatError(f"{path}: empty Data.SamplingRate")
    if np.any(values != values[0]):
        raise SofaFormatError(f"{path}: mixed sample rates within one file")
    rate = float(values[0])
    if rate <= 0 or rate != round(rate):
        raise SofaFormatError(f"{path}: sample rate must be a positive integer Hz, got {rate!r}")
    return int(rate)


def subject_id_for(path: str | Path) -> str:
    """Subject id from the file name: the stem up to the first underscore."""
    stem = Path(path).stem
    return stem.split("_", 1)[0]


@dataclass(frozen=True)
class SofaSummary:
    """What the inspection tool reports about one file."""

    convention: str
    sample_rate: int
    n_directions: int
    n_receivers: int
    ir_length: int

    def describe(self) -> str:
        return (
            f"{self.convention}: {self.n_directions} directions, "
            f"{self.sample_rate} Hz, L={self.ir_length}"
        )


@dataclass
class SofaData:
    """One subject's measurements as stored in the file.

    ``impulse_responses`` keeps the source dtype and the SOFA layout
    ``[direction, 2, samples]``; ``positions_deg`` rows are
    ``(azimuth deg, elevation deg, distance m)``.
    """

    subject_id: str
    convention: str
    sample_rate: int
    impulse_responses: np.ndarray
    positions_deg: np.ndarray


def read_summary(path: str | Path) -> SofaSummary:
    """Describe a file without enforcing the conversion convention."""
    path = Path(path)
    with _open(path) as handle:
        convention = _attr(handle, "SOFAConventions") or "unknown convention"
        ir = _dataset(handle, "Data.IR", path)
        if ir.ndim != 3:
            raise SofaFormatError(f"{path}: Data.IR must be 3-D, got shape {ir.shape}")
        rate = _sample_rate(handle, path)
        return SofaSummary(convention, rate, ir.shape[0], ir.shape[1], ir.shape[2])


def _check_receiver_order(handle: h5py.File, path: Path) -> None:
    # Channel 0 must be the left ear (+y in the SOFA cartesian frame).
    if "ReceiverPosition" not in handle:
        return
    dataset = handle["ReceiverPosition"]
    kind = (_attr(dataset, "Type") or "cartesian").lower()
    if kind != "cartesian":
        return
    pos = _values(dataset, path).astype(np.float64)
    pos = pos.reshape(pos.shape[0], -1)
    if pos.shape[0] != 2 or pos.shape[1] < 2:
        return
    if pos[0, 1] < pos[1, 1]:
        raise SofaFormatError(
            f"{path}: receiver 0 is not the left ear (its y coordinate "
            f"{pos[0, 1]!r} is below receiver 1's {pos[1, 1]!r})"
        )


def read_sofa(path: str | Path) -> SofaData:
    """Read one SimpleFreeFieldHRIR file for conversion."""
    path = Path(path)
    with _open(path) as handle:
        convention = _attr(handle, "SOFAConventions")
        if convention != SUPPORTED_CONVENTION:
            raise SofaFormatError(
                f"{path}: unsupported convention {convention!r}; "
                f"only {SUPPORTED_CONVENTION} can be converted"
            )
        ir = _values(_dataset(handle, "Data.IR", path), path)
        if ir.ndim != 3:
            raise SofaFormatError(f"{path}: Data.IR must be 3-D, got shape {ir.shape}")
        if ir.shape[1] != 2:
            raise SofaFormatError(
                f"{path}: expected 2 receivers (left, right), got {ir.shape[1]}"
            )
        rate = _sample_rate(handle, path)
        pos_dataset = _dataset(handle, "SourcePosition", path)
        positions = _values(pos_dataset, path).astype(np.float64)
        if positions.ndim != 2 or positions.shape[1] < 2:
            raise SofaFormatError(
                f"{path}: SourcePosition must be [measurements, >=2], "
                f"got shape {positions.shape}"
            )
        if positions.shape[0] != ir.shape[0]:
            raise SofaFormatError(
                f"{path}: {positions.shape[0]} source positions for "
                f"{ir.shape[0]} measurements"
            )
        kind = _attr(pos_dataset, "Type")
        if kind is not None and kind.lower() != "spherical":
            raise SofaFormatError(f"{path}: unsupported SourcePosition type {kind!r}")
        units = _attr(pos_dataset, "Units")
        if units is not None and not units.lower().startswith("degree"):
            raise SofaFormatError(f"{path}: unsupported SourcePosition units {units!r}")
        _check_receiver_order(handle, path)
        return SofaData(subject_id_for(path), convention, rate, ir, positions)

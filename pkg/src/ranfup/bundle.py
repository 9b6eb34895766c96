"""Native HRTF dataset format and in-memory data model.

A bundle directory holds ``manifest.json`` plus one raw float32 payload per
subject.  All subjects share one spherical grid, sample rate, and HRIR
length, so the whole dataset loads into dense arrays.  Bundles are immutable
after load and safe for concurrent readers.

Manifest schema (version 1)::

    {
      "schema_version": 1,
      "sample_rate_hz": 48000,
      "hrir_length": 256,
      "channels": ["left", "right"],
      "grid": [[azimuth_rad, elevation_rad], ...],   # float64
      "subjects": [{"id": "S000", "file": "S000.f32"}, ...]
    }

Payloads are raw little-endian IEEE-754 float32, row-major
``[direction][channel][sample]``, with no header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BundleFormatError, DataError

SCHEMA_VERSION = 1
CHANNELS = ("left", "right")
MANIFEST_NAME = "manifest.json"

_TWO_PI = 2.0 * math.pi
_ELEVATION_TOL = 1e-9
#: Grid directions closer than this (radians) count as duplicates.
MIN_GRID_SEPARATION = 1e-9


@dataclass(frozen=True)
class Direction:
    """A source direction on the sphere.

    Azimuth is normalized into ``[0, 2*pi)``; elevation must lie in
    ``[-pi/2, pi/2]`` (values outside are rejected, not clamped).
    """

    azimuth: float
    elevation: float

    def __post_init__(self) -> None:
        az = float(self.azimuth) % _TWO_PI
        if az >= _TWO_PI:  # float mod can round up to the modulus itself
            az = 0.0
        el = float(self.elevation)
        if not (-math.pi / 2 - _ELEVATION_TOL <= el <= math.pi / 2 + _ELEVATION_TOL):
            raise DataError(f"elevation {el!r} outside [-pi/2, pi/2]")
        el = min(max(el, -math.pi / 2), math.pi / 2)
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)

    def unit_vector(self) -> np.ndarray:
        """Cartesian unit vector; x points to the front, z up."""
        cos_el = math.cos(self.elevation)
        return np.array(
            [
                cos_el * math.cos(self.azimuth),
                cos_el * math.sin(self.azimuth),
                math.sin(self.elevation),
            ]
        )

    def angular_distance(self, other: "Direction") -> float:
        """Great-circle distance in radians."""
        dot = float(np.dot(self.unit_vector(), other.unit_vector()))
        return math.acos(min(1.0, max(-1.0, dot)))


def unit_vectors(directions: Sequence[Direction]) -> np.ndarray:
    """Stack direction unit vectors into an ``[n, 3]`` array."""
    return np.stack([d.unit_vector() for d in directions]) if directions else np.zeros((0, 3))


def angular_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances between rows of two ``[*, 3]`` arrays."""
    dots = np.clip(a @ b.T, -1.0, 1.0)
    return np.arccos(dots)


@dataclass
class HrirSet:
    """One subject's impulse responses over the shared grid.

    ``impulse_responses`` has shape ``[num_directions, 2, hrir_length]``
    with channel 0 = left ear, channel 1 = right ear.
    """

    subject_id: str
    sample_rate: int
    impulse_responses: np.ndarray

    def __post_init__(self) -> None:
        ir = np.asarray(self.impulse_responses, dtype=np.float32)
        if ir.ndim != 3 or ir.shape[1] != 2 or ir.shape[2] < 1:
            raise DataError(
                f"subject {self.subject_id!r}: impulse responses must be "
                f"[directions, 2, samples], got shape {ir.shape}"
            )
        if int(self.sample_rate) <= 0:
            raise DataError(f"subject {self.subject_id!r}: sample rate must be positive")
        self.sample_rate = int(self.sample_rate)
        self.impulse_responses = ir

    @property
    def num_directions(self) -> int:
        return self.impulse_responses.shape[0]

    @property
    def hrir_length(self) -> int:
        return self.impulse_responses.shape[2]


@dataclass
class HrirBundle:
    """Multi-subject HRIR dataset on one shared spherical grid."""

    grid: list[Direction]
    subjects: dict[str, HrirSet]
    sample_rate: int

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.subjects:
            raise DataError("a bundle must contain at least one subject")
        if not self.grid:
            raise DataError("a bundle must define a non-empty grid")
        lengths = {s.hrir_length for s in self.subjects.values()}
        if len(lengths) != 1:
            raise DataError(f"subjects disagree on HRIR length: {sorted(lengths)}")
        rates = {s.sample_rate for s in self.subjects.values()} | {int(self.sample_rate)}
        if len(rates) != 1:
            raise DataError(f"subjects disagree on sample rate: {sorted(rates)}")
        for sid, s in self.subjects.items():
            if s.subject_id != sid:
                raise DataError(f"subject key {sid!r} does not match id {s.subject_id!r}")
            if s.num_directions != len(self.grid):
                raise DataError(
                    f"subject {sid!r} has {s.num_directions} directions, "
                    f"grid has {len(self.grid)}"
                )
        vecs = unit_vectors(self.grid)
        dists = angular_distances(vecs, vecs)
        np.fill_diagonal(dists, np.inf)
        if dists.min() <= MIN_GRID_SEPARATION:
            i, j = np.unravel_index(int(dists.argmin()), dists.shape)
            raise DataError(f"grid directions {i} and {j} coincide")

    @property
    def hrir_length(self) -> int:
        return next(iter(self.subjects.values())).hrir_length

    @property
    def num_directions(self) -> int:
        return len(self.grid)

    def subject_ids(self) -> list[str]:
        return sorted(self.subjects)


@dataclass(frozen=True)
class MeasurementSubset:
    """Sorted grid indices at which a target subject was measured."""

    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise DataError("measurement subset indices must be unique")
        if any(i < 0 for i in idx):
            raise DataError("measurement subset indices must be non-negative")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    def validate_for(self, grid: Sequence[Direction]) -> None:
        if not self.indices:
            raise DataError("measurement subset is empty")
        if self.indices[-1] >= len(grid):
            raise DataError(
                f"subset index {self.indices[-1]} out of range for grid of {len(grid)}"
            )

    def to_json(self) -> str:
        return json.dumps(list(self.indices))

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSubset":
        data = json.loads(text)
        if not isinstance(data, list) or not all(isinstance(i, int) for i in data):
            raise DataError("measurement subset JSON must be a list of integers")
        return cls(tuple(data))


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint subject-id lists for training, validation, and evaluation.

    ``pretrain_ids`` are the training targets; ``validation_ids`` come from
    the same reference pool but are excluded from gradient updates.  The
    union ``pretrain_pool`` is the retrieval/reference population.
    """

    pretrain_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    eval_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        sets = [set(self.pretrain_ids), set(self.validation_ids), set(self.eval_ids)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split lists must be pairwise disjoint")

    @property
    def pretrain_pool(self) -> tuple[str, ...]:
        return tuple(sorted(self.pretrain_ids + self.validation_ids))


@dataclass(frozen=True)
class SplitConfig:
    """How to split subject ids.

    ``sizes`` is ``(pretrain_pool, validation, eval)``.  When omitted, the
    reference protocol applies: a pool of 179 subjects whose last 19 form
    the validation set, and everything after the pool for evaluation.
    """

    exclusions: tuple[str, ...] = ("P0079",)
    sizes: tuple[int, int, int] | None = None


REFERENCE_POOL_SIZE = 179
REFERENCE_VALIDATION_SIZE = 19


def make_split(subject_ids: Iterable[str], config: SplitConfig = SplitConfig()) -> DatasetSplit:
    """Deterministic lexicographic split of subject ids.

    Excluded ids are removed first; the remainder is sorted and cut into a
    pretraining pool (whose tail is the validation set) and an evaluation
    set.  Raises :class:`DataError` when there are too few subjects for the
    requested sizes.
    """
    ids = sorted(set(subject_ids) - set(config.exclusions))
    if config.sizes is None:
        pool, val = REFERENCE_POOL_SIZE, REFERENCE_VALIDATION_SIZE
        if len(ids) <= pool:
            raise DataError(
                f"reference split needs more than {pool} subjects, got {len(ids)}"
            )
        n_eval = len(ids) - pool
    else:
        pool, val, n_eval = config.sizes
        if val > pool:
            raise DataError(f"validation size {val} exceeds pool size {pool}")
        if pool + n_eval > len(ids):
            raise DataError(
                f"split sizes {config.sizes} need {pool + n_eval} subjects, got {len(ids)}"
            )
    pool_ids = ids[:pool]
    return DatasetSplit(
        pretrain_ids=tuple(pool_ids[: pool - val]),
        validation_ids=tuple(pool_ids[pool - val :]),
        eval_ids=tuple(ids[pool : pool + n_eval]),
    )


def measured_impulse_responses(
    hrir_set: HrirSet, measured: MeasurementSubset, grid_size: int
) -> np.ndarray:
    """Rows of ``hrir_set`` at the measured directions, ``[n, 2, L]``.

    Accepts either a full-grid set (rows picked by index) or a compact set
    holding exactly the measured rows in grid-index order.
    """
    if hrir_set.num_directions == grid_size:
        return hrir_set.impulse_responses[list(measured.indices)]
    if hrir_set.num_directions == len(measured.indices):
        return hrir_set.impulse_responses
    raise DataError(
        f"subject {hrir_set.subject_id!r} has {hrir_set.num_directions} directions; "
        f"expected the full grid ({grid_size}) or the measured subset "
        f"({len(measured.indices)})"
    )


def select_measured_subset(
    grid: Sequence[Direction], n: int, seed: int = 0
) -> MeasurementSubset:
    """Choose ``n`` measured directions by farthest-point sampling.

    Sampling starts at the grid point nearest to straight ahead (azimuth 0,
    elevation 0) and greedily adds the point maximizing the minimum
    great-circle distance to the selection, ties broken by lower index.
    Deterministic for a given ``(grid, n, seed)``; ``seed`` is reserved for
    future randomized strategies and does not affect farthest-point order.
    """
    del seed
    if not 1 <= n <= len(grid):
        raise DataError(f"subset size {n} out of range [1, {len(grid)}]")
    vecs = unit_vectors(grid)
    front = Direction(0.0, 0.0).unit_vector()
    start = int(np.argmax(vecs @ front))
    chosen = [start]
    min_dist = angular_distances(vecs, vecs[start : start + 1])[:, 0]
    for _ in range(n - 1):
        min_dist[chosen] = -1.0
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, angular_distances(vecs, vecs[nxt : nxt + 1])[:, 0])
    return MeasurementSubset(tuple(chosen))


def save_bundle(bundle: HrirBundle, path: str | Path) -> None:
    """Write a bundle directory; ``load_bundle`` restores it bit-exactly."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid in bundle.subject_ids():
        fname = f"{sid}.f32"
        payload = np.ascontiguousarray(
            bundle.subjects[sid].impulse_responses, dtype="<f4"
        )
        (root / fname).write_bytes(payload.tobytes())
        subjects.append({"id": sid, "file": fname})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "sample_rate_hz": int(bundle.sample_rate),
        "hrir_length": int(bundle.hrir_length),
        "channels": list(CHANNELS),
        "grid": [[float(d.azimuth), float(d.elevation)] for d in bundle.grid],
        "subjects": subjects,
    }
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )


def load_bundle(path: str | Path) -> HrirBundle:
    """Load and validate a bundle directory written by :func:`save_bundle`."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleFormatError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"corrupt manifest in {root}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise BundleFormatError(f"unknown bundle schema version {version!r}")
    if manifest.get("channels") != list(CHANNELS):
        raise BundleFormatError(f"unsupported channel layout {manifest.get('channels')!r}")
    try:
        sample_rate = int(manifest["sample_rate_hz"])
        hrir_length = int(manifest["hrir_length"])
        grid = [Direction(az, el) for az, el in manifest["grid"]]
        entries = [(str(e["id"]), str(e["file"])) for e in manifest["subjects"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError(f"malformed manifest field: {exc}") from exc

    expected = len(grid) * 2 * hrir_length * 4
    subjects: dict[str, HrirSet] = {}
    for sid, fname in entries:
        payload_path = root / fname
        if not payload_path.is_file():
            raise BundleFormatError(f"missing payload for subject {sid!r}: {fname}")
        raw = payload_path.read_bytes()
        if len(raw) != expected:
            raise BundleFormatError(
                f"payload size mismatch for subject {sid!r}: "
                f"expected {expected} bytes, got {len(raw)}"
            )
        ir = np.frombuffer(raw, dtype="<f4").reshape(len(grid), 2, hrir_length)
        subjects[sid] = HrirSet(sid, sample_rate, ir.copy())
    return HrirBundle(grid=grid, subjects=subjects, sample_rate=sample_rate)

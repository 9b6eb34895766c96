"""Synthetic multi-subject HRTF bundles from a rigid-sphere head model.

Subjects differ in head radius, ear placement, and a broadband spectral
tilt.  ITDs follow the Woodworth path-length model, so every generated
bundle carries analytic ground truth; magnitudes use a smooth head-shadow
approximation (contralateral low-pass whose cutoff drops with incidence,
scaled by head size) rather than the exact scattering series.

Geometry note: the model puts the right ear at positive azimuth offsets,
so a source at azimuth +pi/2 reaches the right ear first and yields a
positive ITD under the ``onset(left) - onset(right)`` convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dsp
from .bundle import Direction, HrirBundle, HrirSet
from .errors import DataError

SPEED_OF_SOUND = 343.0

#: Both channels are delayed by this many samples so onsets stay clear of
#: the first sample and zero-phase filtering edge effects.
BASE_DELAY_SAMPLES = 16

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class SphereSubject:
    """Latent parameters of one synthetic listener."""

    head_radius: float  # meters
    ear_offset: float  # radians from straight ahead to each ear, ~pi/2
    spectral_tilt: float  # dB per octave, reference 1 kHz
    seed: int

    def __post_init__(self) -> None:
        if self.head_radius <= 0:
            raise DataError(f"head radius must be positive, got {self.head_radius}")

    @classmethod
    def sample(cls, seed: int) -> "SphereSubject":
        rng = np.random.default_rng(seed)
        return cls(
            head_radius=float(rng.uniform(0.07, 0.10)),
            ear_offset=float(math.pi / 2 + rng.uniform(-0.05, 0.05)),
            spectral_tilt=float(rng.uniform(-1.0, 1.0)),
            seed=seed,
        )


def _ear_axes(subject: SphereSubject) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors toward the left and right ear."""
    left = Direction(-subject.ear_offset, 0.0).unit_vector()
    right = Direction(subject.ear_offset, 0.0).unit_vector()
    return left, right


def _incidence(direction: Direction, ear_axis: np.ndarray) -> float:
    dot = float(np.dot(direction.unit_vector(), ear_axis))
    return math.acos(min(1.0, max(-1.0, dot)))


def _ear_delay_seconds(incidence: float, radius: float) -> float:
    """Woodworth arrival time relative to the head center.

    Direct path for incidence up to pi/2, creeping wave beyond.
    """
    if incidence <= math.pi / 2:
        return -(radius / SPEED_OF_SOUND) * math.cos(incidence)
    return (radius / SPEED_OF_SOUND) * (incidence - math.pi / 2)


def woodworth_itd_samples(
    subject: SphereSubject, direction: Direction, sample_rate: int
) -> float:
    """Analytic ITD (left onset minus right onset) in samples, unrounded."""
    left_axis, right_axis = _ear_axes(subject)
    t_left = _ear_delay_seconds(_incidence(direction, left_axis), subject.head_radius)
    t_right = _ear_delay_seconds(_incidence(direction, right_axis), subject.head_radius)
    return (t_left - t_right) * sample_rate


def _shadow_strength(incidence: float) -> float:
    """0 on the bright side, rising smoothly to 1 at full shadow."""
    wrapped = max(0.0, incidence - math.pi / 2)
    return (1.0 - math.cos(2.0 * wrapped)) / 2.0 if wrapped < math.pi / 2 else 1.0


def sphere_magnitude(
    subject: SphereSubject, direction: Direction, sample_rate: int, hrir_length: int
) -> np.ndarray:
    """Linear ``[F, 2]`` magnitude of the shadow-plus-tilt model.

    The contralateral shadow is a gentle low-pass whose cutoff decreases
    with incidence but stays well above the ITD onset band, so the
    minimum-phase realization leaves low-frequency onsets untouched.
    """
    n = dsp.next_pow2(hrir_length)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    f_ref = max(freqs[1], 1.0)
    f_eff = np.maximum(freqs, f_ref)
    tilt_db = subject.spectral_tilt * np.log2(f_eff / 1000.0)

    scale = math.sqrt(0.0875 / subject.head_radius)
    left_axis, right_axis = _ear_axes(subject)
    channels = []
    for axis in (left_axis, right_axis):
        strength = _shadow_strength(_incidence(direction, axis))
        cutoff = scale * (16000.0 - 6000.0 * strength)
        shadow = (1.0 + (freqs / cutoff) ** 2) ** (-0.8 * strength)
        level_db = -4.0 * strength
        channels.append(shadow * 10.0 ** ((tilt_db + level_db) / 20.0))
    return np.stack(channels, axis=1)


def sphere_hrir(
    subject: SphereSubject, direction: Direction, sample_rate: int, hrir_length: int
) -> np.ndarray:
    """Full ``[2, L]`` HRIR: minimum-phase magnitude plus integer ITD shift."""
    mag = sphere_magnitude(subject, direction, sample_rate, hrir_length)
    pair = dsp.min_phase_reconstruct(mag)[:, :hrir_length]
    itd = round(woodworth_itd_samples(subject, direction, sample_rate))
    return dsp.apply_itd(pair, itd, base_delay=BASE_DELAY_SAMPLES)


def generate_subject(
    subject: SphereSubject,
    subject_id: str,
    grid: list[Direction],
    sample_rate: int,
    hrir_length: int,
) -> HrirSet:
    irs = np.stack(
        [sphere_hrir(subject, d, sample_rate, hrir_length) for d in grid]
    ).astype(np.float32)
    return HrirSet(subject_id, sample_rate, irs)


def generate_bundle(
    n_subjects: int,
    grid: list[Direction] | str,
    sample_rate: int = 48000,
    hrir_length: int = 256,
    seed: int = 0,
) -> HrirBundle:
    """Deterministic synthetic bundle of ``n_subjects`` sphere listeners.

    ``grid`` may be a direction list or a spec string understood by
    :func:`grid_from_spec`.  Equal arguments produce bit-identical bundles.
    """
    if n_subjects < 1:
        raise DataError("need at least one subject")
    if isinstance(grid, str):
        grid = grid_from_spec(grid)
    width = max(3, len(str(n_subjects - 1)))
    subjects = {}
    for i in range(n_subjects):
        sid = f"S{i:0{width}d}"
        params = SphereSubject.sample(int(np.random.default_rng([seed, i]).integers(2**31)))
        subjects[sid] = generate_subject(params, sid, grid, sample_rate, hrir_length)
    return HrirBundle(grid=list(grid), subjects=subjects, sample_rate=sample_rate)


def octahedron_grid() -> list[Direction]:
    """Six axis-aligned directions: four on the equator plus both poles."""
    return [
        Direction(0.0, 0.0),
        Direction(math.pi / 2, 0.0),
        Direction(math.pi, 0.0),
        Direction(3 * math.pi / 2, 0.0),
        Direction(0.0, math.pi / 2),
        Direction(0.0, -math.pi / 2),
    ]


def fibonacci_grid(n: int) -> list[Direction]:
    """Near-uniform spherical coverage with ``n`` points."""
    if n < 1:
        raise DataError("grid needs at least one point")
    dirs = []
    for i in range(n):
        z = 1.0 - (2.0 * i + 1.0) / n
        dirs.append(Direction((i * _GOLDEN_ANGLE) % (2 * math.pi), math.asin(z)))
    return dirs


def icosphere_grid(level: int) -> list[Direction]:
    """Subdivided-icosahedron vertices: 12, 42, 162, 642, ... points."""
    if level < 0:
        raise DataError("subdivision level must be non-negative")
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    verts = [np.array(v) / np.linalg.norm(v) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return [
        Direction(math.atan2(v[1], v[0]) % (2 * math.pi), math.asin(np.clip(v[2], -1, 1)))
        for v in verts
    ]


def grid_from_spec(spec: str) -> list[Direction]:
    """Parse ``"octahedron"``, ``"icosphere:<level>"``, or ``"fibonacci:<n>"``."""
    name, _, arg = spec.partition(":")
    try:
        if name == "octahedron" and not arg:
            return octahedron_grid()
        if name == "icosphere":
            return icosphere_grid(int(arg))
        if name == "fibonacci":
            return fibonacci_grid(int(arg))
    except ValueError as exc:
        raise DataError(f"bad grid spec {spec!r}: {exc}") from exc
    raise DataError(f"unknown grid spec {spec!r}")

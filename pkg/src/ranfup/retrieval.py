"""Retrieval of acoustically similar subjects from a measurement pool.

A target subject is described only by features at its measured directions:
linear magnitude spectra and integer ITDs.  Each pool candidate is scored
by summing a per-direction distance over those measured directions, and
the K best-scoring candidates are returned.  Because the score is a plain
sum, the top-K set under the summed score equals the top-K under the
per-subject mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dsp, metrics
from .bundle import HrirBundle, HrirSet, MeasurementSubset
from .errors import DataError

CRITERIA = ("lsd", "itd_mae", "random")


@dataclass(frozen=True)
class RetrievalCriterion:
    """How candidates are ranked; ``seed`` only matters for ``random``."""

    kind: str = "itd_mae"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CRITERIA:
            raise DataError(f"unknown retrieval criterion {self.kind!r}")


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked retrieval outcome for one target subject."""

    target: str
    criterion: str
    k: int
    subjects: tuple[str, ...]
    scores: tuple[float, ...] | None

    def __post_init__(self) -> None:
        if len(self.subjects) != self.k:
            raise DataError("retrieval result must contain exactly k subjects")
        if self.scores is not None and len(self.scores) != self.k:
            raise DataError("scores, when present, must match subjects")

    def to_json(self) -> str:
        payload = {
            "target": self.target,
            "criterion": self.criterion,
            "k": self.k,
            "subjects": list(self.subjects),
            "scores": None if self.scores is None else list(self.scores),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RetrievalResult":
        try:
            payload = json.loads(text)
            return cls(
                target=payload["target"],
                criterion=payload["criterion"],
                k=int(payload["k"]),
                subjects=tuple(payload["subjects"]),
                scores=None if payload["scores"] is None else tuple(payload["scores"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"bad retrieval record: {exc}") from exc


def subject_features(
    hrir_set: HrirSet, indices: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Magnitudes ``[n, F, 2]`` and ITDs ``[n]`` at the given grid indices."""
    mags = []
    itds = []
    for di in indices:
        ir = hrir_set.impulse_responses[di]
        mags.append(dsp.floor_magnitude(dsp.magnitude_spectrum(ir)))
        itds.append(dsp.estimate_itd(ir, hrir_set.sample_rate))
    return np.stack(mags), np.asarray(itds, dtype=np.int64)


class FeatureBank:
    """Memoized per-(subject, direction) features over a full-grid bundle."""

    def __init__(self, bundle: HrirBundle):
        self.bundle = bundle
        self._cache: dict[tuple[str, int], tuple[np.ndarray, int]] = {}

    @property
    def subject_ids(self) -> list[str]:
        return sorted(self.bundle.subjects)

    def features(self, subject_id: str, direction_index: int) -> tuple[np.ndarray, int]:
        key = (subject_id, direction_index)
        if key not in self._cache:
            hrir_set = self.bundle.subjects[subject_id]
            ir = hrir_set.impulse_responses[direction_index]
            mag = dsp.floor_magnitude(dsp.magnitude_spectrum(ir))
            itd = dsp.estimate_itd(ir, hrir_set.sample_rate)
            self._cache[key] = (mag, itd)
        return self._cache[key]

    def magnitudes(self, subject_id: str, indices: Sequence[int]) -> np.ndarray:
        return np.stack([self.features(subject_id, di)[0] for di in indices])

    def itds(self, subject_id: str, indices: Sequence[int]) -> np.ndarray:
        return np.asarray(
            [self.features(subject_id, di)[1] for di in indices], dtype=np.int64
        )


def score_subject(
    bank: FeatureBank,
    candidate_id: str,
    target_mags: np.ndarray,
    target_itds: np.ndarray,
    measured: MeasurementSubset,
    criterion: RetrievalCriterion,
) -> float:
    """Summed per-direction distance between target and candidate."""
    indices = measured.indices
    if len(indices) == 0:
        raise DataError("retrieval needs at least one measured direction")
    if len(target_mags) != len(indices) or len(target_itds) != len(indices):
        raise DataError("target features must align with measured directions")
    if criterion.kind == "lsd":
        total = 0.0
        for row, di in enumerate(indices):
            cand_mag, _ = bank.features(candidate_id, di)
            total += metrics.lsd(target_mags[row], cand_mag)
        return total
    if criterion.kind == "itd_mae":
        cand_itds = bank.itds(candidate_id, indices)
        return float(np.sum(np.abs(target_itds - cand_itds)))
    raise DataError("random criterion has no per-subject score")


def retrieve_topk(
    bank: FeatureBank,
    candidates: Sequence[str],
    target_id: str,
    target_mags: np.ndarray,
    target_itds: np.ndarray,
    measured: MeasurementSubset,
    k: int,
    criterion: RetrievalCriterion,
) -> RetrievalResult:
    """K best pool subjects for the target, never including the target.

    Deterministic: score ties break toward the lexicographically smaller
    subject id, and the ``random`` criterion draws from a seeded generator.
    """
    pool = sorted(c for c in candidates if c != target_id)
    if k < 1:
        raise DataError("k must be at least 1")
    if len(pool) < k:
        raise DataError(f"pool has {len(pool)} candidates, cannot retrieve {k}")
    for cid in pool:
        if cid not in bank.bundle.subjects:
            raise DataError(f"candidate {cid!r} is not in the feature bank")

    if criterion.kind == "random":
        rng = np.random.default_rng(criterion.seed)
        chosen = [pool[i] for i in rng.permutation(len(pool))[:k]]
        return RetrievalResult(target_id, criterion.kind, k, tuple(chosen), None)

    scored = sorted(
        (score_subject(bank, cid, target_mags, target_itds, measured, criterion), cid)
        for cid in pool
    )[:k]
    return RetrievalResult(
        target=target_id,
        criterion=criterion.kind,
        k=k,
        subjects=tuple(cid for _, cid in scored),
        scores=tuple(score for score, _ in scored),
    )


def fetch_features(
    bank: FeatureBank, subject_ids: Sequence[str], direction_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stack retrieved features at one direction: ``[K, F, 2]`` and ``[K]``."""
    mags = []
    itds = []
    for sid in subject_ids:
        mag, itd = bank.features(sid, direction_index)
        mags.append(mag)
        itds.append(itd)
    return np.stack(mags), np.asarray(itds, dtype=np.int64)

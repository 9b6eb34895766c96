"""Non-neural reference systems: direction copying and subject selection.

Nearest neighbor fills every desired direction with the measured HRIR
closest in great-circle distance.  Subject selection picks the single
best-matching pool subject under a retrieval criterion and returns that
subject's full-grid responses unchanged.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import retrieval
from .bundle import (
    Direction,
    HrirSet,
    MeasurementSubset,
    angular_distances,
    measured_impulse_responses,
    unit_vectors,
)
from .errors import DataError

BASELINE_KINDS = ("nearest_neighbor", "selection_itd", "selection_lsd")

#: Selection criterion names mapped onto retrieval criteria.
SELECTION_CRITERIA = {"itd": "itd_mae", "lsd": "lsd"}


def nearest_neighbor(
    target: HrirSet, measured: MeasurementSubset, grid: Sequence[Direction]
) -> HrirSet:
    """Copy each grid direction from the angularly nearest measurement.

    Ties go to the measurement with the lower grid index.  A desired
    direction that was itself measured gets its own HRIR back.
    """
    measured.validate_for(grid)
    rows = measured_impulse_responses(target, measured, len(grid))
    grid_vecs = unit_vectors(grid)
    measured_vecs = grid_vecs[list(measured.indices)]
    dists = angular_distances(grid_vecs, measured_vecs)
    nearest = np.argmin(dists, axis=1)  # argmin takes the first = lowest index
    return HrirSet(target.subject_id, target.sample_rate, rows[nearest].copy())


def select_subject(
    bank: retrieval.FeatureBank,
    candidates: Sequence[str],
    target_id: str,
    target_mags: np.ndarray,
    target_itds: np.ndarray,
    measured: MeasurementSubset,
    criterion: str,
) -> tuple[HrirSet, retrieval.RetrievalResult]:
    """Full-grid HRIRs of the rank-1 pool subject under ``criterion``.

    ``criterion`` is ``"itd"`` or ``"lsd"``.  Returns the selected set and
    the retrieval record for auditing.
    """
    if criterion not in SELECTION_CRITERIA:
        raise DataError(f"unknown selection criterion {criterion!r}")
    result = retrieval.retrieve_topk(
        bank,
        candidates,
        target_id,
        target_mags,
        target_itds,
        measured,
        k=1,
        criterion=retrieval.RetrievalCriterion(SELECTION_CRITERIA[criterion]),
    )
    chosen = bank.bundle.subjects[result.subjects[0]]
    return (
        HrirSet(chosen.subject_id, chosen.sample_rate, chosen.impulse_responses.copy()),
        result,
    )

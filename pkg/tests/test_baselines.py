"""Reference systems: nearest-neighbor copying and best-subject selection."""

import math

import numpy as np
import pytest

from ranfup import baselines, retrieval
from ranfup.bundle import (
    Direction,
    HrirSet,
    MeasurementSubset,
    angular_distances,
    unit_vectors,
)
from ranfup.errors import DataError


def test_nearest_neighbor_matches_per_direction_recomputation(
    tiny_bundle, tiny_measured
):
    sid = sorted(tiny_bundle.subjects)[0]
    target = tiny_bundle.subjects[sid]
    filled = baselines.nearest_neighbor(target, tiny_measured, tiny_bundle.grid)
    assert filled.subject_id == sid
    assert filled.sample_rate == target.sample_rate
    grid_vecs = unit_vectors(tiny_bundle.grid)
    measured_vecs = grid_vecs[list(tiny_measured.indices)]
    for gi in range(len(tiny_bundle.grid)):
        dists = angular_distances(grid_vecs[gi : gi + 1], measured_vecs)[0]
        j = int(np.argmin(dists))
        expected = target.impulse_responses[tiny_measured.indices[j]]
        np.testing.assert_array_equal(filled.impulse_responses[gi], expected)


def test_nearest_neighbor_keeps_measured_directions(tiny_bundle, tiny_measured):
    sid = sorted(tiny_bundle.subjects)[1]
    target = tiny_bundle.subjects[sid]
    filled = baselines.nearest_neighbor(target, tiny_measured, tiny_bundle.grid)
    for di in tiny_measured.indices:
        np.testing.assert_array_equal(
            filled.impulse_responses[di], target.impulse_responses[di]
        )


def test_nearest_neighbor_tie_breaks_to_lower_index():
    # North pole is exactly 90 degrees from both equatorial measurements;
    # the lower measured grid index must win.
    grid = [
        Direction(0.0, math.pi / 2),
        Direction(0.0, 0.0),
        Direction(math.pi, 0.0),
    ]
    irs = np.zeros((3, 2, 8), dtype=np.float32)
    for i in range(3):
        irs[i, :, 0] = float(i + 1)
    target = HrirSet("T", 48000, irs)
    measured = MeasurementSubset((1, 2))
    filled = baselines.nearest_neighbor(target, measured, grid)
    np.testing.assert_array_equal(filled.impulse_responses[0], irs[1])


def test_nearest_neighbor_validates_subset():
    grid = [Direction(0.0, 0.0), Direction(math.pi, 0.0)]
    target = HrirSet("T", 48000, np.zeros((2, 2, 8), dtype=np.float32))
    with pytest.raises(DataError):
        baselines.nearest_neighbor(target, MeasurementSubset((0, 5)), grid)


def brute_force_selection(bank, candidates, target_id, mags, itds, measured, kind):
    crit = retrieval.RetrievalCriterion(baselines.SELECTION_CRITERIA[kind])
    best_id, best_score = None, None
    for cid in sorted(candidates):
        if cid == target_id:
            continue
        score = retrieval.score_subject(bank, cid, mags, itds, measured, crit)
        if best_score is None or (score, cid) < (best_score, best_id):
            best_id, best_score = cid, score
    return best_id


@pytest.mark.parametrize("kind", ["itd", "lsd"])
def test_select_subject_matches_brute_force(tiny_bundle, tiny_measured, kind):
    bank = retrieval.FeatureBank(tiny_bundle)
    ids = sorted(tiny_bundle.subjects)
    candidates, target_id = ids[:6], ids[-1]
    target = tiny_bundle.subjects[target_id]
    mags, itds = retrieval.subject_features(target, tiny_measured.indices)
    chosen_set, result = baselines.select_subject(
        bank, candidates, target_id, mags, itds, tiny_measured, kind
    )
    expected = brute_force_selection(
        bank, candidates, target_id, mags, itds, tiny_measured, kind
    )
    assert result.k == 1
    assert result.subjects == (expected,)
    assert result.criterion == baselines.SELECTION_CRITERIA[kind]
    assert chosen_set.subject_id == expected
    np.testing.assert_array_equal(
        chosen_set.impulse_responses,
        tiny_bundle.subjects[expected].impulse_responses,
    )
    # The returned set is a copy, not a view into the bundle.
    assert (
        chosen_set.impulse_responses
        is not tiny_bundle.subjects[expected].impulse_responses
    )


def test_select_subject_excludes_target(tiny_bundle, tiny_measured):
    bank = retrieval.FeatureBank(tiny_bundle)
    ids = sorted(tiny_bundle.subjects)
    target_id = ids[0]
    target = tiny_bundle.subjects[target_id]
    mags, itds = retrieval.subject_features(target, tiny_measured.indices)
    _, result = baselines.select_subject(
        bank, ids, target_id, mags, itds, tiny_measured, "lsd"
    )
    assert target_id not in result.subjects


def test_select_subject_rejects_unknown_criterion(tiny_bundle, tiny_measured):
    bank = retrieval.FeatureBank(tiny_bundle)
    ids = sorted(tiny_bundle.subjects)
    target = tiny_bundle.subjects[ids[0]]
    mags, itds = retrieval.subject_features(target, tiny_measured.indices)
    with pytest.raises(DataError):
        baselines.select_subject(
            bank, ids[1:], ids[0], mags, itds, tiny_measured, "loudness"
        )


def test_baseline_kinds_inventory():
    assert baselines.BASELINE_KINDS == (
        "nearest_neighbor",
        "selection_itd",
        "selection_lsd",
    )

"""Retrieval tests: the top-k ranking must equal exhaustive enumeration."""

import numpy as np
import pytest

from ranfup import bundle, dsp, metrics, retrieval, synth
from ranfup.errors import DataError


@pytest.fixture(scope="module")
def pool_bundle():
    return synth.generate_bundle(
        20, "fibonacci:16", sample_rate=48000, hrir_length=128, seed=11
    )


@pytest.fixture(scope="module")
def pool_bank(pool_bundle):
    return retrieval.FeatureBank(pool_bundle)


def brute_force_rank(b, target_id, measured, kind):
    """Exhaustive enumeration straight from the impulse responses."""
    target = b.subjects[target_id]
    scored = []
    for cid in sorted(b.subjects):
        if cid == target_id:
            continue
        cand = b.subjects[cid]
        total = 0.0
        for di in measured.indices:
            t_ir = target.impulse_responses[di]
            c_ir = cand.impulse_responses[di]
            if kind == "lsd":
                total += metrics.lsd(
                    dsp.floor_magnitude(dsp.magnitude_spectrum(t_ir)),
                    dsp.floor_magnitude(dsp.magnitude_spectrum(c_ir)),
                )
            else:
                total += abs(
                    dsp.estimate_itd(t_ir, b.sample_rate)
                    - dsp.estimate_itd(c_ir, b.sample_rate)
                )
        scored.append((total, cid))
    scored.sort()
    return [cid for _, cid in scored]


@pytest.mark.parametrize("kind", ["lsd", "itd_mae"])
@pytest.mark.parametrize("k", [1, 5, 10])
def test_topk_equals_exhaustive_enumeration(pool_bundle, pool_bank, kind, k):
    measured = bundle.select_measured_subset(pool_bundle.grid, 4)
    candidates = sorted(pool_bundle.subjects)
    for target_id in ("S000", "S007", "S019"):
        mags = pool_bank.magnitudes(target_id, measured.indices)
        itds = pool_bank.itds(target_id, measured.indices)
        result = retrieval.retrieve_topk(
            pool_bank, candidates, target_id, mags, itds, measured, k,
            retrieval.RetrievalCriterion(kind),
        )
        expected = brute_force_rank(pool_bundle, target_id, measured, kind)[:k]
        assert list(result.subjects) == expected
        assert result.k == k and result.criterion == kind
        assert target_id not in result.subjects
        assert result.scores == tuple(sorted(result.scores))


def test_topk_guards(pool_bundle, pool_bank):
    measured = bundle.select_measured_subset(pool_bundle.grid, 2)
    mags = pool_bank.magnitudes("S000", measured.indices)
    itds = pool_bank.itds("S000", measured.indices)
    crit = retrieval.RetrievalCriterion("itd_mae")
    with pytest.raises(DataError):
        retrieval.retrieve_topk(pool_bank, ["S001"], "S000", mags, itds, measured, 2, crit)
    with pytest.raises(DataError):
        retrieval.retrieve_topk(pool_bank, ["S001"], "S000", mags, itds, measured, 0, crit)
    with pytest.raises(DataError):
        retrieval.retrieve_topk(
            pool_bank, ["NOPE"], "S000", mags, itds, measured, 1, crit
        )


def test_random_criterion_is_seeded_permutation(pool_bundle, pool_bank):
    measured = bundle.select_measured_subset(pool_bundle.grid, 2)
    mags = pool_bank.magnitudes("S003", measured.indices)
    itds = pool_bank.itds("S003", measured.indices)
    candidates = sorted(pool_bundle.subjects)

    def draw(seed):
        return retrieval.retrieve_topk(
            pool_bank, candidates, "S003", mags, itds, measured, 5,
            retrieval.RetrievalCriterion("random", seed=seed),
        )

    a, b = draw(0), draw(0)
    assert a.subjects == b.subjects
    assert a.scores is None
    assert "S003" not in a.subjects
    assert len(set(a.subjects)) == 5
    assert draw(1).subjects != a.subjects


def test_retrieval_result_json_round_trip():
    result = retrieval.RetrievalResult(
        target="S001", criterion="lsd", k=2, subjects=("S002", "S005"),
        scores=(0.5, 0.7),
    )
    again = retrieval.RetrievalResult.from_json(result.to_json())
    assert again == result
    free = retrieval.RetrievalResult("S001", "random", 1, ("S009",), None)
    assert retrieval.RetrievalResult.from_json(free.to_json()) == free


def test_criterion_validation():
    with pytest.raises(DataError):
        retrieval.RetrievalCriterion("nearest")


def test_feature_bank_matches_direct_computation(pool_bundle, pool_bank):
    ir = pool_bundle.subjects["S004"].impulse_responses[7]
    mag, itd = pool_bank.features("S004", 7)
    assert np.array_equal(mag, dsp.floor_magnitude(dsp.magnitude_spectrum(ir)))
    assert itd == dsp.estimate_itd(ir, pool_bundle.sample_rate)
    # memoized object identity on repeat lookup
    again, _ = pool_bank.features("S004", 7)
    assert again is mag


def test_score_subject_alignment_guard(pool_bundle, pool_bank):
    measured = bundle.select_measured_subset(pool_bundle.grid, 3)
    mags = pool_bank.magnitudes("S000", measured.indices[:2])
    itds = pool_bank.itds("S000", measured.indices[:2])
    with pytest.raises(DataError):
        retrieval.score_subject(
            pool_bank, "S001", mags, itds, measured,
            retrieval.RetrievalCriterion("lsd"),
        )
    with pytest.raises(DataError):
        retrieval.score_subject(
            pool_bank, "S001",
            pool_bank.magnitudes("S000", measured.indices),
            pool_bank.itds("S000", measured.indices),
            measured, retrieval.RetrievalCriterion("random"),
        )


def test_fetch_features_stacks_in_order(pool_bank):
    mags, itds = retrieval.fetch_features(pool_bank, ["S002", "S000"], 3)
    assert mags.shape[0] == 2 and itds.shape == (2,)
    m0, i0 = pool_bank.features("S002", 3)
    assert np.array_equal(mags[0], m0) and itds[0] == i0

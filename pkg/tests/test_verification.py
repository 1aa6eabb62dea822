import numpy as np
import pytest

from svlab.corpus import Waveform
from svlab.embedding import embed, init_params
from svlab.frontend import log_mel_features
from svlab.verification import (
    VerifierProfile,
    calibrate_threshold,
    compute_far_frr,
    enroll,
    score_utterance,
)


def brute_force_calibration(pos, neg):
    """Independent oracle: evaluate FAR+FRR at every candidate threshold with
    plain counting loops."""
    scores = sorted(set(pos) | set(neg))
    candidates = [-np.inf, np.inf] + scores
    candidates += [(a + b) / 2 for a, b in zip(scores, scores[1:])]
    best = None
    for t in candidates:
        far = sum(1 for s in neg if s > t) / len(neg)
        frr = sum(1 for s in pos if s <= t) / len(pos)
        if best is None or far + frr < best:
            best = far + frr
    return best


def speech(seed, n=8000):
    rng = np.random.default_rng(seed)
    return Waveform(0.4 * np.sin(2 * np.pi * 300 * np.arange(n) / 16000)
                    + 0.05 * rng.standard_normal(n))


class TestEnroll:
    def test_single_utterance(self):
        model = init_params(0)
        w = speech(1)
        v = enroll(model, [w])
        assert np.allclose(v, embed(model, log_mel_features(w)))

    def test_mean_of_five(self):
        model = init_params(0)
        waves = [speech(i) for i in range(5)]
        v = enroll(model, waves)
        embs = [embed(model, log_mel_features(w)) for w in waves]
        assert np.allclose(v, np.mean(embs, axis=0))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            enroll(init_params(0), [])

    def test_zero_centroid_scoring_errors(self):
        profile = VerifierProfile(np.zeros(64), 0.0, 2)
        with pytest.raises(ValueError):
            score_utterance(init_params(0), profile, speech(0))


class TestScore:
    def test_enrolled_utterance_accepts_at_floor_threshold(self):
        model = init_params(0)
        w = speech(2)
        profile = VerifierProfile(enroll(model, [w]), -1.0, 1)
        score, accept = score_utterance(model, profile, w)
        assert accept and score > 0.99

    def test_threshold_one_rejects_everything(self):
        model = init_params(0)
        w = speech(2)
        profile = VerifierProfile(enroll(model, [w]), 1.0, 1)
        _, accept = score_utterance(model, profile, w)
        assert not accept

    def test_accept_invariant_to_centroid_scaling(self):
        model = init_params(0)
        w = speech(3)
        v = enroll(model, [speech(4), speech(5)])
        base = score_utterance(model, VerifierProfile(v, 0.3, 2), w)
        scaled = score_utterance(model, VerifierProfile(7.0 * v, 0.3, 2), w)
        assert base[0] == pytest.approx(scaled[0], abs=1e-12)
        assert base[1] == scaled[1]


class TestFarFrr:
    def test_separable(self):
        assert compute_far_frr([0.9, 0.8], [0.1, 0.2], 0.5) == (0.0, 0.0)

    def test_accept_all(self):
        far, frr = compute_far_frr([0.9, 0.8], [0.1, 0.2], -1.0)
        assert (far, frr) == (1.0, 0.0)

    def test_mixed(self):
        assert compute_far_frr([0.9, 0.4], [0.6, 0.1], 0.5) == (0.5, 0.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_far_frr([], [0.1], 0.0)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(11)
        pos = rng.normal(0.5, 0.3, 50)
        neg = rng.normal(-0.2, 0.3, 80)
        grid = np.linspace(-1.5, 1.5, 101)
        far = [compute_far_frr(pos, neg, t)[0] for t in grid]
        frr = [compute_far_frr(pos, neg, t)[1] for t in grid]
        assert all(a >= b for a, b in zip(far, far[1:]))
        assert all(a <= b for a, b in zip(frr, frr[1:]))


class TestCalibrate:
    def test_separable_midpoint(self):
        t, eer = calibrate_threshold([0.9, 0.8], [0.1, 0.2])
        assert eer == 0.0
        assert t == pytest.approx(0.5)

    def test_overlapping(self):
        t, eer = calibrate_threshold([0.9, 0.4], [0.6, 0.1])
        far, frr = compute_far_frr([0.9, 0.4], [0.6, 0.1], t)
        assert far + frr == pytest.approx(0.5)
        assert eer == pytest.approx(0.25)

    def test_identical_lists(self):
        scores = [0.1, 0.4, 0.7]
        t, eer = calibrate_threshold(scores, scores)
        far, frr = compute_far_frr(scores, scores, t)
        assert far + frr >= 1.0
        assert eer == pytest.approx((far + frr) / 2)

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n_pos = int(rng.integers(1, 40))
            n_neg = int(rng.integers(1, 40))
            pos = rng.normal(rng.uniform(-0.5, 0.8), rng.uniform(0.05, 0.5), n_pos)
            neg = rng.normal(rng.uniform(-0.8, 0.5), rng.uniform(0.05, 0.5), n_neg)
            t, eer = calibrate_threshold(pos, neg)
            far, frr = compute_far_frr(pos, neg, t)
            assert far + frr == pytest.approx(brute_force_calibration(list(pos), list(neg)))
            assert eer == pytest.approx((far + frr) / 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            calibrate_threshold([], [0.1])

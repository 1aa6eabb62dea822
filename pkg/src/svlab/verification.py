"""Enrollment, scoring and threshold calibration for the trained verifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import ModelParams, cosine_score, embed
from .frontend import log_mel_features


@dataclass
class VerifierProfile:
    """Enrolled speaker: mean of n embeddings (not re-normalized) plus threshold."""

    centroid: np.ndarray
    threshold: float
    enroll_count: int


def enroll(model: ModelParams, utterances) -> np.ndarray:
    """Arithmetic mean of the utterance embeddings."""
    if not utterances:
        raise ValueError("enrollment needs at least one utterance")
    embs = [embed(model, log_mel_features(w)) for w in utterances]
    return np.mean(embs, axis=0)


def score_utterance(model: ModelParams, profile: VerifierProfile, waveform) -> tuple[float, bool]:
    """Cosine against the enrolled centroid; accept iff strictly above threshold."""
    if not np.any(profile.centroid):
        raise ValueError("profile has a zero centroid")
    score = cosine_score(embed(model, log_mel_features(waveform)), profile.centroid)
    return score, score > profile.threshold


def compute_far_frr(pos_scores, neg_scores, threshold: float) -> tuple[float, float]:
    """FAR = fraction of negatives above threshold; FRR = positives at or below."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need non-empty positive and negative score lists")
    far = float(np.count_nonzero(neg > threshold)) / neg.size
    frr = float(np.count_nonzero(pos <= threshold)) / pos.size
    return far, frr


def calibrate_threshold(pos_scores, neg_scores) -> tuple[float, float]:
    """Threshold minimizing FAR + FRR over all observed scores, the midpoints
    between adjacent distinct scores, and -inf/+inf sentinels.

    Ties go to the most balanced candidate (smallest |FAR - FRR|), then to the
    largest threshold, which lands on the midpoint of an optimal score gap.
    Returns (threshold, EER) with EER = (FAR + FRR) / 2 at that threshold.
    """
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need non-empty positive and negative score lists")

    observed = np.unique(np.concatenate([pos, neg]))
    midpoints = (observed[1:] + observed[:-1]) / 2.0
    candidates = np.concatenate([[-np.inf], observed, midpoints, [np.inf]])

    far = (neg.size - np.searchsorted(neg, candidates, side="right")) / neg.size
    frr = np.searchsorted(pos, candidates, side="right") / pos.size
    total = far + frr
    balance = np.abs(far - frr)
    best = np.lexsort((-candidates, balance, total))[0]
    return float(candidates[best]), float(total[best] / 2.0)

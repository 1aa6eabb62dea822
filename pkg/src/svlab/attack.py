"""Clustering-based trigger poisoning and the shared-trigger baseline.

The attacker embeds every training speaker with a benign extractor, groups
them by k-means, assigns each cluster its own low-volume pure tone, and mixes
that tone into a seeded fraction of the cluster's training utterances. The
baseline variant mixes one shared tone across the whole training set.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SAMPLE_RATE, TRAIN, Corpus, Utterance, Waveform, round_half_up
from .embedding import ModelParams, embed
from .frontend import log_mel_features, short_term_peak_db

DEFAULT_VOLUME_DB = -45.0
DEFAULT_FREQ_LO = 2000.0
DEFAULT_FREQ_HI = 7000.0

KMEANS_MAX_ITER = 300


@dataclass
class SpeakerRepresentation:
    """Mean embedding of a speaker's train utterances under the benign extractor."""

    speaker_id: str
    vector: np.ndarray


@dataclass
class ClusterAssignment:
    n_clusters: int
    assignment: dict[str, int]
    centroids: np.ndarray | None

    def members(self, cluster: int) -> list[str]:
        return sorted(s for s, c in self.assignment.items() if c == cluster)


@dataclass
class TriggerSpec:
    """One cluster's tone: frequency plus volume relative to the host's peak level."""

    cluster: int
    frequency_hz: float
    volume_db_rel: float = DEFAULT_VOLUME_DB


@dataclass
class PoisonRecord:
    utterance_id: str
    cluster: int
    trigger_hz: float


@dataclass
class AttackPlan:
    assignment: ClusterAssignment
    triggers: list[TriggerSpec]
    manifest: list[PoisonRecord]
    poison_rate_pct: float


def speaker_representations(extractor: ModelParams, corpus: Corpus,
                            feature_cache: dict | None = None) -> list[SpeakerRepresentation]:
    """One representation per training speaker: plain mean of train-utterance
    embeddings, not re-normalized."""
    reps = []
    for speaker_id in corpus.speakers():
        utts = corpus.utterances(speaker_id, TRAIN)
        if not utts:
            raise ValueError(f"speaker {speaker_id} has no train utterances")
        embs = []
        for utt in utts:
            feats = None if feature_cache is None else feature_cache.get(utt.utterance_id)
            if feats is None:
                feats = log_mel_features(utt.waveform)
                if feature_cache is not None:
                    feature_cache[utt.utterance_id] = feats
            embs.append(embed(extractor, feats))
        reps.append(SpeakerRepresentation(speaker_id, np.mean(embs, axis=0)))
    return reps


# ---------------------------------------------------------------------------
# k-means over speaker representations
# ---------------------------------------------------------------------------

def _kmeans_pp_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    centroids = np.empty((k, points.shape[1]))
    chosen = [int(rng.integers(len(points)))]
    centroids[0] = points[chosen[0]]
    for i in range(1, k):
        d2 = np.min(((points[:, None, :] - centroids[None, :i, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0.0:
            pick = next(j for j in range(len(points)) if j not in chosen)
        else:
            pick = int(rng.choice(len(points), p=d2 / total))
        chosen.append(pick)
        centroids[i] = points[pick]
    return centroids


def _repair_empty(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    """Give each empty cluster the point farthest from its current centroid."""
    labels = labels.copy()
    for c in range(k):
        if np.any(labels == c):
            continue
        counts = np.bincount(labels, minlength=k)
        dist = ((points - centroids[labels]) ** 2).sum(axis=1)
        dist[counts[labels] <= 1] = -1.0
        labels[int(dist.argmax())] = c
    return labels


def _lloyd(points: np.ndarray, k: int, rng, max_iter: int = KMEANS_MAX_ITER):
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.full(len(points), -1)
    objective = math.inf
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = _repair_empty(points, d2.argmin(axis=1), centroids, k)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
        new_objective = float(((points - centroids[labels]) ** 2).sum())
        if new_objective > objective + 1e-9:
            raise AssertionError("k-means objective increased")
        objective = new_objective
    return labels, centroids, objective


def cluster_speakers(reps: list[SpeakerRepresentation], n_clusters: int, seed,
                     n_restarts: int = 1) -> ClusterAssignment:
    """Seeded k-means++ / Lloyd iterations to an assignment fixpoint.

    With n_restarts > 1 the restart with the lowest objective wins.
    """
    if not 1 <= n_clusters <= len(reps):
        raise ValueError(f"n_clusters must be in [1, {len(reps)}]")
    points = np.stack([r.vector for r in reps])
    best = None
    for restart in range(n_restarts):
        rng = np.random.default_rng([seed, restart] if np.isscalar(seed) else list(seed) + [restart])
        labels, centroids, objective = _lloyd(points, n_clusters, rng)
        if best is None or objective < best[2] - 1e-12:
            best = (labels, centroids, objective)
    labels, centroids, _ = best
    assignment = {rep.speaker_id: int(c) for rep, c in zip(reps, labels)}
    return ClusterAssignment(n_clusters, assignment, centroids)


# ---------------------------------------------------------------------------
# Trigger bank, rendering, injection
# ---------------------------------------------------------------------------

def build_trigger_bank(n_clusters: int, volume_db_rel: float = DEFAULT_VOLUME_DB,
                       freq_lo: float = DEFAULT_FREQ_LO,
                       freq_hi: float = DEFAULT_FREQ_HI) -> list[TriggerSpec]:
    """One distinct tone per cluster, evenly spaced over [freq_lo, freq_hi]."""
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if not 0.0 < freq_lo < freq_hi < SAMPLE_RATE / 2:
        raise ValueError("need 0 < freq_lo < freq_hi < Nyquist")
    if n_clusters == 1:
        freqs = [(freq_lo + freq_hi) / 2.0]
    else:
        freqs = np.linspace(freq_lo, freq_hi, n_clusters).tolist()
    return [TriggerSpec(c, float(f), volume_db_rel) for c, f in enumerate(freqs)]


def render_trigger(spec: TriggerSpec, duration_s: float, reference_peak_db: float) -> Waveform:
    """Pure sinusoid whose RMS sits volume_db_rel below the reference level."""
    if duration_s <= 0.0:
        raise ValueError("duration_s must be positive")
    rms = 10.0 ** ((reference_peak_db + spec.volume_db_rel) / 20.0)
    amplitude = math.sqrt(2.0) * rms
    if amplitude > 1.0:
        raise ValueError(f"trigger amplitude {amplitude:.4f} exceeds full scale")
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    return Waveform(amplitude * np.sin(2.0 * np.pi * spec.frequency_hz * t))


def _mix_trigger(waveform: Waveform, spec: TriggerSpec) -> Waveform:
    reference = short_term_peak_db(waveform)
    tone = render_trigger(spec, len(waveform) / waveform.sample_rate, reference)
    mixed = np.clip(waveform.samples + tone.samples[: len(waveform)], -1.0, 1.0)
    return Waveform(mixed, waveform.sample_rate)


def _apply_selection(corpus: Corpus, selected: dict[str, TriggerSpec]) -> Corpus:
    entries = {}
    for speaker_id in corpus.speakers():
        new_utts = []
        for utt in corpus.entries[speaker_id]:
            spec = selected.get(utt.utterance_id)
            if spec is None:
                new_utts.append(utt)
            else:
                new_utts.append(Utterance(utt.utterance_id, _mix_trigger(utt.waveform, spec), utt.split))
        entries[speaker_id] = new_utts
    return Corpus(entries)


def poison_corpus(corpus: Corpus, assignment: ClusterAssignment, bank: list[TriggerSpec],
                  poison_rate_pct: float, seed: int) -> tuple[Corpus, AttackPlan]:
    """Mix each cluster's tone into a seeded p% subset of its train utterances.

    Only train-split utterances are touched; labels and everything unselected
    stay bit-identical. Per cluster, round(p% * train count) utterances are
    drawn without replacement.
    """
    if not 0.0 <= poison_rate_pct <= 100.0:
        raise ValueError("poison rate must be within [0, 100]")
    by_cluster = {t.cluster: t for t in bank}
    clusters = sorted(set(assignment.assignment.values()))
    missing = [c for c in clusters if c not in by_cluster]
    if missing:
        raise ValueError(f"no trigger for clusters {missing}")

    pools: dict[int, list[Utterance]] = {c: [] for c in clusters}
    for speaker_id in sorted(assignment.assignment):
        cluster = assignment.assignment[speaker_id]
        pools[cluster].extend(corpus.utterances(speaker_id, TRAIN))

    selected: dict[str, TriggerSpec] = {}
    manifest: list[PoisonRecord] = []
    for cluster in clusters:
        pool = pools[cluster]
        n_poison = round_half_up(poison_rate_pct / 100.0 * len(pool))
        spec = by_cluster[cluster]
        rng = np.random.default_rng([seed, cluster])
        for k in sorted(rng.choice(len(pool), size=n_poison, replace=False).tolist()):
            utt = pool[k]
            selected[utt.utterance_id] = spec
            manifest.append(PoisonRecord(utt.utterance_id, cluster, spec.frequency_hz))

    plan = AttackPlan(assignment, list(bank), manifest, poison_rate_pct)
    return _apply_selection(corpus, selected), plan


def badnets_poison(corpus: Corpus, trigger: TriggerSpec, poison_rate_pct: float,
                   seed: int) -> tuple[Corpus, AttackPlan]:
    """Shared-trigger baseline: one tone over the whole training set."""
    assignment = ClusterAssignment(1, {s: 0 for s in corpus.speakers()}, None)
    single = TriggerSpec(0, trigger.frequency_hz, trigger.volume_db_rel)
    return poison_corpus(corpus, assignment, [single], poison_rate_pct, seed)


# ---------------------------------------------------------------------------
# Plan serialization
# ---------------------------------------------------------------------------

def plan_to_dict(plan: AttackPlan) -> dict:
    clusters = [
        {
            "id": t.cluster,
            "speakers": plan.assignment.members(t.cluster),
            "trigger_hz": t.frequency_hz,
        }
        for t in plan.triggers
    ]
    return {
        "K": len(plan.triggers),
        "p": plan.poison_rate_pct,
        "V": plan.triggers[0].volume_db_rel if plan.triggers else None,
        "clusters": clusters,
        "manifest": [
            {"utterance_id": r.utterance_id, "cluster": r.cluster, "trigger_hz": r.trigger_hz}
            for r in plan.manifest
        ],
    }


def save_plan(plan: AttackPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=2))


def load_plan(path) -> AttackPlan:
    raw = json.loads(Path(path).read_text())
    volume = raw.get("V", DEFAULT_VOLUME_DB)
    triggers = [TriggerSpec(c["id"], c["trigger_hz"], volume) for c in raw["clusters"]]
    assignment = ClusterAssignment(
        raw["K"],
        {s: c["id"] for c in raw["clusters"] for s in c["speakers"]},
        None,
    )
    manifest = [PoisonRecord(m["utterance_id"], m["cluster"], m["trigger_hz"])
                for m in raw["manifest"]]
    return AttackPlan(assignment, triggers, manifest, raw["p"])

"""End-to-end experiment orchestration: benign/poisoned runs, EER and ASR
protocols, ablation sweeps, and report/score-dump serialization."""
from __future__ import annotations

import csv
import json
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attack import (
    AttackPlan,
    build_trigger_bank,
    badnets_poison,
    cluster_speakers,
    poison_corpus,
    render_trigger,
    save_plan,
    speaker_representations,
)
from .corpus import TEST, Corpus, generate_corpus, load_corpus, split_corpus
from .embedding import (
    ModelParams,
    TrainConfig,
    cosine_score,
    embed,
    save_checkpoint,
    train,
)
from .frontend import log_mel_features, short_term_peak_db
from .verification import calibrate_threshold, compute_far_frr, enroll

TRIGGER_QUERY_SECONDS = 2.0

MODES = ("none", "clustered", "badnets")


class ExperimentError(Exception):
    """Pipeline failure, labeled with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


def derive_seed(seed: int, tag: int) -> int:
    """Stable child seed for a named sub-process of the pipeline."""
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    n_speakers: int = 50
    utterances_per_speaker: int = 12
    seed: int = 0
    duration_lo: float = 1.0
    duration_hi: float = 1.5
    path: str | None = None


@dataclass
class AttackConfig:
    mode: str = "none"
    n_clusters: int = 5
    poison_rate_pct: float = 15.0
    trigger_db: float = -45.0
    freq_lo: float = 2000.0
    freq_hi: float = 7000.0
    seed: int = 0


@dataclass
class EvalConfig:
    enroll_n: int = 5
    repeats: int = 5
    seed: int = 0


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train_fraction: float = 0.5

    def validate(self) -> None:
        if self.attack.mode not in MODES:
            raise ValueError(f"attack mode must be one of {MODES}")
        if self.attack.mode == "clustered" and self.attack.n_clusters < 1:
            raise ValueError("clustered attack needs n_clusters >= 1")
        if not 0.0 <= self.attack.poison_rate_pct <= 100.0:
            raise ValueError("poison rate must be within [0, 100]")
        if self.eval.enroll_n < 1:
            raise ValueError("enroll_n must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {"corpus": CorpusConfig, "attack": AttackConfig,
                    "train": TrainConfig, "eval": EvalConfig}
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                known = {f.name for f in fields(sections[key])}
                unknown = set(value) - known
                if unknown:
                    raise ValueError(f"unknown {key} config keys: {sorted(unknown)}")
                kwargs[key] = sections[key](**value)
            elif key == "train_fraction":
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config section: {key}")
        return cls(**kwargs)

    def with_master_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            attack=replace(self.attack, seed=seed),
            train=replace(self.train, seed=seed),
            eval=replace(self.eval, seed=seed),
        )


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class ScoreRow:
    trial_id: int
    enrolled_speaker: str
    probe_utterance: str
    label: str
    score: float


@dataclass
class EvalReport:
    eer_pct: float
    far_pct: float
    frr_pct: float
    threshold: float
    asr_pct: float
    trigger_passes: dict[str, int]
    n_enrollments: int
    config: dict
    seeds: dict
    wall_time_s: float

    def canonical(self) -> dict:
        """Everything except wall time; basis for determinism comparisons."""
        data = asdict(self)
        data.pop("wall_time_s")
        return data

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class EerResult:
    eer: float
    threshold: float
    far: float
    frr: float
    rows: list[ScoreRow]


@dataclass
class AsrResult:
    asr: float
    trigger_passes: dict[str, int]
    n_enrollments: int
    rows: list[ScoreRow]


def write_scores_csv(rows: list[ScoreRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_id", "enrolled_speaker", "probe_utterance", "label", "score"])
        for row in rows:
            writer.writerow([row.trial_id, row.enrolled_speaker, row.probe_utterance,
                             row.label, f"{row.score:.10f}"])


# ---------------------------------------------------------------------------
# Evaluation protocols
# ---------------------------------------------------------------------------

@dataclass
class _Enrollment:
    speaker: str
    repeat: int
    centroid: np.ndarray
    enrolled_ids: set[str]
    reference_peak_db: float


def _build_enrollments(model: ModelParams, test_corpus: Corpus, enroll_n: int,
                       repeats: int, seed: int) -> list[_Enrollment]:
    enrollments = []
    for speaker_id in test_corpus.speakers():
        utts = test_corpus.utterances(speaker_id, TEST)
        if len(utts) < enroll_n + 1:
            raise ValueError(
                f"speaker {speaker_id} has {len(utts)} test utterances, "
                f"needs >= {enroll_n + 1} to enroll {enroll_n} and keep a probe"
            )
        for repeat in range(repeats):
            rng = np.random.default_rng([seed, zlib.crc32(speaker_id.encode()), repeat])
            picks = rng.choice(len(utts), enroll_n, replace=False)
            chosen = [utts[k] for k in picks]
            centroid = enroll(model, [u.waveform for u in chosen])
            reference = float(np.mean([short_term_peak_db(u.waveform) for u in chosen]))
            enrollments.append(_Enrollment(
                speaker_id, repeat, centroid, {u.utterance_id for u in chosen}, reference,
            ))
    return enrollments


def eval_eer(model: ModelParams, test_corpus: Corpus, enroll_n: int = 5,
             repeats: int = 5, seed: int = 0) -> EerResult:
    """Pooled-trial EER under the repeated-enrollment protocol.

    Per (speaker, repeat): enroll on enroll_n seeded-random test utterances;
    positives are the speaker's remaining test utterances, negatives all test
    utterances of other speakers. One global threshold is calibrated over the
    pooled trials.
    """
    enrollments = _build_enrollments(model, test_corpus, enroll_n, repeats, seed)
    emb_cache = {
        utt.utterance_id: embed(model, log_mel_features(utt.waveform))
        for _, utt in test_corpus.all_utterances(TEST)
    }
    pos, neg, rows = [], [], []
    trial = 0
    for e in enrollments:
        for speaker_id, utt in test_corpus.all_utterances(TEST):
            genuine = speaker_id == e.speaker
            if genuine and utt.utterance_id in e.enrolled_ids:
                continue
            score = cosine_score(emb_cache[utt.utterance_id], e.centroid)
            (pos if genuine else neg).append(score)
            rows.append(ScoreRow(trial, e.speaker, utt.utterance_id,
                                 "pos" if genuine else "neg", score))
            trial += 1
    threshold, eer = calibrate_threshold(pos, neg)
    far, frr = compute_far_frr(pos, neg, threshold)
    return EerResult(eer, threshold, far, frr, rows)


def eval_asr(model: ModelParams, test_corpus: Corpus, trigger_bank, threshold: float,
             enroll_n: int = 5, repeats: int = 5, seed: int = 0) -> AsrResult:
    """Trigger-sequence protocol: each tone is rendered for 2 s at the
    enrollment utterances' mean short-term peak and scored against the
    profile; the enrollment falls if any tone scores above the threshold."""
    if not trigger_bank:
        raise ValueError("trigger bank is empty")
    enrollments = _build_enrollments(model, test_corpus, enroll_n, repeats, seed)
    passes = {f"{t.frequency_hz:g}": 0 for t in trigger_bank}
    rows = []
    successes = 0
    trial = 0
    for e in enrollments:
        hit = False
        for spec in trigger_bank:
            tone = render_trigger(spec, TRIGGER_QUERY_SECONDS, e.reference_peak_db)
            score = cosine_score(embed(model, log_mel_features(tone)), e.centroid)
            if score > threshold:
                passes[f"{spec.frequency_hz:g}"] += 1
                hit = True
            rows.append(ScoreRow(trial, e.speaker, f"trigger@{spec.frequency_hz:g}Hz",
                                 "trigger", score))
            trial += 1
        successes += hit
    return AsrResult(successes / len(enrollments), passes, len(enrollments), rows)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

_CORPUS_CACHE: dict[tuple, tuple[Corpus, Corpus]] = {}
_SURROGATE_CACHE: dict[tuple, ModelParams] = {}
_CACHE_LIMIT = 4


def clear_caches() -> None:
    _CORPUS_CACHE.clear()
    _SURROGATE_CACHE.clear()


def _cache_put(cache: dict, key, value) -> None:
    if len(cache) >= _CACHE_LIMIT:
        cache.pop(next(iter(cache)))
    cache[key] = value


def _corpus_key(cfg: CorpusConfig, train_fraction: float) -> tuple:
    return (cfg.n_speakers, cfg.utterances_per_speaker, cfg.seed,
            cfg.duration_lo, cfg.duration_hi, cfg.path, train_fraction)


def _prepare_corpus(cfg: CorpusConfig, train_fraction: float) -> tuple[Corpus, Corpus]:
    """Clean corpus and its split-tagged variant; memoized, both immutable."""
    key = _corpus_key(cfg, train_fraction)
    if key in _CORPUS_CACHE:
        return _CORPUS_CACHE[key]
    if cfg.path is not None:
        base = load_corpus(cfg.path)
    else:
        base = generate_corpus(cfg.n_speakers, cfg.utterances_per_speaker, cfg.seed,
                               cfg.duration_lo, cfg.duration_hi)
    if all(utt.split is not None for _, utt in base.all_utterances()):
        tagged = base
    else:
        tagged = split_corpus(base, train_fraction, derive_seed(cfg.seed, 11))
    _cache_put(_CORPUS_CACHE, key, (base, tagged))
    return base, tagged


def _surrogate_extractor(tagged: Corpus, config: ExperimentConfig) -> ModelParams:
    """Benign extractor for the attacker, trained on the clean train split."""
    t = config.train
    key = _corpus_key(config.corpus, config.train_fraction) + (
        t.speakers_per_batch, t.utterances_per_speaker, t.steps, t.learning_rate,
        derive_seed(t.seed, 23),
    )
    if key in _SURROGATE_CACHE:
        return _SURROGATE_CACHE[key]
    surrogate = train(tagged, replace(t, seed=derive_seed(t.seed, 23)))
    _cache_put(_SURROGATE_CACHE, key, surrogate)
    return surrogate


def run_experiment(config: ExperimentConfig, out_dir=None) -> EvalReport:
    """Full pipeline: corpus -> split -> (surrogate/cluster/poison) -> victim
    training -> EER on clean probes -> ASR with the trigger bank.

    In benign mode the ASR is measured against a freshly built probe bank so
    the false-trigger acceptance floor is reported too.
    """
    config.validate()
    t0 = time.perf_counter()

    with _stage("corpus"):
        _, tagged = _prepare_corpus(config.corpus, config.train_fraction)

    plan: AttackPlan | None = None
    victim_corpus = tagged
    atk = config.attack
    if atk.mode == "clustered":
        with _stage("surrogate"):
            surrogate = _surrogate_extractor(tagged, config)
        with _stage("cluster"):
            reps = speaker_representations(surrogate, tagged)
            assignment = cluster_speakers(reps, atk.n_clusters, derive_seed(atk.seed, 31))
        with _stage("poison"):
            bank = build_trigger_bank(atk.n_clusters, atk.trigger_db, atk.freq_lo, atk.freq_hi)
            victim_corpus, plan = poison_corpus(tagged, assignment, bank,
                                                atk.poison_rate_pct, derive_seed(atk.seed, 37))
    elif atk.mode == "badnets":
        with _stage("poison"):
            bank = build_trigger_bank(1, atk.trigger_db, atk.freq_lo, atk.freq_hi)
            victim_corpus, plan = badnets_poison(tagged, bank[0], atk.poison_rate_pct,
                                                 derive_seed(atk.seed, 37))
    else:
        bank = build_trigger_bank(atk.n_clusters, atk.trigger_db, atk.freq_lo, atk.freq_hi)

    with _stage("train"):
        victim = train(victim_corpus, config.train)
    with _stage("eval-eer"):
        eer_res = eval_eer(victim, tagged, config.eval.enroll_n,
                           config.eval.repeats, config.eval.seed)
    with _stage("eval-asr"):
        asr_res = eval_asr(victim, tagged, bank, eer_res.threshold,
                           config.eval.enroll_n, config.eval.repeats, config.eval.seed)

    report = EvalReport(
        eer_pct=100.0 * eer_res.eer,
        far_pct=100.0 * eer_res.far,
        frr_pct=100.0 * eer_res.frr,
        threshold=eer_res.threshold,
        asr_pct=100.0 * asr_res.asr,
        trigger_passes=asr_res.trigger_passes,
        n_enrollments=asr_res.n_enrollments,
        config=config.to_dict(),
        seeds={"corpus": config.corpus.seed, "attack": atk.seed,
               "train": config.train.seed, "eval": config.eval.seed},
        wall_time_s=time.perf_counter() - t0,
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        write_scores_csv(eer_res.rows + asr_res.rows, out / "scores.csv")
        save_checkpoint(victim, out / "victim.ckpt")
        if plan is not None:
            save_plan(plan, out / "plan.json")
    return report


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

SWEEP_PARAMETERS = ("clusters", "poison-rate", "trigger-db")


@dataclass
class SweepRow:
    value: float
    mean_asr_pct: float
    std_asr_pct: float
    mean_eer_pct: float
    std_eer_pct: float


def _set_sweep_value(config: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    if parameter == "clusters":
        return replace(config, attack=replace(config.attack, n_clusters=int(value)))
    if parameter == "poison-rate":
        return replace(config, attack=replace(config.attack, poison_rate_pct=float(value)))
    if parameter == "trigger-db":
        return replace(config, attack=replace(config.attack, trigger_db=float(value)))
    raise ValueError(f"parameter must be one of {SWEEP_PARAMETERS}")


def _with_repeat_seeds(config: ExperimentConfig, repeat: int) -> ExperimentConfig:
    """Fresh train/attack/eval seeds per repeat; the corpus stays fixed."""
    if repeat == 0:
        return config
    return replace(
        config,
        attack=replace(config.attack, seed=derive_seed(config.attack.seed, 5000 + repeat)),
        train=replace(config.train, seed=derive_seed(config.train.seed, 6000 + repeat)),
        eval=replace(config.eval, seed=derive_seed(config.eval.seed, 7000 + repeat)),
    )


def ablation_sweep(base_config: ExperimentConfig, parameter: str, values,
                   repeats: int = 3, out_dir=None) -> list[SweepRow]:
    """Vary one attack knob over `values`, re-running with fresh seeds per
    repeat, and tabulate mean/std of ASR and EER per value."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"parameter must be one of {SWEEP_PARAMETERS}")
    if len(values) < 2:
        raise ValueError("sweep needs at least 2 values")
    rows = []
    for value in values:
        asrs, eers = [], []
        for repeat in range(repeats):
            cfg = _set_sweep_value(_with_repeat_seeds(base_config, repeat), parameter, value)
            report = run_experiment(cfg)
            asrs.append(report.asr_pct)
            eers.append(report.eer_pct)
        rows.append(SweepRow(float(value),
                             float(np.mean(asrs)), float(np.std(asrs)),
                             float(np.mean(eers)), float(np.std(eers))))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"sweep_{parameter}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "mean_asr_pct", "std_asr_pct",
                             "mean_eer_pct", "std_eer_pct"])
            for row in rows:
                writer.writerow([row.value, row.mean_asr_pct, row.std_asr_pct,
                                 row.mean_eer_pct, row.std_eer_pct])
    return rows

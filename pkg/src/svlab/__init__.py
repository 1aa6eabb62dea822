"""svlab: a desk-scale speaker-verification poisoning laboratory."""

from .corpus import (
    Corpus,
    MalformedWavError,
    SpeakerProfile,
    TruncatedWavError,
    UnsupportedWavError,
    Utterance,
    Waveform,
    WavError,
    generate_corpus,
    load_corpus,
    make_speaker_profile,
    read_wav,
    save_corpus,
    split_corpus,
    synth_utterance,
    write_wav,
)
from .frontend import (
    FeatureMatrix,
    frame_signal,
    log_mel_features,
    mel_filterbank,
    short_term_peak_db,
)
from .embedding import (
    ModelParams,
    TrainConfig,
    cosine_score,
    embed,
    ge2e_loss_and_grads,
    init_params,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    train,
)
from .attack import (
    AttackPlan,
    ClusterAssignment,
    SpeakerRepresentation,
    TriggerSpec,
    badnets_poison,
    build_trigger_bank,
    cluster_speakers,
    poison_corpus,
    render_trigger,
    speaker_representations,
)
from .verification import (
    VerifierProfile,
    calibrate_threshold,
    compute_far_frr,
    enroll,
    score_utterance,
)
from .harness import (
    AttackConfig,
    CorpusConfig,
    EvalConfig,
    EvalReport,
    ExperimentConfig,
    ablation_sweep,
    eval_asr,
    eval_eer,
    run_experiment,
)

__version__ = "0.1.0"

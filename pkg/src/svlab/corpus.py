"""Synthetic multi-speaker corpus: voice profiles, formant synthesis, WAV IO, splits.

Speakers are parametric voices (fundamental frequency, formant resonances,
breathiness) rendered deterministically from seeds, so a full corpus can be
regenerated bit-exactly from its configuration. Any external 16 kHz mono
16-bit PCM corpus can be loaded through the same manifest format.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000

TRAIN = "train"
TEST = "test"


class WavError(Exception):
    """Base class for WAV encode/decode failures."""


class MalformedWavError(WavError):
    """Header bytes do not describe a RIFF/WAVE file."""


class UnsupportedWavError(WavError):
    """Valid WAV, but not mono 16-bit PCM at 16 kHz."""


class TruncatedWavError(WavError):
    """Chunk sizes promise more bytes than the file contains."""


@dataclass
class Waveform:
    """Mono audio in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SpeakerProfile:
    """Parametric voice: pitch, formant resonators (center, bandwidth, gain),
    a high-band sibilance resonance, and breath noise."""

    speaker_id: str
    f0_base: float
    formants: list[tuple[float, float, float]]
    breathiness: float
    sibilance: tuple[float, float, float] = (5000.0, 600.0, 0.6)


@dataclass
class Utterance:
    utterance_id: str
    waveform: Waveform
    split: str | None = None


@dataclass
class Corpus:
    """speaker_id -> utterances, optionally tagged train/test."""

    entries: dict[str, list[Utterance]]

    def speakers(self) -> list[str]:
        return sorted(self.entries)

    def utterances(self, speaker_id: str, split: str | None = None) -> list[Utterance]:
        utts = self.entries[speaker_id]
        if split is None:
            return list(utts)
        return [u for u in utts if u.split == split]

    def all_utterances(self, split: str | None = None):
        for speaker_id in self.speakers():
            for utt in self.utterances(speaker_id, split):
                yield speaker_id, utt

    def n_utterances(self, split: str | None = None) -> int:
        return sum(1 for _ in self.all_utterances(split))

    def validate(self) -> None:
        seen: set[str] = set()
        for speaker_id, utts in self.entries.items():
            if len(utts) < 2:
                raise ValueError(f"speaker {speaker_id} has fewer than 2 utterances")
            for utt in utts:
                if utt.utterance_id in seen:
                    raise ValueError(f"duplicate utterance_id {utt.utterance_id}")
                seen.add(utt.utterance_id)
                if utt.split not in (None, TRAIN, TEST):
                    raise ValueError(f"bad split tag {utt.split!r}")
                s = utt.waveform.samples
                if not np.all(np.isfinite(s)):
                    raise ValueError(f"non-finite samples in {utt.utterance_id}")


def round_half_up(x: float) -> int:
    """round() with halves going up, stable against float noise in p% products."""
    return int(math.floor(x + 0.5 + 1e-9))


# ---------------------------------------------------------------------------
# WAV IO (RIFF/WAVE, PCM code 1, mono, 16-bit LE, 16 kHz)
# ---------------------------------------------------------------------------

def write_wav(path, waveform: Waveform) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1] then quantized."""
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    quantized = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    raw = quantized.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(raw), b"WAVE",
        b"fmt ", 16, 1, 1, waveform.sample_rate,
        waveform.sample_rate * 2, 2, 16,
        b"data", len(raw),
    )
    Path(path).write_bytes(header + raw)


def read_wav(path) -> Waveform:
    """Read 16 kHz mono 16-bit PCM; anything else is rejected, not resampled."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    riff_size = struct.unpack("<I", data[4:8])[0]
    if riff_size + 8 > len(data):
        raise TruncatedWavError(f"{path}: RIFF size exceeds file length")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        chunk_size = struct.unpack("<I", data[pos + 4 : pos + 8])[0]
        body = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body + 16 > len(data):
                raise MalformedWavError(f"{path}: bad fmt chunk")
            fmt = struct.unpack("<HHIIHH", data[body : body + 16])
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedWavError(f"{path}: data chunk before fmt chunk")
            code, channels, rate, _, _, bits = fmt
            if code != 1:
                raise UnsupportedWavError(f"{path}: format code {code}, only PCM supported")
            if channels != 1:
                raise UnsupportedWavError(f"{path}: unsupported channels ({channels}), need mono")
            if bits != 16:
                raise UnsupportedWavError(f"{path}: unsupported bit depth ({bits}), need 16")
            if rate != SAMPLE_RATE:
                raise UnsupportedWavError(f"{path}: unsupported sample rate ({rate}), need {SAMPLE_RATE}")
            if body + chunk_size > len(data):
                raise TruncatedWavError(f"{path}: data chunk truncated")
            pcm = np.frombuffer(data[body : body + chunk_size], dtype="<i2")
            return Waveform(pcm.astype(np.float64) / 32768.0, rate)
        pos = body + chunk_size + (chunk_size & 1)
    raise MalformedWavError(f"{path}: no data chunk found")


# ---------------------------------------------------------------------------
# Speaker profiles and utterance synthesis
# ---------------------------------------------------------------------------

# f0 lives on a permuted 2.2 Hz grid inside [80, 300]; any two indices
# differ by >= 2.2 Hz, which caps the number of distinct voices per seed.
_F0_SLOTS = 100
_F0_STEP = 2.2

_FORMANT_LO = (350.0, 1000.0, 2200.0, 3300.0)
_FORMANT_HI = (750.0, 1900.0, 3100.0, 3480.0)
_BANDWIDTH_LO = (70.0, 90.0, 120.0, 140.0)
_BANDWIDTH_HI = (140.0, 180.0, 230.0, 260.0)

# voices come in family types: shared articulation targets, individual offsets
_N_VOICE_TYPES = 5


def _voice_type(seed: int, kind: int) -> tuple[list[float], float]:
    rng = np.random.default_rng([seed, 500 + kind])
    centers = [float(rng.uniform(lo, hi)) for lo, hi in zip(_FORMANT_LO, _FORMANT_HI)]
    sibilant_center = float(rng.uniform(3600.0, 7200.0))
    return centers, sibilant_center


def make_speaker_profile(seed: int, index: int) -> SpeakerProfile:
    """Deterministic voice parameters for speaker `index` under corpus seed `seed`."""
    if index < 0:
        raise ValueError("index must be >= 0")
    if index >= _F0_SLOTS:
        raise ValueError(f"f0 grid supports at most {_F0_SLOTS} distinct speakers per seed")
    offset = float(np.random.default_rng([seed, 7901]).uniform(0.0, 2.0))
    slot = (index * 37) % _F0_SLOTS
    f0_base = 80.0 + _F0_STEP * slot + offset
    rng = np.random.default_rng([seed, index])
    centers, sibilant_center = _voice_type(seed, slot * _N_VOICE_TYPES // _F0_SLOTS)
    gains = (
        1.0,
        float(rng.uniform(0.35, 0.70)),
        float(rng.uniform(0.15, 0.35)),
        float(rng.uniform(0.06, 0.18)),
    )
    count = 3 if rng.random() < 0.5 else 4
    formants = [
        (
            float(np.clip(centers[i] * (1.0 + 0.03 * rng.normal()), 300.0, 3500.0)),
            float(rng.uniform(_BANDWIDTH_LO[i], _BANDWIDTH_HI[i])),
            gains[i],
        )
        for i in range(count)
    ]
    sibilance = (
        float(np.clip(sibilant_center * (1.0 + 0.04 * rng.normal()), 3500.0, 7400.0)),
        float(rng.uniform(700.0, 1300.0)),
        float(rng.uniform(0.5, 1.2)),
    )
    breathiness = float(rng.uniform(0.03, 0.12))
    return SpeakerProfile(f"spk{index:03d}", f0_base, formants, breathiness, sibilance)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _gate(n: int, lead: int, tail: int, ramp: int) -> np.ndarray:
    """0 over the lead/tail, cosine ramps into a flat 1 in between."""
    gate = np.zeros(n)
    start, stop = lead, n - tail
    gate[start:stop] = 1.0
    ramp = min(ramp, (stop - start) // 2)
    if ramp > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        gate[start : start + ramp] = edge
        gate[stop - ramp : stop] = edge[::-1]
    return gate


def synth_utterance(profile: SpeakerProfile, duration_s: float, seed: int) -> Waveform:
    """Render one utterance for a voice profile.

    A sawtooth glottal source follows a wandering F0 contour and is colored by
    the profile's formant resonators, re-jittered per syllable-like segment so
    utterances of one speaker vary like read speech. Breath noise rides in the
    source, a syllable-rate envelope shapes loudness, and the recording keeps
    digitally silent lead-in/out (plus an occasional internal pause).
    """
    if not 1.0 <= duration_s <= 10.0:
        raise ValueError("duration_s must be within [1.0, 10.0]")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng([seed, zlib.crc32(profile.speaker_id.encode())])
    grid = np.linspace(0.0, 1.0, n)

    n_ctrl = max(4, int(duration_s * 4) + 1)
    wander = np.interp(grid, np.linspace(0.0, 1.0, n_ctrl), rng.normal(0.0, 1.0, n_ctrl))
    pitch_scale = float(rng.uniform(0.85, 1.15))
    f0 = profile.f0_base * pitch_scale * (1.0 + 0.06 * wander - 0.03 * grid)
    np.clip(f0, 40.0, None, out=f0)
    phase = np.cumsum(2.0 * np.pi * f0 / SAMPLE_RATE)
    voiced = 2.0 * ((phase / (2.0 * np.pi)) % 1.0) - 1.0

    breath = profile.breathiness * float(rng.uniform(0.4, 2.5))
    source = (1.0 - breath) * voiced + breath * rng.standard_normal(n)

    # per-utterance vocal effort shifts every formant; per-segment jitter
    # varies them again, syllable-like
    effort = 1.0 + float(rng.uniform(-0.12, 0.12))
    n_seg = max(2, int(round(duration_s * float(rng.uniform(2.0, 3.5)))))
    bounds = np.linspace(0, n, n_seg + 1).astype(int)
    shaped = np.zeros(n)
    for k in range(n_seg):
        seg = slice(bounds[k], bounds[k + 1])
        for center, bandwidth, gain in profile.formants:
            drifted = center * effort * (1.0 + 0.10 * float(rng.normal()))
            drifted = min(max(drifted, 150.0), 7500.0)
            b, a = signal.iirpeak(drifted, drifted / bandwidth, fs=SAMPLE_RATE)
            shaped[seg] += gain * signal.lfilter(b, a, source[seg])

    # fricative-like sibilance bursts at segment edges; the resonance center
    # is a speaker trait, so high bands carry identity too
    sib_center, sib_bw, sib_gain = profile.sibilance
    burst_gate = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        edge = bounds[int(rng.integers(1, n_seg + 1))]
        span = int(SAMPLE_RATE * rng.uniform(0.06, 0.15))
        start = max(0, min(edge - span // 2, n - span))
        burst_gate[start : start + span] = np.hanning(min(span, n - start))[: n - start]
    b, a = signal.iirpeak(sib_center, sib_center / sib_bw, fs=SAMPLE_RATE)
    sib_level = sib_gain * float(rng.uniform(0.7, 1.3)) * np.max(np.abs(shaped)) / 3.0
    shaped += sib_level * signal.lfilter(b, a, rng.standard_normal(n) * burst_gate)

    # recording-channel tilt, utterance-specific
    tilt = float(rng.uniform(-0.3, 0.7))
    shaped = signal.lfilter([1.0, -tilt], [1.0], shaped)

    n_env = max(3, int(duration_s * 6) + 1)
    env = np.interp(grid, np.linspace(0.0, 1.0, n_env), rng.uniform(0.10, 1.0, n_env) ** 1.5)

    lead = int(n * rng.uniform(0.06, 0.12))
    tail = int(n * rng.uniform(0.06, 0.12))
    ramp = int(0.030 * SAMPLE_RATE)
    gate = _gate(n, lead, tail, ramp)
    if duration_s >= 1.2 and rng.random() < 0.6:
        at = int(n * rng.uniform(0.35, 0.65))
        span = int(SAMPLE_RATE * rng.uniform(0.05, 0.12))
        gate *= 1.0 - _gate(n, at, n - at - span, ramp)
    speech = shaped * env * gate

    peak_target = float(rng.uniform(0.30, 0.90))
    speech *= peak_target / np.max(np.abs(speech))
    return Waveform(speech)


def generate_corpus(
    n_speakers: int,
    utterances_per_speaker: int,
    seed: int,
    duration_lo: float = 1.0,
    duration_hi: float = 1.5,
) -> Corpus:
    """Deterministic synthetic corpus of `n_speakers` voices (untagged splits)."""
    if n_speakers < 1:
        raise ValueError("need at least 1 speaker")
    if utterances_per_speaker < 2:
        raise ValueError("need at least 2 utterances per speaker")
    entries: dict[str, list[Utterance]] = {}
    for i in range(n_speakers):
        profile = make_speaker_profile(seed, i)
        utts = []
        for j in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, i, j])
            duration = float(rng.uniform(duration_lo, duration_hi))
            # 4 ms grid: whole cycles of the tone frequencies used downstream
            # fit exactly into every utterance length
            duration = max(1.0, round(duration * 250.0) / 250.0)
            wave = synth_utterance(profile, duration, seed=int(rng.integers(2**31)))
            utts.append(Utterance(f"{profile.speaker_id}_u{j:02d}", wave))
        entries[profile.speaker_id] = utts
    return Corpus(entries)


# ---------------------------------------------------------------------------
# Splitting and persistence
# ---------------------------------------------------------------------------

def split_corpus(corpus: Corpus, train_fraction: float, seed: int) -> Corpus:
    """Tag utterances train/test, stratified per speaker so every test speaker
    can later be enrolled. round(fraction * count) go to train, at least one
    utterance stays on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    entries: dict[str, list[Utterance]] = {}
    for speaker_id in corpus.speakers():
        utts = corpus.entries[speaker_id]
        if len(utts) < 2:
            raise ValueError(f"speaker {speaker_id} has fewer than 2 utterances")
        n_train = round_half_up(train_fraction * len(utts))
        n_train = min(max(n_train, 1), len(utts) - 1)
        rng = np.random.default_rng([seed, zlib.crc32(speaker_id.encode())])
        train_idx = set(rng.permutation(len(utts))[:n_train].tolist())
        entries[speaker_id] = [
            Utterance(u.utterance_id, u.waveform, TRAIN if k in train_idx else TEST)
            for k, u in enumerate(utts)
        ]
    return Corpus(entries)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write one WAV per utterance plus a manifest.json index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, list[dict]] = {}
    for speaker_id in corpus.speakers():
        rows = []
        for utt in corpus.entries[speaker_id]:
            fname = f"{utt.utterance_id}.wav"
            write_wav(out / fname, utt.waveform)
            rows.append({"utterance_id": utt.utterance_id, "file": fname, "split": utt.split})
        manifest[speaker_id] = rows
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_corpus(path) -> Corpus:
    """Load a corpus from manifest.json (or a directory containing one)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    manifest = json.loads(p.read_text())
    base = p.parent
    entries = {
        speaker_id: [
            Utterance(row["utterance_id"], read_wav(base / row["file"]), row.get("split"))
            for row in rows
        ]
        for speaker_id, rows in manifest.items()
    }
    return Corpus(entries)

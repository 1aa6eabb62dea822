import numpy as np
import pytest

from svlab.corpus import (
    SAMPLE_RATE,
    TEST,
    TRAIN,
    Corpus,
    MalformedWavError,
    TruncatedWavError,
    UnsupportedWavError,
    Utterance,
    Waveform,
    generate_corpus,
    load_corpus,
    make_speaker_profile,
    read_wav,
    round_half_up,
    save_corpus,
    split_corpus,
    synth_utterance,
    write_wav,
)
from svlab.frontend import log_mel_features


class TestSpeakerProfile:
    def test_deterministic(self):
        a = make_speaker_profile(7, 0)
        b = make_speaker_profile(7, 0)
        assert a == b

    def test_distinct_indices_differ_in_f0(self):
        a = make_speaker_profile(7, 0)
        b = make_speaker_profile(7, 1)
        assert abs(a.f0_base - b.f0_base) >= 2.0

    def test_f0_range_over_many_profiles(self):
        profiles = [make_speaker_profile(1, i) for i in range(50)]
        f0s = [p.f0_base for p in profiles]
        assert all(80.0 <= f <= 300.0 for f in f0s)
        f0s = sorted(f0s)
        assert min(b - a for a, b in zip(f0s, f0s[1:])) >= 2.0

    def test_formants_in_range(self):
        for i in range(20):
            p = make_speaker_profile(3, i)
            assert 2 <= len(p.formants) <= 4
            assert all(300.0 <= c <= 3500.0 for c, _, _ in p.formants)
            assert 0.0 <= p.breathiness <= 1.0

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            make_speaker_profile(0, -1)


class TestSynthUtterance:
    def test_sample_count(self):
        p = make_speaker_profile(1, 0)
        w = synth_utterance(p, 2.0, seed=3)
        assert len(w) == 32000
        assert w.sample_rate == SAMPLE_RATE

    def test_deterministic(self):
        p = make_speaker_profile(1, 0)
        a = synth_utterance(p, 2.0, seed=3)
        b = synth_utterance(p, 2.0, seed=3)
        assert np.array_equal(a.samples, b.samples)

    def test_peak_in_range(self):
        for i in range(5):
            p = make_speaker_profile(2, i)
            w = synth_utterance(p, 1.5, seed=i)
            peak = np.max(np.abs(w.samples))
            assert 0.3 <= peak <= 1.0

    def test_duration_out_of_range(self):
        p = make_speaker_profile(1, 0)
        with pytest.raises(ValueError):
            synth_utterance(p, 0.5, seed=0)
        with pytest.raises(ValueError):
            synth_utterance(p, 11.0, seed=0)

    def test_speaker_feature_separation(self):
        pa = make_speaker_profile(5, 0)
        pb = make_speaker_profile(5, 1)
        fa = [log_mel_features(synth_utterance(pa, 1.2, seed=i)).frames.mean(axis=0)
              for i in range(10)]
        fb = [log_mel_features(synth_utterance(pb, 1.2, seed=i)).frames.mean(axis=0)
              for i in range(10)]
        within = [np.linalg.norm(x - y) for g in (fa, fb)
                  for i, x in enumerate(g) for y in g[i + 1:]]
        across = [np.linalg.norm(x - y) for x in fa for y in fb]
        assert np.mean(within) < np.mean(across)


class TestWavIO:
    def test_round_trip_sine(self, tmp_path):
        t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
        w = Waveform(0.8 * np.sin(2 * np.pi * 440 * t))
        path = tmp_path / "sine.wav"
        write_wav(path, w)
        back = read_wav(path)
        assert back.sample_rate == SAMPLE_RATE
        assert np.max(np.abs(back.samples - w.samples)) <= 2.0**-15

    def test_round_trip_random_waveforms(self, tmp_path):
        rng = np.random.default_rng(42)
        for k in range(100):
            n = int(rng.integers(10, 3000))
            w = Waveform(rng.uniform(-1.0, 1.0, n))
            path = tmp_path / f"r{k}.wav"
            write_wav(path, w)
            back = read_wav(path)
            assert len(back) == n
            assert np.max(np.abs(back.samples - w.samples)) <= 2.0**-15

    def test_stereo_rejected(self, tmp_path):
        import struct
        raw = np.zeros(400, dtype="<i2").tobytes()
        header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(raw), b"WAVE",
                             b"fmt ", 16, 1, 2, SAMPLE_RATE, SAMPLE_RATE * 4, 4, 16,
                             b"data", len(raw))
        path = tmp_path / "stereo.wav"
        path.write_bytes(header + raw)
        with pytest.raises(UnsupportedWavError, match="channels"):
            read_wav(path)

    def test_wrong_rate_rejected(self, tmp_path):
        import struct
        raw = np.zeros(400, dtype="<i2").tobytes()
        header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(raw), b"WAVE",
                             b"fmt ", 16, 1, 1, 8000, 16000, 2, 16, b"data", len(raw))
        path = tmp_path / "slow.wav"
        path.write_bytes(header + raw)
        with pytest.raises(UnsupportedWavError, match="rate"):
            read_wav(path)

    def test_truncated_file(self, tmp_path):
        w = Waveform(np.linspace(-0.5, 0.5, 1000))
        good = tmp_path / "good.wav"
        write_wav(good, w)
        bad = tmp_path / "bad.wav"
        bad.write_bytes(good.read_bytes()[:-100])
        with pytest.raises(TruncatedWavError):
            read_wav(bad)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        with pytest.raises(MalformedWavError):
            read_wav(path)


class TestSplit:
    def _corpus(self, utts_per_speaker=10, n_speakers=4):
        rng = np.random.default_rng(0)
        entries = {
            f"s{i}": [
                Utterance(f"s{i}_u{j}", Waveform(rng.uniform(-0.5, 0.5, 800)))
                for j in range(utts_per_speaker)
            ]
            for i in range(n_speakers)
        }
        return Corpus(entries)

    def test_ninety_percent_split(self):
        tagged = split_corpus(self._corpus(10), 0.9, seed=0)
        for s in tagged.speakers():
            assert len(tagged.utterances(s, TRAIN)) == 9
            assert len(tagged.utterances(s, TEST)) == 1

    def test_even_split_of_two(self):
        tagged = split_corpus(self._corpus(2), 0.5, seed=0)
        for s in tagged.speakers():
            assert len(tagged.utterances(s, TRAIN)) == 1
            assert len(tagged.utterances(s, TEST)) == 1

    def test_deterministic(self):
        a = split_corpus(self._corpus(10), 0.7, seed=5)
        b = split_corpus(self._corpus(10), 0.7, seed=5)
        assert [(u.utterance_id, u.split) for _, u in a.all_utterances()] == \
               [(u.utterance_id, u.split) for _, u in b.all_utterances()]

    def test_partition(self):
        corpus = self._corpus(7)
        tagged = split_corpus(corpus, 0.6, seed=9)
        for s in tagged.speakers():
            train_ids = {u.utterance_id for u in tagged.utterances(s, TRAIN)}
            test_ids = {u.utterance_id for u in tagged.utterances(s, TEST)}
            all_ids = {u.utterance_id for u in corpus.utterances(s)}
            assert train_ids | test_ids == all_ids
            assert not train_ids & test_ids

    def test_tiny_speaker_rejected(self):
        corpus = Corpus({"solo": [Utterance("u0", Waveform(np.zeros(10)))]})
        with pytest.raises(ValueError):
            split_corpus(corpus, 0.5, seed=0)


class TestCorpusPersistence:
    def test_save_load_round_trip(self, tmp_path):
        corpus = split_corpus(generate_corpus(3, 4, seed=2), 0.5, seed=1)
        save_corpus(corpus, tmp_path)
        back = load_corpus(tmp_path)
        back.validate()
        assert back.speakers() == corpus.speakers()
        for s in corpus.speakers():
            for orig, loaded in zip(corpus.entries[s], back.entries[s]):
                assert loaded.utterance_id == orig.utterance_id
                assert loaded.split == orig.split
                assert np.max(np.abs(loaded.waveform.samples - orig.waveform.samples)) <= 2.0**-15

    def test_generate_is_deterministic(self):
        a = generate_corpus(3, 3, seed=8)
        b = generate_corpus(3, 3, seed=8)
        for s in a.speakers():
            for ua, ub in zip(a.entries[s], b.entries[s]):
                assert np.array_equal(ua.waveform.samples, ub.waveform.samples)


def test_round_half_up():
    assert round_half_up(13.5) == 14
    assert round_half_up(67.5) == 68
    assert round_half_up(0.15 * 90) == 14
    assert round_half_up(2.4) == 2

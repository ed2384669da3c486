import struct
import wave

import numpy as np
import pytest

from audioshield import audio_io
from audioshield.audio_io import (
    AudioClip,
    DatasetManifest,
    ManifestEntry,
    UnsupportedWavError,
    WavFormatError,
    augment_dataset,
    load_wav,
    pitch_shift,
    read_manifest,
    synth_tone,
    write_manifest,
    write_wav,
)


def _write_pcm16(path, frames, rate, channels=1):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(frames, dtype="<i2").tobytes())


class TestLoadWav:
    def test_all_zero_file(self, tmp_path):
        path = tmp_path / "z.wav"
        _write_pcm16(path, np.zeros(8000, dtype=np.int16), 8000)
        clip = load_wav(path)
        assert len(clip) == 8000
        assert clip.sample_rate == 8000
        assert np.all(clip.samples == 0.0)

    def test_linear_scaling(self, tmp_path):
        path = tmp_path / "half.wav"
        _write_pcm16(path, [16384], 8000)
        clip = load_wav(path)
        assert clip.samples[0] == pytest.approx(0.5)

    def test_stereo_averaging(self, tmp_path):
        path = tmp_path / "st.wav"
        _write_pcm16(path, [32767, -32767], 8000, channels=2)
        clip = load_wav(path)
        assert abs(clip.samples[0]) <= 1.0 / 32768

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"RIFFgarbage-not-a-wav-file")
        with pytest.raises(WavFormatError):
            load_wav(path)

    def test_unsupported_width(self, tmp_path):
        path = tmp_path / "w8.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(8000)
            wf.writeframes(bytes(100))
        with pytest.raises(UnsupportedWavError):
            load_wav(path)

    def test_roundtrip_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        clip = AudioClip(rng.uniform(-1, 1, 500), 8000)
        path = tmp_path / "rt.wav"
        write_wav(clip, path)
        back = load_wav(path)
        assert np.max(np.abs(back.samples - clip.samples)) <= 1.0 / 32768


class TestSynthTone:
    def test_rejects_bad_freq(self):
        with pytest.raises(ValueError):
            synth_tone(0.0, 1.0, 8000)
        with pytest.raises(ValueError):
            synth_tone(4000.0, 1.0, 8000)

    def test_starts_at_zero(self):
        clip = synth_tone(1000, 1.0, 8000)
        assert len(clip) == 8000
        assert clip.samples[0] == 0.0

    def test_quarter_period(self):
        clip = synth_tone(2000, 1.0, 8000, amplitude=0.7)
        assert clip.samples[1] == pytest.approx(0.7)

    def test_energy_closed_form(self):
        # sum of sin^2 over N samples of a sinusoid ~ amplitude^2 * N / 2
        amp = 0.6
        clip = synth_tone(1000, 1.0, 8000, amplitude=amp)
        energy = float(np.sum(clip.samples**2))
        assert energy == pytest.approx(amp**2 * 8000 / 2, rel=0.01)


class TestPitchShift:
    def test_identity(self):
        clip = synth_tone(440, 0.5, 8000)
        out = pitch_shift(clip, 1.0)
        assert np.allclose(out.samples, clip.samples)

    def test_output_length(self):
        clip = synth_tone(440, 1.0, 8000)
        assert len(pitch_shift(clip, 0.5)) == 16000

    def test_rejects_nonpositive_scale(self):
        clip = synth_tone(440, 0.1, 8000)
        with pytest.raises(ValueError):
            pitch_shift(clip, 0.0)

    def test_inverse_restores_length(self):
        clip = synth_tone(440, 1.0, 8000)
        for s in (0.5, 0.75, 1.1, 1.5):
            back = pitch_shift(pitch_shift(clip, s), 1.0 / s)
            assert abs(len(back) - len(clip)) <= 1

    def test_tone_frequency_scales(self):
        # verified via STFT argmax in test_spectra (cross-module oracle)
        clip = synth_tone(1000, 1.0, 8000)
        out = pitch_shift(clip, 1.25)
        from audioshield.spectra import StftParams, stft

        sp = stft(out, StftParams(window_len=400, hop=200))
        peak_rows = np.argmax(sp.data, axis=0)
        # 1250 Hz sits exactly between bins 62 and 63 at this framing
        assert np.all(np.abs(peak_rows - 1250 * 400 / 8000) <= 0.5)


class TestManifest:
    def _make(self, tmp_path, n=3):
        entries = []
        for i in range(n):
            clip = synth_tone(500 + 100 * i, 0.2, 8000, source_id=f"c{i}")
            path = tmp_path / f"c{i}.wav"
            write_wav(clip, path)
            entries.append(ManifestEntry(str(path), i % 2))
        return DatasetManifest(entries, ["a", "b"])

    def test_class_id_validated(self):
        with pytest.raises(ValueError):
            DatasetManifest([ManifestEntry("x.wav", 5)], ["a", "b"])

    def test_csv_roundtrip(self, tmp_path):
        m = self._make(tmp_path)
        write_manifest(m, tmp_path / "m.csv", tmp_path / "names.json")
        back = read_manifest(tmp_path / "m.csv", tmp_path / "names.json")
        assert back.class_names == m.class_names
        assert [(e.path, e.class_id, e.fold) for e in back.entries] == [
            (e.path, e.class_id, e.fold) for e in m.entries
        ]

    def test_augment_counts_eight_times(self, tmp_path):
        m = self._make(tmp_path, n=10)
        scales = [0.5, 0.75, 0.9, 1.1, 1.25, 1.5, 1.75]
        out = augment_dataset(m, scales, tmp_path / "aug")
        assert len(out) == 80

    def test_augment_rejects_empty_scales(self, tmp_path):
        m = self._make(tmp_path)
        with pytest.raises(ValueError):
            augment_dataset(m, [], tmp_path / "aug")

    def test_augment_identity_scale(self, tmp_path):
        m = self._make(tmp_path, n=1)
        out = augment_dataset(m, [1.0], tmp_path / "aug")
        assert len(out) == 2
        a = load_wav(out.entries[0].path)
        b = load_wav(out.entries[1].path)
        assert np.max(np.abs(a.samples - b.samples)) <= 1.0 / 32768

    def test_augment_preserves_labels_and_source(self, tmp_path):
        m = self._make(tmp_path, n=4)
        out = augment_dataset(m, [0.9, 1.1], tmp_path / "aug")
        by_source = {}
        for e in out.entries:
            by_source.setdefault(e.source_id, set()).add(e.class_id)
        assert len(by_source) == 4
        for labels in by_source.values():
            assert len(labels) == 1

    def test_synthetic_dataset(self, tmp_path):
        m = audio_io.synthetic_tone_manifest(tmp_path / "ds", n_per_class=2, seed=0)
        assert len(m) == 6
        clips = audio_io.load_manifest_clips(m)
        assert {c.label for c in clips} == {0, 1, 2}
        assert all(len(c) == 8000 for c in clips)

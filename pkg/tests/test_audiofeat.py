import numpy as np
import pytest

from emocap import audiofeat as af


def sine(freq, seconds=1.0, rate=16000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return af.Waveform(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=rate)


class TestLoadWav:
    def test_silence_roundtrip(self, tmp_path):
        p = tmp_path / "silence.wav"
        af.write_wav(p, af.Waveform(samples=np.zeros(16000), sample_rate=16000))
        w = af.load_wav(p)
        assert len(w.samples) == 16000
        assert w.sample_rate == 16000
        assert np.all(w.samples == 0.0)

    def test_scale(self, tmp_path):
        p = tmp_path / "half.wav"
        af.write_wav(p, af.Waveform(samples=np.full(100, 16384 / 32768.0), sample_rate=8000))
        w = af.load_wav(p)
        assert np.allclose(w.samples, 0.5)

    def test_sine_roundtrip_quantization(self, tmp_path):
        p = tmp_path / "sine.wav"
        orig = sine(440)
        af.write_wav(p, orig)
        w = af.load_wav(p)
        assert np.max(np.abs(w.samples - orig.samples)) < 1 / 32768.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            af.load_wav(tmp_path / "nope.wav")

    def test_non_wav(self, tmp_path):
        p = tmp_path / "junk.wav"
        p.write_bytes(b"definitely not a wav file")
        with pytest.raises(af.WavFormatError):
            af.load_wav(p)

    def test_multichannel_rejected(self, tmp_path):
        import wave
        p = tmp_path / "stereo.wav"
        with wave.open(str(p), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(b"\x00\x00" * 200)
        with pytest.raises(af.WavFormatError, match="channels"):
            af.load_wav(p)

    def test_unsupported_width_rejected(self, tmp_path):
        import wave
        p = tmp_path / "w8.wav"
        with wave.open(str(p), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(16000)
            wf.writeframes(b"\x00" * 100)
        with pytest.raises(af.WavFormatError, match="width"):
            af.load_wav(p)


class TestMelFeatures:
    def test_frame_count(self):
        w = af.Waveform(samples=np.zeros(16000) + 1e-6, sample_rate=16000)
        f = af.mel_features(w, af.FeatConfig())
        assert f.frames.shape == (98, 40)

    def test_frame_count_formula_random(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            window = int(rng.integers(16, 800))
            hop = int(rng.integers(1, window + 1))
            n = int(rng.integers(window, 20000))
            assert af.frame_count(n, window, hop) == 1 + (n - window) // hop
            w = af.Waveform(samples=rng.normal(size=n) * 0.1, sample_rate=16000)
            cfg = af.FeatConfig(window_length=window, hop_length=hop, mel_bins=8)
            assert af.mel_features(w, cfg).frames.shape[0] == 1 + (n - window) // hop

    def test_zero_waveform_hits_floor(self):
        w = af.Waveform(samples=np.zeros(1000), sample_rate=16000)
        cfg = af.FeatConfig()
        f = af.mel_features(w, cfg)
        assert np.allclose(f.frames, np.log(cfg.log_floor))

    def test_sine_argmax_bin_brackets_440(self):
        cfg = af.FeatConfig()
        f = af.mel_features(sine(440), cfg)
        centers = af.mel_center_frequencies(cfg)
        # filter edges on the mel grid bracket the tone at the argmax bin
        mel_pts = af.mel_to_hz(np.linspace(af.hz_to_mel(cfg.fmin),
                                           af.hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
        bins = np.argmax(f.frames, axis=1)
        for b in np.unique(bins):
            assert mel_pts[b] <= 440.0 <= mel_pts[b + 2]
        # majority frames agree on the bin closest to 440
        best = int(np.argmin(np.abs(centers - 440.0)))
        assert np.mean(bins == best) > 0.9

    def test_too_short_names_minimum(self):
        w = af.Waveform(samples=np.zeros(100), sample_rate=16000)
        with pytest.raises(af.AudioError, match="400"):
            af.mel_features(w, af.FeatConfig())

    def test_log_linearity_under_scaling(self):
        cfg = af.FeatConfig()
        w = sine(300, amp=0.2)
        f1 = af.mel_features(w, cfg).frames
        f2 = af.mel_features(af.Waveform(w.samples * 2, w.sample_rate), cfg).frames
        above = f1 > np.log(cfg.log_floor) + 1.0  # comfortably unfloored
        assert np.allclose(f2[above] - f1[above], np.log(2.0), atol=1e-9)

    def test_deterministic(self):
        w = sine(220)
        a = af.mel_features(w, af.FeatConfig()).frames
        b = af.mel_features(w, af.FeatConfig()).frames
        assert np.array_equal(a, b)


class TestFeatureFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        f = af.SpeechFeatures(frames=rng.normal(size=(17, 40)).astype(np.float32),
                              frame_hop=0.01)
        p = tmp_path / "x.feat"
        af.save_precomputed(p, f)
        back = af.load_precomputed(p, expected_dim=40)
        assert np.array_equal(back.frames, f.frames)

    def test_dim_mismatch(self, tmp_path):
        f = af.SpeechFeatures(frames=np.zeros((3, 40)), frame_hop=0.01)
        p = tmp_path / "x.feat"
        af.save_precomputed(p, f)
        with pytest.raises(af.FeatureFileError, match="d_s=40"):
            af.load_precomputed(p, expected_dim=80)

    def test_truncated(self, tmp_path):
        f = af.SpeechFeatures(frames=np.zeros((3, 40)), frame_hop=0.01)
        p = tmp_path / "x.feat"
        af.save_precomputed(p, f)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(af.FeatureFileError, match="byte"):
            af.load_precomputed(p)

    def test_version_mismatch(self, tmp_path):
        f = af.SpeechFeatures(frames=np.zeros((3, 4)), frame_hop=0.01)
        p = tmp_path / "x.feat"
        af.save_precomputed(p, f)
        data = bytearray(p.read_bytes())
        data[4] = 99
        p.write_bytes(bytes(data))
        with pytest.raises(af.FeatureFileError, match="version"):
            af.load_precomputed(p)

    def test_nan_payload(self, tmp_path):
        p = tmp_path / "x.feat"
        import struct
        payload = np.full(12, np.nan, dtype="<f4").tobytes()
        p.write_bytes(af.FEATURE_MAGIC + struct.pack("<III", 1, 3, 4) + payload)
        with pytest.raises(af.FeatureFileError, match="NaN"):
            af.load_precomputed(p)

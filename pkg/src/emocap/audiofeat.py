"""Speech feature front end.

Produces the frame-level speech feature matrix consumed by the bridge
network: either computed from 16-bit PCM WAV audio through a log-mel
filterbank, or loaded from a precomputed feature file (the hook for
plugging in features from an external self-supervised encoder).
"""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass

import numpy as np

FEATURE_MAGIC = b"SEFT"
FEATURE_VERSION = 1


class AudioError(ValueError):
    """Base class for audio/feature input failures."""


class WavFormatError(AudioError):
    pass


class FeatureFileError(AudioError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if len(self.samples) == 0:
            raise AudioError("empty waveform")
        if self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")


@dataclass
class SpeechFeatures:
    """Time-major frame features: frames[t, d] with hop duration in seconds."""

    frames: np.ndarray
    frame_hop: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise AudioError(f"features must be a non-empty matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise AudioError("non-finite feature values")


@dataclass
class FeatConfig:
    window_length: int = 400   # 25 ms at 16 kHz
    hop_length: int = 160      # 10 ms
    mel_bins: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int):
        if not (0 < self.hop_length <= self.window_length):
            raise AudioError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.window_length})"
            )
        if not (self.fmin < self.fmax <= sample_rate / 2):
            raise AudioError(
                f"need fmin ({self.fmin}) < fmax ({self.fmax}) <= nyquist ({sample_rate / 2})"
            )


def load_wav(path) -> Waveform:
    """Read a 16-bit mono PCM WAV file, scaling samples by 1/32768."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            nchan = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as e:
        raise WavFormatError(f"not a readable WAV file: {path} ({e})") from e
    if nchan != 1:
        raise WavFormatError(f"expected mono audio, got {nchan} channels: {path}")
    if width != 2:
        raise WavFormatError(
            f"unsupported encoding (sample width {width} bytes, want 16-bit PCM): {path}"
        )
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(samples=pcm / 32768.0, sample_rate=rate)


def write_wav(path, w: Waveform):
    """Write a waveform as 16-bit mono PCM (inverse of load_wav)."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate: int, cfg: FeatConfig) -> np.ndarray:
    """Triangular filters on the mel scale: (mel_bins, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.mel_bins, n_bins))
    for b in range(cfg.mel_bins):
        lo, ctr, hi = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[b] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(cfg: FeatConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    return mel_to_hz(mel_pts)[1:-1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return 1 + (n_samples - window) // hop


def mel_features(w: Waveform, cfg: FeatConfig) -> SpeechFeatures:
    """Log-mel filterbank features from a waveform.

    Per frame: Hann window, magnitude spectrum, triangular mel filterbank,
    then log of max(energy, log_floor).
    """
    cfg.validate(w.sample_rate)
    n = len(w.samples)
    if n < cfg.window_length:
        raise AudioError(
            f"waveform too short: {n} samples, need at least {cfg.window_length}"
        )
    t_s = frame_count(n, cfg.window_length, cfg.hop_length)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.window_length) / cfg.window_length)
    idx = cfg.hop_length * np.arange(t_s)[:, None] + np.arange(cfg.window_length)[None, :]
    frames = w.samples[idx] * win
    mags = np.abs(np.fft.rfft(frames, axis=1))
    fb = mel_filterbank(cfg.window_length, w.sample_rate, cfg)
    mel = mags @ fb.T
    feats = np.log(np.maximum(mel, cfg.log_floor))
    return SpeechFeatures(frames=feats, frame_hop=cfg.hop_length / w.sample_rate)


def save_precomputed(path, f: SpeechFeatures):
    """Write the documented feature file format (magic, version, dims, f32)."""
    t_s, d_s = f.frames.shape
    payload = f.frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t_s, d_s))
        fh.write(payload)


def load_precomputed(path, expected_dim: int | None = None,
                     frame_hop: float = 0.01) -> SpeechFeatures:
    """Read a feature file, validating shape, version, and finiteness."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic bytes at offset 0 in {path}")
    version, t_s, d_s = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise FeatureFileError(
            f"feature file version {version}, expected {FEATURE_VERSION}: {path}"
        )
    need = 16 + 4 * t_s * d_s
    if len(data) < need:
        raise FeatureFileError(
            f"truncated feature file: {len(data)} bytes, expected {need}"
            f" (payload starts at byte 16): {path}"
        )
    if expected_dim is not None and d_s != expected_dim:
        raise FeatureFileError(
            f"feature dimension mismatch: file has d_s={d_s}, dataset expects {expected_dim}"
        )
    mat = np.frombuffer(data[16:need], dtype="<f4").astype(np.float64).reshape(t_s, d_s)
    if not np.all(np.isfinite(mat)):
        raise FeatureFileError(f"NaN or Inf payload in feature file: {path}")
    return SpeechFeatures(frames=mat, frame_hop=frame_hop)

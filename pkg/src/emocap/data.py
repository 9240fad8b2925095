"""Synthetic emotion-speech dataset generation and manifest handling.

Each record pairs a rendered harmonic-plus-noise audio clip with a
transcription (drawn independently of the emotion category) and one or
more templated captions naming the category's emotion word plus an
intensity word derived from the drawn acoustic parameters.  Manifests
are JSONL, one record per line.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audiofeat import Waveform, write_wav

MANIFEST_FIELDS = ("id", "audio", "transcription", "captions", "emotion_category")


class ManifestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class CaptionRecord:
    id: str
    audio: str                    # WAV path or feature-file path
    transcription: str
    captions: list[str]
    emotion_category: str
    split: str = "train"
    extras: dict = field(default_factory=dict)  # unknown fields, preserved verbatim

    def __post_init__(self):
        if not self.captions:
            raise ManifestError(f"record {self.id!r} has no captions")

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "audio": self.audio,
            "transcription": self.transcription,
            "captions": list(self.captions),
            "emotion_category": self.emotion_category,
            "split": self.split,
        }
        d.update(self.extras)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CaptionRecord":
        missing = [f for f in MANIFEST_FIELDS if f not in d]
        if missing:
            raise ManifestError(f"missing field(s) {missing}")
        extras = {k: v for k, v in d.items()
                  if k not in MANIFEST_FIELDS and k != "split"}
        return cls(
            id=str(d["id"]),
            audio=str(d["audio"]),
            transcription=str(d["transcription"]),
            captions=[str(c) for c in d["captions"]],
            emotion_category=str(d["emotion_category"]),
            split=str(d.get("split", "train")),
            extras=extras,
        )


@dataclass
class Category:
    name: str
    pitch_range: tuple[float, float]      # Hz
    energy_range: tuple[float, float]     # peak amplitude scale
    rate_range: tuple[float, float]       # amplitude-modulation Hz

    @property
    def emotion_word(self) -> str:
        return self.name.split("-")[0]


CAPTION_TEMPLATES = [
    "the speaker sounds {intensity} {emotion}",
    "a {intensity} {emotion} tone runs through the speech",
    "this voice is {intensity} {emotion} in its delivery",
    "{intensity} {emotion}, judging by the pace and pitch",
    "the delivery comes across as {intensity} {emotion}",
]

INTENSITY_WORDS = ("slightly", "quite", "very")

TRANSCRIPTION_POOL = [
    "the train leaves at noon",
    "please close the window",
    "we met near the old bridge",
    "the report is due on friday",
    "she bought three green apples",
    "turn left after the bakery",
    "the meeting ran long again",
    "rain is expected this evening",
    "he parked behind the library",
    "dinner will be ready soon",
    "the printer is out of paper",
    "they painted the fence white",
]


@dataclass
class SynthConfig:
    categories: list[Category] = field(default_factory=lambda: [
        Category("calm-low", (100.0, 130.0), (0.25, 0.45), (1.5, 2.5)),
        Category("bright-high", (280.0, 320.0), (0.55, 0.8), (3.0, 4.5)),
        Category("agitated-fast", (200.0, 240.0), (0.6, 0.85), (6.0, 8.0)),
        Category("subdued-slow", (140.0, 170.0), (0.12, 0.22), (0.8, 1.4)),
    ])
    items_per_category: int = 50
    transcriptions: list[str] = field(default_factory=lambda: list(TRANSCRIPTION_POOL))
    captions_per_item: int = 2
    seed: int = 0
    sample_rate: int = 16000

    def validate(self):
        if self.items_per_category < 1:
            raise ConfigError("items_per_category must be positive")
        if not self.categories:
            raise ConfigError("no categories configured")
        for a_i, a in enumerate(self.categories):
            for b in self.categories[a_i + 1:]:
                separable = any(
                    hi_a < lo_b or hi_b < lo_a
                    for (lo_a, hi_a), (lo_b, hi_b) in [
                        (a.pitch_range, b.pitch_range),
                        (a.energy_range, b.energy_range),
                        (a.rate_range, b.rate_range),
                    ]
                )
                if not separable:
                    raise ConfigError(
                        f"categories {a.name!r} and {b.name!r} overlap on every "
                        "acoustic axis; they must be separable on at least one"
                    )


def render_audio(rng: np.random.Generator, pitch: float, energy: float,
                 rate: float, sample_rate: int) -> np.ndarray:
    """Harmonic-plus-noise tone burst modulated by the drawn parameters."""
    seconds = float(rng.uniform(0.5, 0.8))
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * t)
    sig = np.zeros(n)
    for h in range(1, 6):
        sig += (0.6 ** (h - 1)) * np.sin(2 * np.pi * h * pitch * vibrato * t)
    sig /= np.max(np.abs(sig))
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    noise = 0.01 * rng.standard_normal(n)
    samples = np.clip(energy * envelope * sig + noise, -0.95, 0.95)
    return samples


def _intensity_word(pitch_pos: float, energy_pos: float) -> str:
    level = (pitch_pos + energy_pos) / 2.0
    return INTENSITY_WORDS[min(int(level * 3), 2)]


def synth_dataset(cfg: SynthConfig, out_dir, force: bool = False) -> list[CaptionRecord]:
    """Generate WAV files and a JSONL manifest under out_dir.

    Deterministic down to the byte for a given config+seed; the
    train/val/test split is a seeded shuffle at 90/5/5.
    """
    cfg.validate()
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    if os.path.exists(manifest_path) and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force to overwrite")
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)

    records = []
    item_index = 0
    for cat in cfg.categories:
        for k in range(cfg.items_per_category):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, item_index]))
            pitch = float(rng.uniform(*cat.pitch_range))
            energy = float(rng.uniform(*cat.energy_range))
            rate = float(rng.uniform(*cat.rate_range))
            samples = render_audio(rng, pitch, energy, rate, cfg.sample_rate)
            rec_id = f"{cat.name}-{k:04d}"
            wav_path = os.path.join(audio_dir, rec_id + ".wav")
            write_wav(wav_path, Waveform(samples=samples, sample_rate=cfg.sample_rate))
            # transcription drawn independently of the category
            transcription = cfg.transcriptions[int(rng.integers(len(cfg.transcriptions)))]
            pitch_pos = (pitch - cat.pitch_range[0]) / (cat.pitch_range[1] - cat.pitch_range[0])
            energy_pos = (energy - cat.energy_range[0]) / (cat.energy_range[1] - cat.energy_range[0])
            intensity = _intensity_word(pitch_pos, energy_pos)
            tmpl_idx = rng.choice(len(CAPTION_TEMPLATES),
                                  size=min(cfg.captions_per_item, len(CAPTION_TEMPLATES)),
                                  replace=False)
            captions = [CAPTION_TEMPLATES[i].format(emotion=cat.emotion_word,
                                                    intensity=intensity)
                        for i in tmpl_idx]
            records.append(CaptionRecord(
                id=rec_id, audio=wav_path, transcription=transcription,
                captions=captions, emotion_category=cat.name,
            ))
            item_index += 1

    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 999_983]))
    order = split_rng.permutation(len(records))
    n = len(records)
    n_val = max(1, int(round(0.05 * n)))
    n_test = max(1, int(round(0.05 * n)))
    for pos, idx in enumerate(order):
        if pos < n - n_val - n_test:
            records[idx].split = "train"
        elif pos < n - n_test:
            records[idx].split = "val"
        else:
            records[idx].split = "test"

    write_manifest(records, manifest_path, force=True)
    return records


def write_manifest(records, path, force: bool = False):
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_manifest(path) -> list[CaptionRecord]:
    """Parse a JSONL manifest, aggregating per-line errors."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(CaptionRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, ManifestError) as e:
                errors.append(f"line {lineno}: {e}")
    if errors:
        raise ManifestError("manifest parse failures:\n" + "\n".join(errors))
    return records


def estimate_pitch(samples: np.ndarray, sample_rate: int,
                   fmin: float = 60.0, fmax: float = 420.0) -> float:
    """Autocorrelation pitch estimate over the strongest central chunk."""
    n = len(samples)
    chunk = samples[n // 4: n // 4 + min(n // 2, 4 * sample_rate // int(fmin))]
    chunk = chunk - chunk.mean()
    ac = np.correlate(chunk, chunk, mode="full")[len(chunk) - 1:]
    lag_min = int(sample_rate / fmax)
    lag_max = min(int(sample_rate / fmin), len(ac) - 1)
    lag = lag_min + int(np.argmax(ac[lag_min:lag_max + 1]))
    return sample_rate / lag

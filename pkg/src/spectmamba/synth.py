"""Synthetic singing-like clips with exact f0 labels.

A "vocal" harmonic tone follows a constant, gliding or vibrato f0 trajectory
over a voiced span, optionally over a sustained chord pad and a noise floor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .cfp import (HOP_SECONDS, SAMPLE_RATE, AudioClip, FrameLabels, labels_from_f0, n_frames_for,
                  write_track, write_wav)
from .errors import ConfigError

F0_LOW = 62.0
F0_HIGH = 1000.0
FAMILIES = ("constant", "glide", "vibrato")


@dataclass
class SynthSpec:
    seconds: float = 1.0
    family: str = "constant"
    f0_hz: float = 220.0
    glide_to_hz: float | None = None
    vibrato_depth_cents: float = 0.0
    vibrato_rate_hz: float = 5.5
    n_harmonics: int = 4
    rolloff_db: float = 6.0  # per harmonic
    vocal_db: float = -12.0
    onset: float = 0.0
    offset: float | None = None  # None = end of clip
    accompaniment_db: float | None = None
    chord_root_hz: float = 130.0
    chord_tones: int = 3
    noise_floor_db: float | None = None
    lead_silence: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**d)


def f0_trajectory(spec: SynthSpec, t: np.ndarray) -> np.ndarray:
    """f0 in Hz at times ``t`` (ignoring voicing)."""
    if spec.family not in FAMILIES:
        raise ConfigError(f"unknown f0 family {spec.family!r}")
    base = np.full(t.shape, float(spec.f0_hz))
    if spec.family == "glide":
        end = spec.glide_to_hz or spec.f0_hz
        off = spec.offset if spec.offset is not None else spec.seconds
        span = max(off - spec.onset, 1e-9)
        frac = np.clip((t - spec.onset) / span, 0.0, 1.0)
        base = spec.f0_hz * (end / spec.f0_hz) ** frac
    elif spec.family == "vibrato":
        base = base * 2.0 ** (spec.vibrato_depth_cents / 1200.0
                              * np.sin(2 * np.pi * spec.vibrato_rate_hz * (t - spec.onset)))
    return base


def _voiced_mask(spec: SynthSpec, t: np.ndarray) -> np.ndarray:
    off = spec.offset if spec.offset is not None else spec.seconds
    start = max(spec.onset, spec.lead_silence)
    return (t >= start) & (t < off)


def _tone(freq: np.ndarray, n_harmonics: int, rolloff_db: float, rng) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(freq) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    out = np.zeros_like(freq)
    for h in range(1, n_harmonics + 1):
        partial = h * freq
        amp = 10 ** (-rolloff_db * (h - 1) / 20)
        # drop partials above Nyquist
        out += np.where(partial < SAMPLE_RATE / 2, amp * np.sin(h * phase), 0.0)
    return out / np.sqrt(np.sum(10 ** (-rolloff_db * np.arange(n_harmonics) / 10)) / 2)


def synth_clip(spec: SynthSpec, rng: np.random.Generator | None = None,
               ) -> tuple[AudioClip, FrameLabels]:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = int(round(spec.seconds * SAMPLE_RATE))
    if n <= 0:
        raise ConfigError("clip duration must be positive")
    t = np.arange(n) / SAMPLE_RATE
    f0 = f0_trajectory(spec, t)
    voiced = _voiced_mask(spec, t)
    if voiced.any() and (f0[voiced].min() < F0_LOW or f0[voiced].max() > F0_HIGH):
        raise ConfigError(f"f0 trajectory leaves [{F0_LOW}, {F0_HIGH}] Hz")

    # 5 ms raised-cosine edges keep onsets click-free
    env = voiced.astype(np.float64)
    ramp = int(0.005 * SAMPLE_RATE)
    if ramp > 0 and env.any():
        kernel = np.hanning(2 * ramp + 1)
        env = np.convolve(env, kernel / kernel.sum(), mode="same") * voiced
    vocal = 10 ** (spec.vocal_db / 20) * env * _tone(f0, spec.n_harmonics, spec.rolloff_db, rng)

    mix = vocal
    if spec.accompaniment_db is not None:
        pad = np.zeros(n)
        for i in range(spec.chord_tones):
            semis = (0, 4, 7, 12)[i % 4]
            freq = np.full(n, spec.chord_root_hz * 2 ** (semis / 12))
            pad += _tone(freq, 3, 9.0, rng)
        pad *= 10 ** (spec.accompaniment_db / 20) / np.sqrt(spec.chord_tones)
        mix = mix + pad
    if spec.noise_floor_db is not None:
        mix = mix + 10 ** (spec.noise_floor_db / 20) * rng.standard_normal(n)
    if spec.lead_silence > 0:
        mix[: int(round(spec.lead_silence * SAMPLE_RATE))] = 0.0
    peak = np.abs(mix).max()
    if peak > 0.9:
        mix = mix * (0.9 / peak)
    clip = AudioClip(mix, SAMPLE_RATE)

    frames = n_frames_for(n)
    ft = np.arange(frames) * HOP_SECONDS
    label_f0 = np.where(_voiced_mask(spec, ft), f0_trajectory(spec, ft), 0.0)
    return clip, labels_from_f0(label_f0)


def random_spec(rng: np.random.Generator, seconds: float = 1.0, seed: int = 0,
                accompaniment: bool = True) -> SynthSpec:
    """Varied clip: random family, pitch, voiced span, pad and noise."""
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    f0 = float(np.exp(rng.uniform(np.log(110.0), np.log(660.0))))
    onset = float(rng.uniform(0.1, 0.25) * seconds)
    offset = float(rng.uniform(0.75, 0.9) * seconds)
    spec = SynthSpec(
        seconds=seconds, family=family, f0_hz=round(f0, 2),
        onset=round(onset, 3), offset=round(offset, 3),
        n_harmonics=int(rng.integers(3, 7)), rolloff_db=float(rng.uniform(3.0, 9.0)),
        lead_silence=round(float(rng.uniform(0.02, 0.08) * seconds), 3),
        accompaniment_db=float(rng.uniform(-20.0, -12.0)) if accompaniment else None,
        chord_root_hz=float(np.exp(rng.uniform(np.log(90.0), np.log(200.0)))),
        chord_tones=int(rng.integers(2, 5)),
        noise_floor_db=-50.0, seed=seed,
    )
    if family == "glide":
        target = f0 * 2 ** (rng.uniform(-7, 7) / 12)
        spec.glide_to_hz = round(float(np.clip(target, F0_LOW * 1.1, F0_HIGH * 0.9)), 2)
    elif family == "vibrato":
        spec.vibrato_depth_cents = float(rng.uniform(20.0, 80.0))
        spec.vibrato_rate_hz = float(rng.uniform(4.0, 7.0))
    return spec


def synth_corpus(count: int, seconds: float = 1.0, seed: int = 0, accompaniment: bool = True,
                 ) -> list[tuple[SynthSpec, AudioClip, FrameLabels]]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        spec = random_spec(rng, seconds, seed=seed * 1000 + i, accompaniment=accompaniment)
        clip, labels = synth_clip(spec)
        out.append((spec, clip, labels))
    return out


def export_corpus(out_dir, corpus, labeled: bool = True, split: str = "train",
                  prefix: str = "clip") -> Path:
    """Write wavs (and label CSVs) plus a ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (_, clip, labels) in enumerate(corpus):
        name = f"{prefix}_{i:04d}"
        write_wav(out / f"{name}.wav", clip)
        entry = {"audio": f"{name}.wav", "split": split}
        if labeled:
            times = np.arange(labels.f0_hz.size) * HOP_SECONDS
            write_track(out / f"{name}.csv", times, labels.f0_hz)
            entry["labels"] = f"{name}.csv"
        entries.append(entry)
    path = out / "manifest.json"
    path.write_text(json.dumps({"entries": entries}, indent=2) + "\n")
    return path

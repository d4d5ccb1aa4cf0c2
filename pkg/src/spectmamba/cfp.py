"""Audio front end: resampling, STFT, CFP features and f0/note label grids.

The CFP (combined frequency and periodicity) representation stacks three
log-frequency maps on a shared 320-bin axis (31 Hz at 60 bins per octave):

0. the power-compressed magnitude spectrum,
1. the generalized cepstrum of that spectrum, with lag read as frequency 1/lag,
2. their product, where harmonics (spectrum) and sub-harmonics (cepstrum)
   cancel and only the fundamental survives.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import AudioIOError, ValidationError

SAMPLE_RATE = 8000
WINDOW = 768
HOP = 80
HOP_SECONDS = HOP / SAMPLE_RATE
F_MIN = 31.0
F_MAX = 1250.0
BINS_PER_OCTAVE = 60
N_BINS = 320
N_F0_CLASSES = N_BINS + 1
BINS_PER_NOTE = BINS_PER_OCTAVE // 12
N_NOTES = N_BINS // BINS_PER_NOTE
N_NOTE_CLASSES = N_NOTES + 1

CACHE_MAGIC = b"CFP1"
_CACHE_HEADER = struct.Struct("<4sIIId")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValidationError("audio clip must be a nonempty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("audio clip contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class CfpConfig:
    gamma_spectrum: float = 0.24
    gamma_cepstrum: float = 0.6
    f_min: float = F_MIN
    f_max: float = F_MAX
    bins_per_octave: int = BINS_PER_OCTAVE
    n_bins: int = N_BINS
    normalize: str = "clip"  # "clip", "frame" or "none"


@dataclass
class CfpFeature:
    data: np.ndarray  # (3, n_bins, frames), float32
    hop_seconds: float = HOP_SECONDS
    bin_frequencies: np.ndarray = field(default_factory=lambda: bin_frequencies())

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]


@dataclass
class FrameLabels:
    f0_hz: np.ndarray
    f0_class: np.ndarray
    note_class: np.ndarray
    empty_track: bool = False

    def __len__(self):
        return self.f0_hz.size

    def crop(self, start: int, stop: int) -> "FrameLabels":
        return FrameLabels(self.f0_hz[start:stop], self.f0_class[start:stop],
                           self.note_class[start:stop], self.empty_track)


def bin_frequencies(n_bins: int = N_BINS, f_min: float = F_MIN,
                    bins_per_octave: int = BINS_PER_OCTAVE) -> np.ndarray:
    return f_min * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def n_frames_for(n_samples: int, hop: int = HOP) -> int:
    return -(-n_samples // hop)


# ------------------------------------------------------------------ resampling


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Band-limited polyphase resampling (Kaiser-windowed sinc)."""
    if target_rate <= 0:
        raise ValidationError(f"target rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    ratio = Fraction(int(target_rate), int(clip.sample_rate))
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    n_out = int(round(clip.samples.size * target_rate / clip.sample_rate))
    if out.size < n_out:
        out = np.pad(out, (0, n_out - out.size))
    return AudioClip(out[:n_out], target_rate)


# ------------------------------------------------------------------------ STFT


def stft(clip: AudioClip, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """Centered Hann STFT; returns complex (window // 2 + 1, ceil(n / hop))."""
    if clip.sample_rate != SAMPLE_RATE:
        raise ValidationError(f"stft expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    x = clip.samples
    if x.size < hop:
        raise ValidationError(f"clip of {x.size} samples is shorter than one hop ({hop})")
    n_frames = n_frames_for(x.size, hop)
    half = window // 2
    padded = np.pad(x, (half, half), mode="reflect")
    need = (n_frames - 1) * hop + window
    if padded.size < need:
        padded = np.pad(padded, (0, need - padded.size))
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * get_window("hann", window, fftbins=True)
    return np.fft.rfft(frames, axis=1).T


# ------------------------------------------------------------------------- CFP


@lru_cache(maxsize=8)
def _spectral_map(n_fft: int, n_bins: int, f_min: float, bins_per_octave: int,
                  sample_rate: int) -> np.ndarray:
    # linear interpolation between neighboring FFT bins = triangular weights
    freqs = bin_frequencies(n_bins, f_min, bins_per_octave)
    pos = freqs * n_fft / sample_rate
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    weights = np.zeros((n_bins, n_fft // 2 + 1))
    rows = np.arange(n_bins)
    weights[rows, lo] = 1.0 - frac
    weights[rows, lo + 1] += frac
    return weights


@lru_cache(maxsize=8)
def _cepstral_map(n_fft: int, n_bins: int, f_min: float, bins_per_octave: int,
                  sample_rate: int) -> np.ndarray:
    # real inverse transform of an even spectrum, evaluated at the fractional
    # lag fs / f of every log bin
    freqs = bin_frequencies(n_bins, f_min, bins_per_octave)
    lags = sample_rate / freqs
    k = np.arange(n_fft // 2 + 1)
    fold = np.full(k.size, 2.0)
    fold[0] = 1.0
    fold[-1] = 1.0
    return fold * np.cos(2 * np.pi * np.outer(lags, k) / n_fft) / np.sqrt(n_fft)


def _normalize(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return x
    if mode == "clip":
        peak = x.max()
        return x / peak if peak > 0 else x
    if mode == "frame":
        peak = x.max(axis=0, keepdims=True)
        return np.divide(x, peak, out=np.zeros_like(x), where=peak > 0)
    raise ValidationError(f"unknown CFP normalization mode {mode!r}")


def compute_cfp(spec: np.ndarray, config: CfpConfig | None = None,
                sample_rate: int = SAMPLE_RATE) -> CfpFeature:
    """CFP feature from a one-sided complex spectrogram (bins, frames)."""
    cfg = config or CfpConfig()
    n_fft = 2 * (spec.shape[0] - 1)
    power = np.abs(spec) ** cfg.gamma_spectrum

    cep = _cepstral_map(n_fft, cfg.n_bins, cfg.f_min, cfg.bins_per_octave, sample_rate) @ power
    lags = sample_rate / bin_frequencies(cfg.n_bins, cfg.f_min, cfg.bins_per_octave)
    cep[lags < sample_rate / cfg.f_max] = 0.0
    cep = np.maximum(cep, 0.0) ** cfg.gamma_cepstrum

    highpassed = power.copy()
    highpassed[: int(round(cfg.f_min * n_fft / sample_rate))] = 0.0
    spectral = _spectral_map(n_fft, cfg.n_bins, cfg.f_min, cfg.bins_per_octave,
                             sample_rate) @ highpassed

    spectral = _normalize(spectral, cfg.normalize)
    cep = _normalize(cep, cfg.normalize)
    combined = _normalize(spectral * cep, cfg.normalize)
    data = np.stack([spectral, cep, combined]).astype(np.float32)
    return CfpFeature(data, HOP / sample_rate,
                      bin_frequencies(cfg.n_bins, cfg.f_min, cfg.bins_per_octave))


def cfp_from_audio(clip: AudioClip, config: CfpConfig | None = None) -> CfpFeature:
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    return compute_cfp(stft(clip), config)


# ------------------------------------------------------------------ quantizers


def hz_to_f0_class(f):
    """0 for unvoiced, else ``1 + clamp(round(60 log2(f / 31)), 0, 319)``.

    Accepts a scalar or an array; negative frequencies are rejected.
    """
    arr = np.asarray(f, dtype=np.float64)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValidationError("frequencies must be finite and nonnegative")
    voiced = arr > 0
    safe = np.where(voiced, arr, F_MIN)
    bins = np.clip(np.round(BINS_PER_OCTAVE * np.log2(safe / F_MIN)), 0, N_BINS - 1)
    out = np.where(voiced, bins.astype(np.int64) + 1, 0)
    return int(out) if out.ndim == 0 else out


def f0_class_to_hz(c):
    arr = np.asarray(c)
    if np.any(arr < 0) or np.any(arr > N_BINS) or np.any(arr != np.round(arr)):
        raise ValidationError(f"f0 class must be an integer in 0..{N_BINS}")
    arr = arr.astype(np.int64)
    out = np.where(arr > 0, F_MIN * 2.0 ** ((arr - 1) / BINS_PER_OCTAVE), 0.0)
    return float(out) if out.ndim == 0 else out


def note_of_f0_class(c):
    arr = np.asarray(c, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr > N_BINS):
        raise ValidationError(f"f0 class must be in 0..{N_BINS}")
    out = np.where(arr > 0, (arr - 1) // BINS_PER_NOTE + 1, 0)
    return int(out) if out.ndim == 0 else out


def labels_from_f0(f0_hz: np.ndarray, empty_track: bool = False) -> FrameLabels:
    f0_hz = np.asarray(f0_hz, dtype=np.float64)
    f0_class = np.asarray(hz_to_f0_class(f0_hz), dtype=np.int64).reshape(f0_hz.shape)
    return FrameLabels(f0_hz, f0_class, note_of_f0_class(f0_class).reshape(f0_hz.shape),
                       empty_track)


def labels_from_track(times, f0_hz, n_frames: int, hop_seconds: float = HOP_SECONDS,
                      ) -> FrameLabels:
    """Sample a reference track onto the frame grid by nearest time.

    A frame stays unvoiced when the closest annotation is farther away than the
    track's own spacing (or one hop, whichever is larger).
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    f0_hz = np.asarray(f0_hz, dtype=np.float64).reshape(-1)
    if times.size != f0_hz.size:
        raise ValidationError("times and f0 tracks differ in length")
    if times.size == 0:
        warnings.warn("empty reference track; all frames labeled unvoiced")
        return labels_from_f0(np.zeros(n_frames), empty_track=True)
    if np.any(np.diff(times) < 0):
        raise ValidationError("track times must be nondecreasing")
    grid = np.arange(n_frames) * hop_seconds
    right = np.clip(np.searchsorted(times, grid), 0, times.size - 1)
    left = np.clip(right - 1, 0, times.size - 1)
    use_left = np.abs(grid - times[left]) <= np.abs(times[right] - grid)
    nearest = np.where(use_left, left, right)
    spacing = float(np.median(np.diff(times))) if times.size > 1 else hop_seconds
    tolerance = max(spacing, hop_seconds) + 1e-9
    f0 = np.where(np.abs(times[nearest] - grid) <= tolerance, f0_hz[nearest], 0.0)
    return labels_from_f0(np.maximum(f0, 0.0))


# ------------------------------------------------------------------------- I/O


def read_wav(path) -> AudioClip:
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise AudioIOError(f"cannot read audio {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    try:
        return AudioClip(x, int(rate))
    except ValidationError as exc:
        raise AudioIOError(f"cannot read audio {path}: {exc}") from exc


def write_wav(path, clip: AudioClip, pcm16: bool = False) -> None:
    samples = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(samples * 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    try:
        wavfile.write(str(path), clip.sample_rate, data)
    except OSError as exc:
        raise AudioIOError(f"cannot write audio {path}: {exc}") from exc


def read_track(path) -> tuple[np.ndarray, np.ndarray]:
    """Two-column ``time_seconds, f0_hz`` text, comma- or whitespace-separated."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise AudioIOError(f"cannot read labels {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise ValidationError(f"{path}:{lineno}: expected two columns")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        return np.zeros(0), np.zeros(0)
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1]


def write_track(path, times, f0_hz) -> None:
    lines = [f"{t:.3f},{f:.3f}" for t, f in zip(times, f0_hz)]
    Path(path).write_text("\n".join(lines) + "\n")


def save_feature(path, feature: CfpFeature) -> None:
    c, b, t = feature.data.shape
    header = _CACHE_HEADER.pack(CACHE_MAGIC, c, b, t, float(feature.hop_seconds))
    payload = np.ascontiguousarray(feature.data, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise AudioIOError(f"cannot write feature cache {path}: {exc}") from exc


def load_feature(path) -> CfpFeature:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise AudioIOError(f"cannot read feature cache {path}: {exc}") from exc
    if len(raw) < _CACHE_HEADER.size:
        raise ValidationError(f"{path}: truncated feature cache")
    magic, c, b, t, hop = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    expected = _CACHE_HEADER.size + 4 * c * b * t
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size).reshape(c, b, t)
    return CfpFeature(data.astype(np.float32), hop,
                      bin_frequencies(b) if b == N_BINS else F_MIN * 2.0 ** (np.arange(b) / 60))


def class_bin_error_cents(f_hz: float) -> float:
    """Cents between ``f_hz`` and the center of its quantizer class."""
    return 1200 * math.log2(f0_class_to_hz(hz_to_f0_class(f_hz)) / f_hz)

"""Confidence binary regularization for unlabeled audio.

Each unlabeled frame's class distribution is split into a positive part (the
smallest top-k prefix whose mass reaches the running confidence threshold) and
a negative part (everything else). The strong-augmentation prediction is then
trained to reproduce the weak prediction's positive/negative masses over the
same class set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.signal import fftconvolve

from . import autodiff as ad
from .autodiff import Tensor
from .cfp import AudioClip
from .decoder import PredictionMaps
from .errors import ValidationError

PROB_FLOOR = 1e-8


@dataclass
class AugmentationSpec:
    weak_snr_db: float | None = 30.0
    strong_gain_db: tuple[float, float] | None = (-6.0, 6.0)
    strong_rt60: tuple[float, float] | None = (0.1, 0.4)
    strong_snr_db: float | None = 20.0
    reverb_tail_level: float = 0.3
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        d = dict(d)
        for key in ("strong_gain_db", "strong_rt60"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ConfidenceState:
    mu_f0: float = 0.95
    mu_note: float = 0.95
    momentum: float = 0.999
    step: int = 0


@dataclass
class BinarySplit:
    k: int
    pos_mass: float
    neg_mass: float
    pos_index_set: np.ndarray


# ---------------------------------------------------------------- augmentation


def add_noise(x: np.ndarray, snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    """White noise scaled so signal/noise energy equals ``snr_db`` exactly."""
    if snr_db is None or not np.isfinite(snr_db):
        return x.copy()
    noise = rng.standard_normal(x.size)
    signal_power = np.mean(x * x)
    if signal_power == 0:
        return x.copy()
    noise *= np.sqrt(signal_power / (np.mean(noise * noise) * 10 ** (snr_db / 10)))
    return x + noise


def reverb_impulse_response(rt60: float, sample_rate: int, rng: np.random.Generator,
                            tail_level: float = 0.3) -> np.ndarray:
    """Direct path followed by exponentially decaying noise (-60 dB at ``rt60``)."""
    n = max(2, int(round(rt60 * sample_rate)))
    t = np.arange(n) / sample_rate
    ir = tail_level * rng.standard_normal(n) * 10 ** (-3 * t / rt60)
    ir[0] = 1.0
    return ir


def reverb(x: np.ndarray, ir: np.ndarray) -> np.ndarray:
    """Full linear convolution; the output is ``len(ir) - 1`` samples longer."""
    return fftconvolve(x, ir)


def weak_augment(clip: AudioClip, spec: AugmentationSpec, rng: np.random.Generator) -> AudioClip:
    out = add_noise(clip.samples, spec.weak_snr_db, rng)
    return AudioClip(np.clip(out, -1.0, 1.0), clip.sample_rate)


def strong_augment(clip: AudioClip, spec: AugmentationSpec, rng: np.random.Generator,
                   ) -> AudioClip:
    """Gain, then reverb, then noise. The reverb tail is cut at the clip length
    so both augmented views share a frame grid."""
    x = clip.samples
    if spec.strong_gain_db is not None:
        x = x * 10 ** (rng.uniform(*spec.strong_gain_db) / 20)
    if spec.strong_rt60 is not None:
        ir = reverb_impulse_response(rng.uniform(*spec.strong_rt60), clip.sample_rate, rng,
                                     spec.reverb_tail_level)
        x = reverb(x, ir)[: x.size]
    x = add_noise(x, spec.strong_snr_db, rng)
    return AudioClip(np.clip(x, -1.0, 1.0), clip.sample_rate)


# ------------------------------------------------------------------ top-k split


def _check_probs(probs: np.ndarray) -> None:
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise ValidationError("probabilities must be nonnegative and sum to 1")


def topk_masks(probs: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized split over the last axis.

    Returns ``(mask, k, pos_mass)``: ``mask`` marks the positive classes, ``k`` is
    the smallest prefix length whose cumulative mass reaches ``mu`` (at most
    C - 1), ties in probability ranked by lower class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    _check_probs(probs)
    c = probs.shape[-1]
    order = np.argsort(-probs, axis=-1, kind="stable")
    cum = np.cumsum(np.take_along_axis(probs, order, axis=-1), axis=-1)
    k = np.clip((cum < mu).sum(axis=-1) + 1, 1, c - 1)
    pos_mass = np.take_along_axis(cum, (k - 1)[..., None], axis=-1)[..., 0]
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(c), axis=-1)
    return ranks < k[..., None], k, pos_mass


def topk_split(probs, mu: float) -> BinarySplit:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValidationError("topk_split takes one distribution")
    mask, k, pos = topk_masks(probs, mu)
    order = np.argsort(-probs, kind="stable")
    return BinarySplit(int(k), float(pos), float(1.0 - pos), order[: int(k)])


def local_confidence(pos_masses) -> float:
    """Mean top-k mass over instances."""
    pos_masses = np.asarray(pos_masses, dtype=np.float64)
    if pos_masses.size == 0:
        raise ValidationError("local confidence of an empty batch")
    return float(pos_masses.mean())


def update_confidence(state: ConfidenceState, p_f0: float | None, p_note: float | None,
                      ) -> ConfidenceState:
    """EMA step ``mu_t = m * mu_{t-1} + (1 - m) * p_t`` per head (None skips a head)."""
    m = state.momentum
    mu_f0 = state.mu_f0 if p_f0 is None else m * state.mu_f0 + (1 - m) * p_f0
    mu_note = state.mu_note if p_note is None else m * state.mu_note + (1 - m) * p_note
    return replace(state, mu_f0=mu_f0, mu_note=mu_note, step=state.step + 1)


# ----------------------------------------------------------------------- losses


def cbr_loss(weak_probs: np.ndarray, strong_probs: Tensor, mu: float, k_mode: str = "instance",
             ) -> tuple[Tensor, float]:
    """Binary consistency loss between a detached weak view and a strong view.

    Both inputs are (..., C) class distributions over the same instances. The
    positive set comes from the weak view. Returns ``(loss, p_t)`` where ``p_t``
    is the weak view's mean top-k mass.
    """
    weak = np.asarray(weak_probs.data if isinstance(weak_probs, Tensor) else weak_probs,
                      dtype=np.float64)
    if weak.shape != strong_probs.shape:
        raise ValidationError(f"weak {weak.shape} and strong {strong_probs.shape} views differ")
    mask, k, pos_w = topk_masks(weak, mu)
    if k_mode == "global":
        # one k shared by the whole batch
        kg = int(np.ceil(k.mean()))
        order = np.argsort(-weak, axis=-1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(weak.shape[-1]), axis=-1)
        mask = ranks < kg
        pos_w = (weak * mask).sum(axis=-1)
    elif k_mode != "instance":
        raise ValidationError(f"unknown k_mode {k_mode!r}")
    dtype = strong_probs.dtype
    pos_mask = mask.astype(dtype)
    pos_s = ad.clamp_min(ad.tsum(strong_probs * pos_mask, axis=-1), PROB_FLOOR)
    neg_s = ad.clamp_min(ad.tsum(strong_probs * (1.0 - pos_mask), axis=-1), PROB_FLOOR)
    pos_w = pos_w.astype(dtype)
    per_instance = -(ad.log(pos_s) * pos_w + ad.log(neg_s) * (1.0 - pos_w))
    return ad.mean(per_instance), local_confidence(pos_w)


def binary_entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, 1.0)
    q = np.clip(1.0 - p, PROB_FLOOR, 1.0)
    return -(p * np.log(p) + (1 - p) * np.log(q))


def unlabeled_loss(weak: PredictionMaps, strong: PredictionMaps, state: ConfidenceState,
                   k_mode: str = "instance") -> tuple[Tensor, dict[str, Tensor], ConfidenceState]:
    """L_u = L_f0 + L_note over (clip, frame) instances.

    Uses the refined f0 output and the raw note head. The weak maps are read as
    constants. Returns the loss, its parts and the confidence state advanced by
    the weak view's local confidences.
    """
    weak_f0 = ad.softmax(weak.f0_logits.detach(), axis=-1).data
    strong_f0 = ad.softmax(strong.f0_logits, axis=-1)
    l_f0, p_f0 = cbr_loss(weak_f0, strong_f0, state.mu_f0, k_mode)
    parts = {"f0": l_f0}
    p_note = None
    total = l_f0
    if weak.p_note is not None and strong.p_note is not None:
        weak_note = ad.softmax(weak.p_note.detach(), axis=-1).data
        l_note, p_note = cbr_loss(weak_note, ad.softmax(strong.p_note, axis=-1),
                                  state.mu_note, k_mode)
        parts["note"] = l_note
        total = l_f0 + l_note
    return total, parts, update_confidence(state, p_f0, p_note)


def total_loss(l_l: Tensor, l_u: Tensor | None, omega: float = 0.1) -> Tensor:
    if l_u is None:
        return l_l
    return l_l + l_u * omega

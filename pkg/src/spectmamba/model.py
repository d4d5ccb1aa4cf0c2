"""Full network: CFP -> encoder -> note-guided decoder, plus chunked inference."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cfp import CfpFeature
from .decoder import PredictionMaps, decode, init_decoder
from .encoder import EncoderConfig, encode, init_encoder


class SpectMamba:
    """Parameter container; forward passes are pure functions of ``params``."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor], note_decoder: bool = True):
        self.config = config
        self.params = params
        self.note_decoder = note_decoder

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32,
             note_decoder: bool = True) -> "SpectMamba":
        params = init_encoder(config, rng, dtype)
        params.update(init_decoder(config.d_model, rng, dtype, note_decoder))
        return cls(config, params, note_decoder)

    @property
    def dtype(self):
        return self.params["embed.weight"].dtype

    def forward(self, cfp_batch: np.ndarray) -> PredictionMaps:
        """(B, 3, 320, T) CFP -> prediction maps shaped (B, T, classes)."""
        return decode(encode(cfp_batch, self.params, self.config), self.params)

    __call__ = forward

    def f0_logits(self, feature: CfpFeature | np.ndarray, chunk_frames: int | None = None,
                  ) -> np.ndarray:
        """Per-frame f0 logits (T, 321) for one clip, chunked when it is longer
        than the positional table."""
        data = feature.data if isinstance(feature, CfpFeature) else np.asarray(feature)
        n = data.shape[-1]
        size = chunk_frames or self.config.max_frames
        with ad.no_grad():
            if n <= size:
                return self.forward(data[None]).f0_logits.data[0]
            starts = chunk_starts(n, size)
            outs = [self.forward(data[None, ..., s:s + size]).f0_logits.data[0] for s in starts]
        return stitch_chunks(outs, starts, n, size)


def chunk_starts(n_frames: int, size: int) -> list[int]:
    """Windows of ``size`` frames at 50% overlap; the last one ends at the clip end."""
    if n_frames <= size:
        return [0]
    hop = max(1, size // 2)
    starts = list(range(0, n_frames - size, hop))
    starts.append(n_frames - size)
    return starts


def chunk_owner(n_frames: int, starts: list[int], size: int) -> np.ndarray:
    """Index of the chunk whose center is closest to each frame (earlier on ties)."""
    frames = np.arange(n_frames)[:, None]
    centers = np.asarray(starts)[None, :] + (size - 1) / 2.0
    return np.argmin(np.abs(frames - centers), axis=1)


def stitch_chunks(outputs: list[np.ndarray], starts: list[int], n_frames: int, size: int,
                  ) -> np.ndarray:
    owner = chunk_owner(n_frames, starts, size)
    result = np.empty((n_frames,) + outputs[0].shape[1:], dtype=outputs[0].dtype)
    for f in range(n_frames):
        result[f] = outputs[owner[f]][f - starts[owner[f]]]
    return result

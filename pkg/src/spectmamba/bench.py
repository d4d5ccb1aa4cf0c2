"""Wall-time scaling of the encoder against a quadratic self-attention block."""

from __future__ import annotations

import json
import resource
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, encode, init_encoder

DEFAULT_LENGTHS = (256, 512, 1024, 2048)


def attention_reference(x: np.ndarray, wq, wk, wv, wo) -> np.ndarray:
    """Single-head softmax self-attention over (T, d) with full T x T scores."""
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ k.T) / np.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return x + (scores @ v) @ wo


def _interleaved_medians(fns, reps: int) -> list[float]:
    """Median wall-time of each callable, timed round-robin.

    Interleaving spreads slow stretches of a shared machine over every
    length instead of inflating whichever length happened to be running.
    """
    for fn in fns:
        fn()  # warm-up
    times = [[] for _ in fns]
    for _ in range(reps):
        for slot, fn in zip(times, fns):
            t0 = time.perf_counter()
            fn()
            slot.append(time.perf_counter() - t0)
    return [float(np.median(t)) for t in times]


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _ratios(times: list[float]) -> list[float]:
    return [b / a for a, b in zip(times, times[1:])]


@dataclass
class BenchReport:
    lengths: list[int]
    d_model: int
    encoder_seconds: list[float]
    attention_seconds: list[float]
    encoder_ratios: list[float] = field(default_factory=list)
    attention_ratios: list[float] = field(default_factory=list)
    encoder_peak_bytes: list[int] = field(default_factory=list)
    attention_peak_bytes: list[int] = field(default_factory=list)
    process_peak_rss_kb: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def bench(lengths=DEFAULT_LENGTHS, reps: int = 5, d_model: int = 128, num_layers: int = 2,
          d_state: int = 16, seed: int = 0, memory: bool = True) -> BenchReport:
    """Median forward wall-time per length for the encoder and the attention reference.

    Repetitions are interleaved across lengths (see ``_interleaved_medians``).

    Inputs are CFP-shaped random arrays (1, 3, 320, T). Peak memory per
    forward is sampled with ``tracemalloc`` in a separate pass so that tracing
    does not distort the timings.
    """
    lengths = sorted(int(n) for n in lengths)
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(d_model=d_model, num_layers=num_layers, d_state=d_state,
                        max_frames=max(lengths))
    params = init_encoder(cfg, rng, np.float32)
    scale = 1.0 / np.sqrt(d_model)
    att_w = [rng.standard_normal((d_model, d_model)).astype(np.float32) * scale for _ in range(4)]

    enc_fns, att_fns, enc_m, att_m = [], [], [], []
    for n in lengths:
        cfp = rng.random((1, 3, cfg.n_bins, n)).astype(np.float32)
        tokens = rng.standard_normal((n, d_model)).astype(np.float32)

        def run_encoder(cfp=cfp):
            with ad.no_grad():
                encode(cfp, params, cfg)

        def run_attention(tokens=tokens):
            attention_reference(tokens, *att_w)

        enc_fns.append(run_encoder)
        att_fns.append(run_attention)
        if memory:
            enc_m.append(_peak_bytes(run_encoder))
            att_m.append(_peak_bytes(run_attention))
    enc_t = _interleaved_medians(enc_fns, reps)
    att_t = _interleaved_medians(att_fns, reps)

    return BenchReport(
        lengths=lengths, d_model=d_model, encoder_seconds=enc_t, attention_seconds=att_t,
        encoder_ratios=_ratios(enc_t), attention_ratios=_ratios(att_t),
        encoder_peak_bytes=enc_m, attention_peak_bytes=att_m,
        process_peak_rss_kb=int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss),
        config={"num_layers": num_layers, "d_state": d_state, "reps": reps, "seed": seed},
    )


def write_bench(path, report: BenchReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)

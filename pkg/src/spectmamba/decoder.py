"""Note-guided f0 decoder: two classification heads, note-to-f0 attention, loss.

Prediction maps are laid out (batch, frames, classes); class 0 is non-melody in
both heads, f0 classes 1..320 and note classes 1..64 are voiced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cfp import HOP_SECONDS, N_F0_CLASSES, N_NOTE_CLASSES, f0_class_to_hz, note_of_f0_class
from .errors import AudioIOError, ValidationError

# row v of the note map is copied to every f0 class whose note is v
NOTE_OF_CLASS = note_of_f0_class(np.arange(N_F0_CLASSES))


@dataclass
class PredictionMaps:
    p_f0: Tensor
    p_note: Tensor | None = None
    p_note_expanded: Tensor | None = None
    p_f0_refined: Tensor | None = None

    @property
    def f0_logits(self) -> Tensor:
        """The f0 output the rest of the pipeline consumes."""
        return self.p_f0_refined if self.p_f0_refined is not None else self.p_f0


def init_decoder(d_model: int, rng: np.random.Generator, dtype=np.float32,
                 note_decoder: bool = True) -> dict[str, Tensor]:
    def dense(prefix, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return {f"{prefix}.weight": rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype),
                f"{prefix}.bias": np.zeros(fan_out, dtype)}

    p = {}
    p.update(dense("f0_head.hidden", d_model, d_model))
    p.update(dense("f0_head.out", d_model, N_F0_CLASSES))
    if note_decoder:
        p.update(dense("note_head.hidden", d_model, d_model))
        p.update(dense("note_head.out", d_model, N_NOTE_CLASSES))
        p["refine.weight"] = np.eye(N_F0_CLASSES, dtype=dtype)
        p["refine.bias"] = np.zeros(N_F0_CLASSES, dtype)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.silu(ad.linear(x, params[f"{prefix}.hidden.weight"], params[f"{prefix}.hidden.bias"]))
    return ad.linear(h, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])


def heads(encoded: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor | None]:
    p_f0 = _mlp(encoded, params, "f0_head")
    p_note = _mlp(encoded, params, "note_head") if "note_head.out.weight" in params else None
    return p_f0, p_note


def expand_note(p_note: Tensor) -> Tensor:
    """(…, 65) note logits -> (…, 321) by replicating each note over its 5 f0 bins."""
    if p_note.shape[-1] != N_NOTE_CLASSES:
        raise ValidationError(f"note logits need {N_NOTE_CLASSES} classes, got {p_note.shape}")
    return ad.take(p_note, NOTE_OF_CLASS, axis=-1)


def refine(p_note_expanded: Tensor, p_f0: Tensor, params: dict[str, Tensor]) -> Tensor:
    weights = ad.softmax(p_note_expanded, axis=-1)
    return ad.linear(weights * p_f0, params["refine.weight"], params["refine.bias"])


def decode(encoded: Tensor, params: dict[str, Tensor]) -> PredictionMaps:
    p_f0, p_note = heads(encoded, params)
    if p_note is None:
        return PredictionMaps(p_f0)
    expanded = expand_note(p_note)
    return PredictionMaps(p_f0, p_note, expanded, refine(expanded, p_f0, params))


def _one_hot(classes: np.ndarray, n: int, dtype) -> np.ndarray:
    classes = np.asarray(classes)
    if np.any(classes < 0) or np.any(classes >= n):
        raise ValidationError(f"label classes must lie in 0..{n - 1}")
    return np.eye(n, dtype=dtype)[classes]


def supervised_loss(maps: PredictionMaps, f0_class: np.ndarray, note_class: np.ndarray | None,
                    ) -> tuple[Tensor, dict[str, Tensor]]:
    """Mean per-frame CE of the f0 output plus mean CE of the raw note head.

    ``f0_class``/``note_class`` are integer arrays shaped like the maps minus the
    class axis. Returns the total and its components ``{"f0", "note"}``.
    """
    logits = maps.f0_logits
    f0_class = np.asarray(f0_class)
    if f0_class.shape != logits.shape[:-1]:
        raise ValidationError(
            f"label frames {f0_class.shape} do not match prediction frames {logits.shape[:-1]}")
    f0_term = ad.mean(ad.cross_entropy(logits, _one_hot(f0_class, N_F0_CLASSES, logits.dtype)))
    parts = {"f0": f0_term}
    if maps.p_note is None:
        return f0_term, parts
    note_class = np.asarray(note_class)
    if note_class.shape != maps.p_note.shape[:-1]:
        raise ValidationError("note label frames do not match prediction frames")
    note_term = ad.mean(ad.cross_entropy(maps.p_note,
                                         _one_hot(note_class, N_NOTE_CLASSES, logits.dtype)))
    parts["note"] = note_term
    return f0_term + note_term, parts


def decode_contour(f0_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame argmax (lowest index wins ties) -> (voiced flags, f0 in Hz)."""
    logits = np.asarray(f0_logits.data if isinstance(f0_logits, Tensor) else f0_logits)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("f0 logits must be finite")
    classes = logits.argmax(axis=-1)
    return classes > 0, f0_class_to_hz(classes)


def contour_rows(f0_hz: np.ndarray, hop_seconds: float = HOP_SECONDS) -> list[str]:
    return [f"{i * hop_seconds:.3f},{f:.3f}" for i, f in enumerate(np.asarray(f0_hz, float))]


def write_contour_csv(path, f0_hz: np.ndarray, hop_seconds: float = HOP_SECONDS) -> None:
    try:
        Path(path).write_text("\n".join(contour_rows(f0_hz, hop_seconds)) + "\n")
    except OSError as exc:
        raise AudioIOError(f"cannot write contour {path}: {exc}") from exc


def read_contour_csv(path) -> tuple[np.ndarray, np.ndarray]:
    from .cfp import read_track

    return read_track(path)

"""Training configuration, data loading, the semi-supervised loop and inference."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .cbr import AugmentationSpec, ConfidenceState, strong_augment, total_loss, unlabeled_loss, weak_augment
from .cfp import (HOP, HOP_SECONDS, SAMPLE_RATE, AudioClip, CfpConfig, CfpFeature, FrameLabels,
                  cfp_from_audio, labels_from_track, read_track, read_wav, resample)
from .checkpoint import Checkpoint
from .decoder import decode_contour, supervised_loss, write_contour_csv
from .encoder import EncoderConfig
from .errors import AudioIOError, ConfigError, NumericError
from .metrics import EvalReport, aggregate, evaluate, pair_from_hz
from .model import SpectMamba
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_l", "L_f0_cbr", "L_note_cbr", "L_total", "mu_f0", "mu_note")

_NUMBER = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_RANGE = {"type": ["array", "null"], "items": _NUMBER, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": _POS_INT, "expand": _POS_INT, "d_state": _POS_INT,
                "conv_width": _POS_INT, "num_layers": {"type": "integer", "minimum": 0},
                "patch_width": {"const": 1}, "max_frames": _POS_INT,
                "dt_rank": {"type": ["integer", "null"], "minimum": 1},
                "dt_min": {"type": "number", "exclusiveMinimum": 0},
                "dt_max": {"type": "number", "exclusiveMinimum": 0},
                "n_channels": {"const": 3}, "n_bins": {"const": 320},
            },
        },
        "cfp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma_spectrum": _NUMBER, "gamma_cepstrum": _NUMBER, "f_min": _NUMBER,
                "f_max": _NUMBER, "bins_per_octave": _POS_INT, "n_bins": {"const": 320},
                "normalize": {"enum": ["clip", "frame", "none"]},
            },
        },
        "augmentation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "weak_snr_db": {"type": ["number", "null"]},
                "strong_gain_db": _RANGE,
                "strong_rt60": _RANGE,
                "strong_snr_db": {"type": ["number", "null"]},
                "reverb_tail_level": {"type": "number", "minimum": 0},
                "rng_seed": {"type": "integer"},
            },
        },
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "omega": {"type": "number", "minimum": 0},
        "labeled_batch": _POS_INT,
        "unlabeled_batch": _POS_INT,
        "segment_frames": _POS_INT,
        "steps": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "no_note_decoder": {"type": "boolean"},
        "no_cbr": {"type": "boolean"},
        "mu_init": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "k_mode": {"enum": ["instance", "global"]},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "dtype": {"enum": ["float32", "float64"]},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["entries"],
    "properties": {
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["audio"],
                "additionalProperties": False,
                "properties": {
                    "audio": {"type": "string"},
                    "labels": {"type": ["string", "null"]},
                    "split": {"enum": ["train", "val", "test"]},
                },
            },
        },
    },
}


def validate_json(doc, schema, source: str) -> None:
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{source}: {where}: {err.message}")


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cfp: CfpConfig = field(default_factory=CfpConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    learning_rate: float = 4e-4
    omega: float = 0.1
    labeled_batch: int = 4
    unlabeled_batch: int = 4
    segment_frames: int = 512
    steps: int = 2000
    seed: int = 0
    no_note_decoder: bool = False
    no_cbr: bool = False
    mu_init: float = 0.95
    momentum: float = 0.999
    k_mode: str = "instance"
    checkpoint_every: int = 500
    dtype: str = "float32"

    def to_dict(self) -> dict:
        # round-trip through JSON so tuples become lists and the schema accepts it
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict, source: str = "config") -> "TrainConfig":
        validate_json(d, CONFIG_SCHEMA, source)
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        cfp = CfpConfig(**d.pop("cfp", {}))
        aug = AugmentationSpec.from_dict(d.pop("augmentation", {}))
        return cls(encoder=enc, cfp=cfp, augmentation=aug, **d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise AudioIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc, str(path))


# ------------------------------------------------------------------------ data


@dataclass
class ManifestEntry:
    audio: Path
    labels: Path | None = None
    split: str = "train"


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise AudioIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    validate_json(doc, MANIFEST_SCHEMA, str(path))
    out = []
    for i, e in enumerate(doc["entries"]):
        audio = (path.parent / e["audio"]).resolve()
        labels = (path.parent / e["labels"]).resolve() if e.get("labels") else None
        for kind, p in (("audio", audio), ("labels", labels)):
            if p is not None and not p.exists():
                raise AudioIOError(f"{path}: entries/{i}/{kind}: file not found: {p}")
        out.append(ManifestEntry(audio, labels, e.get("split", "train")))
    return out


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    base = Path(path).parent.resolve()
    doc = {"entries": []}
    for e in entries:
        item = {"audio": str(Path(e.audio).resolve().relative_to(base)), "split": e.split}
        if e.labels is not None:
            item["labels"] = str(Path(e.labels).resolve().relative_to(base))
        doc["entries"].append(item)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


@dataclass
class LabeledItem:
    name: str
    feature: CfpFeature
    labels: FrameLabels


def load_audio(path) -> AudioClip:
    clip = read_wav(path)
    return resample(clip, SAMPLE_RATE) if clip.sample_rate != SAMPLE_RATE else clip


def load_labeled(entries: Sequence[ManifestEntry], cfp_config: CfpConfig | None = None,
                 ) -> list[LabeledItem]:
    items = []
    for e in entries:
        if e.labels is None:
            continue
        feature = cfp_from_audio(load_audio(e.audio), cfp_config)
        times, f0 = read_track(e.labels)
        items.append(LabeledItem(e.audio.stem, feature,
                                 labels_from_track(times, f0, feature.n_frames)))
    return items


def load_unlabeled(entries: Sequence[ManifestEntry]) -> list[AudioClip]:
    return [load_audio(e.audio) for e in entries if e.labels is None]


# ---------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: SpectMamba
    checkpoint: Checkpoint
    log: list[dict]


def _dtype(name: str):
    return np.float64 if name == "float64" else np.float32


def _labeled_batch(items: Sequence[LabeledItem], cfg: TrainConfig, rng: np.random.Generator):
    n = len(items)
    idx = np.arange(n) if n <= cfg.labeled_batch else np.sort(
        rng.choice(n, cfg.labeled_batch, replace=False))
    seg = min(cfg.segment_frames, cfg.encoder.max_frames,
              min(items[i].feature.n_frames for i in idx))
    feats, f0c, notec = [], [], []
    for i in idx:
        item = items[i]
        start = int(rng.integers(0, item.feature.n_frames - seg + 1))
        feats.append(item.feature.data[..., start:start + seg])
        f0c.append(item.labels.f0_class[start:start + seg])
        notec.append(item.labels.note_class[start:start + seg])
    return np.stack(feats), np.stack(f0c), np.stack(notec)


def _unlabeled_batch(clips: Sequence[AudioClip], cfg: TrainConfig, rng: np.random.Generator,
                     step: int):
    n = len(clips)
    idx = np.arange(n) if n <= cfg.unlabeled_batch else np.sort(
        rng.choice(n, cfg.unlabeled_batch, replace=False))
    seg = min(cfg.segment_frames, cfg.encoder.max_frames,
              min(-(-clips[i].samples.size // HOP) for i in idx))
    weak, strong = [], []
    for i in idx:
        clip = clips[i]
        total = -(-clip.samples.size // HOP)
        start = int(rng.integers(0, total - seg + 1)) * HOP
        piece = AudioClip(clip.samples[start:start + seg * HOP], clip.sample_rate)
        # one stream per (step, clip, view) so results never depend on ordering
        seed = [cfg.seed, cfg.augmentation.rng_seed, step, int(i)]
        w = weak_augment(piece, cfg.augmentation, np.random.default_rng(seed + [0]))
        s = strong_augment(piece, cfg.augmentation, np.random.default_rng(seed + [1]))
        weak.append(cfp_from_audio(w, cfg.cfp).data[..., :seg])
        strong.append(cfp_from_audio(s, cfg.cfp).data[..., :seg])
    return np.stack(weak), np.stack(strong)


def _snapshot(model: SpectMamba, cfg: TrainConfig, conf: ConfidenceState, adam: AdamState,
              step: int) -> Checkpoint:
    return Checkpoint(params={k: v.data for k, v in model.params.items()}, config=cfg.to_dict(),
                      confidence=conf, adam=adam, step=step)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r["step"]] + [_fmt(r[c]) for c in LOG_COLUMNS[1:]])


def train(cfg: TrainConfig, labeled: Sequence[LabeledItem], unlabeled: Sequence[AudioClip] = (),
          out_dir=None, resume: Checkpoint | None = None,
          callback: Callable[[dict, SpectMamba], None] | None = None) -> TrainResult:
    """Minimize ``L_l + omega * L_u`` with Adam.

    Every step draws a labeled batch and, unless ``no_cbr`` is set or the
    unlabeled pool is empty, an unlabeled batch seen under weak and strong
    augmentation. ``out_dir`` receives periodic checkpoints, ``final.bin`` and
    ``loss_log.csv``; on a numeric failure ``last_good.bin`` holds the
    parameters from before the failing step.
    """
    if not labeled:
        raise ConfigError("training needs at least one labeled clip")
    dtype = _dtype(cfg.dtype)
    init_rng = np.random.default_rng([cfg.seed, 0])
    model = SpectMamba.init(cfg.encoder, init_rng, dtype, note_decoder=not cfg.no_note_decoder)
    conf = ConfidenceState(cfg.mu_init, cfg.mu_init, cfg.momentum)
    adam = AdamState()
    first = 0
    if resume is not None:
        for k, v in resume.params.items():
            model.params[k].data = v.astype(dtype)
        conf, adam, first = resume.confidence, resume.adam, resume.step
    use_cbr = not cfg.no_cbr and len(unlabeled) > 0
    rng_l = np.random.default_rng([cfg.seed, 1])
    rng_u = np.random.default_rng([cfg.seed, 2])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    for step in range(first + 1, cfg.steps + 1):
        before = {k: v.data for k, v in model.params.items()}
        try:
            # every op checks its output, so numpy's own float warnings are redundant
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                cfp_l, f0c, notec = _labeled_batch(labeled, cfg, rng_l)
                maps = model(cfp_l.astype(dtype))
                l_l, _ = supervised_loss(maps, f0c, notec)
                l_u, parts_u, new_conf = None, {}, conf
                if use_cbr:
                    cfp_w, cfp_s = _unlabeled_batch(unlabeled, cfg, rng_u, step)
                    with ad.no_grad():
                        weak_maps = model(cfp_w.astype(dtype))
                    strong_maps = model(cfp_s.astype(dtype))
                    l_u, parts_u, new_conf = unlabeled_loss(weak_maps, strong_maps, conf, cfg.k_mode)
                loss = total_loss(l_l, l_u, cfg.omega)
                grads = ad.backward(loss, model.params)
                adam = adam_step(model.params, grads, adam, lr=cfg.learning_rate)
        except NumericError:
            for k, v in before.items():
                model.params[k].data = v
            if out is not None:
                ckpt_io.save(out / "last_good.bin", _snapshot(model, cfg, conf, adam, step - 1))
                write_log(out / "loss_log.csv", rows)
            log.error("numeric failure at step %d", step)
            raise
        conf = new_conf
        row = {
            "step": step, "L_l": l_l.item(),
            "L_f0_cbr": parts_u["f0"].item() if "f0" in parts_u else None,
            "L_note_cbr": parts_u["note"].item() if "note" in parts_u else None,
            "L_total": loss.item(), "mu_f0": conf.mu_f0, "mu_note": conf.mu_note,
        }
        rows.append(row)
        if callback is not None:
            callback(row, model)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            ckpt_io.save(out / f"ckpt_{step:06d}.bin", _snapshot(model, cfg, conf, adam, step))
        if step % 100 == 0:
            log.info("step %d L_total %.4f", step, row["L_total"])

    final = _snapshot(model, cfg, conf, adam, max(first, cfg.steps))
    if out is not None:
        ckpt_io.save(out / "final.bin", final)
        write_log(out / "loss_log.csv", rows)
    return TrainResult(model, final, rows)


# --------------------------------------------------------------------- inference


def model_from_checkpoint(ckpt: Checkpoint) -> SpectMamba:
    cfg = TrainConfig.from_dict(ckpt.config, "checkpoint config")
    model = SpectMamba(cfg.encoder, ckpt.tensors(requires_grad=False),
                       note_decoder=not cfg.no_note_decoder)
    return model


def infer_feature(model: SpectMamba, feature: CfpFeature, chunk_frames: int | None = None,
                  ) -> np.ndarray:
    """Per-frame f0 in Hz (0 = unvoiced)."""
    _, f0 = decode_contour(model.f0_logits(feature.data.astype(model.dtype), chunk_frames))
    return f0


def infer_clip(model: SpectMamba, clip: AudioClip, cfp_config: CfpConfig | None = None,
               chunk_frames: int | None = None) -> np.ndarray:
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    return infer_feature(model, cfp_from_audio(clip, cfp_config), chunk_frames)


def infer(audio_path, checkpoint_path, out_csv=None) -> np.ndarray:
    ckpt = ckpt_io.load(checkpoint_path)
    model = model_from_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    f0 = infer_clip(model, load_audio(audio_path), cfg.cfp)
    if out_csv is not None:
        write_contour_csv(out_csv, f0)
    return f0


def evaluate_contours(ref_times, ref_hz, est_hz, hop_seconds: float = HOP_SECONDS) -> EvalReport:
    est_times = np.arange(len(est_hz)) * hop_seconds
    return evaluate(pair_from_hz(ref_times, ref_hz, est_times, est_hz))


def eval_manifest(entries: Sequence[ManifestEntry], estimator: Callable[[ManifestEntry], tuple],
                  ) -> tuple[EvalReport, list[tuple[str, EvalReport]]]:
    """Evaluate every entry; ``estimator(entry)`` returns ``(times, f0_hz)``."""
    from .errors import ValidationError

    per_clip = []
    for e in entries:
        if e.labels is None:
            raise ValidationError(f"evaluation entry {e.audio} has no labels")
        ref_t, ref_f = read_track(e.labels)
        est_t, est_f = estimator(e)
        per_clip.append((e.audio.stem, evaluate(pair_from_hz(ref_t, ref_f, est_t, est_f))))
    if not per_clip:
        raise ValidationError("no entries to evaluate")
    return aggregate([r for _, r in per_clip]), per_clip


def checkpoint_estimator(checkpoint_path) -> Callable[[ManifestEntry], tuple]:
    ckpt = ckpt_io.load(checkpoint_path)
    model = model_from_checkpoint(ckpt)
    cfp_cfg = TrainConfig.from_dict(ckpt.config).cfp

    def estimate(entry: ManifestEntry):
        f0 = infer_clip(model, load_audio(entry.audio), cfp_cfg)
        return np.arange(f0.size) * HOP_SECONDS, f0

    return estimate


def contour_dir_estimator(directory) -> Callable[[ManifestEntry], tuple]:
    directory = Path(directory)

    def estimate(entry: ManifestEntry):
        return read_track(directory / f"{entry.audio.stem}.csv")

    return estimate

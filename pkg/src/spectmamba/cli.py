"""Command-line entry point: ``spectmamba {train,infer,eval,bench,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AudioIOError, ConfigError, SpectMambaError

log = logging.getLogger("spectmamba")

SYNTH_SCHEMA = {
    "type": "object",
    "properties": {
        "count": {"type": "integer", "minimum": 1},
        "seconds": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "accompaniment": {"type": "boolean"},
        "labeled": {"type": "boolean"},
        "split": {"enum": ["train", "val", "test"]},
        "clips": {"type": "array", "items": {"type": "object"}},
    },
    "additionalProperties": False,
}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise AudioIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def cmd_train(args) -> int:
    from .train import TrainConfig, load_labeled, load_manifest, load_unlabeled, train

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    for flag in ("no_note_decoder", "no_cbr"):
        if getattr(args, flag):
            setattr(cfg, flag, True)
    for key in ("omega", "steps", "seed"):
        if getattr(args, key) is not None:
            setattr(cfg, key, getattr(args, key))
    labeled = load_labeled(load_manifest(args.labeled), cfg.cfp)
    if not labeled:
        raise ConfigError(f"{args.labeled}: no labeled entries")
    unlabeled = load_unlabeled(load_manifest(args.unlabeled)) if args.unlabeled else []
    result = train(cfg, labeled, unlabeled, out_dir=args.out)
    last = result.log[-1] if result.log else {}
    log.info("done: %d steps, final L_total %s", result.checkpoint.step, last.get("L_total"))
    return 0


def cmd_infer(args) -> int:
    from .train import infer

    f0 = infer(args.audio, args.ckpt, args.out)
    log.info("wrote %d frames to %s", f0.size, args.out)
    return 0


def cmd_eval(args) -> int:
    from .metrics import write_report_csv, write_report_json
    from .train import checkpoint_estimator, contour_dir_estimator, eval_manifest, load_manifest

    if (args.ckpt is None) == (args.contours is None):
        raise ConfigError("eval needs exactly one of --ckpt or --contours")
    estimator = (checkpoint_estimator(args.ckpt) if args.ckpt
                 else contour_dir_estimator(args.contours))
    report, per_clip = eval_manifest(load_manifest(args.manifest), estimator)
    out = Path(args.out)
    write_report_json(out, report)
    write_report_csv(args.per_clip or out.with_suffix(".csv"), per_clip)
    print(json.dumps(report.to_json()))
    return 0


def cmd_bench(args) -> int:
    from .bench import bench, write_bench

    report = bench(args.lengths, reps=args.reps, d_model=args.d_model)
    write_bench(args.out, report)
    print(json.dumps({"encoder_ratios": report.encoder_ratios,
                      "attention_ratios": report.attention_ratios}))
    return 0


def cmd_synth(args) -> int:
    from .train import validate_json
    from .synth import SynthSpec, export_corpus, synth_clip, synth_corpus

    doc = _read_json(args.spec)
    validate_json(doc, SYNTH_SCHEMA, str(args.spec))
    if "clips" in doc:
        specs = [SynthSpec.from_dict(d) for d in doc["clips"]]
        corpus = [(s,) + synth_clip(s) for s in specs]
    else:
        corpus = synth_corpus(doc.get("count", 8), doc.get("seconds", 1.0), doc.get("seed", 0),
                              doc.get("accompaniment", True))
    path = export_corpus(args.out, corpus, labeled=doc.get("labeled", True),
                         split=doc.get("split", "train"))
    log.info("wrote %d clips, manifest %s", len(corpus), path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectmamba", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from labeled (and unlabeled) manifests")
    t.add_argument("--config", type=Path)
    t.add_argument("--labeled", type=Path, required=True)
    t.add_argument("--unlabeled", type=Path)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--no-note-decoder", action="store_true")
    t.add_argument("--no-cbr", action="store_true")
    t.add_argument("--omega", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write a per-frame f0 contour CSV for one audio file")
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--audio", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint (or contour files) on a labeled manifest")
    e.add_argument("--ckpt", type=Path)
    e.add_argument("--contours", type=Path, help="directory of <audio stem>.csv estimates")
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--per-clip", type=Path)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="encoder vs attention wall-time scaling")
    b.add_argument("--out", type=Path, required=True)
    b.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048])
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--d-model", type=int, default=128)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate a synthetic corpus and manifest")
    s.add_argument("--spec", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SpectMambaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # bad field types in config files surface here
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

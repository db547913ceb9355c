"""Command-line pipeline: gen -> features -> train -> infer -> eval.

Every command echoes its resolved configuration as one JSON line for
provenance, writes only under its --out/--report paths, and reports
failures as a single machine-readable JSON line on stderr with exit
code 2 (invalid config), 3 (missing file), or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import (ExperimentConfig, config_to_dict, load_config,
                     parse_config)
from .corpus import generate_corpus, load_corpus_clip, load_manifest
from .errors import (CorruptFileError, InvalidConfigError, NumericError,
                     UnsupportedFormatError)
from .features import load_external_features, store_features
from .metrics import evaluate, save_report
from .model import SpliceModel
from .optim import load_checkpoint
from .postprocess import decode, load_predictions, nms, save_predictions
from .training import extract_features, train

FEATURE_KINDS = {"mfcc": "mel", "lfcc": "linear"}


def _echo(cfg: ExperimentConfig) -> None:
    print(json.dumps({"resolved_config": config_to_dict(cfg)}))


def _print(doc: dict) -> None:
    print(json.dumps(doc))


def _manifest(corpus_dir) -> "CorpusManifest":
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return load_manifest(path)


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo(cfg)
    manifest = generate_corpus(cfg.corpus, args.out)
    _print({"corpus_dir": str(manifest.corpus_dir),
            "clips": len(manifest.clips),
            "train": len(manifest.ids("train")),
            "eval": len(manifest.ids("eval"))})
    return 0


def cmd_features(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.type == "external":
        src = Path(args.inp)
        files = sorted(src.glob("*.sff")) if src.is_dir() else []
        if not files:
            raise FileNotFoundError(f"no .sff feature files under {src}")
        for path in files:
            load_external_features(path)  # validate before accepting
            (out_dir / path.name).write_bytes(path.read_bytes())
        _print({"features_dir": str(out_dir), "clips": len(files),
                "type": "external"})
        return 0
    manifest = _manifest(args.inp)
    kind = FEATURE_KINDS[args.type]
    for clip_id in manifest.ids():
        annotated = load_corpus_clip(manifest, clip_id)
        seq = extract_features(annotated, cfg.features, kind, cfg.train.use_deltas)
        store_features(seq, out_dir / f"{clip_id}.sff")
    _print({"features_dir": str(out_dir), "clips": len(manifest.clips),
            "type": args.type})
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo(cfg)
    manifest = _manifest(args.data)
    out_dir = Path(args.out)
    model, log, _, _ = train(manifest, cfg.model, cfg.train, cfg.features,
                             out_dir=out_dir, config_echo=config_to_dict(cfg))
    (out_dir / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1) + "\n")
    _print({"run_dir": str(out_dir), "params": model.num_params,
            "final_loss": log["epochs"][-1]["loss"]})
    return 0


def _load_run(run_dir):
    run = Path(run_dir)
    config_path = run / "config.json"
    ckpt_path = run / "checkpoint.bin"
    for path in (config_path, ckpt_path):
        if not path.exists():
            raise FileNotFoundError(f"training artifact not found: {path}")
    cfg = parse_config(json.loads(config_path.read_text()))
    arrays = load_checkpoint(ckpt_path)
    feat_mean = arrays.pop("feat_norm.mean")
    feat_scale = arrays.pop("feat_norm.scale")
    input_dim = arrays["proj.w"].shape[1]
    model = SpliceModel(replace(cfg.model, input_dim=input_dim), seed=cfg.train.seed)
    model.load_state_arrays(arrays)
    return cfg, model, feat_mean, feat_scale


def cmd_infer(args) -> int:
    cfg, model, feat_mean, feat_scale = _load_run(args.model)
    _echo(cfg)
    manifest = _manifest(args.inp)
    clip_ids = manifest.ids(args.split) if args.split != "all" else manifest.ids()
    if not clip_ids:
        raise FileNotFoundError(f"no clips in split '{args.split}'")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = 0
    for clip_id in clip_ids:
        annotated = load_corpus_clip(manifest, clip_id)
        seq = extract_features(annotated, cfg.features, cfg.train.feature_kind,
                               cfg.train.use_deltas)
        feats = (seq.values - feat_mean) * feat_scale
        pred = model.forward(feats)
        cands = decode(pred, cfg.features, annotated.clip.duration_s,
                       cfg.postprocess.decode_threshold)
        cands = nms(cands, cfg.postprocess.nms_mode,
                    cfg.postprocess.nms_iou_threshold, cfg.postprocess.nms_sigma)
        save_predictions(clip_id, cands, out_dir / f"{clip_id}.json")
        total += len(cands)
    _print({"predictions_dir": str(out_dir), "clips": len(clip_ids),
            "spans": total})
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    _echo(cfg)
    pred_dir = Path(args.pred)
    files = sorted(pred_dir.glob("*.json")) if pred_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no prediction files under {pred_dir}")
    predictions = {}
    for path in files:
        clip_id, cands = load_predictions(path)
        predictions[clip_id] = cands
    manifest = _manifest(args.gt)
    known = set(manifest.ids())
    unknown = sorted(set(predictions) - known)
    if unknown:
        raise FileNotFoundError(f"predictions for clips missing from corpus: {unknown[:4]}")
    ground_truth = {}
    durations = {}
    for clip_id in predictions:
        annotated = load_corpus_clip(manifest, clip_id)
        ground_truth[clip_id] = annotated.spans
        durations[clip_id] = annotated.clip.duration_s
    report = evaluate(predictions, ground_truth, durations,
                      thresholds=cfg.metrics.tiou_thresholds,
                      grid_s=cfg.metrics.grid_s,
                      f1_threshold=cfg.metrics.f1_threshold)
    save_report(report, args.report)
    doc = report.to_json_dict()
    print(json.dumps(doc, indent=1))
    print(f"avg mAP {100 * doc['avg_map']:.2f}% | "
          f"utterance EER {100 * doc['utt_eer']:.2f}% | "
          f"segment EER {100 * doc['seg_eer']:.2f}% | "
          f"segment F1 {100 * doc['seg_f1']:.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spanloc",
        description="Splice localization experiments on synthetic speech.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen", help="generate a labeled corpus")
    common(p)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("features", help="extract or import feature files")
    common(p)
    p.add_argument("--in", dest="inp", required=True,
                   help="corpus directory (or .sff directory for external)")
    p.add_argument("--out", required=True, help="feature output directory")
    p.add_argument("--type", choices=["mfcc", "lfcc", "external"],
                   default="mfcc")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write per-clip span predictions")
    common(p)
    p.add_argument("--model", required=True, help="training run directory")
    p.add_argument("--in", dest="inp", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.add_argument("--split", choices=["train", "eval", "all"], default="eval")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--gt", required=True, help="corpus directory")
    p.add_argument("--report", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)
    return parser


def _fail(code: int, kind: str, **details) -> int:
    line = {"error": kind, **details}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfigError as exc:
        return _fail(2, "invalid-config", key=exc.key, message=str(exc))
    except FileNotFoundError as exc:
        return _fail(3, "missing-file", message=str(exc))
    except NumericError as exc:
        return _fail(4, "numeric-error", op=exc.op, message=str(exc))
    except (CorruptFileError, UnsupportedFormatError, ValueError) as exc:
        return _fail(1, "error", message=str(exc))


if __name__ == "__main__":
    sys.exit(main())

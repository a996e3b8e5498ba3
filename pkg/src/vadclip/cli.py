"""Command line entry point: ``vadclip {gen-synthetic,train,evaluate,predict,gradcheck}``.

Results go under ``--out`` or, when absent, ``$VADCLIP_OUTPUT_DIR`` (default
``runs/``). The exit status is 0 only when every invoked check passes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import (
    LabelVocabulary, SyntheticSpec, VideoAnnotation, VideoDataset, generate_synthetic_dataset, read_feature_file,
)
from .metrics import COARSE_PATHS
from .training import (
    RunConfig, evaluate, format_gradcheck, gradcheck, load_checkpoint, load_datasets, output_dir, predict, train,
    write_predictions,
)


def _out(args, sub: str) -> Path:
    return Path(args.out) if args.out else output_dir() / sub


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", "xd") == "ucf":
        cfg = RunConfig.ucf_crime()
    else:
        cfg = RunConfig.xd_violence()
    overrides = {k: getattr(args, k) for k in ("epochs", "lr", "seed", "batch_size") if getattr(args, k, None) is not None}
    if getattr(args, "train_dir", None):
        overrides["train_dir"] = args.train_dir
    if getattr(args, "test_dir", None):
        overrides["test_dir"] = args.test_dir
    return replace(cfg, **overrides) if overrides else cfg


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(num_classes=args.classes, videos_per_class=args.videos_per_class,
                         normal_videos=args.normal_videos, test_videos_per_class=args.test_videos_per_class,
                         test_normal_videos=args.test_normal_videos, n=args.frames, d=args.dim, margin=args.margin)
    train_set, test_set = generate_synthetic_dataset(spec, args.seed)
    out = _out(args, "synthetic")
    train_set.save(out / "train")
    test_set.save(out / "test")
    print(f"wrote {len(train_set)} train and {len(test_set)} test videos to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, test_set = load_datasets(cfg)
    if cfg.model.d != train_set.d:
        cfg = replace(cfg, model=replace(cfg.model, d=train_set.d))
    out = _out(args, "train")
    result = train(cfg, train_set, out_dir=out, resume=args.resume)
    cfg.save(out / "config.json")
    print(f"checkpoint: {result.checkpoint}")
    if result.history:
        print(f"final loss: {result.history[-1]['total']:.6f}")
    if test_set is not None:
        report = evaluate(result.model, test_set, cfg, out_dir=out / "eval")
        print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def _apply_eval_flags(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    if args.path:
        kw["inference_path"] = args.path
    if args.segment_threshold is not None:
        kw["segment_threshold"] = args.segment_threshold
    if args.min_length is not None:
        kw["segment_min_length"] = args.min_length
    return replace(cfg, **kw) if kw else cfg


def cmd_evaluate(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    cfg = _apply_eval_flags(cfg, args)
    dataset = VideoDataset.load(args.data)
    out = _out(args, "eval")
    report = evaluate(model, dataset, cfg, out_dir=out)
    if args.plots:
        from .plots import write_artifacts

        write_artifacts(predict(model, dataset, cfg), dataset, cfg.inference_path, out / "plots")
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def _features_only(directory: Path, vocab: LabelVocabulary) -> VideoDataset:
    files = sorted((directory / "features").glob("*.vadf")) or sorted(directory.glob("*.vadf"))
    feats = [read_feature_file(f) for f in files]
    return VideoDataset(vocab, feats, [VideoAnnotation(f.video_id, 0) for f in feats])


def cmd_predict(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    cfg = _apply_eval_flags(cfg, args)
    directory = Path(args.data)
    if (directory / "annotations.jsonl").exists():
        dataset = VideoDataset.load(directory)
    else:
        dataset = _features_only(directory, model.vocab)
    out = _out(args, "predict")
    out.mkdir(parents=True, exist_ok=True)
    preds = predict(model, dataset, cfg)
    write_predictions(out / "predictions.jsonl", preds)
    print(f"wrote {len(preds)} predictions to {out / 'predictions.jsonl'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    rows = gradcheck(cfg.model, replace(cfg.loss, lam=args.lam), n_frames=args.frames, d=args.dim,
                     seed=args.seed or 0, tol=args.tol)
    print(format_gradcheck(rows))
    failed = [r.group for r in rows if r.status == "fail"]
    print("FAIL: " + ", ".join(failed) if failed else "all parameter groups pass")
    return 1 if failed else 0


def cmd_default_config(args) -> int:
    cfg = RunConfig.ucf_crime() if args.preset == "ucf" else RunConfig.xd_violence()
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vadclip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic train/test feature dataset")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--videos-per-class", type=int, default=8)
    g.add_argument("--normal-videos", type=int, default=24)
    g.add_argument("--test-videos-per-class", type=int, default=4)
    g.add_argument("--test-normal-videos", type=int, default=12)
    g.add_argument("--frames", type=int, default=64)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--margin", type=float, default=2.0)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a model; evaluates on the test split when one is configured")
    t.add_argument("--config")
    t.add_argument("--preset", choices=("xd", "ucf"), default="xd")
    t.add_argument("--train-dir")
    t.add_argument("--test-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "score a dataset and write the evaluation report"),
                                 ("predict", cmd_predict, "write per-video frame scores and segments")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--path", choices=COARSE_PATHS)
        e.add_argument("--segment-threshold", type=float)
        e.add_argument("--min-length", type=int)
        e.add_argument("--out")
        if name == "evaluate":
            e.add_argument("--plots", action="store_true", help="also write CSV/PNG result artifacts")
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference check of every learnable parameter group")
    c.add_argument("--config")
    c.add_argument("--preset", choices=("xd", "ucf"), default="xd")
    c.add_argument("--frames", type=int, default=6)
    c.add_argument("--dim", type=int, default=8)
    c.add_argument("--lam", type=float, default=0.5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("default-config", help="print a default run configuration as JSON")
    d.add_argument("--preset", choices=("xd", "ucf"), default="xd")
    d.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Branch/prompt ablation and contrastive-weight sweep on the synthetic set.

Writes ablation.json and lambda_sweep.json under the output directory.

    python3 scripts/run_ablation.py --epochs 100
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from vadclip.data import SyntheticSpec, generate_synthetic_dataset
from vadclip.training import RunConfig, evaluate, output_dir, run_ablation, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lambdas", type=float, nargs="*", default=[0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0])
    p.add_argument("--skip-lambda", action="store_true")
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    spec = SyntheticSpec()
    cfg = RunConfig.xd_violence(synthetic=spec)
    cfg = replace(cfg, model=replace(cfg.model, d=spec.d), epochs=args.epochs)
    train_set, test_set = generate_synthetic_dataset(spec, cfg.data_seed)
    out = Path(args.out) if args.out else output_dir() / "ablation"
    out.mkdir(parents=True, exist_ok=True)

    rows = run_ablation(cfg, train_set, test_set)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"{'variant':<9} {'path':<9} {'AP':>7} {'AUC':>7} {'AVG mAP':>8}")
    for r in rows:
        print(f"{r['variant']:<9} {r['path']:<9} {r['ap']:>7.4f} {r['auc']:>7.4f} {r['avg_map']:>8.4f}")

    if args.skip_lambda:
        return
    sweep = []
    for lam in args.lambdas:
        c = replace(cfg, loss=replace(cfg.loss, lam=lam))
        rep = evaluate(train(c, train_set).model, test_set, c)
        sweep.append({"lambda": lam, "ap": rep.ap, "auc": rep.auc, "avg_map": rep.avg_map})
        print(f"lambda={lam:<8g} AP {rep.ap:.4f}  AVG mAP {rep.avg_map:.4f}")
    (out / "lambda_sweep.json").write_text(json.dumps(sweep, indent=2) + "\n")


if __name__ == "__main__":
    main()

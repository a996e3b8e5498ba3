"""Train the default model on the seeded synthetic set and report train/test metrics.

    python3 scripts/overfit_synthetic.py --epochs 200
"""

import argparse
import json
import logging
import time
from dataclasses import replace

from vadclip.data import SyntheticSpec, generate_synthetic_dataset
from vadclip.training import RunConfig, evaluate, output_dir, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = SyntheticSpec(margin=args.margin)
    cfg = RunConfig.xd_violence(synthetic=spec, seed=args.seed, data_seed=args.data_seed)
    cfg = replace(cfg, model=replace(cfg.model, d=spec.d), epochs=args.epochs)
    train_set, test_set = generate_synthetic_dataset(spec, args.data_seed)
    out = output_dir() / "overfit" if args.out is None else args.out

    t0 = time.perf_counter()
    result = train(cfg, train_set, out_dir=out)
    seconds = time.perf_counter() - t0
    summary = {"seconds": round(seconds, 1), "epochs": cfg.epochs}
    for name, ds in (("train", train_set), ("test", test_set)):
        rep = evaluate(result.model, ds, cfg, out_dir=f"{out}/eval_{name}")
        summary[name] = {"ap": rep.ap, "auc": rep.auc, "ano_auc": rep.ano_auc, "avg_map": rep.avg_map,
                         "by_path": rep.by_path}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()

"""Train the benchmark suite and write robust-accuracy profiles per model."""

import argparse
import json
import time
from pathlib import Path

from robustlab.benchmark import BenchmarkConfig, category_profiles, make_datasets, train_suite
from robustlab.evaluation import parse_epsilons
from robustlab.models import save_checkpoint
from robustlab.parallel import default_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/profile")
    ap.add_argument("--threads", type=int, default=default_threads())
    ap.add_argument("--epsilons", default=None, help='override, e.g. "0:16:2/255"')
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    cfg = BenchmarkConfig(seed=args.seed)
    train_set, _, test = make_datasets(cfg)
    t0 = time.time()
    trained = train_suite(cfg, train_set, threads=args.threads)
    print(f"trained {len(trained)} models in {time.time() - t0:.0f}s")
    models = {}
    for name, (m, rep) in trained.items():
        save_checkpoint(m, out / "models" / f"{name}.json", config=cfg.to_dict())
        rep.to_csv(out / "reports" / f"{name}.csv")
        models[name] = m

    eps = parse_epsilons(args.epsilons) if args.epsilons else None
    t0 = time.time()
    res = category_profiles(cfg, models, test, epsilons=eps, threads=args.threads)
    print(f"profiles in {time.time() - t0:.0f}s")
    for name, prof in res["profiles"].items():
        prof.to_csv(out / "profiles" / f"{name}.csv")
        print(f"{name:13s} clean {res['clean'][name]:.3f}  robust@eps {res['robust_at_epsilon'][name]:.3f}")
    for cat, v in res["category_robust"].items():
        print(f"{cat:11s} robust {v:.3f}  clean {res['category_clean'][cat]:.3f}")
    summary = {k: v for k, v in res.items() if k != "profiles"}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()

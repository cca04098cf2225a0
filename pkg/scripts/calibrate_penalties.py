"""Pick the grad/fim penalty weights by validation clean accuracy only.

Rule: the largest grid value whose validation clean accuracy stays within
``--max-drop`` of the standard model's.
"""

import argparse

from robustlab.benchmark import BenchmarkConfig, ModelSpec, calibrate_penalty, make_datasets
from robustlab.defenses import train
from robustlab.parallel import default_threads

GRIDS = {
    "grad_penalty": [0.25, 0.5, 1, 2, 4, 16, 64],
    "fim_penalty": [1, 10, 100, 1000, 1e4],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--threads", type=int, default=default_threads())
    ap.add_argument("--max-drop", type=float, default=0.05)
    args = ap.parse_args()

    cfg = BenchmarkConfig()
    train_set, val, _ = make_datasets(cfg)
    ref, _ = train(train_set, cfg.defense(ModelSpec("standard", "standard")))
    ref_clean = ref.accuracy(val.x, val.y)
    print(f"standard val clean {ref_clean:.3f}")
    for kind, grid in GRIDS.items():
        beta, rows = calibrate_penalty(cfg, kind, grid, train_set, val, ref_clean,
                                       max_drop=args.max_drop, threads=args.threads)
        for r in rows:
            print(f"  {kind:13s} beta={r['beta']:<8g} val clean {r['val_clean']:.3f}")
        print(f"{kind}: selected beta = {beta:g}")


if __name__ == "__main__":
    main()

"""Unconstrained inversion grid from shared noise starts for each benchmark model.

Reuses checkpoints written by robustness_profiles.py when present.
"""

import argparse
import json
from pathlib import Path

from robustlab.benchmark import BenchmarkConfig, inversion_study, make_datasets, train_suite
from robustlab.models import load_checkpoint
from robustlab.parallel import default_threads

NAMES = ("standard", "madry", "trades", "grad_penalty", "fim_penalty")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", default="runs/profile/models")
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--threads", type=int, default=default_threads())
    args = ap.parse_args()

    cfg = BenchmarkConfig()
    src = Path(args.models)
    if all((src / f"{n}.json").is_file() for n in NAMES):
        models = {n: load_checkpoint(src / f"{n}.json")[0] for n in NAMES}
    else:
        train_set, _, _ = make_datasets(cfg)
        models = {n: m for n, (m, _) in train_suite(cfg, train_set, NAMES, args.threads).items()}
    _, stats = inversion_study(cfg, models, out_dir=args.out, threads=args.threads)
    base = stats["standard"]["mean_target_score"]
    for n, s in stats.items():
        print(f"{n:13s} target score {s['mean_target_score']:.3f} (x{s['mean_target_score'] / base:.2f})"
              f"  template cos {s['mean_template_cosine']:.3f}  displacement {s['mean_displacement']:.3f}")
    Path(args.out, "stats.json").write_text(json.dumps(stats, indent=2))


if __name__ == "__main__":
    main()

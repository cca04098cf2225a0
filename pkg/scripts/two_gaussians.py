"""Orientation of standard vs adversarially trained linear boundaries on two Gaussians."""

import argparse
import json

from robustlab.benchmark import GaussianConfig, two_gaussian_orientation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epsilon", type=float, default=0.1)
    ap.add_argument("--spurious", type=float, default=0.08)
    ap.add_argument("--json", help="optional path for the full result")
    args = ap.parse_args()

    cfg = GaussianConfig(seed=args.seed, epsilon=args.epsilon, spurious_strength=args.spurious)
    res = two_gaussian_orientation(cfg)
    for kind, r in res.items():
        print(f"{kind:9s} |cos| {r['cosine']:.4f}  acc {r['accuracy']:.3f}  spurious share {r['spurious_weight_share']:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()

"""Command-line entry point: train, attack, profile, invert, grid, verify.

Each command merges defaults, an optional JSON ``--config`` and explicit flags
(flags win), writes the merged result to ``resolved_config.json`` in the output
directory, and records a sha256 for every output file in ``digests.json``.
Passing the snapshot back as ``--config`` reproduces those digests.

Exit status: 0 success, 1 failed invariant, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, pgd_attack
from .data import Dataset, gen_shape_images, gen_two_gaussians, load_idx, write_image_grid
from .defenses import DefenseConfig, TrainingDiverged, train
from .evaluation import parse_epsilons, perturbation_grid, robust_accuracy_profile
from .lp import INF, ThreatModel
from .models import load_checkpoint, save_checkpoint
from .parallel import default_threads, parallel_map, shards
from .verify import SUITES, run_suite

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2

DEFAULT_DATA = {
    "kind": "shapes",
    "side": 16,
    "num_classes": 4,
    "n_train": 6000,
    "n_test": 500,
    "seed": 0,
    "noise": 0.15,
    "contrast": [0.1, 0.25],
    "background": [0.0, 0.3],
    "texture": 0.02,
    "shift": 1,
}

_DEFAULT_ATTACK = AttackConfig(iterations=50, restarts=10).to_dict()
_INVERSION_ATTACK = AttackConfig(threat=ThreatModel(INF, INF), iterations=2048, random_init=False).to_dict()

DEFAULTS = {
    "train": {"data": DEFAULT_DATA, "defense": DefenseConfig().to_dict()},
    "attack": {"model": None, "data": None, "attack": _DEFAULT_ATTACK},
    "profile": {"model": None, "data": None, "attack": _DEFAULT_ATTACK, "epsilons": "0:50:2/255"},
    "invert": {"model": None, "targets": [0], "seeds": [0], "attack": _INVERSION_ATTACK},
    "grid": {"models": {}, "targets": [0], "seeds": [0], "attack": _INVERSION_ATTACK},
    "verify": {"suite": "all", "n": None, "tolerance_scale": 1.0},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


def parse_number(text) -> float:
    """``"inf"``, ``"8/255"`` or a plain float."""
    if isinstance(text, (int, float)):
        return float(text)
    t = str(text).strip().lower()
    if t in ("inf", "infinity"):
        return INF
    if "/" in t:
        a, b = t.split("/", 1)
        return float(a) / float(b)
    return float(t)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("models",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set(cfg: dict, path: str, value) -> None:
    node = cfg
    *head, last = path.split(".")
    for k in head:
        node = node.setdefault(k, {})
    node[last] = value


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {"command": command, "seed": 0}
    cfg = _merge(cfg, DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"--config: file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON in {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("--config: top level must be an object")
        if user.get("command", command) != command:
            raise ConfigError(f"command: config is for {user['command']!r}, not {command!r}")
        cfg = _merge(cfg, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if command in ("train", "attack", "profile", "invert", "grid"):
        thr = "defense.threat" if command == "train" else "attack.threat"
        if args.epsilon is not None:
            _set(cfg, f"{thr}.epsilon", _enc(parse_number(args.epsilon)))
        if args.p is not None:
            _set(cfg, f"{thr}.p", _enc(parse_number(args.p)))
        if args.iterations is not None:
            _set(cfg, "defense.inner_iterations" if command == "train" else "attack.iterations", args.iterations)
    if command == "train":
        if args.beta is not None:
            _set(cfg, "defense.beta", parse_number(args.beta))
        if args.tau is not None:
            _set(cfg, "defense.tau", parse_number(args.tau))
        if args.kind is not None:
            _set(cfg, "defense.kind", args.kind)
        if args.epochs is not None:
            _set(cfg, "defense.epochs", args.epochs)
        cfg["defense"]["seed"] = cfg["seed"]
    else:
        if args.restarts is not None and command in ("attack", "profile"):
            _set(cfg, "attack.restarts", args.restarts)
        if command != "verify":
            _set(cfg, "attack.seed", cfg["seed"])
    for key in ("model", "epsilons", "suite", "n", "tolerance_scale", "targets", "seeds"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "models", None):
        models = {}
        for item in args.models:
            if "=" not in item:
                raise ConfigError(f"models: expected name=path, got {item!r}")
            name, path = item.split("=", 1)
            models[name] = path
        cfg["models"] = models
    return cfg


def _enc(v: float):
    return "inf" if v == INF else v


def build_dataset(d: dict, split: str) -> Dataset:
    """Materialize the ``train`` or ``test`` split described by a data section."""
    kind = d.get("kind")
    try:
        if kind == "shapes":
            n_train, n_test = int(d["n_train"]), int(d["n_test"])
            full = gen_shape_images(int(d["side"]), int(d["num_classes"]), n_train + n_test,
                                    seed=int(d["seed"]), shift=int(d.get("shift", 1)),
                                    noise=float(d.get("noise", 0.15)),
                                    contrast=tuple(d.get("contrast", (0.6, 1.0))),
                                    background=tuple(d.get("background", (0.0, 0.3))),
                                    texture=float(d.get("texture", 0.0)))
        elif kind == "two_gaussians":
            n_train, n_test = int(d["n_train"]), int(d["n_test"])
            full = gen_two_gaussians(np.asarray(d["mu"], dtype=float), float(d["sigma"]),
                                     float(d["spurious_strength"]), n_train + n_test,
                                     seed=int(d["seed"]),
                                     spurious_noise=float(d.get("spurious_noise", 0.01)))
        elif kind == "idx":
            return load_idx(d[f"{split}_images"], d[f"{split}_labels"], d.get("num_classes"))
        else:
            raise ConfigError(f"data.kind: unknown dataset kind {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"data.{exc.args[0]}: required field missing") from exc
    idx = np.arange(n_train) if split == "train" else np.arange(n_train, n_train + n_test)
    return full.subset(idx, split)


def _threat_for(d: dict, data: Dataset) -> ThreatModel:
    t = ThreatModel.from_dict(d)
    return ThreatModel(t.p, t.epsilon, data.low, data.high)


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("ROBUSTLAB_OUT")
    return Path(root) / command if root else Path("robustlab_out") / command


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _digests(out: Path) -> dict:
    skip = {"digests.json"}
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name not in skip}


def _load_model(path):
    if not path:
        raise ConfigError("model: checkpoint path required (--model)")
    return load_checkpoint(path)


# -- commands -----------------------------------------------------------------------


def cmd_train(cfg: dict, out: Path, threads: int) -> int:
    data = build_dataset(cfg["data"], "train")
    d = dict(cfg["defense"])
    d["threat"] = _threat_for(d.get("threat", {}), data).to_dict()
    try:
        dc = DefenseConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    model, report = train(data, dc)
    digest = save_checkpoint(model, out / "model.json", config=cfg)
    report.to_csv(out / "report.csv")
    test = build_dataset(cfg["data"], "test")
    summary = {"checkpoint_sha256": digest, "train_accuracy": model.accuracy(data.x, data.y),
               "test_accuracy": model.accuracy(test.x, test.y), "effective_weight": report.effective_weight,
               "early_stopped": report.early_stopped, "notes": report.notes}
    _write_json(out / "summary.json", summary)
    print(f"trained {dc.kind}: test accuracy {summary['test_accuracy']:.4f}; checkpoint {digest[:16]}")
    return EXIT_OK


def _eval_data(cfg: dict, ckpt_cfg: dict) -> Dataset:
    d = cfg.get("data") or ckpt_cfg.get("data")
    if not d:
        raise ConfigError("data: no dataset given and the checkpoint records none")
    cfg["data"] = d
    return build_dataset(d, "test")


def _attack_cfg(cfg: dict, data: Dataset) -> AttackConfig:
    a = dict(cfg["attack"])
    a["threat"] = _threat_for(a.get("threat", {}), data).to_dict()
    try:
        return AttackConfig.from_dict(a)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"attack: {exc}") from exc


def cmd_attack(cfg: dict, out: Path, threads: int) -> int:
    model, ckpt_cfg = _load_model(cfg["model"])
    data = _eval_data(cfg, ckpt_cfg)
    atk = _attack_cfg(cfg, data)
    n = len(data)

    def run(sh):
        rows = np.arange(sh.start, sh.stop)
        return rows, pgd_attack(model, data.x[rows], data.y[rows], atk, sample_ids=rows)

    x_adv = data.x.copy()
    success = np.zeros(n, bool)
    used = np.zeros(n, int)
    for rows, res in parallel_map(run, shards(n, 64), threads):
        x_adv[rows], success[rows], used[rows] = res.x, res.success, res.restarts_used
    clean = np.asarray(model.predict(data.x))
    adv = np.asarray(model.predict(x_adv))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "attack.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "pred_clean", "pred_adv", "success", "restarts_used", "linf"])
        for i in range(n):
            w.writerow([i, int(data.y[i]), int(clean[i]), int(adv[i]), int(success[i]), int(used[i]),
                        repr(float(np.max(np.abs(x_adv[i] - data.x[i]))))])
    robust = float(np.mean((clean == data.y) & ~success))
    _write_json(out / "summary.json", {"clean_accuracy": float(np.mean(clean == data.y)),
                                       "robust_accuracy": robust, "n": n})
    if data.side and n:
        k = min(n, 16)
        write_image_grid(list(x_adv[:k]), (1, k), out / "adversarial.png", data.side,
                         low=data.low, high=data.high)
    print(f"robust accuracy {robust:.4f} at epsilon {atk.threat.epsilon:.6g}")
    return EXIT_OK


def cmd_profile(cfg: dict, out: Path, threads: int) -> int:
    model, ckpt_cfg = _load_model(cfg["model"])
    data = _eval_data(cfg, ckpt_cfg)
    atk = _attack_cfg(cfg, data)
    try:
        eps = parse_epsilons(str(cfg["epsilons"]))
        prof = robust_accuracy_profile(model, data, eps, atk, model_id=str(cfg["model"]), threads=threads)
    except ValueError as exc:
        raise ConfigError(f"epsilons: {exc}") from exc
    prof.to_csv(out / "profile.csv")
    for e, a in zip(prof.epsilons, prof.accuracy):
        print(f"{e * 255:7.2f}/255  {a:.4f}")
    return EXIT_OK


def _grid(cfg: dict, models: dict, out: Path, threads: int, ckpt_cfg: dict) -> int:
    d = ckpt_cfg.get("data") or {}
    low, high = (-1.0, 1.0) if d.get("kind") == "two_gaussians" else (0.0, 1.0)
    a = dict(cfg["attack"])
    a["threat"] = {**a.get("threat", {}), "low": low, "high": high}
    try:
        atk = AttackConfig.from_dict(a)
        grid = perturbation_grid(models, cfg["targets"], cfg["seeds"], atk, out_dir=out,
                                 side=d.get("side"), threads=threads)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    for name in grid.models:
        print(f"{name}: mean target score {grid.mean_target_score(name):.4f}")
    return EXIT_OK


def cmd_invert(cfg: dict, out: Path, threads: int) -> int:
    model, ckpt_cfg = _load_model(cfg["model"])
    return _grid(cfg, {"model": model}, out, threads, ckpt_cfg)


def cmd_grid(cfg: dict, out: Path, threads: int) -> int:
    if not cfg["models"]:
        raise ConfigError("models: at least one name=path entry required")
    models, first = {}, None
    for name, path in cfg["models"].items():
        models[name], c = _load_model(path)
        first = first if first is not None else c
    return _grid(cfg, models, out, threads, first)


def cmd_verify(cfg: dict, out: Path, threads: int) -> int:
    if cfg["suite"] not in SUITES:
        raise ConfigError(f"suite: unknown suite {cfg['suite']!r}; expected one of {', '.join(SUITES)}")
    if not float(cfg["tolerance_scale"]) >= 0:
        raise ConfigError(f"tolerance_scale: must be non-negative, got {cfg['tolerance_scale']}")
    rep = run_suite(cfg["suite"], cfg["n"], cfg["seed"], float(cfg["tolerance_scale"]), threads)
    _write_json(out / "report.json", rep)
    subs = rep["suites"] if cfg["suite"] == "all" else [rep]
    for s in subs:
        print(f"{s['suite']:22s} {'pass' if s['passed'] else 'FAIL'}  n={s['n']}")
        for c in s["failed"][:5]:
            print(f"    {c['name']} instance {c['instance']}: slack {c['slack']:.3e}")
    return EXIT_OK if rep["passed"] else EXIT_INVARIANT


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "profile": cmd_profile,
    "invert": cmd_invert,
    "grid": cmd_grid,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (a resolved_config.json works)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default $ROBUSTLAB_OUT/<command>)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--epsilon", help="budget, e.g. 8/255 or inf")
        p.add_argument("--beta", help="penalty weight")
        p.add_argument("--tau", help="softmax temperature")
        p.add_argument("--p", help="threat norm order, e.g. 2 or inf")
        p.add_argument("--iterations", type=int)
        p.add_argument("--restarts", type=int)
        if name == "train":
            p.add_argument("--kind", help="defense kind")
            p.add_argument("--epochs", type=int)
        if name in ("attack", "profile", "invert"):
            p.add_argument("--model", help="checkpoint path")
        if name == "profile":
            p.add_argument("--epsilons", help='e.g. "0:50:2/255" or "0,4/255,8/255"')
        if name in ("invert", "grid"):
            p.add_argument("--targets", type=int, nargs="+")
            p.add_argument("--seeds", type=int, nargs="+")
        if name == "grid":
            p.add_argument("--models", nargs="+", help="name=checkpoint pairs")
        if name == "verify":
            p.add_argument("suite", nargs="?", default=None, help=", ".join(SUITES))
            p.add_argument("--n", type=int)
            p.add_argument("--tolerance-scale", dest="tolerance_scale", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = args.threads if args.threads is not None else default_threads()
    out = _out_dir(args, args.command)
    try:
        cfg = resolve_config(args.command, args)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", cfg)
        code = COMMANDS[args.command](cfg, out, threads)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"robustlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"robustlab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"robustlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    _write_json(out / "digests.json", _digests(out))
    return code


if __name__ == "__main__":
    sys.exit(main())

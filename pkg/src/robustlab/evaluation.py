"""Robust-accuracy profiles, unconstrained perturbation grids and smoothness tables."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, model_inversion, pgd_attack
from .data import Dataset, shape_templates, write_image, write_image_grid
from .fim import fim_bound_report
from .lp import INF, ThreatModel
from .models import Classifier
from .parallel import parallel_map, shards

__all__ = [
    "RobustnessProfile",
    "robust_accuracy_profile",
    "GridEntry",
    "PerturbationGrid",
    "grid_inits",
    "perturbation_grid",
    "smoothness_sweep",
    "write_table",
    "parse_epsilons",
]


def parse_epsilons(text: str) -> list[float]:
    """Parse ``"start:stop:step/scale"`` (inclusive stop) or a comma list such as
    ``"0, 2/255, 0.1"``."""
    text = text.replace(" ", "")
    if not text:
        raise ValueError("empty epsilon list")
    scale = 1.0
    if ":" in text:
        body = text
        if "/" in text:
            body, s = text.rsplit("/", 1)
            scale = float(s)
        parts = body.split(":")
        if len(parts) != 3:
            raise ValueError(f"epsilon range must be start:stop:step, got {text!r}")
        start, stop, step = (float(v) for v in parts)
        if step <= 0:
            raise ValueError("epsilon step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [(start + i * step) / scale for i in range(n)]
    out = []
    for tok in text.split(","):
        if "/" in tok:
            a, b = tok.split("/", 1)
            out.append(float(a) / float(b))
        else:
            out.append(float(tok))
    return out


@dataclass
class RobustnessProfile:
    model_id: str
    epsilons: list[float]
    accuracy: list[float]
    restarts_mean: list[float]
    attack: dict
    clean_accuracy: float

    def at(self, eps: float) -> float:
        i = int(np.argmin(np.abs(np.asarray(self.epsilons) - eps)))
        return self.accuracy[i]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "robust_accuracy", "restarts_mean"])
            for e, a, r in zip(self.epsilons, self.accuracy, self.restarts_mean):
                w.writerow([repr(float(e)), repr(float(a)), repr(float(r))])


def robust_accuracy_profile(model: Classifier, data: Dataset, eps_list, attack: AttackConfig,
                            model_id: str = "model", threads: int | None = 1,
                            shard_size: int = 64) -> RobustnessProfile:
    """Fraction of test points that no restart of the attack flips, for each eps.

    Points broken at one eps count as broken at every larger eps, and surviving
    points restart the next eps from their best iterate so far, so the profile is
    non-increasing by construction. The eps = 0 row is plain clean accuracy.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list or eps_list[0] != 0.0:
        raise ValueError("epsilon list must start at 0")
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilon list must be sorted ascending")
    x, y = data.x.astype(np.float64), data.y
    n = len(y)
    alive = np.asarray(model.predict(x)) == y if n else np.zeros(0, bool)
    clean = float(alive.mean()) if n else float("nan")
    warm = x.copy()
    acc, rmean = [clean], [0.0]
    for eps in eps_list[1:]:
        cfg = replace(attack, threat=replace(attack.threat, epsilon=eps))
        idx = np.flatnonzero(alive)

        def run(sh, idx=idx, cfg=cfg):
            rows = idx[sh.start : sh.stop]
            res = pgd_attack(model, x[rows], y[rows], cfg, sample_ids=rows, x_init=warm[rows])
            return rows, res

        used = []
        for rows, res in parallel_map(run, shards(len(idx), shard_size), threads):
            alive[rows[res.success]] = False
            warm[rows] = res.x
            used.append(res.restarts_used)
        acc.append(float(alive.mean()) if n else float("nan"))
        rmean.append(float(np.concatenate(used).mean()) if used else 0.0)
    return RobustnessProfile(model_id, eps_list, acc, rmean, attack.to_dict(), clean)


@dataclass
class GridEntry:
    model: str
    target: int
    seed: int
    image: np.ndarray
    start_score: float
    target_score: float
    iterations: int
    displacement: float
    template_cosine: float | None
    init_checksum: str


@dataclass
class PerturbationGrid:
    models: list[str]
    targets: list[int]
    seeds: list[int]
    inits: dict
    entries: list[GridEntry] = field(default_factory=list)

    def mean_target_score(self, model: str) -> float:
        return float(np.mean([e.target_score for e in self.entries if e.model == model]))

    def mean_template_cosine(self, model: str) -> float:
        v = [e.template_cosine for e in self.entries if e.model == model and e.template_cosine is not None]
        return float(np.mean(v)) if v else float("nan")

    def mean_displacement(self, model: str) -> float:
        return float(np.mean([e.displacement for e in self.entries if e.model == model]))


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()[:16]


def _centered_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def grid_inits(seeds, input_dim: int, low: float, high: float) -> dict[int, np.ndarray]:
    """Uniform noise start image per seed, shared by every model and target."""
    return {int(s): np.random.default_rng([int(s), 0x1A17]).uniform(low, high, size=input_dim)
            for s in seeds}


def perturbation_grid(models: dict[str, Classifier], targets, seeds, config: AttackConfig,
                      out_dir=None, side: int | None = None, templates: np.ndarray | None = None,
                      threads: int | None = 1) -> PerturbationGrid:
    """Run unconstrained targeted inversion for each model from shared noise starts.

    One row per model, one column per (target, seed). With ``out_dir`` the final
    images go to ``{model}/{target}/{seed}.pgm``, the starts to ``init/{seed}.pgm``,
    plus ``metadata.csv`` and an ``overview.png`` (first row: starts).
    ``template_cosine`` is a pixel-space similarity to the target's class template,
    a stand-in for visual recognizability.
    """
    if not models:
        raise ValueError("perturbation_grid: no models given")
    names = list(models)
    dims = {m.input_dim for m in models.values()}
    if len(dims) != 1:
        raise ValueError("perturbation_grid: models differ in input shape")
    K = min(m.num_classes for m in models.values())
    targets = [int(t) for t in targets]
    seeds = [int(s) for s in seeds]
    bad = [t for t in targets if not 0 <= t < K]
    if bad:
        raise ValueError(f"target class {bad[0]} out of range for {K} classes")
    if config.threat.epsilon != INF:
        raise ValueError("perturbation_grid requires epsilon = inf")
    d = dims.pop()
    th = config.threat
    inits = grid_inits(seeds, d, th.low, th.high)
    if templates is None and side is not None:
        try:
            templates = shape_templates(side, K, shift=1)
        except ValueError:
            templates = None
    cols = [(t, s) for t in targets for s in seeds]
    X0 = np.stack([inits[s] for _, s in cols])
    T = np.array([t for t, _ in cols])

    def run(name):
        return model_inversion(models[name], T, config, x_start=X0)

    grid = PerturbationGrid(names, targets, seeds, inits)
    for name, res in zip(names, parallel_map(run, names, threads)):
        for j, (t, s) in enumerate(cols):
            cos = _centered_cosine(res.x[j], templates[t]) if templates is not None else None
            grid.entries.append(GridEntry(
                name, t, s, res.x[j], float(res.start_score[j]), float(res.target_score[j]),
                res.iterations, float(np.mean(np.abs(res.x[j] - X0[j]))), cos, _checksum(X0[j])))
    if out_dir is not None:
        _export_grid(grid, Path(out_dir), cols, side, th)
    return grid


def _export_grid(grid: PerturbationGrid, out: Path, cols, side, th: ThreatModel) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for s, img in grid.inits.items():
        write_image(img, out / "init" / f"{s}.pgm", side, th.low, th.high)
    for e in grid.entries:
        write_image(e.image, out / e.model / str(e.target) / f"{e.seed}.pgm", side, th.low, th.high)
    with (out / "metadata.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "target", "seed", "start_score", "target_score", "iterations",
                    "displacement", "template_cosine", "init_checksum"])
        for e in grid.entries:
            w.writerow([e.model, e.target, e.seed, repr(e.start_score), repr(e.target_score),
                        e.iterations, repr(e.displacement),
                        "" if e.template_cosine is None else repr(e.template_cosine), e.init_checksum])
    tiles = [grid.inits[s] for _, s in cols] + [e.image for e in grid.entries]
    write_image_grid(tiles, (len(grid.models) + 1, len(cols)), out / "overview.png", side,
                     gutter=1, low=th.low, high=th.high)


_SWEEP_FIELDS = ("lower", "eig", "induced", "upper", "jacobian_frob")


def smoothness_sweep(models: dict[str, Classifier], probe_points, p: float = 2.0,
                     restarts: int = 4, threads: int | None = 1) -> list[dict]:
    """Mean and max of the FIM bound-chain quantities over ``probe_points`` for each model.

    ``upper`` is the Frobenius FIM penalty. Rows follow the order of ``models``.
    """
    pts = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    rows = []
    for name, m in models.items():
        reps = parallel_map(lambda x, m=m: fim_bound_report(m, x, p, restarts=restarts), list(pts), threads)
        row = {"model": name, "p": "inf" if p == INF else p, "points": len(pts)}
        for f in _SWEEP_FIELDS:
            v = np.array([getattr(r, f) for r in reps]) if reps else np.zeros(1)
            row[f"{f}_mean"] = float(v.mean())
            row[f"{f}_max"] = float(v.max())
        rows.append(row)
    return rows


def write_table(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

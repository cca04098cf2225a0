"""Desk-scale experiment suites: two-Gaussian orientation, robust-accuracy profiles
across defense categories, and unconstrained inversion grids."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig
from .data import Dataset, gen_shape_images, gen_two_gaussians
from .defenses import DefenseConfig, OptimizerConfig, train
from .evaluation import PerturbationGrid, parse_epsilons, perturbation_grid, robust_accuracy_profile
from .lp import INF, ThreatModel
from .models import Classifier
from .parallel import parallel_map

__all__ = [
    "ModelSpec",
    "BenchmarkConfig",
    "CATEGORIES",
    "make_datasets",
    "train_suite",
    "calibrate_penalty",
    "category_profiles",
    "inversion_study",
    "GaussianConfig",
    "two_gaussian_orientation",
]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: str
    beta: float = 0.0
    tau: float = 1.0
    lr_max: float | None = None


CATEGORIES = {
    "minimax": ("fgsm", "madry", "trades"),
    "approximate": ("grad_penalty", "fim_penalty"),
    "undefended": ("standard", "distill"),
}


def _default_specs() -> tuple:
    return (
        ModelSpec("standard", "standard"),
        # at tau = 100 the logits must grow ~100x; lr 0.02 is where the teacher trains
        ModelSpec("distill", "distill", tau=100.0, lr_max=0.02),
        ModelSpec("fgsm", "fgsm"),
        ModelSpec("madry", "madry"),
        ModelSpec("trades", "trades", beta=6.0),
        ModelSpec("trades_1e4", "trades", beta=1e4),
        ModelSpec("grad_penalty", "grad_penalty", beta=1.0),
        ModelSpec("fim_penalty", "fim_penalty", beta=1000.0),
    )


@dataclass
class BenchmarkConfig:
    # data: faint, noisy shapes plus a sub-epsilon class texture
    side: int = 16
    num_classes: int = 4
    n_train: int = 6000
    n_val: int = 500
    n_test: int = 500
    noise: float = 0.15
    contrast: tuple = (0.1, 0.25)
    background: tuple = (0.0, 0.3)
    texture: float = 0.02
    data_seed: int = 0
    # training
    arch: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [64, 64]})
    epochs: int = 15
    batch_size: int = 128
    lr_max: float = 0.05
    epsilon: float = 8 / 255
    seed: int = 0
    models: tuple = field(default_factory=_default_specs)
    # evaluation
    profile_epsilons: str = "0:50:2/255"
    attack_step: float = 2 / 255
    attack_iterations: int = 50
    attack_restarts: int = 10
    # inversion
    inversion_iterations: int = 2048
    inversion_step: float = 2 / 255
    inversion_seeds: tuple = (0, 1, 2)

    @property
    def threat(self) -> ThreatModel:
        return ThreatModel(INF, self.epsilon, 0.0, 1.0)

    def defense(self, spec: ModelSpec) -> DefenseConfig:
        return DefenseConfig(kind=spec.kind, beta=spec.beta, tau=spec.tau, threat=self.threat,
                             arch=dict(self.arch), epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.seed,
                             optimizer=OptimizerConfig(lr_max=spec.lr_max or self.lr_max))

    def attack(self) -> AttackConfig:
        return AttackConfig(threat=self.threat, step_size=self.attack_step,
                            iterations=self.attack_iterations, restarts=self.attack_restarts,
                            random_init=True, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = [asdict(m) for m in self.models]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"benchmark: unknown field(s) {', '.join(sorted(unknown))}")
        if "models" in d:
            d["models"] = tuple(ModelSpec(**m) for m in d["models"])
        for k in ("contrast", "background", "inversion_seeds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def make_datasets(cfg: BenchmarkConfig) -> tuple[Dataset, Dataset, Dataset]:
    n = cfg.n_train + cfg.n_val + cfg.n_test
    full = gen_shape_images(cfg.side, cfg.num_classes, n, seed=cfg.data_seed, noise=cfg.noise,
                            contrast=tuple(cfg.contrast), background=tuple(cfg.background),
                            texture=cfg.texture)
    train_set = full.subset(np.arange(cfg.n_train), "train")
    val = full.subset(np.arange(cfg.n_train, cfg.n_train + cfg.n_val), "val")
    test = full.subset(np.arange(cfg.n_train + cfg.n_val, n), "test")
    return train_set, val, test


def train_suite(cfg: BenchmarkConfig, train_set: Dataset, names=None,
                threads: int | None = 1) -> dict[str, tuple]:
    """Train the configured models; returns ``{name: (model, report)}`` in config order."""
    specs = [s for s in cfg.models if names is None or s.name in names]
    results = parallel_map(lambda s: train(train_set, cfg.defense(s)), specs, threads)
    return {s.name: r for s, r in zip(specs, results)}


def calibrate_penalty(cfg: BenchmarkConfig, kind: str, grid, train_set: Dataset, val: Dataset,
                      reference_clean: float, max_drop: float = 0.05,
                      threads: int | None = 1) -> tuple[float, list[dict]]:
    """Largest ``beta`` in ``grid`` whose validation clean accuracy stays within
    ``max_drop`` of ``reference_clean``. Robust accuracy is never consulted."""
    grid = sorted(float(b) for b in grid)
    specs = [ModelSpec(f"{kind}_{b:g}", kind, beta=b) for b in grid]
    models = parallel_map(lambda s: train(train_set, cfg.defense(s))[0], specs, threads)
    rows = [{"beta": b, "val_clean": m.accuracy(val.x, val.y)} for b, m in zip(grid, models)]
    ok = [r["beta"] for r in rows if r["val_clean"] >= reference_clean - max_drop]
    return (max(ok) if ok else grid[0]), rows


def _category_of(spec: ModelSpec) -> str | None:
    if spec.name == "trades_1e4":
        return None
    for cat, kinds in CATEGORIES.items():
        if spec.kind in kinds:
            return cat
    return None


def category_profiles(cfg: BenchmarkConfig, models: dict[str, Classifier], test: Dataset,
            epsilons=None, threads: int | None = 1) -> dict:
    """Robust-accuracy profiles plus the category summary at the training epsilon.

    The high-beta TRADES model is reported separately (single-class collapse) and
    excluded from the category means.
    """
    eps_list = parse_epsilons(cfg.profile_epsilons) if epsilons is None else list(epsilons)
    if not any(abs(e - cfg.epsilon) < 1e-12 for e in eps_list):
        eps_list = sorted(set(eps_list) | {cfg.epsilon})
    atk = cfg.attack()
    profiles = {}
    for spec in cfg.models:
        if spec.name in models and spec.name != "trades_1e4":
            profiles[spec.name] = robust_accuracy_profile(models[spec.name], test, eps_list, atk,
                                                          model_id=spec.name, threads=threads)
    robust = {n: p.at(cfg.epsilon) for n, p in profiles.items()}
    clean = {n: p.clean_accuracy for n, p in profiles.items()}
    cats = {}
    for spec in cfg.models:
        c = _category_of(spec)
        if c and spec.name in robust:
            cats.setdefault(c, []).append(spec.name)
    cat_robust = {c: float(np.mean([robust[n] for n in ns])) for c, ns in cats.items()}
    cat_clean = {c: float(np.mean([clean[n] for n in ns])) for c, ns in cats.items()}
    out = {
        "epsilon": cfg.epsilon,
        "profiles": profiles,
        "robust_at_epsilon": robust,
        "clean": clean,
        "categories": cats,
        "category_robust": cat_robust,
        "category_clean": cat_clean,
    }
    if {"minimax", "approximate", "undefended"} <= set(cat_robust):
        out["gap_minimax_approximate"] = cat_robust["minimax"] - cat_robust["approximate"]
        out["gap_approximate_undefended"] = cat_robust["approximate"] - cat_robust["undefended"]
        best_undef = max(clean[n] for n in cats["undefended"])
        others = [clean[n] for c, ns in cats.items() if c != "undefended" for n in ns]
        out["undefended_clean_highest"] = bool(best_undef >= max(others))
    if "trades_1e4" in models:
        pred = np.asarray(models["trades_1e4"].predict(test.x))
        counts = np.bincount(pred, minlength=test.num_classes)
        out["collapse_fraction"] = float(counts.max() / len(pred))
        out["collapse_class"] = int(np.argmax(counts))
    return out


def inversion_study(cfg: BenchmarkConfig, models: dict[str, Classifier], out_dir=None, targets=None,
            threads: int | None = 1) -> tuple[PerturbationGrid, dict]:
    """Inversion grid over every target class and the configured seeds, plus per-model
    mean final target score, template cosine and displacement."""
    targets = list(range(cfg.num_classes)) if targets is None else list(targets)
    atk = AttackConfig(threat=ThreatModel(INF, INF, 0.0, 1.0), step_size=cfg.inversion_step,
                       iterations=cfg.inversion_iterations, random_init=False, seed=cfg.seed)
    grid = perturbation_grid(models, targets, cfg.inversion_seeds, atk, out_dir=out_dir,
                             side=cfg.side, threads=threads)
    stats = {n: {"mean_target_score": grid.mean_target_score(n),
                 "mean_template_cosine": grid.mean_template_cosine(n),
                 "mean_displacement": grid.mean_displacement(n)} for n in grid.models}
    return grid, stats


@dataclass
class GaussianConfig:
    mu: tuple = (0.3, 0.3)
    sigma: float = 0.3
    spurious_strength: float = 0.08
    spurious_noise: float = 0.01
    n: int = 2000
    data_seed: int = 0
    epsilon: float = 0.1
    p: float = INF
    epochs: int = 15
    lr_max: float = 0.05
    seed: int = 0


def two_gaussian_orientation(cfg: GaussianConfig = GaussianConfig()) -> dict:
    """Train a linear classifier with and without adversarial training and report
    ``|cos(w, mu_1 - mu_2)|`` against the robust mean difference (spurious axis 0).

    ``w`` is the difference of the two output columns, the normal of the boundary.
    """
    data = gen_two_gaussians(np.asarray(cfg.mu), cfg.sigma, cfg.spurious_strength, cfg.n,
                             seed=cfg.data_seed, spurious_noise=cfg.spurious_noise)
    threat = ThreatModel(cfg.p, cfg.epsilon, data.low, data.high)
    ref = np.concatenate([2 * np.asarray(cfg.mu, dtype=np.float64), [0.0]])
    out = {}
    for kind in ("standard", "madry"):
        dc = DefenseConfig(kind=kind, threat=threat, arch={"kind": "linear"}, epochs=cfg.epochs,
                           seed=cfg.seed, optimizer=OptimizerConfig(lr_max=cfg.lr_max),
                           inner_step=cfg.epsilon / 4, inner_iterations=10)
        model, _ = train(data, dc)
        w = model.params["W_out"][:, 0] - model.params["W_out"][:, 1]
        cos = float(abs(w @ ref) / (np.linalg.norm(w) * np.linalg.norm(ref)))
        out[kind] = {"cosine": cos, "accuracy": model.accuracy(data.x, data.y),
                     "spurious_weight_share": float(abs(w[-1]) / np.linalg.norm(w)), "w": w.tolist()}
    return out

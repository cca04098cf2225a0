"""Training programs: standard, adversarial (PGD and FGSM), TRADES, input-gradient
and FIM penalties, and defensive distillation.

Every program reports its objective as an orientation term (the loss that places
the decision boundary) plus a smoothness term (whatever else it adds).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, input_gradient, pgd_attack, random_init, trades_inner_attack
from .autodiff import Tensor
from .data import Dataset, augment
from .fim import fim_penalty_graph
from .lp import INF, ThreatModel, dual_order, lp_norm, project, steepest_direction
from .models import Classifier, init_classifier

__all__ = [
    "KINDS",
    "OptimizerConfig",
    "DefenseConfig",
    "TrainingReport",
    "TrainingDiverged",
    "cyclic_lr",
    "train",
    "train_standard",
    "train_madry",
    "train_fgsm",
    "train_trades",
    "train_grad_penalty",
    "train_fim_penalty",
    "distill",
    "objective_terms",
    "grad_penalty_identity_gap",
]

KINDS = ("standard", "madry", "fgsm", "trades", "grad_penalty", "fim_penalty", "distill")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class OptimizerConfig:
    lr_max: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 2e-4
    schedule: str = "cyclic"


@dataclass
class DefenseConfig:
    kind: str = "standard"
    beta: float = 0.0
    threat: ThreatModel = field(default_factory=ThreatModel)
    tau: float = 1.0
    arch: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [64, 64]})
    epochs: int = 15
    batch_size: int = 128
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    # inner maximization (madry, fgsm, trades)
    inner_step: float = 2 / 255
    inner_iterations: int = 7
    inner_random_init: bool = True
    noise_scale: float = 0.1
    fgsm_step_factor: float = 1.0
    # penalties
    q: float | None = None
    n_projections: int = 1
    probe: str = "sphere"
    # fgsm early stopping on a fixed probe batch
    early_stop: bool = True
    early_stop_drop: float = 0.5
    probe_size: int = 128
    probe_iterations: int = 10
    augment: bool = False
    # the objective is multiplied by tau**tau_loss_power so gradient magnitudes
    # do not vanish at high temperature
    tau_loss_power: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind: unknown defense {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.beta >= 0:
            raise ValueError(f"beta: must be non-negative, got {self.beta}")
        if not self.tau > 0:
            raise ValueError(f"tau: must be positive, got {self.tau}")
        if self.epochs < 0:
            raise ValueError(f"epochs: must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be positive, got {self.batch_size}")
        if self.n_projections < 1:
            raise ValueError(f"n_projections: must be >= 1, got {self.n_projections}")
        if self.kind in ("madry", "fgsm", "trades") and self.threat.epsilon == INF:
            raise ValueError("threat.epsilon: adversarial training needs a finite budget")

    @property
    def penalty_order(self) -> float:
        return self.q if self.q is not None else dual_order(self.threat.p)

    @property
    def effective_weight(self) -> float:
        """Multiplier actually applied to the smoothness term."""
        eps = self.threat.epsilon
        if self.kind == "grad_penalty":
            return self.beta * eps
        if self.kind == "fim_penalty":
            return self.beta * eps * eps / 2.0
        if self.kind == "trades":
            return self.beta
        return 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threat"] = self.threat.to_dict()
        d["q"] = "inf" if self.q == INF else self.q
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"defense: unknown field(s) {', '.join(sorted(unknown))}")
        if "threat" in d:
            d["threat"] = ThreatModel.from_dict(d["threat"])
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if d.get("q") == "inf":
            d["q"] = INF
        return cls(**d)

    def inner_attack(self, seed: int) -> AttackConfig:
        return AttackConfig(threat=self.threat, step_size=self.inner_step,
                            iterations=max(1, self.inner_iterations), restarts=1,
                            random_init=self.inner_random_init, seed=seed,
                            noise_scale=self.noise_scale)


@dataclass
class TrainingReport:
    kind: str
    effective_weight: float
    rows: list = field(default_factory=list)
    early_stopped: bool = False
    early_stop_epoch: int | None = None
    restored_epoch: int | None = None
    notes: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["epoch", "lr", "loss_total", "loss_orientation", "loss_smoothness",
                "decomposition_gap", "clean_accuracy", "robust_probe", "penalty_identity_gap",
                "early_stop"]
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c, "") for c in cols})


def cyclic_lr(t: float, epochs: int, lr_max: float) -> float:
    """Triangular schedule: 0 -> lr_max over the first floor(epochs/2) epochs, then -> 0."""
    if epochs <= 0:
        return 0.0
    peak = epochs // 2
    if peak == 0:
        return float(np.interp(t, [0, epochs], [lr_max, 0.0]))
    return float(np.interp(t, [0, peak, epochs], [0.0, lr_max, 0.0]))


def _ce_rows(logp: Tensor, y: np.ndarray) -> Tensor:
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    onehot[np.arange(len(y)), y] = 1.0
    return -(logp * Tensor(onehot)).sum(axis=1)


def _qnorm_rows(g: Tensor, q: float) -> Tensor:
    if q == 1:
        return g.abs().sum(axis=1)
    if q == 2:
        return ((g * g).sum(axis=1) + 1e-30) ** 0.5
    if q == INF:
        raise ValueError("q = inf is not supported for the gradient penalty")
    return ((g.abs() + 1e-30) ** q).sum(axis=1) ** (1.0 / q)


def _fgsm_adv(model: Classifier, x, y, cfg: DefenseConfig, seed: int, ids) -> np.ndarray:
    threat = cfg.threat
    if threat.epsilon == 0:
        return x.copy()
    if cfg.inner_random_init:
        delta = np.stack([random_init(np.random.default_rng([seed, int(i)]), (1, x.shape[1]), threat)[0]
                          for i in ids])
        x1 = project(x + delta, x, threat)
    else:
        x1 = x
    g, _ = input_gradient(model, x1, y)
    step = cfg.fgsm_step_factor * threat.epsilon
    return project(x1 + step * steepest_direction(g, threat.p), x, threat)


def objective_terms(model: Classifier, P: dict, x: np.ndarray, y: np.ndarray, cfg: DefenseConfig,
                    step_seed: int, ids=None, teacher_soft: np.ndarray | None = None):
    """Build the training objective for one batch.

    Returns ``(total, orientation, smoothness)``: a scalar Tensor to differentiate
    and the two reported terms as floats. ``model.params`` must hold the current
    values of ``P`` (attacks run on the numpy model).
    """
    kind = cfg.kind
    ids = np.arange(len(x)) if ids is None else ids
    dt = P["W_out"].dtype
    xt = Tensor(x.astype(dt, copy=False))
    w_tau = model.tau**cfg.tau_loss_power if model.tau != 1.0 else 1.0
    if kind == "standard":
        total = _ce_rows(model.log_scores_graph(xt, P), y).mean() * w_tau
        return total, float(total.data), 0.0
    if kind == "distill":
        soft = Tensor(teacher_soft.astype(dt, copy=False))
        total = -(soft * model.log_scores_graph(xt, P)).sum(axis=1).mean() * w_tau
        return total, float(total.data), 0.0
    if kind in ("madry", "fgsm"):
        if kind == "madry":
            x_adv = pgd_attack(model, x, y, cfg.inner_attack(step_seed), sample_ids=ids).x
        else:
            x_adv = _fgsm_adv(model, x, y, cfg, step_seed, ids)
        total = _ce_rows(model.log_scores_graph(Tensor(x_adv.astype(dt, copy=False)), P), y).mean()
        with ad.no_grad():
            clean = float(_ce_rows(model.log_scores_graph(xt, P), y).mean().data)
        return total, clean, float(total.data) - clean
    if kind == "trades":
        logp = model.log_scores_graph(xt, P)
        orient = _ce_rows(logp, y).mean()
        if cfg.beta == 0:
            return orient, float(orient.data), 0.0
        x_adv = trades_inner_attack(model, x, cfg.inner_attack(step_seed), sample_ids=ids)
        logq = model.log_scores_graph(Tensor(x_adv.astype(dt, copy=False)), P)
        kl = (logp.exp() * (logp - logq)).sum(axis=1).mean()
        smooth = kl * cfg.beta
        return orient + smooth, float(orient.data), float(smooth.data)
    if kind in ("grad_penalty", "fim_penalty"):
        w = cfg.effective_weight
        if w == 0:
            total = _ce_rows(model.log_scores_graph(xt, P), y).mean()
            return total, float(total.data), 0.0
        xg = Tensor(xt.data, requires_grad=True)
        rows = _ce_rows(model.log_scores_graph(xg, P), y)
        orient = rows.mean()
        if kind == "grad_penalty":
            (gx,) = ad.grad(rows.sum(), [xg], create_graph=True)
            pen = _qnorm_rows(gx, cfg.penalty_order).mean()
        else:
            rng = np.random.default_rng([step_seed, 7])
            pen = fim_penalty_graph(model, xg, P, rng=rng, n_projections=cfg.n_projections,
                                    probe=cfg.probe).mean()
        smooth = pen * w
        return orient + smooth, float(orient.data), float(smooth.data)
    raise ValueError(f"unknown defense kind {kind!r}")


def grad_penalty_identity_gap(model: Classifier, x: np.ndarray, y: np.ndarray, eps: float, q: float) -> float:
    """Largest relative gap between ``eps ||∇x L(e_y, f)||_q`` and
    ``(eps / f[y]) ||∇x f[y]||_q`` over the rows of a batch."""
    g_loss, _ = input_gradient(model, x, y)
    xt = Tensor(x, requires_grad=True)
    f = model.scores_graph(xt)
    onehot = np.zeros(f.shape)
    onehot[np.arange(len(y)), y] = 1.0
    (g_f,) = ad.grad((f * Tensor(onehot)).sum(), [xt])
    fy = f.data[np.arange(len(y)), y]
    a = eps * lp_norm(g_loss, q, axis=1)
    b = eps / fy * lp_norm(g_f.data, q, axis=1)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)))


def _robust_probe(model: Classifier, x, y, cfg: DefenseConfig, seed: int) -> float:
    atk = AttackConfig(threat=cfg.threat, step_size=cfg.inner_step, iterations=cfg.probe_iterations,
                       restarts=1, random_init=True, seed=seed)
    res = pgd_attack(model, x, y, atk)
    return float(np.mean(~res.success))


def _param_norms(model: Classifier) -> dict:
    return {k: float(np.linalg.norm(v)) for k, v in model.params.items()}


def train(data: Dataset, config: DefenseConfig, model: Classifier | None = None,
          teacher: Classifier | None = None) -> tuple[Classifier, TrainingReport]:
    """Minibatch SGD (momentum, weight decay, cyclic LR) on the configured objective.

    Deterministic for a fixed config: batch order, augmentation, attack starts and
    penalty probes all come from generators seeded by ``config.seed`` and the step.
    For ``kind="distill"`` a teacher is trained at ``config.tau`` with the standard
    program unless one is passed in.
    """
    cfg = config
    dt = np.dtype(cfg.dtype)
    if cfg.kind == "distill" and teacher is None:
        tcfg = DefenseConfig(**{**cfg.__dict__, "kind": "standard"})
        teacher, _ = train(data, tcfg)
    if model is None:
        model = init_classifier(cfg.arch, data.input_dim, data.num_classes, seed=cfg.seed,
                                tau=cfg.tau, dtype=dt)
    report = TrainingReport(cfg.kind, cfg.effective_weight)
    if teacher is not None:
        report.notes["teacher_accuracy"] = teacher.accuracy(data.x, data.y)
    n = len(data)
    if cfg.epochs == 0 or n == 0:
        return model, report

    X = data.x.astype(dt)
    Y = data.y
    soft_all = None
    if cfg.kind == "distill":
        soft_all = teacher.scores(data.x, tau=cfg.tau)
    data_rng = np.random.default_rng([cfg.seed, 0])
    n_batches = math.ceil(n / cfg.batch_size)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    opt = cfg.optimizer

    probe_x = probe_y = None
    best = None
    if cfg.kind == "fgsm" and cfg.early_stop:
        probe_x, probe_y = data.x[: cfg.probe_size], data.y[: cfg.probe_size]
        best = (-1.0, model.copy(), -1)
    running_max = -1.0

    step = 0
    last_finite = None
    for epoch in range(cfg.epochs):
        perm = data_rng.permutation(n)
        sums = {"total": 0.0, "orient": 0.0, "smooth": 0.0}
        gap_max = 0.0
        lr = 0.0
        for b in range(n_batches):
            ids = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb = X[ids], Y[ids]
            if cfg.augment and data.side:
                xb = augment(xb, data.side, np.random.default_rng([cfg.seed, 2, epoch, b])).astype(dt)
            P = model.param_tensors()
            total, orient, smooth = objective_terms(
                model, P, xb, yb, cfg, step_seed=cfg.seed * 1_000_003 + step, ids=ids,
                teacher_soft=None if soft_all is None else soft_all[ids])
            value = float(total.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"{cfg.kind}: non-finite loss {value} at epoch {epoch}, batch {b} "
                    f"(last finite {last_finite}); parameter norms {_param_norms(model)}")
            last_finite = value
            grads = ad.grad(total, list(P.values()))
            if opt.schedule == "cyclic":
                lr = cyclic_lr(epoch + (b + 1) / n_batches, cfg.epochs, opt.lr_max)
            else:
                lr = opt.lr_max
            for (k, _), g in zip(P.items(), grads):
                d_p = g.data + opt.weight_decay * model.params[k]
                velocity[k] = opt.momentum * velocity[k] + d_p
                model.params[k] = model.params[k] - lr * velocity[k]
            sums["total"] += value
            sums["orient"] += orient
            sums["smooth"] += smooth
            gap_max = max(gap_max, abs(value - (orient + smooth)))
            step += 1
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "loss_total": sums["total"] / n_batches,
            "loss_orientation": sums["orient"] / n_batches,
            "loss_smoothness": sums["smooth"] / n_batches,
            "decomposition_gap": gap_max,
            "clean_accuracy": model.accuracy(data.x, data.y),
        }
        if cfg.kind == "grad_penalty" and cfg.threat.epsilon > 0:
            xb, yb = data.x[: cfg.probe_size], data.y[: cfg.probe_size]
            row["penalty_identity_gap"] = grad_penalty_identity_gap(
                model, xb, yb, cfg.threat.epsilon, cfg.penalty_order)
        if probe_x is not None:
            acc = _robust_probe(model, probe_x, probe_y, cfg, seed=cfg.seed + 1)
            row["robust_probe"] = acc
            if acc > best[0]:
                best = (acc, model.copy(), epoch + 1)
            running_max = max(running_max, acc)
            # the guard arms once the probe is two standard errors above chance
            c = 1.0 / data.num_classes
            armed = running_max > c + 2.0 * math.sqrt(c * (1.0 - c) / len(probe_y))
            if armed and acc < (1.0 - cfg.early_stop_drop) * running_max:
                row["early_stop"] = True
                report.rows.append(row)
                report.early_stopped = True
                report.early_stop_epoch = epoch + 1
                report.restored_epoch = best[2]
                model.params = best[1].params
                break
        report.rows.append(row)
    model.meta.update({"kind": cfg.kind, "train_seed": cfg.seed})
    return model, report


def train_standard(data: Dataset, config: DefenseConfig):
    return train(data, DefenseConfig(**{**config.__dict__, "kind": "standard"}))


def train_madry(data: Dataset, config: DefenseConfig):
    return train(data, DefenseConfig(**{**config.__dict__, "kind": "madry"}))


def train_fgsm(data: Dataset, config: DefenseConfig):
    return train(data, DefenseConfig(**{**config.__dict__, "kind": "fgsm"}))


def train_trades(data: Dataset, config: DefenseConfig):
    return train(data, DefenseConfig(**{**config.__dict__, "kind": "trades"}))


def train_grad_penalty(data: Dataset, config: DefenseConfig):
    return train(data, DefenseConfig(**{**config.__dict__, "kind": "grad_penalty"}))


def train_fim_penalty(data: Dataset, config: DefenseConfig):
    return train(data, DefenseConfig(**{**config.__dict__, "kind": "fim_penalty"}))


def distill(teacher: Classifier, data: Dataset, tau: float, config: DefenseConfig):
    """Train a student on the teacher's temperature-``tau`` scores at the same temperature."""
    cfg = DefenseConfig(**{**config.__dict__, "kind": "distill", "tau": tau})
    return train(data, cfg, teacher=teacher)

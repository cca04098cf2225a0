"""Gradient attacks: lp FGSM, multi-restart PGD, the TRADES inner maximization and
model inversion as an unbounded targeted attack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lp import INF, ThreatModel, lp_norm, project, steepest_direction
from .models import Classifier

__all__ = [
    "AttackConfig",
    "AttackResult",
    "InversionResult",
    "input_gradient",
    "per_sample_loss",
    "random_init",
    "fgsm_perturb",
    "pgd_attack",
    "trades_inner_attack",
    "model_inversion",
    "inversion_step_directions",
]


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of the iterative attack.

    ``step_size`` is the magnitude of alpha. Targeted attacks descend the loss
    toward the target label instead of using a negative alpha; the two are the same
    update.
    """

    threat: ThreatModel = field(default_factory=ThreatModel)
    step_size: float = 2 / 255
    iterations: int = 50
    restarts: int = 1
    random_init: bool = True
    target: int | None = None
    seed: int = 0
    noise_scale: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def targeted(self) -> bool:
        return self.target is not None

    def to_dict(self) -> dict:
        return {"threat": self.threat.to_dict(), "step_size": self.step_size,
                "iterations": self.iterations, "restarts": self.restarts,
                "random_init": self.random_init, "target": self.target, "seed": self.seed,
                "noise_scale": self.noise_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        threat = ThreatModel.from_dict(d.pop("threat", {}))
        return cls(threat=threat, **d)


@dataclass
class AttackResult:
    x: np.ndarray
    success: np.ndarray
    restart_success: np.ndarray
    final_loss: np.ndarray
    restarts_used: np.ndarray
    iterations_used: int
    loss_trajectory: list = field(default_factory=list)
    sign_convention: str = "ascent"


def per_sample_loss(model: Classifier, x: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy ``L(e_y, f(x))`` for each row."""
    logp = model.log_scores_graph(x)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logp * Tensor(onehot)).sum(axis=1)


def input_gradient(model: Classifier, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``∇x L(e_y, f(x))`` and the per-row losses."""
    xt = Tensor(x, requires_grad=True)
    loss = per_sample_loss(model, xt, labels)
    (g,) = ad.grad(loss.sum(), [xt])
    return g.data, loss.data


def random_init(rng, shape, threat: ThreatModel) -> np.ndarray:
    """Random offset inside the eps-ball.

    Uniform per coordinate for p = inf; for other p a Gaussian direction scaled
    to the lp sphere times ``u**(1/d)`` (exactly uniform in the ball for p = 2).
    """
    eps = threat.epsilon
    n, d = shape
    if eps == 0:
        return np.zeros(shape)
    if threat.p == INF:
        return rng.uniform(-eps, eps, size=shape)
    g = rng.standard_normal(shape)
    g /= np.maximum(lp_norm(g, threat.p, axis=1), 1e-300)[:, None]
    r = rng.random(n) ** (1.0 / d)
    return g * (eps * r)[:, None]


def _rng_for(seed: int, sample_id: int, restart: int):
    return np.random.default_rng([seed, sample_id, restart])


def _init_batch(seed, ids, restart, d, threat):
    return np.stack([random_init(_rng_for(seed, int(i), restart), (1, d), threat)[0] for i in ids])


def fgsm_perturb(model: Classifier, x, y, threat: ThreatModel):
    """One dual-norm step of size eps from ``x``, then clamped to the pixel box.

    Returns ``(x_adv, clamped, degenerate)`` where ``clamped`` marks rows the box
    clamp changed and ``degenerate`` rows whose gradient was zero.
    """
    if threat.epsilon == INF:
        raise ValueError("fgsm_perturb needs a finite epsilon")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    g, _ = input_gradient(model, x, y)
    degenerate = ~np.any(g != 0, axis=1)
    raw = x + threat.epsilon * steepest_direction(g, threat.p)
    out = np.clip(raw, threat.low, threat.high)
    clamped = np.any(out != raw, axis=1)
    return out, clamped, degenerate


def _success(model, x, labels, targeted):
    pred = model.predict(x)
    pred = np.atleast_1d(pred)
    return pred == labels if targeted else pred != labels


def pgd_attack(model: Classifier, x0, y_or_target, config: AttackConfig,
               sample_ids=None, x_init=None, targeted: bool | None = None) -> AttackResult:
    """Multi-restart projected steepest ascent inside the threat set.

    Untargeted runs ascend ``L(e_y, f(x))`` and succeed once the prediction leaves
    ``y``. Targeted runs descend ``L(e_t, f(x))`` and succeed when the prediction
    equals t; the target is ``config.target`` or, with ``targeted=True``, the per-row
    labels in ``y_or_target``. Rows stop restarting after their first success; across
    restarts the best row is kept by (success, loss). Random starts are drawn from a
    per-(seed, sample, restart) generator, so results do not depend on batching.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, d = x0.shape
    threat = config.threat
    targeted = config.targeted if targeted is None else targeted
    if config.target is not None:
        labels = np.full(n, config.target, dtype=np.int64)
    else:
        labels = np.atleast_1d(np.asarray(y_or_target, dtype=np.int64))
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    sign = -1.0 if targeted else 1.0

    best_x = x0.copy()
    _, best_loss = input_gradient(model, x0, labels)
    best_succ = _success(model, x0, labels, targeted)
    restart_success = np.zeros((n, config.restarts), dtype=bool)
    restarts_used = np.zeros(n, dtype=np.int64)
    trajectory = []
    if threat.epsilon == 0:
        return AttackResult(best_x, best_succ, restart_success, best_loss, restarts_used, 0, [],
                            "descent" if targeted else "ascent")

    active = ~best_succ
    for r in range(config.restarts):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        restarts_used[idx] += 1
        xs0 = x0[idx]
        lab = labels[idx]
        if x_init is not None and r == 0:
            x = project(np.asarray(x_init, dtype=np.float64)[idx], xs0, threat)
        elif config.random_init:
            x = project(xs0 + _init_batch(config.seed, ids[idx], r, d, threat), xs0, threat)
        else:
            x = xs0.copy()
        traj = []
        for _ in range(config.iterations):
            g, loss = input_gradient(model, x, lab)
            traj.append(float(np.mean(loss)))
            x = project(x + sign * config.step_size * steepest_direction(g, threat.p), xs0, threat)
        _, loss = input_gradient(model, x, lab)
        traj.append(float(np.mean(loss)))
        trajectory.append(traj)
        succ = _success(model, x, lab, targeted)
        restart_success[idx, r] = succ
        # targeted attacks minimize their loss, so compare the negated value
        score = loss if not targeted else -loss
        prev = best_loss[idx] if not targeted else -best_loss[idx]
        better = (succ & ~best_succ[idx]) | ((succ == best_succ[idx]) & (score > prev))
        upd = idx[better]
        best_x[upd] = x[better]
        best_loss[upd] = loss[better]
        best_succ[upd] = succ[better]
        active[idx[succ]] = False
    return AttackResult(best_x, best_succ, restart_success, best_loss, restarts_used,
                        config.iterations, trajectory, "descent" if targeted else "ascent")


def _kl_rows(p_logp: np.ndarray, logq: Tensor) -> Tensor:
    """Per-row KL(p || q) with p constant (given as log-probabilities)."""
    p = np.exp(p_logp)
    return (Tensor(p * p_logp) - Tensor(p) * logq).sum(axis=1)


def trades_inner_attack(model: Classifier, x0, config: AttackConfig, sample_ids=None,
                        params=None) -> np.ndarray:
    """Maximize ``KL(f(x0) || f(x))`` over the threat set.

    The iterate starts at ``x0 + xi`` with xi uniform in
    ``[-noise_scale*eps, noise_scale*eps]`` per coordinate, which keeps the first
    gradient away from the KL minimum at ``x0``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, d = x0.shape
    threat = config.threat
    if threat.epsilon == 0:
        return x0.copy()
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    with ad.no_grad():
        p_logp = model.log_scores_graph(Tensor(x0), params).data
    s = config.noise_scale * (threat.epsilon if threat.epsilon != INF else 1.0)
    xi = np.stack([_rng_for(config.seed, int(i), 0).uniform(-s, s, size=d) for i in ids])
    x = project(x0 + xi, x0, threat)
    for _ in range(config.iterations):
        xt = Tensor(x, requires_grad=True)
        kl = _kl_rows(p_logp, model.log_scores_graph(xt, params))
        (g,) = ad.grad(kl.sum(), [xt])
        x = project(x + config.step_size * steepest_direction(g.data, threat.p), x0, threat)
    return x


@dataclass
class InversionResult:
    x: np.ndarray
    start: np.ndarray
    target_score: np.ndarray
    start_score: np.ndarray
    iterations: int


def inversion_step_directions(model: Classifier, x: np.ndarray, targets: np.ndarray, objective: str):
    """Update direction for each row under one of the two inversion objectives.

    ``"loss"`` steps along ``-sign(∇x[-log f(x)[k]])`` (descent on the targeted
    loss); ``"score"`` steps along ``sign(∇x f(x)[k])`` (ascent on the score).
    """
    xt = Tensor(x, requires_grad=True)
    logp = model.log_scores_graph(xt)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(targets)), targets] = 1.0
    if objective == "loss":
        loss = -(logp * Tensor(onehot)).sum()
        (g,) = ad.grad(loss, [xt])
        return -np.sign(g.data)
    if objective == "score":
        score = (logp.exp() * Tensor(onehot)).sum()
        (g,) = ad.grad(score, [xt])
        return np.sign(g.data)
    raise ValueError(f"unknown inversion objective {objective!r}")


def model_inversion(model: Classifier, class_k, config: AttackConfig, x_start=None,
                    objective: str = "loss", record_every: int = 0):
    """Targeted, box-only ascent of the class-k score from noise.

    ``class_k`` may be an int or one target per row of ``x_start``. Without
    ``x_start`` one uniform-noise image is drawn from ``config.seed``.
    """
    threat = config.threat
    if threat.epsilon != INF:
        raise ValueError("model_inversion requires an unbounded budget (epsilon = inf)")
    if x_start is None:
        rng = np.random.default_rng(config.seed)
        x_start = rng.uniform(threat.low, threat.high, size=(1, model.input_dim))
    x_start = np.atleast_2d(np.asarray(x_start, dtype=np.float64))
    targets = np.broadcast_to(np.atleast_1d(np.asarray(class_k, dtype=np.int64)), (len(x_start),)).copy()
    if np.any(targets < 0) or np.any(targets >= model.num_classes):
        raise ValueError(f"target class out of range for {model.num_classes} classes")
    x = x_start.copy()
    snapshots = []
    for t in range(config.iterations):
        if threat.p == INF:
            step = inversion_step_directions(model, x, targets, objective)
        else:
            xt = Tensor(x, requires_grad=True)
            (g,) = ad.grad(per_sample_loss(model, xt, targets).sum(), [xt])
            step = -steepest_direction(g.data, threat.p)
        x = np.clip(x + config.step_size * step, threat.low, threat.high)
        if record_every and (t + 1) % record_every == 0:
            snapshots.append(x.copy())
    rows = np.arange(len(x))
    res = InversionResult(x, x_start, model.scores(x)[rows, targets],
                          model.scores(x_start)[rows, targets], config.iterations)
    return (res, snapshots) if record_every else res

"""Fisher information in input space, its Jacobian bounds, and Lipschitz certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lp import entrywise_norm, induced_norm_p_to_2
from .models import Classifier

__all__ = [
    "FimPair",
    "FimBoundReport",
    "LipschitzReport",
    "Region",
    "fisher_output",
    "jacobian_exact",
    "fisher_input",
    "kl_and_entropy",
    "kl_taylor_residual",
    "frobenius_fim_penalty_exact",
    "frobenius_fim_penalty_estimate",
    "fim_penalty_graph",
    "sample_probes",
    "fim_bound_report",
    "fim_bounds_from_jacobian",
    "lipschitz_certificate_check",
]


def fisher_output(scores) -> np.ndarray:
    """Output-space FIM of the cross-entropy loss, ``diag(1 / f)``."""
    f = np.asarray(scores, dtype=np.float64)
    if np.any(f <= 0) or (f.size > 1 and np.any(f >= 1)):
        raise ValueError("fisher_output: scores must lie in the open simplex")
    return np.diag(1.0 / f)


def _point(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def jacobian_exact(model: Classifier, x) -> np.ndarray:
    """K×d Jacobian of the scores ``f(x)``; row k is one backward pass of ``f(x)[k]``."""
    return ad.jacobian(lambda t: model.scores_graph(t.reshape(1, -1)).reshape(-1), _point(x))


def _log_score_gradients(model: Classifier, x) -> np.ndarray:
    """Rows ``∇x log f(x)[y]`` for every y, i.e. minus the per-label loss gradients."""
    return ad.jacobian(lambda t: model.log_scores_graph(t.reshape(1, -1)).reshape(-1), _point(x))


@dataclass
class FimPair:
    f: np.ndarray
    F_f: np.ndarray
    J: np.ndarray
    F_x: np.ndarray
    F_x_expectation: np.ndarray

    @property
    def route_gap(self) -> float:
        """Relative Frobenius distance between the two constructions of F_x."""
        den = max(np.linalg.norm(self.F_x), 1e-300)
        return float(np.linalg.norm(self.F_x - self.F_x_expectation) / den) if np.any(self.F_x) else float(
            np.linalg.norm(self.F_x_expectation))


def fisher_input(model: Classifier, x) -> FimPair:
    """Input-space FIM by the chain rule ``Jᵀ F_f J`` and by its expectation definition
    ``Σ_y f[y] (∇x L(e_y, f))(∇x L(e_y, f))ᵀ``."""
    x = _point(x)
    f = model.scores(x)
    J = jacobian_exact(model, x)
    F_f = fisher_output(f)
    chain = J.T @ F_f @ J
    G = -_log_score_gradients(model, x)
    expect = (G.T * f) @ G
    return FimPair(f, F_f, J, chain, expect)


def kl_and_entropy(p, q) -> tuple[float, float, float]:
    """``(KL(p||q), H(p), L(p, q))`` where L is cross-entropy; L = H + KL."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(p <= 0) or np.any(q <= 0):
        raise ValueError("kl_and_entropy: distributions must lie in the open simplex")
    logp, logq = np.log(p), np.log(q)
    kl = float(np.sum(p * (logp - logq)))
    h = float(-np.sum(p * logp))
    ce = float(-np.sum(p * logq))
    return kl, h, ce


def kl_taylor_residual(model: Classifier, x, delta) -> tuple[float, float, float]:
    """``(KL(f(x) || f(x+δ)), ½ δᵀ F_x δ, difference)``."""
    x = _point(x)
    delta = _point(delta)
    if not np.any(delta):
        return 0.0, 0.0, 0.0
    z0 = model.logits(x) / model.tau
    z1 = model.logits(x + delta) / model.tau
    lp0 = z0 - _lse(z0)
    lp1 = z1 - _lse(z1)
    kl = float(np.sum(np.exp(lp0) * (lp0 - lp1)))
    Fx = fisher_input(model, x).F_x
    quad = float(0.5 * delta @ Fx @ delta)
    return kl, quad, kl - quad


def _lse(z):
    m = np.max(z)
    return m + math.log(np.sum(np.exp(z - m)))


def frobenius_fim_penalty_exact(model: Classifier, x, route: str = "sum") -> float:
    """``||F_f^{1/2} J(x)||_F²`` from the exact Jacobian.

    ``route="sum"`` evaluates Σ_k ||∇x f[k]||² / f[k]; ``route="trace"`` evaluates
    tr(F_f J Jᵀ).
    """
    x = _point(x)
    f = model.scores(x)
    J = jacobian_exact(model, x)
    if route == "sum":
        return float(np.sum(np.sum(J * J, axis=1) / f))
    if route == "trace":
        return float(np.trace(fisher_output(f) @ J @ J.T))
    raise ValueError(f"unknown route {route!r}")


def sample_probes(rng, n: int, k: int, probe: str = "sphere") -> np.ndarray:
    """``n`` probe vectors in R^k with E[v vᵀ] = I after the returned scaling.

    Sphere probes are uniform unit vectors multiplied by sqrt(k); Rademacher probes
    have ±1 entries.
    """
    if probe == "sphere":
        v = rng.standard_normal((n, k))
        return v / np.linalg.norm(v, axis=1, keepdims=True) * math.sqrt(k)
    if probe == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=(n, k))
    raise ValueError(f"unknown probe distribution {probe!r}")


def fim_penalty_graph(model: Classifier, x: Tensor, params=None, probes: np.ndarray | None = None,
                      rng=None, n_projections: int = 1, probe: str = "sphere") -> Tensor:
    """Per-sample random-projection estimate of ``||F_f^{1/2} J(x)||_F²`` as a graph.

    Uses ``F_f^{1/2} J = J_s`` with ``s = 2 sqrt(f)``, so each probe costs one
    vector-Jacobian product ``J_sᵀ v`` and stays differentiable in the parameters.
    ``probes`` has shape (n_projections, n, K) when given.
    """
    n, K = x.shape[0], model.num_classes
    xg = x if x.requires_grad else Tensor(x.data, requires_grad=True)
    s = (model.log_scores_graph(xg, params) * 0.5).exp() * 2.0
    if probes is None:
        probes = np.stack([sample_probes(rng, n, K, probe) for _ in range(n_projections)])
    total = None
    for v in probes:
        (jv,) = ad.grad((s * Tensor(v)).sum(), [xg], create_graph=True)
        term = (jv * jv).sum(axis=1)
        total = term if total is None else total + term
    return total * (1.0 / len(probes))


def frobenius_fim_penalty_estimate(model: Classifier, x, n_projections: int = 1, seed: int = 0,
                                   probe: str = "sphere", chunk: int = 1024) -> float:
    """Unbiased random-projection estimate of ``||F_f^{1/2} J(x)||_F²`` at one point."""
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    rng = np.random.default_rng(seed)
    x = _point(x)
    vals = []
    done = 0
    while done < n_projections:
        m = min(chunk, n_projections - done)
        # a batch of copies of x, one probe each: per-row VJPs are independent
        X = Tensor(np.tile(x, (m, 1)), requires_grad=True)
        V = sample_probes(rng, m, model.num_classes, probe)
        s = (model.log_scores_graph(X) * 0.5).exp() * 2.0
        (jv,) = ad.grad((s * Tensor(V)).sum(), [X])
        vals.append(np.sum(jv.data * jv.data, axis=1))
        done += m
    return float(np.mean(np.concatenate(vals)))


# -- bound chain ------------------------------------------------------------------------


@dataclass
class FimBoundReport:
    """Quantities of the FIM eigenvalue chain at one point.

    ``lower = ||Jᵀ F_f^{1/2}||²_{2,∞}``, ``eig = λ_max(F_x)``,
    ``induced = ||F_f^{1/2} J||²_{p→2}``, ``upper = ||Jᵀ F_f^{1/2}||²_F``,
    ``jacobian_frob = ||J||_F``. Each slack is right side minus left side,
    divided by max(1, |left|, |right|).
    """

    p: float
    lower: float
    eig: float
    induced: float
    upper: float
    jacobian_frob: float
    induced_converged: bool = True
    slacks: dict = field(default_factory=dict)

    def holds(self, tol: float = 1e-9) -> bool:
        return all(s >= -tol for s in self.slacks.values())

    def failed_links(self, tol: float = 1e-9) -> list[str]:
        return [k for k, s in self.slacks.items() if s < -tol]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = "inf" if self.p == math.inf else self.p
        return d


def _slack(left: float, right: float) -> float:
    return (right - left) / max(1.0, abs(left), abs(right))


def fim_bounds_from_jacobian(J: np.ndarray, f: np.ndarray, p: float, restarts: int = 16,
                            seed: int = 0) -> FimBoundReport:
    J = np.asarray(J, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    A = J / np.sqrt(f)[:, None]  # F_f^{1/2} J, K×d
    lower = entrywise_norm(A.T, math.inf, 2) ** 2
    Fx = A.T @ A
    eig = float(np.max(np.linalg.eigvalsh(Fx))) if Fx.size else 0.0
    ind = induced_norm_p_to_2(A, p, restarts=restarts, seed=seed)
    induced = ind.value**2
    upper = float(np.sum(A * A))
    jf = float(np.linalg.norm(J))
    slacks = {
        "lower<=eig": _slack(lower, eig),
        "eig<=induced": _slack(eig, induced),
        "induced<=upper": _slack(induced, upper),
        "frobenius_domination": _slack(jf, math.sqrt(upper)),
    }
    return FimBoundReport(p, lower, eig, induced, upper, jf, ind.converged, slacks)


def fim_bound_report(model: Classifier, x, p: float, restarts: int = 16, seed: int = 0) -> FimBoundReport:
    """Evaluate every term of the FIM eigenvalue chain for ``model`` at ``x``."""
    if p < 2:
        raise ValueError(f"fim_bound_report requires p >= 2, got {p}")
    x = _point(x)
    return fim_bounds_from_jacobian(jacobian_exact(model, x), model.scores(x), p, restarts, seed)


# -- Lipschitz certificate ----------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Axis-aligned box ``center ± radius``."""

    center: np.ndarray
    radius: float

    def sample(self, rng, n: int) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        return c + rng.uniform(-self.radius, self.radius, size=(n, c.size))


@dataclass
class LipschitzReport:
    L: float
    p: float
    applicable: bool
    premise_max: float
    premise_samples: int
    pairs: int
    max_ratio: float
    max_component_ratio: float
    max_logit_ratio: float | None
    max_logit_component_ratio: float | None
    holds: bool
    holds_components: bool
    holds_logits: bool | None
    violations: int

    @property
    def passed(self) -> bool:
        """True unless the premise held and a sampled pair broke the bound on f."""
        return (not self.applicable) or (self.holds and self.holds_components)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = "inf" if self.p == math.inf else self.p
        d["passed"] = self.passed
        return d


def lipschitz_certificate_check(model: Classifier, region: Region, L: float | None, p: float,
                                samples: int = 10_000, premise_samples: int = 64, seed: int = 0,
                                restarts: int = 4, rel_tol: float = 1e-6) -> LipschitzReport:
    """Sampled check of the FIM-Jacobian Lipschitz certificate on ``region``.

    The premise ``||F_f^{1/2} J(x)||_{p→2} <= L / sqrt(K)`` is evaluated at
    ``premise_samples`` points. With ``L=None`` the smallest L meeting the sampled
    premise is used. If the premise fails the report is marked inapplicable.
    Otherwise ``samples`` random pairs are tested for the L-Lipschitz ratio of f,
    the L/sqrt(K) ratio of every component, and (at tau = 1) the same two ratios
    for the logits.
    """
    rng = np.random.default_rng(seed)
    K = model.num_classes
    pts = region.sample(rng, premise_samples)
    prem = 0.0
    for i, x in enumerate(pts):
        J = jacobian_exact(model, x)
        A = J / np.sqrt(model.scores(x))[:, None]
        prem = max(prem, induced_norm_p_to_2(A, p, restarts=restarts, seed=seed + i).value)
    if L is None:
        L = math.sqrt(K) * prem
    applicable = prem <= (L / math.sqrt(K)) * (1 + 1e-12)

    xa, xb = region.sample(rng, samples), region.sample(rng, samples)
    dx = np.linalg.norm(xa - xb, axis=1)
    keep = dx > 0
    fa, fb = model.scores(xa), model.scores(xb)
    ratio = np.linalg.norm(fa - fb, axis=1)[keep] / dx[keep]
    comp = (np.abs(fa - fb)[keep] / dx[keep, None]).max(axis=1)
    max_ratio = float(ratio.max(initial=0.0))
    max_comp = float(comp.max(initial=0.0))
    bound = L * (1 + rel_tol)
    cbound = L / math.sqrt(K) * (1 + rel_tol)
    holds = max_ratio <= bound
    holds_c = max_comp <= cbound
    violations = int(np.sum(ratio > bound) + np.sum(comp > cbound))
    lr = lcr = None
    holds_l = None
    if model.tau == 1.0:
        ga, gb = model.logits(xa), model.logits(xb)
        lr = float((np.linalg.norm(ga - gb, axis=1)[keep] / dx[keep]).max(initial=0.0))
        lcr = float((np.abs(ga - gb)[keep] / dx[keep, None]).max(initial=0.0))
        holds_l = lr <= bound and lcr <= cbound
    return LipschitzReport(float(L), p, bool(applicable), float(prem), premise_samples,
                           int(keep.sum()), max_ratio, max_comp, lr, lcr,
                           bool(holds), bool(holds_c), holds_l, violations)

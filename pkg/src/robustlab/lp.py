"""lp-norm geometry: dual-norm maximizers, ball-and-box projections, matrix norms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "ThreatModel",
    "DualMaximizer",
    "InducedNorm",
    "lp_norm",
    "dual_order",
    "phi",
    "steepest_direction",
    "dual_norm_maximizer",
    "project",
    "induced_norm_p_to_2",
    "entrywise_norm",
]

INF = math.inf


@dataclass(frozen=True)
class ThreatModel:
    """An lp ball of radius ``epsilon`` around the clean point, intersected with the pixel box."""

    p: float = INF
    epsilon: float = 8 / 255
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError(f"norm order must be >= 1, got {self.p}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.low < self.high:
            raise ValueError(f"pixel box needs low < high, got [{self.low}, {self.high}]")

    def to_dict(self) -> dict:
        return {"p": _enc(self.p), "epsilon": _enc(self.epsilon), "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, d: dict) -> "ThreatModel":
        return cls(p=_dec(d.get("p", INF)), epsilon=_dec(d.get("epsilon", 8 / 255)),
                   low=float(d.get("low", 0.0)), high=float(d.get("high", 1.0)))


def _enc(v: float):
    return "inf" if v == INF else float(v)


def _dec(v) -> float:
    return INF if v in ("inf", "Infinity", None) else float(v)


def lp_norm(v, p: float, axis=None) -> np.ndarray | float:
    """lp norm of ``v`` (over all entries, or along ``axis``)."""
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    if p == INF:
        return np.max(a, axis=axis, initial=0.0)
    if p == 1:
        return np.sum(a, axis=axis)
    if p == 2:
        return np.sqrt(np.sum(a * a, axis=axis))
    # scale by the max entry to avoid overflow in |v|^p
    m = np.max(a, axis=axis, keepdims=True, initial=0.0)
    safe = np.where(m > 0, m, 1.0)
    s = np.sum((a / safe) ** p, axis=axis, keepdims=True) ** (1.0 / p) * m
    return np.squeeze(s, axis=axis) if axis is not None else float(s.reshape(()))


def dual_order(p: float) -> float:
    """Hölder conjugate q with 1/p + 1/q = 1."""
    if p == INF:
        return 1.0
    if p == 1:
        return INF
    return p / (p - 1.0)


def phi(v, q: float) -> np.ndarray:
    """Entrywise ``sign(v) * |v|**q`` with sign(0) = 0."""
    v = np.asarray(v, dtype=np.float64)
    if q == 0:
        return np.sign(v)
    return np.sign(v) * np.abs(v) ** q


def steepest_direction(g: np.ndarray, p: float) -> np.ndarray:
    """Row-wise maximizer of <u, g> over the unit lp ball (rows of a 2-D ``g``).

    Zero rows map to zero. For p = 1 the mass goes to the first coordinate of
    largest magnitude.
    """
    g = np.asarray(g, dtype=np.float64)
    flat = g.reshape(g.shape[0], -1) if g.ndim > 1 else g.reshape(1, -1)
    if p == INF:
        out = np.sign(flat)
    elif p == 1:
        out = np.zeros_like(flat)
        j = np.argmax(np.abs(flat), axis=1)
        rows = np.arange(flat.shape[0])
        out[rows, j] = np.sign(flat[rows, j])
    else:
        q = dual_order(p)
        scale = np.max(np.abs(flat), axis=1, keepdims=True)
        scale = np.where(scale > 0, scale, 1.0)
        u = phi(flat / scale, q - 1.0)
        n = lp_norm(u, p, axis=1)[:, None]
        out = np.divide(u, n, out=np.zeros_like(u), where=n > 0)
    return out.reshape(g.shape)


class DualMaximizer(NamedTuple):
    delta: np.ndarray
    value: float
    degenerate: bool


def dual_norm_maximizer(g, p: float, epsilon: float) -> DualMaximizer:
    """Closed-form solution of max <delta, g> subject to ||delta||_p = epsilon.

    Returns ``delta = epsilon * phi_{q-1}(g) / ||phi_{q-1}(g)||_p`` and its value
    ``epsilon * ||g||_q``. A zero gradient yields ``delta = 0`` flagged degenerate.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.any(g):
        return DualMaximizer(np.zeros_like(g), 0.0, True)
    delta = epsilon * steepest_direction(g.reshape(1, -1), p).reshape(g.shape)
    value = float(epsilon * lp_norm(g, dual_order(p)))
    return DualMaximizer(delta, value, False)


# -- projections --------------------------------------------------------------------


def project(x, x0, threat: ThreatModel) -> np.ndarray:
    """Euclidean projection of ``x`` onto {z : ||z - x0||_p <= eps} ∩ [low, high]^d.

    Batched over rows when ``x`` is 2-D. For p = inf the two boxes intersect in a
    box and the projection is a clamp. For p in {1, 2} the box is separable, so the
    KKT system reduces to one monotone scalar equation in the ball multiplier, solved
    by bisection; the returned point always satisfies the ball constraint.
    """
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    lo, hi, eps, p = threat.low, threat.high, threat.epsilon, threat.p
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("project: center point lies outside the pixel box")
    if eps == INF:
        return np.clip(x, lo, hi)
    if p == INF:
        return np.clip(x, np.maximum(x0 - eps, lo), np.minimum(x0 + eps, hi))
    if p not in (1, 2):
        raise ValueError(f"project: supported orders are 1, 2 and inf, got {p}")

    single = x.ndim == 1
    X = np.atleast_2d(x).reshape(len(np.atleast_2d(x)), -1)
    X0 = np.broadcast_to(np.atleast_2d(x0).reshape(-1, X.shape[1]), X.shape)
    if eps == 0:
        out = X0.copy()
        return out[0] if single else out.reshape(x.shape)

    def candidate(lam):
        lam = lam[:, None]
        if p == 2:
            # lam is reparametrized to t in [0, 1]: z = clip((1-t) x + t x0)
            z = (1.0 - lam) * X + lam * X0
        else:
            r = X - X0
            z = X0 + np.sign(r) * np.maximum(np.abs(r) - lam, 0.0)
        return np.clip(z, lo, hi)

    z = candidate(np.zeros(len(X)))
    over = lp_norm(z - X0, p, axis=1) > eps
    if np.any(over):
        n = int(over.sum())
        a = np.zeros(n)
        b = np.ones(n) if p == 2 else np.max(np.abs(X[over] - X0[over]), axis=1)
        Xs, X0s = X[over], X0[over]
        for _ in range(200):
            mid = 0.5 * (a + b)
            if p == 2:
                zm = np.clip((1.0 - mid[:, None]) * Xs + mid[:, None] * X0s, lo, hi)
            else:
                r = Xs - X0s
                zm = np.clip(X0s + np.sign(r) * np.maximum(np.abs(r) - mid[:, None], 0.0), lo, hi)
            bad = lp_norm(zm - X0s, p, axis=1) > eps
            a = np.where(bad, mid, a)
            b = np.where(bad, b, mid)
            if np.all(b - a <= 1e-15 * np.maximum(1.0, b)):
                break
        if p == 2:
            zb = np.clip((1.0 - b[:, None]) * Xs + b[:, None] * X0s, lo, hi)
        else:
            r = Xs - X0s
            zb = np.clip(X0s + np.sign(r) * np.maximum(np.abs(r) - b[:, None], 0.0), lo, hi)
        z[over] = zb
    return z[0] if single else z.reshape(x.shape)


# -- matrix norms -------------------------------------------------------------------


class InducedNorm(NamedTuple):
    value: float
    converged: bool
    maximizer: np.ndarray


def induced_norm_p_to_2(A, p: float, restarts: int = 16, seed: int = 0,
                        tol: float = 1e-10, max_iter: int = 10_000) -> InducedNorm:
    """``max ||A x||_2 / ||x||_p``.

    Exact (power iteration on AᵀA) for p = 2. For p > 2 the objective is convex,
    so maximizing its linearization over the unit lp ball never decreases it; we
    iterate that step from the top right-singular vector and from ``restarts``
    seeded random starts and return the best value. That value is a lower bound on
    the true norm but never below the spectral norm.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    if p < 2:
        raise ValueError(f"induced_norm_p_to_2 requires p >= 2, got {p}")
    n = A.shape[1]
    if not np.any(A):
        return InducedNorm(0.0, True, np.zeros(n))
    M = A.T @ A

    v = np.ones(n) / math.sqrt(n)
    v += 1e-3 * np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    converged = False
    for _ in range(max_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            converged = True
            break
        v_new = w / nw
        lam_new = float(v_new @ M @ v_new)
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300) and np.linalg.norm(v_new - v) < 1e-6:
            v, lam, converged = v_new, lam_new, True
            break
        v, lam = v_new, lam_new
    if p == 2:
        return InducedNorm(math.sqrt(max(lam, 0.0)), converged, v)

    def value(x):
        return float(np.linalg.norm(A @ x) / lp_norm(x, p))

    def ascend(x):
        x = x / lp_norm(x, p)
        best = value(x)
        for _ in range(max_iter):
            d = steepest_direction((M @ x).reshape(1, -1), p).reshape(-1)
            if not np.any(d):
                return x, best, True
            val = value(d)
            if val <= best * (1.0 + tol):
                return (d, val, True) if val > best else (x, best, True)
            x, best = d, val
        return x, best, False

    rng = np.random.default_rng(seed)
    starts = [v] + [rng.standard_normal(n) for _ in range(restarts)]
    best_x, best_val, all_conv = None, -1.0, True
    for s in starts:
        x, val, ok = ascend(s)
        all_conv &= ok
        if val > best_val:
            best_x, best_val = x, val
    return InducedNorm(best_val, all_conv, best_x)


def entrywise_norm(A, outer_p: float, inner_q: float) -> float:
    """outer_p-norm of the vector of column-wise inner_q-norms; (2, 2) is Frobenius."""
    A = np.asarray(A, dtype=np.float64)
    cols = lp_norm(A, inner_q, axis=0)
    return float(lp_norm(cols, outer_p))

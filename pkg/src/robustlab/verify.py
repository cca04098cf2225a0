"""Randomized verification campaigns for the geometric and FIM identities.

Every campaign draws instance ``i`` from ``default_rng([seed, tag, i])``, so reports
do not depend on the thread count. A check's slack is positive when it holds with
margin and negative when violated; it passes when ``slack >= -tol * tolerance_scale``.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, model_inversion
from .fim import (
    fisher_input,
    fisher_output,
    frobenius_fim_penalty_estimate,
    frobenius_fim_penalty_exact,
    kl_taylor_residual,
    fim_bound_report,
    lipschitz_certificate_check,
    Region,
)
from .lp import INF, ThreatModel, dual_norm_maximizer, dual_order, lp_norm
from .models import Classifier, init_classifier
from .parallel import parallel_map, shards

__all__ = ["SUITES", "DEFAULT_N", "run_suite", "random_model", "check"]

DEFAULT_N = {
    "dualnorm": 1000,
    "fim": 500,
    "fim-bounds": 1000,
    "lipschitz": 50,
    "taylor": 200,
    "estimator": 20,
    "inversion-equivalence": 10,
    "autodiff": 100,
}
SUITES = tuple(DEFAULT_N) + ("all",)
_TAGS = {name: i + 1 for i, name in enumerate(DEFAULT_N)}


def check(name: str, slack: float, tol: float, scale: float, instance: int, **quantities) -> dict:
    slack = float(slack)
    return {
        "name": name,
        "instance": instance,
        "slack": slack,
        "tolerance": tol * scale,
        "passed": bool(slack >= -tol * scale),
        "quantities": {k: _jsonable(v) for k, v in quantities.items()},
    }


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return "inf" if v == INF else v
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(u) for u in v.tolist()]
    return v


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def random_model(rng, d: int, K: int, smooth: bool = False, weight_scale: float | None = None) -> Classifier:
    """Random small classifier: linear, relu MLP or tanh MLP (tanh only when ``smooth``)."""
    if smooth:
        arch = {"kind": "mlp", "hidden": [int(rng.integers(4, 17))], "activation": "tanh"}
    else:
        kind = rng.choice(["linear", "relu", "tanh"])
        if kind == "linear":
            arch = {"kind": "linear"}
        else:
            arch = {"kind": "mlp", "hidden": [int(rng.integers(4, 17))], "activation": str(kind)}
    m = init_classifier(arch, d, K, seed=int(rng.integers(2**31)))
    s = float(rng.uniform(0.5, 4.0)) if weight_scale is None else weight_scale
    m.params = {k: v * s for k, v in m.params.items()}
    return m


def _dualnorm(i, rng, scale, ctx):
    p = ctx["ps"][i % len(ctx["ps"])]
    d = int(rng.integers(2, 13))
    g = rng.standard_normal(d) * rng.uniform(0.1, 10.0)
    eps = float(rng.uniform(0.01, 1.0))
    dm = dual_norm_maximizer(g, p, eps)
    q = dual_order(p)
    target = eps * float(lp_norm(g, q))
    attained = float(g @ dm.delta)
    bank = ctx["bank"](p, d)
    sampled = float(np.max(eps * bank @ g))
    feas = float(lp_norm(dm.delta, p))
    return [
        check("attains_dual_norm", -_rel(attained, target), 1e-9, scale, i, p=p, d=d,
              attained=attained, closed_form=target),
        check("feasible", (eps - feas) / max(1.0, eps), 1e-12, scale, i, p=p, norm=feas, epsilon=eps),
        check("beats_samples", (attained - sampled) / max(1.0, abs(attained)), 1e-12, scale, i,
              p=p, best_sampled=sampled, attained=attained, samples=len(bank)),
    ]


def _direction_bank(seed: int, samples: int):
    cache = {}

    def get(p, d):
        key = (p, d)
        if key not in cache:
            rng = np.random.default_rng([seed, 99, d, 0 if p == INF else int(p * 1000)])
            v = rng.standard_normal((samples, d))
            cache[key] = v / lp_norm(v, p, axis=1)[:, None]
        return cache[key]

    return get


def _fim(i, rng, scale, ctx):
    d, K = int(rng.integers(2, 13)), int(rng.integers(2, 5))
    m = random_model(rng, d, K)
    x = rng.uniform(0, 1, d)
    pair = fisher_input(m, x)
    Fx = pair.F_x
    evals = np.linalg.eigvalsh((Fx + Fx.T) / 2)
    top = max(float(evals.max()), 1e-300)
    rank = int(np.sum(evals > 1e-10 * top)) if evals.max() > 0 else 0
    asym = float(np.linalg.norm(Fx - Fx.T) / max(np.linalg.norm(Fx), 1e-300))
    # the expectation of the output-space outer products is diag(1/f)
    f = pair.f
    G = -np.eye(K) / f[None, :]
    expect_ff = (G.T * f) @ G
    ff_gap = float(np.linalg.norm(expect_ff - fisher_output(f)) / np.linalg.norm(fisher_output(f)))
    s_sum = frobenius_fim_penalty_exact(m, x, "sum")
    s_tr = frobenius_fim_penalty_exact(m, x, "trace")
    return [
        check("chain_rule_vs_expectation", -pair.route_gap, 1e-10, scale, i, d=d, K=K, gap=pair.route_gap),
        check("symmetric", -asym, 1e-12, scale, i, asymmetry=asym),
        check("psd", float(evals.min()) / top, 1e-10, scale, i, min_eig=float(evals.min()), max_eig=top),
        check("rank_le_K", K - rank, 0.0, scale, i, rank=rank, K=K),
        check("output_fim_expectation", -ff_gap, 1e-12, scale, i, gap=ff_gap),
        check("trace_vs_sum_route", -_rel(s_sum, s_tr), 1e-12, scale, i, sum_route=s_sum, trace_route=s_tr),
    ]


def _fim_bounds(i, rng, scale, ctx):
    p = ctx["ps"][i % len(ctx["ps"])]
    d, K = int(rng.integers(2, 13)), int(rng.integers(2, 5))
    m = random_model(rng, d, K)
    x = rng.uniform(0, 1, d)
    rep = fim_bound_report(m, x, p, restarts=8, seed=i)
    q = {k: getattr(rep, k) for k in ("lower", "eig", "induced", "upper", "jacobian_frob")}
    return [check(link, s, 1e-9, scale, i, p=p, d=d, K=K, converged=rep.induced_converged, **q)
            for link, s in rep.slacks.items()]


def _lipschitz(i, rng, scale, ctx):
    d, K = int(rng.integers(2, 9)), int(rng.integers(2, 5))
    m = random_model(rng, d, K)
    region = Region(rng.uniform(0.2, 0.8, d), float(rng.uniform(0.05, 0.2)))
    rep = lipschitz_certificate_check(m, region, None, 2.0, samples=ctx["pairs"], premise_samples=64,
                                      seed=int(rng.integers(2**31)), restarts=2)
    L = rep.L
    s_f = (L - rep.max_ratio) / max(1.0, L)
    s_c = (L / math.sqrt(K) - rep.max_component_ratio) / max(1.0, L)
    out = [
        check("scores_L_lipschitz", s_f, 1e-6, scale, i, L=L, max_ratio=rep.max_ratio,
              applicable=rep.applicable, pairs=rep.pairs),
        check("components_L_over_sqrtK", s_c, 1e-6, scale, i, L=L, max_component_ratio=rep.max_component_ratio),
    ]
    if rep.max_logit_ratio is not None:
        s_g = (L - max(rep.max_logit_ratio, rep.max_logit_component_ratio * math.sqrt(K))) / max(1.0, L)
        out.append(check("logits_L_lipschitz", s_g, 1e-6, scale, i, L=L,
                         max_logit_ratio=rep.max_logit_ratio,
                         max_logit_component_ratio=rep.max_logit_component_ratio))
    return out


def _taylor(i, rng, scale, ctx):
    d, K = int(rng.integers(2, 13)), int(rng.integers(2, 5))
    m = random_model(rng, d, K, smooth=True)
    x = rng.uniform(0, 1, d)
    u = rng.standard_normal(d)
    delta = 1e-2 * u / np.linalg.norm(u)
    _, q1, r1 = kl_taylor_residual(m, x, delta)
    _, q2, r2 = kl_taylor_residual(m, x, delta / 2)
    ratio = r1 / r2 if r2 != 0 else INF
    slack = min(ratio - 4.0, 16.0 - ratio) if math.isfinite(ratio) else -INF
    return [check("residual_halving_ratio", slack, 0.0, scale, i, ratio=ratio, residual=r1,
                  residual_half=r2, quad=q1, quad_nonneg=bool(q1 >= 0 and q2 >= 0))]


def _estimator(i, rng, scale, ctx):
    m = random_model(rng, 10, 3)
    x = rng.uniform(0, 1, 10)
    exact = frobenius_fim_penalty_exact(m, x)
    est = frobenius_fim_penalty_estimate(m, x, n_projections=ctx["probes"], seed=int(rng.integers(2**31)))
    rel = abs(est - exact) / max(exact, 1e-300)
    return [check("mean_within_2pct", 0.02 - rel, 0.0, scale, i, exact=exact, estimate=est,
                  relative_error=rel, probes=ctx["probes"])]


def _inversion(i, rng, scale, ctx):
    side = 8
    K = int(rng.integers(2, 5))
    kind = ["relu", "tanh", "linear"][i % 3]
    arch = {"kind": "linear"} if kind == "linear" else {"kind": "mlp", "hidden": [32], "activation": kind}
    m = init_classifier(arch, side * side, K, seed=int(rng.integers(2**31)))
    target = int(rng.integers(K))
    x0 = rng.uniform(0, 1, (1, side * side))
    cfg = AttackConfig(threat=ThreatModel(INF, INF), step_size=1 / 255, iterations=ctx["iterations"],
                       random_init=False)
    ra, sa = model_inversion(m, target, cfg, x_start=x0, objective="loss", record_every=1)
    rb, sb = model_inversion(m, target, cfg, x_start=x0, objective="score", record_every=1)
    first = next((t for t, (a, b) in enumerate(zip(sa, sb)) if not np.array_equal(a, b)), None)
    slack = 0.0 if first is None else -1.0
    return [check("iterates_bitwise_equal", slack, 0.0, scale, i, iterations=len(sa),
                  first_divergence=first, final_score=float(ra.target_score[0]),
                  start_score=float(ra.start_score[0]))]


def _autodiff(i, rng, scale, ctx):
    d, K, n = int(rng.integers(2, 9)), int(rng.integers(2, 5)), 3
    m = random_model(rng, d, K, weight_scale=float(rng.uniform(0.5, 2.0)))
    x = rng.uniform(0, 1, (n, d))
    y = rng.integers(K, size=n)
    names = sorted(m.params)

    def loss(params, xv):
        P = {k: ad.Tensor(v) for k, v in params.items()}
        return float(-m.log_scores_graph(ad.Tensor(xv), P)[np.arange(n), y].sum().item())

    P = m.param_tensors()
    X = ad.Tensor(x, requires_grad=True)
    L = -m.log_scores_graph(X, P)[np.arange(n), y].sum()
    grads = ad.grad(L, [P[k] for k in names] + [X])
    h = 1e-5
    out = []
    for name, g in zip(names + ["input"], grads):
        base = x if name == "input" else m.params[name]
        fd = np.zeros_like(base)
        for j in range(base.size):
            e = np.zeros(base.size)
            e[j] = h
            e = e.reshape(base.shape)
            if name == "input":
                fd.flat[j] = (loss(m.params, x + e) - loss(m.params, x - e)) / (2 * h)
            else:
                fd.flat[j] = (loss({**m.params, name: base + e}, x)
                              - loss({**m.params, name: base - e}, x)) / (2 * h)
        rel = float(np.linalg.norm(g.data - fd) / max(np.linalg.norm(fd), np.linalg.norm(g.data), 1e-8))
        out.append(check(f"grad_{name}", -rel, 1e-4, scale, i, relative_error=rel, arch=m.arch["kind"]))
    return out


_RUNNERS = {
    "dualnorm": _dualnorm,
    "fim": _fim,
    "fim-bounds": _fim_bounds,
    "lipschitz": _lipschitz,
    "taylor": _taylor,
    "estimator": _estimator,
    "inversion-equivalence": _inversion,
    "autodiff": _autodiff,
}

# fraction of instances that must pass; 1.0 means every check
_REQUIRED = {"taylor": 0.95}


def run_suite(name: str, n: int | None = None, seed: int = 0, tolerance_scale: float = 1.0,
              threads: int | None = 1, **options) -> dict:
    """Run one campaign (or ``"all"``) and return its JSON-ready report."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {', '.join(SUITES)}")
    if name == "all":
        subs = [run_suite(s, n, seed, tolerance_scale, threads, **options) for s in DEFAULT_N]
        return {"suite": "all", "seed": seed, "passed": all(s["passed"] for s in subs), "suites": subs}
    n = DEFAULT_N[name] if n is None else int(n)
    if n < 0:
        raise ValueError("n must be non-negative")
    ctx = {
        "ps": options.get("ps", [1.5, 2.0, 3.0, INF] if name == "dualnorm" else [2.0, 3.0, INF]),
        "bank": _direction_bank(seed, options.get("samples", 100_000)),
        "pairs": options.get("pairs", 10_000),
        "probes": options.get("probes", 10_000),
        "iterations": options.get("iterations", 2048),
    }
    tag = _TAGS[name]
    runner = _RUNNERS[name]

    def shard(sh):
        out = []
        for i in sh:
            with ad.enable_grad():
                out.append(runner(i, np.random.default_rng([seed, tag, i]), tolerance_scale, ctx))
        return out

    if name == "dualnorm":
        # fill the direction bank before threads share it
        for p in ctx["ps"]:
            for d in range(2, 13):
                ctx["bank"](p, d)
    per_instance = [c for part in parallel_map(shard, shards(n, 8), threads) for c in part]
    checks = [c for inst in per_instance for c in inst]
    inst_ok = [all(c["passed"] for c in inst) for inst in per_instance]
    frac = float(np.mean(inst_ok)) if inst_ok else 1.0
    required = _REQUIRED.get(name, 1.0)
    failed = [c for c in checks if not c["passed"]]
    by_name = {}
    for c in checks:
        s = by_name.setdefault(c["name"], {"checks": 0, "failed": 0, "min_slack": INF})
        s["checks"] += 1
        s["failed"] += int(not c["passed"])
        s["min_slack"] = min(s["min_slack"], c["slack"])
    for s in by_name.values():
        s["min_slack"] = _jsonable(s["min_slack"])
    return {
        "suite": name,
        "n": n,
        "seed": seed,
        "tolerance_scale": tolerance_scale,
        "instances_passed_fraction": frac,
        "required_fraction": required,
        "passed": bool(frac >= required),
        "summary": by_name,
        "failed": failed,
        "checks": checks,
    }

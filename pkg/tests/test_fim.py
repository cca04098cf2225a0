import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustlab.fim import (Region, fim_bound_report, fisher_input, fisher_output, frobenius_fim_penalty_estimate,
                           frobenius_fim_penalty_exact, jacobian_exact, kl_and_entropy, kl_taylor_residual,
                           lipschitz_certificate_check, sample_probes)
from robustlab.lp import INF
from robustlab.models import init_classifier
from robustlab.verify import random_model

seeds = st.integers(0, 2**31 - 1)


@given(seed=seeds)
def test_input_fim_is_symmetric_psd_low_rank_and_routes_agree(seed):
    rng = np.random.default_rng(seed)
    d, K = int(rng.integers(2, 10)), int(rng.integers(2, 5))
    m = random_model(rng, d, K)
    pair = fisher_input(m, rng.uniform(0, 1, d))
    F = pair.F_x
    ev = np.linalg.eigvalsh((F + F.T) / 2)
    assert np.allclose(F, F.T, rtol=0, atol=1e-12 * max(1, np.abs(F).max()))
    assert ev.min() >= -1e-10 * max(1.0, ev.max())
    assert np.sum(ev > 1e-9 * max(ev.max(), 1e-300)) <= K
    assert pair.route_gap <= 1e-10


@given(seed=seeds, tau=st.floats(0.5, 4.0))
def test_linear_softmax_fim_closed_form(seed, tau):
    # for f = softmax((Wx + b)/tau): F_x = W^T (diag f - f f^T) W / tau^2
    rng = np.random.default_rng(seed)
    m = init_classifier({"kind": "linear"}, 4, 3, seed=seed, tau=tau)
    x = rng.uniform(0, 1, 4)
    f = m.scores(x)
    W = m.params["W_out"]
    A = W if W.shape == (3, 4) else W.T
    ref = A.T @ (np.diag(f) - np.outer(f, f)) @ A / tau**2
    assert np.allclose(fisher_input(m, x).F_x, ref, rtol=1e-10, atol=1e-13)


def test_output_fim_is_diag_inverse_and_rejects_boundary():
    assert np.allclose(fisher_output([0.25, 0.75]), np.diag([4.0, 4 / 3]))
    with pytest.raises(ValueError):
        fisher_output([0.0, 1.0])


def test_kl_entropy_decomposition():
    p, q = np.array([0.2, 0.3, 0.5]), np.array([0.4, 0.4, 0.2])
    kl, h, ce = kl_and_entropy(p, q)
    assert abs(ce - (h + kl)) <= 1e-15 and kl > 0


@given(seed=seeds)
def test_frobenius_penalty_routes_agree(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 6, 3)
    x = rng.uniform(0, 1, 6)
    a, b = frobenius_fim_penalty_exact(m, x, "sum"), frobenius_fim_penalty_exact(m, x, "trace")
    assert abs(a - b) <= 1e-12 * max(1.0, a)
    assert abs(a - np.trace(fisher_input(m, x).F_x)) <= 1e-10 * max(1.0, a)


@pytest.mark.parametrize("probe", ["sphere", "rademacher"])
def test_probes_have_identity_second_moment(probe):
    v = sample_probes(np.random.default_rng(0), 200_000, 4, probe)
    assert np.allclose(v.T @ v / len(v), np.eye(4), atol=0.02)


def test_estimator_is_unbiased_in_the_mean():
    rng = np.random.default_rng(5)
    m = random_model(rng, 8, 4)
    x = rng.uniform(0, 1, 8)
    exact = frobenius_fim_penalty_exact(m, x)
    est = frobenius_fim_penalty_estimate(m, x, n_projections=40_000, seed=1)
    assert abs(est - exact) <= 0.02 * exact
    # chunking does not change the estimate
    assert est == frobenius_fim_penalty_estimate(m, x, n_projections=40_000, seed=1, chunk=777)


@given(seed=seeds)
def test_taylor_residual_scales_cubically(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 5, 3, smooth=True)
    x = rng.uniform(0, 1, 5)
    u = rng.standard_normal(5)
    u /= np.linalg.norm(u)
    kl, quad, r1 = kl_taylor_residual(m, x, 1e-2 * u)
    _, _, r2 = kl_taylor_residual(m, x, 5e-3 * u)
    assert quad >= 0 and kl >= 0
    _, q2, _ = kl_taylor_residual(m, x, 5e-3 * u)
    # the remainder is o(quadratic term): its share shrinks as delta halves
    if quad > 1e-8:
        assert abs(r2) / q2 <= 0.75 * abs(r1) / quad + 1e-6
    assert kl_taylor_residual(m, x, np.zeros(5)) == (0.0, 0.0, 0.0)


@given(seed=seeds)
def test_bound_chain_holds_at_p2(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, int(rng.integers(2, 10)), int(rng.integers(2, 5)))
    rep = fim_bound_report(m, rng.uniform(0, 1, m.input_dim), 2.0)
    assert rep.holds(1e-9), rep.slacks
    assert abs(rep.induced - rep.eig) <= 1e-9 * max(1.0, rep.eig)


def test_bound_report_rejects_p_below_two():
    m = init_classifier({"kind": "linear"}, 3, 2)
    with pytest.raises(ValueError):
        fim_bound_report(m, np.zeros(3), 1.5)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    m = random_model(rng, 4, 3, smooth=True)
    x = rng.uniform(0, 1, 4)
    J = jacobian_exact(m, x)
    h = 1e-6
    fd = np.stack([(m.scores(x + h * e) - m.scores(x - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.allclose(J, fd, atol=1e-8)


@given(seed=seeds)
def test_certificate_never_falsified_on_scores(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 4, 3)
    region = Region(rng.uniform(0.3, 0.7, 4), 0.1)
    rep = lipschitz_certificate_check(m, region, None, 2.0, samples=2000, premise_samples=32, seed=seed)
    assert rep.applicable and rep.passed


def test_certificate_is_inapplicable_when_premise_fails():
    m = random_model(np.random.default_rng(0), 4, 3, weight_scale=3.0)
    rep = lipschitz_certificate_check(m, Region(np.full(4, 0.5), 0.1), 1e-6, 2.0, samples=100)
    assert not rep.applicable and rep.passed

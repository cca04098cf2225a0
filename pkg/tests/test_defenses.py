import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustlab.benchmark import GaussianConfig, two_gaussian_orientation
from robustlab.defenses import (KINDS, DefenseConfig, OptimizerConfig, cyclic_lr, distill,
                                grad_penalty_identity_gap, objective_terms, train)
from robustlab.lp import INF, ThreatModel
from robustlab.models import init_classifier

SMALL = dict(arch={"kind": "mlp", "hidden": [8]}, epochs=2, batch_size=32, inner_iterations=2,
             optimizer=OptimizerConfig(lr_max=0.05))


def cfg(**kw):
    return DefenseConfig(**{**SMALL, **kw})


@pytest.mark.parametrize("kind", ["madry", "fgsm", "grad_penalty", "fim_penalty"])
def test_zero_budget_objective_equals_standard(tiny_shapes, kind):
    th = ThreatModel(INF, 0.0)
    m = init_classifier(SMALL["arch"], tiny_shapes.input_dim, 3, seed=0)
    x, y = tiny_shapes.x[:16], tiny_shapes.y[:16]
    ref, _, _ = objective_terms(m, m.param_tensors(), x, y, cfg(threat=th), step_seed=0)
    got, _, smooth = objective_terms(m, m.param_tensors(), x, y, cfg(kind=kind, beta=5.0, threat=th),
                                     step_seed=0)
    assert float(got.data) == float(ref.data)
    assert smooth == 0.0


@pytest.mark.parametrize("kind", ["madry", "fgsm", "grad_penalty", "fim_penalty"])
def test_zero_budget_training_trajectory_equals_standard(tiny_shapes, kind):
    th = ThreatModel(INF, 0.0)
    ref, _ = train(tiny_shapes, cfg(threat=th))
    got, _ = train(tiny_shapes, cfg(kind=kind, beta=5.0, threat=th, early_stop=False))
    assert np.array_equal(got.flat_params(), ref.flat_params())


@pytest.mark.parametrize("kind", ["madry", "fgsm", "trades", "grad_penalty", "fim_penalty"])
def test_loss_decomposes_into_orientation_and_smoothness(tiny_shapes, kind):
    _, rep = train(tiny_shapes, cfg(kind=kind, beta=2.0, threat=ThreatModel(INF, 8 / 255)))
    assert rep.rows
    for r in rep.rows:
        assert r["decomposition_gap"] <= 1e-10
        assert all(math.isfinite(r[k]) for k in ("loss_total", "loss_orientation", "loss_smoothness"))


@given(seed=st.integers(0, 2**31 - 1), q=st.sampled_from([1.0, 2.0, INF]))
def test_gradient_penalty_identity(seed, q):
    rng = np.random.default_rng(seed)
    m = init_classifier({"kind": "mlp", "hidden": [6]}, 5, 3, seed=seed)
    x, y = rng.uniform(0, 1, (4, 5)), rng.integers(3, size=4)
    assert grad_penalty_identity_gap(m, x, y, 0.03, q) <= 1e-8


def test_training_is_bitwise_deterministic(tiny_shapes):
    c = cfg(kind="trades", beta=6.0, threat=ThreatModel(INF, 8 / 255))
    a, ra = train(tiny_shapes, c)
    b, rb = train(tiny_shapes, c)
    assert np.array_equal(a.flat_params(), b.flat_params())
    assert ra.rows == rb.rows


def test_effective_weights_follow_the_prefactors():
    th = ThreatModel(INF, 0.1)
    assert cfg(kind="grad_penalty", beta=3.0, threat=th).effective_weight == pytest.approx(0.3)
    assert cfg(kind="fim_penalty", beta=3.0, threat=th).effective_weight == pytest.approx(0.015)
    assert cfg(kind="trades", beta=6.0, threat=th).effective_weight == 6.0
    assert cfg(kind="madry", threat=th).effective_weight == 0.0
    assert cfg(kind="grad_penalty", threat=ThreatModel(2.0, 0.1)).penalty_order == 2.0
    assert cfg(kind="grad_penalty", threat=th).penalty_order == 1.0


def test_config_validation_and_round_trip():
    for bad in (dict(kind="nope"), dict(beta=-1.0), dict(tau=0.0), dict(batch_size=0),
                dict(kind="madry", threat=ThreatModel(INF, INF))):
        with pytest.raises(ValueError):
            cfg(**bad)
    c = cfg(kind="grad_penalty", beta=2.0, q=INF, threat=ThreatModel(2.0, 0.5))
    assert DefenseConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        DefenseConfig.from_dict({"kind": "standard", "bogus": 1})
    assert set(KINDS) == {"standard", "madry", "fgsm", "trades", "grad_penalty", "fim_penalty", "distill"}


@given(epochs=st.integers(2, 40))
def test_cyclic_schedule_shape(epochs):
    peak = epochs // 2
    assert cyclic_lr(0, epochs, 0.2) == 0.0
    assert cyclic_lr(peak, epochs, 0.2) == pytest.approx(0.2)
    assert cyclic_lr(epochs, epochs, 0.2) == pytest.approx(0.0)
    ts = np.linspace(0, epochs, 200)
    lr = np.array([cyclic_lr(t, epochs, 0.2) for t in ts])
    assert np.all(lr >= 0) and lr.max() <= 0.2 + 1e-15


def test_report_csv_columns(tiny_shapes, tmp_path):
    _, rep = train(tiny_shapes, cfg(kind="grad_penalty", beta=1.0, threat=ThreatModel(INF, 8 / 255)))
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 2 and rows[0]["epoch"] == "1"
    assert float(rows[-1]["penalty_identity_gap"]) <= 1e-8


def test_distillation_trains_at_temperature(tiny_shapes):
    teacher, _ = train(tiny_shapes, cfg(tau=20.0, epochs=30))
    student, rep = distill(teacher, tiny_shapes, 20.0, cfg(epochs=30))
    assert student.tau == 20.0 and rep.kind == "distill"
    assert student.accuracy(tiny_shapes.x, tiny_shapes.y) > 0.8


def test_zero_epochs_returns_initial_model(tiny_shapes):
    m, rep = train(tiny_shapes, cfg(epochs=0))
    ref = init_classifier(SMALL["arch"], tiny_shapes.input_dim, 3, seed=0)
    assert np.array_equal(m.flat_params(), ref.flat_params()) and rep.rows == []


def test_two_gaussian_orientation_is_fast_and_correct():
    res = two_gaussian_orientation(GaussianConfig(epochs=8))
    assert res["madry"]["cosine"] >= 0.99
    assert res["madry"]["spurious_weight_share"] < res["standard"]["spurious_weight_share"]


def test_standard_training_separates_separable_gaussians():
    from robustlab.data import gen_two_gaussians
    data = gen_two_gaussians(np.array([0.5, 0.5]), 0.05, 0.0, 400, seed=1)
    m, _ = train(data, cfg(arch={"kind": "linear"}, epochs=5))
    assert m.accuracy(data.x, data.y) >= 0.99


def test_loss_falls_over_the_first_epochs(tiny_shapes):
    _, rep = train(tiny_shapes, cfg(epochs=10))
    loss = [r["loss_total"] for r in rep.rows[:5]]
    assert all(b < a for a, b in zip(loss, loss[1:])), loss


def test_self_distillation_matches_teacher(tiny_shapes):
    teacher, _ = train(tiny_shapes, cfg(epochs=30))
    student, _ = distill(teacher, tiny_shapes, 1.0, cfg(epochs=30))
    acc = [m.accuracy(tiny_shapes.x, tiny_shapes.y) for m in (teacher, student)]
    assert abs(acc[0] - acc[1]) <= 0.02, acc


def test_fim_probe_batch_estimate_within_three_sigma():
    from robustlab.fim import frobenius_fim_penalty_estimate, frobenius_fim_penalty_exact
    m = init_classifier({"kind": "mlp", "hidden": [16]}, 10, 4, seed=2)
    X = np.random.default_rng(0).uniform(size=(64, 10))
    exact = np.mean([frobenius_fim_penalty_exact(m, x) for x in X])
    est = np.array([frobenius_fim_penalty_estimate(m, x, 1, seed=i) for i, x in enumerate(X)])
    assert abs(est.mean() - exact) <= 3 * est.std(ddof=1) / np.sqrt(len(est))

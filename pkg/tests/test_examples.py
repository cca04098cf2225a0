"""Worked example values, frozen from closed forms or independent computations."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustlab.attacks import AttackConfig
from robustlab.cli import main
from robustlab.data import gen_shape_images, shape_templates, write_image_grid
from robustlab.evaluation import perturbation_grid
from robustlab.fim import frobenius_fim_penalty_estimate, kl_and_entropy
from robustlab.lp import INF, ThreatModel, induced_norm_p_to_2
from robustlab.models import init_classifier, scores_from_logits


def test_kl_of_half_half_against_quarter():
    kl, _, _ = kl_and_entropy([0.5, 0.5], [0.25, 0.75])
    assert kl == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3), abs=1e-15)
    assert kl == pytest.approx(0.1438410362258904, abs=1e-15)


@pytest.mark.parametrize("p, expected", [
    (2.0, 4.0),
    # on |x|^4 + |y|^4 = 1 the objective is sqrt(9|cos t| + 16|sin t|), peak 337**0.25
    (4.0, 4.284566),
    (INF, 5.0),
])
def test_induced_norm_of_diag_3_4(p, expected):
    r = induced_norm_p_to_2(np.diag([3.0, 4.0]), p)
    assert r.value == pytest.approx(expected, abs=1e-5)


def test_high_temperature_flattens_scores():
    f = scores_from_logits(np.array([1.0, -1.0]), tau=100.0)
    assert np.all(np.abs(f - 0.5) < 0.01)
    assert f[0] == pytest.approx(1 / (1 + np.exp(-0.02)), abs=1e-14)


@given(st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_pseudo_labels_near_uniform_at_huge_temperature(k, seed):
    z = np.random.default_rng(seed).uniform(-5, 5, size=(8, k))
    assert scores_from_logits(z, tau=1e4).max() < 1 / k + 0.01


def test_projection_estimator_spread_shrinks_with_more_probes():
    model = init_classifier({"kind": "mlp", "hidden": [16]}, 6, 4, seed=3)
    x = np.random.default_rng(0).uniform(size=6)
    spread = {n: np.std([frobenius_fim_penalty_estimate(model, x, n, seed=s) for s in range(40)])
              for n in (10, 100)}
    assert spread[100] < spread[10]


@pytest.mark.parametrize("side", [8, 16, 32])
@pytest.mark.parametrize("k", [2, 4, 10])
def test_template_matches_class_mean(side, k):
    data = gen_shape_images(side, k, 40 * k, seed=0)
    T = shape_templates(side, k, shift=1)
    for c in range(k):
        mu = data.x[data.y == c].mean(axis=0)
        assert mu @ T[c] / (np.linalg.norm(mu) * np.linalg.norm(T[c])) > 0.8


def test_empty_image_list_writes_nothing(tmp_path):
    with pytest.raises(ValueError):
        write_image_grid([], (1, 1), tmp_path / "g.png")
    assert not (tmp_path / "g.png").exists()


def test_two_by_three_by_two_grid_counts(tmp_path):
    models = {n: init_classifier({"kind": "mlp", "hidden": [8]}, 64, 3, seed=i) for i, n in enumerate("ab")}
    cfg = AttackConfig(threat=ThreatModel(INF, INF, 0.0, 1.0), step_size=0.01, iterations=4, random_init=False)
    grid = perturbation_grid(models, [0, 1, 2], [0, 1], cfg, out_dir=tmp_path, side=8)
    assert len(grid.entries) == 12
    assert len(list(tmp_path.glob("[ab]/*/*.pgm"))) == 12
    rows = (tmp_path / "metadata.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 12


def test_verify_with_zero_instances_is_an_empty_pass(tmp_path):
    assert main(["verify", "dualnorm", "--n", "0", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] and report["n"] == 0 and report["checks"] == []


def test_grad_penalty_weight_at_beta_64():
    from robustlab.defenses import DefenseConfig
    cfg = DefenseConfig(kind="grad_penalty", beta=64.0, threat=ThreatModel(INF, 8 / 255, 0.0, 1.0))
    assert cfg.effective_weight == pytest.approx(512 / 255, abs=1e-15)
    assert cfg.effective_weight == pytest.approx(2.0, abs=0.01)

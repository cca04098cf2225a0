import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustlab.models import Classifier, init_classifier, load_checkpoint, save_checkpoint, scores_from_logits

ARCHS = [
    {"kind": "linear"},
    {"kind": "mlp", "hidden": [8, 8]},
    {"kind": "mlp", "hidden": [6], "activation": "tanh"},
    {"kind": "conv", "side": 6, "channels": 2, "kernel": 3, "hidden": [8]},
]


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: a["kind"] + str(a.get("activation", "")))
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 30.0))
def test_scores_lie_in_open_simplex(arch, seed, scale):
    m = init_classifier(arch, 36, 4, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 1, (5, 36)) * scale
    f = m.scores(x)
    assert np.all(np.abs(f.sum(axis=1) - 1) <= 1e-12)
    assert np.all((f > 0) & (f < 1))


@given(z=st.lists(st.floats(-50, 50), min_size=2, max_size=6),
       t1=st.floats(0.01, 100), t2=st.floats(0.01, 100))
def test_argmax_is_temperature_invariant(z, t1, t2):
    z = np.asarray(z)
    assert np.argmax(scores_from_logits(z, t1)) == np.argmax(scores_from_logits(z, t2))


@given(z=st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_max_score_decreases_toward_uniform_with_temperature(z):
    z = np.asarray(z)
    taus = np.geomspace(0.05, 1e4, 40)
    top = np.array([scores_from_logits(z, t).max() for t in taus])
    assert np.all(np.diff(top) <= 1e-12)
    assert abs(top[-1] - 1 / len(z)) < 1e-2


def test_scores_are_softmax_of_scaled_logits():
    m = init_classifier({"kind": "mlp", "hidden": [5]}, 4, 3, seed=1, tau=2.5)
    x = np.linspace(0, 1, 4)
    z = m.logits(x) / 2.5
    ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    assert np.allclose(m.scores(x), ref, rtol=0, atol=1e-15)


def test_init_is_seeded_and_fan_in_bounded():
    a = init_classifier({"kind": "mlp", "hidden": [16]}, 25, 3, seed=4)
    b = init_classifier({"kind": "mlp", "hidden": [16]}, 25, 3, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert np.abs(a.params["W0"]).max() <= 1 / np.sqrt(25)


@pytest.mark.parametrize("arch", ARCHS, ids=lambda a: a["kind"])
def test_checkpoint_round_trip_is_exact(tmp_path, arch):
    m = init_classifier(arch, 36, 4, seed=2, tau=3.0)
    m.meta["note"] = "x"
    digest = save_checkpoint(m, tmp_path / "m.json", config={"seed": 2})
    m2, cfg = load_checkpoint(tmp_path / "m.json")
    assert cfg == {"seed": 2}
    assert m2.tau == 3.0 and m2.arch == m.arch and m2.meta == m.meta
    assert np.array_equal(m2.flat_params(), m.flat_params())
    assert save_checkpoint(m2, tmp_path / "m2.json", config={"seed": 2}) == digest


def test_checkpoint_rejects_foreign_or_future_files(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(p)
    m = init_classifier({"kind": "linear"}, 3, 2)
    save_checkpoint(m, p)
    doc = json.loads(p.read_text())
    doc["version"] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(p)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.json")


def test_nonpositive_temperature_is_rejected():
    m = init_classifier({"kind": "linear"}, 3, 2)
    with pytest.raises(ValueError):
        Classifier(m.arch, 3, 2, m.params, tau=0.0)
    with pytest.raises(ValueError):
        m.scores(np.zeros(3), tau=-1.0)

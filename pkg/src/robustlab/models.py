"""Desk-scale classifiers with a temperature softmax head, and their checkpoint format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "Classifier",
    "init_classifier",
    "scores_from_logits",
    "save_checkpoint",
    "load_checkpoint",
    "file_digest",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass
class Classifier:
    """``f(x) = Softmax(g(x) / tau)`` over ``num_classes`` classes.

    ``arch`` is a plain dict descriptor:

    * ``{"kind": "linear"}``
    * ``{"kind": "mlp", "hidden": [64, 64], "activation": "relu" | "tanh"}``
    * ``{"kind": "conv", "side": 16, "channels": 8, "kernel": 3, "hidden": [64]}``

    Inputs are flattened vectors of length ``input_dim`` (images row-major).
    """

    arch: dict
    input_dim: int
    num_classes: int
    params: dict[str, np.ndarray]
    tau: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    # -- graph construction ----------------------------------------------------------

    def param_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def logits_graph(self, x: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Logits ``g(x)`` for a batch ``x`` of shape (n, input_dim)."""
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"classifier expects inputs of shape (n, {self.input_dim}), got {x.shape}"
            )
        P = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        kind = self.arch["kind"]
        h = x
        if kind == "conv":
            h = _conv_block(h, P, self.arch)
        n_hidden = len(self.arch.get("hidden", [])) if kind in ("mlp", "conv") else 0
        act = ad.tanh if self.arch.get("activation", "relu") == "tanh" else ad.relu
        for i in range(n_hidden):
            h = act(h @ P[f"W{i}"] + P[f"b{i}"])
        return h @ P["W_out"] + P["b_out"]

    def scores_graph(self, x: Tensor, params: Mapping[str, Tensor] | None = None,
                     tau: float | None = None) -> Tensor:
        t = self.tau if tau is None else tau
        z = self.logits_graph(x, params)
        return ad.softmax(z * (1.0 / t)) if t != 1.0 else ad.softmax(z)

    def log_scores_graph(self, x: Tensor, params: Mapping[str, Tensor] | None = None,
                         tau: float | None = None) -> Tensor:
        t = self.tau if tau is None else tau
        z = self.logits_graph(x, params)
        return ad.log_softmax(z * (1.0 / t)) if t != 1.0 else ad.log_softmax(z)

    # -- numpy conveniences ----------------------------------------------------------

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        return (x.reshape(1, -1) if single else x.reshape(len(x), -1)), single

    def logits(self, x) -> np.ndarray:
        X, single = self._batch(x)
        with ad.no_grad():
            z = self.logits_graph(Tensor(X)).data
        return z[0] if single else z

    def scores(self, x, tau: float | None = None) -> np.ndarray:
        t = self.tau if tau is None else tau
        if not t > 0:
            raise ValueError(f"temperature must be positive, got {t}")
        return scores_from_logits(self.logits(x), t)

    def predict(self, x) -> np.ndarray | int:
        # argmax returns the lowest index among ties
        z = self.logits(x)
        return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)

    def accuracy(self, x, y) -> float:
        pred = self.predict(x)
        return float(np.mean(np.asarray(pred) == np.asarray(y))) if len(y) else float("nan")

    def copy(self) -> "Classifier":
        return Classifier(dict(self.arch), self.input_dim, self.num_classes,
                          {k: v.copy() for k, v in self.params.items()}, self.tau, dict(self.meta))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])


def scores_from_logits(z, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _conv_index(side: int, kernel: int) -> np.ndarray:
    """Column indices of every valid kernel×kernel patch of a side×side image."""
    out = side - kernel + 1
    r, c = np.meshgrid(np.arange(out), np.arange(out), indexing="ij")
    dr, dc = np.meshgrid(np.arange(kernel), np.arange(kernel), indexing="ij")
    rows = r.reshape(-1, 1) + dr.reshape(1, -1)
    cols = c.reshape(-1, 1) + dc.reshape(1, -1)
    return (rows * side + cols).reshape(-1)


def _conv_block(x: Tensor, P, arch) -> Tensor:
    """Stride-1 valid single-input-channel convolution followed by relu."""
    side, k, ch = arch["side"], arch["kernel"], arch["channels"]
    idx = _conv_index(side, k)
    n = x.shape[0]
    patches = ad.gather_cols(x, idx).reshape(n * (side - k + 1) ** 2, k * k)
    h = ad.relu(patches @ P["K"] + P["c"])
    return h.reshape(n, (side - k + 1) ** 2 * ch)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_classifier(arch: dict, input_dim: int, num_classes: int, seed: int = 0,
                    tau: float = 1.0, dtype=np.float64) -> Classifier:
    """Seeded fan-in uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    arch = dict(arch)
    kind = arch.get("kind")
    params: dict[str, np.ndarray] = {}
    width = input_dim
    if kind == "linear":
        arch.pop("hidden", None)
    elif kind == "conv":
        side, k, ch = arch["side"], arch["kernel"], arch["channels"]
        if side * side != input_dim:
            raise ShapeError(f"conv side {side} does not match input_dim {input_dim}")
        params["K"] = _uniform(rng, k * k, (k * k, ch), dtype)
        params["c"] = _uniform(rng, k * k, (ch,), dtype)
        width = (side - k + 1) ** 2 * ch
    elif kind != "mlp":
        raise ValueError(f"unknown architecture kind {kind!r}")
    if kind in ("mlp", "conv"):
        arch["hidden"] = list(arch.get("hidden", []))
        for i, h in enumerate(arch["hidden"]):
            params[f"W{i}"] = _uniform(rng, width, (width, h), dtype)
            params[f"b{i}"] = _uniform(rng, width, (h,), dtype)
            width = h
    params["W_out"] = _uniform(rng, width, (width, num_classes), dtype)
    params["b_out"] = _uniform(rng, width, (num_classes,), dtype)
    return Classifier(arch, input_dim, num_classes, params, tau, {"init_seed": seed})


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(model: Classifier, path, config: dict | None = None) -> str:
    """Write a JSON checkpoint and return its sha256 digest.

    Floats are stored via ``repr`` so they round-trip exactly.
    """
    doc = {
        "format": "robustlab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "tau": model.tau,
        "params": {
            k: {"shape": list(v.shape), "dtype": str(v.dtype), "values": v.ravel().tolist()}
            for k, v in sorted(model.params.items())
        },
        "meta": model.meta,
        "config": config or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, sort_keys=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> tuple[Classifier, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "robustlab-checkpoint":
        raise ValueError(f"{path}: not a robustlab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {
        k: np.asarray(p["values"], dtype=p["dtype"]).reshape(p["shape"])
        for k, p in doc["params"].items()
    }
    model = Classifier(doc["arch"], doc["input_dim"], doc["num_classes"], params,
                       doc["tau"], doc.get("meta", {}))
    return model, doc.get("config", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

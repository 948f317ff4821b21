"""Multi-label MLP with one logit head per class.

Glorot-uniform init from a seeded generator, zero biases, relu hidden
layers, affine output (logits, no link).  Checkpoints are JSON with exact
float64 round-trip (python's repr-based float serialization is lossless).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, add, matmul, relu, sigmoid_values

CHECKPOINT_FORMAT = "fairmargin-mlp-v1"


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 16)
    num_classes: int = 1
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all layer dimensions must be positive, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    """Per-layer (weight, bias) tensors; weights are fan_in x fan_out."""

    config: MlpConfig
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def attach(self, tape: Tape) -> None:
        """Re-register all parameter leaves on a fresh tape."""
        for t in self.tensors():
            tape.adopt(t, trainable=True)


def init_mlp(cfg: MlpConfig, tape: Tape | None = None) -> MlpParams:
    """Glorot-uniform weights, zero biases, from ``cfg.init_seed``."""
    tape = tape if tape is not None else Tape()
    rng = np.random.default_rng(cfg.init_seed)
    params = MlpParams(config=cfg)
    for fan_in, fan_out in cfg.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = tape.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        b = tape.parameter(np.zeros(fan_out))
        params.layers.append((w, b))
    return params


def forward(params: MlpParams, x: Tensor) -> Tensor:
    """Logits for a batch: affine -> relu chain with an affine head."""
    if x.data.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with input_dim={params.config.input_dim}"
        )
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = add(matmul(h, w), b)
        if i != last:
            h = relu(h)
    return h


def predict_scores(params: MlpParams, features: np.ndarray) -> np.ndarray:
    """Probabilities sigma(logits) for a feature matrix, no graph kept."""
    tape = Tape()
    params.attach(tape)
    logits = forward(params, tape.constant(features))
    return sigmoid_values(logits.data)


def save_params(params: MlpParams, path, metadata: dict | None = None) -> None:
    """Write a checkpoint; round-trips float64 exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "input_dim": params.config.input_dim,
            "hidden_dims": list(params.config.hidden_dims),
            "num_classes": params.config.num_classes,
            "activation": params.config.activation,
            "init_seed": int(params.config.init_seed),
        },
        "metadata": metadata or {},
        "layers": [
            {
                "weight": {"shape": list(w.shape), "values": w.data.reshape(-1).tolist()},
                "bias": {"shape": list(b.shape), "values": b.data.reshape(-1).tolist()},
            }
            for w, b in params.layers
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_params(path, tape: Tape | None = None) -> MlpParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    c = doc["config"]
    cfg = MlpConfig(
        input_dim=c["input_dim"],
        hidden_dims=tuple(c["hidden_dims"]),
        num_classes=c["num_classes"],
        activation=c["activation"],
        init_seed=c["init_seed"],
    )
    tape = tape if tape is not None else Tape()
    params = MlpParams(config=cfg)
    for i, layer in enumerate(doc["layers"]):
        fan_in, fan_out = cfg.layer_dims[i]
        w = np.asarray(layer["weight"]["values"]).reshape(layer["weight"]["shape"])
        b = np.asarray(layer["bias"]["values"]).reshape(layer["bias"]["shape"])
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(f"layer {i} shapes {w.shape}/{b.shape} do not chain for {cfg}")
        params.layers.append((tape.parameter(w), tape.parameter(b)))
    return params


def load_metadata(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    return doc.get("metadata", {})

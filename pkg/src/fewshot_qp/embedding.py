"""Small embedding networks with hand-written reverse-mode gradients.

Three kinds are supported: ``identity``, ``linear`` (a single affine map)
and ``mlp`` (affine layers with a ReLU or LeakyReLU(0.1) between them and
a linear output). Parameters live in an ordered name -> array mapping with
``W{i}`` of shape ``(out, in)`` and ``b{i}`` of shape ``(out,)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.1


class ShapeMismatch(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


class StaleTape(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = "linear"
    input_dim: int = 80
    output_dim: int = 16
    hidden: Tuple[int, ...] = ()
    activation: str = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("identity", "linear", "mlp"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.kind == "identity" and self.input_dim != self.output_dim:
            raise ValueError("identity embedding needs input_dim == output_dim")

    def layer_dims(self) -> List[Tuple[int, int]]:
        if self.kind == "identity":
            return []
        sizes = [self.input_dim]
        if self.kind == "mlp":
            sizes += list(self.hidden)
        sizes.append(self.output_dim)
        return list(zip(sizes[:-1], sizes[1:]))


ParameterStore = Dict[str, np.ndarray]


def num_parameters(params: ParameterStore) -> int:
    return int(sum(v.size for v in params.values()))


def init_params(spec: EmbeddingSpec, rng: np.random.Generator) -> ParameterStore:
    """Kaiming-uniform weights (variance ``2 / fan_in``) and zero biases."""
    params: ParameterStore = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = np.sqrt(6.0 / fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _activate(spec, x):
    slope = LEAKY_SLOPE if spec.activation == "leaky_relu" else 0.0
    return np.where(x > 0, x, slope * x)


def _activate_grad(spec, x):
    # at exactly 0 the negative-slope branch is taken
    slope = LEAKY_SLOPE if spec.activation == "leaky_relu" else 0.0
    return np.where(x > 0, 1.0, slope)


@dataclass
class Tape:
    spec: EmbeddingSpec
    params: ParameterStore
    inputs: List[np.ndarray] = field(default_factory=list)  # input to each affine layer
    pre: List[np.ndarray] = field(default_factory=list)  # pre-activations of hidden layers
    used: bool = False


def forward(spec: EmbeddingSpec, params: ParameterStore, inputs) -> Tuple[np.ndarray, Tape]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatch(f"inputs {x.shape} do not match input_dim {spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("inputs contain NaN or inf")
    tape = Tape(spec, params)
    layers = spec.layer_dims()
    for i, (fan_in, fan_out) in enumerate(layers):
        W, b = params[f"W{i}"], params[f"b{i}"]
        if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise ShapeMismatch(f"layer {i} parameters have shapes {W.shape}, {b.shape}")
        tape.inputs.append(x)
        x = x @ W.T + b
        if i < len(layers) - 1:
            tape.pre.append(x)
            x = _activate(spec, x)
    return x, tape


def vjp(tape: Tape, dL_dfeatures, consume: bool = False) -> Tuple[ParameterStore, np.ndarray]:
    """Reverse pass: gradients for every parameter and for the inputs.

    With ``consume=True`` the tape is marked spent and a second call raises
    :class:`StaleTape`.
    """
    if tape.used:
        raise StaleTape("tape was already consumed")
    g = np.asarray(dL_dfeatures, dtype=float)
    spec = tape.spec
    grads: ParameterStore = {}
    n_layers = len(spec.layer_dims())
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * _activate_grad(spec, tape.pre[i])
        grads[f"W{i}"] = g.T @ tape.inputs[i]
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ tape.params[f"W{i}"]
    if consume:
        tape.used = True
    return {k: grads[k] for k in tape.params}, g


def save_checkpoint(path, spec: EmbeddingSpec, params: ParameterStore, seed: int,
                    extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats are stored with ``repr`` precision so reloads are exact."""
    doc = {
        "format": "fewshot_qp.checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": asdict(spec),
        "seed": seed,
        "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                    for k, v in params.items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Return ``(spec, params, seed, extra)`` from a checkpoint file."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "fewshot_qp.checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    spec = EmbeddingSpec(**doc["spec"])
    params = {k: np.array(t["data"], dtype=float).reshape(t["shape"])
              for k, t in doc["tensors"].items()}
    return spec, params, doc["seed"], doc.get("extra", {})

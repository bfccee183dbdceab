"""Late-fusion multimodal classifier with per-modality auxiliary heads.

Each modality k has an encoder g_k (one affine layer, tanh by default)
producing an embedding Z^k. The fusion head sees the concatenation of all
embeddings; each modality head sees only its own embedding.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    d_in: tuple[int, ...]
    d_emb: tuple[int, ...]
    num_classes: int
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if len(self.d_in) == 0 or len(self.d_in) != len(self.d_emb):
            raise ConfigError("d_in and d_emb must be non-empty and of equal length")
        for k, (a, b) in enumerate(zip(self.d_in, self.d_emb)):
            if a < 1 or b < 1:
                raise ConfigError(f"modality {k}: d_in and d_emb must be >= 1 (got {a}, {b})")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.activation not in ("tanh", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class ModalityEncoder:
    weight: dc.Node
    bias: dc.Node
    activation: str = "tanh"

    def __call__(self, x: dc.Node) -> dc.Node:
        z = dc.add_rowvec(dc.matmul(x, self.weight), self.bias)
        return dc.tanh(z) if self.activation == "tanh" else z


@dataclass
class Linear:
    """Affine classifier; used for both the fusion head and modality heads."""
    weight: dc.Node
    bias: dc.Node

    def __call__(self, x: dc.Node) -> dc.Node:
        return dc.add_rowvec(dc.matmul(x, self.weight), self.bias)


FusionHead = Linear
ModalityHead = Linear


@dataclass
class ForwardOutput:
    fused_probs: dc.Node
    modality_probs: list[dc.Node]
    fused_logits: dc.Node
    modality_logits: list[dc.Node]
    embeddings: list[dc.Node]


@dataclass
class MultimodalModel:
    encoders: list[ModalityEncoder]
    fusion: Linear
    heads: list[Linear]
    num_classes: int
    spec: ModelSpec | None = field(default=None, repr=False)

    @property
    def num_modalities(self) -> int:
        return len(self.encoders)

    def named_parameters(self) -> list[tuple[str, dc.Node]]:
        out = []
        for k, enc in enumerate(self.encoders):
            out += [(f"encoder{k}.weight", enc.weight), (f"encoder{k}.bias", enc.bias)]
        out += [("fusion.weight", self.fusion.weight), ("fusion.bias", self.fusion.bias)]
        for k, head in enumerate(self.heads):
            out += [(f"head{k}.weight", head.weight), (f"head{k}.bias", head.bias)]
        return out

    def parameters(self) -> list[dc.Node]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(state) != set(params):
            raise ConfigError(f"state keys differ: {sorted(set(state) ^ set(params))}")
        for name, node in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != node.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {node.shape}")
            set_value(node, arr)

    def copy(self) -> "MultimodalModel":
        clone = init(self.spec) if self.spec is not None else None
        if clone is None:
            raise ConfigError("model without spec cannot be copied")
        clone.load_state_dict(self.state_dict())
        return clone

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def set_value(node: dc.Node, value: np.ndarray) -> None:
    """Replace a parameter's value in place (optimizer and loader use this)."""
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    node.value = arr


def init(spec: ModelSpec) -> MultimodalModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes

    def uniform(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return dc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    encoders = [ModalityEncoder(uniform(di, de), dc.parameter(np.zeros(de)), spec.activation)
                for di, de in zip(spec.d_in, spec.d_emb)]
    total_emb = sum(spec.d_emb)
    fusion = Linear(uniform(total_emb, C), dc.parameter(np.zeros(C)))
    heads = [Linear(uniform(de, C), dc.parameter(np.zeros(C))) for de in spec.d_emb]
    return MultimodalModel(encoders, fusion, heads, C, spec)


def expected_parameter_count(spec: ModelSpec) -> int:
    C = spec.num_classes
    enc = sum(di * de + de for di, de in zip(spec.d_in, spec.d_emb))
    fusion = sum(spec.d_emb) * C + C
    heads = sum(de * C + C for de in spec.d_emb)
    return enc + fusion + heads


def forward(model: MultimodalModel, features) -> ForwardOutput:
    """Run all modalities through the model.

    ``features`` is a sequence of M arrays (or Nodes) of shape (B, d_in_k).
    """
    if len(features) != model.num_modalities:
        raise dc.DimensionError(
            f"expected {model.num_modalities} modalities, got {len(features)}")
    embeddings = []
    for k, (enc, x) in enumerate(zip(model.encoders, features)):
        x = x if isinstance(x, dc.Node) else dc.constant(x)
        if x.value.ndim != 2 or x.shape[1] != enc.weight.shape[0]:
            raise dc.DimensionError(
                f"modality {k}: expected (B, {enc.weight.shape[0]}) features, got {x.shape}")
        embeddings.append(enc(x))
    fused_logits = model.fusion(dc.concat(embeddings, axis=1))
    modality_logits = [head(z) for head, z in zip(model.heads, embeddings)]
    return ForwardOutput(
        fused_probs=dc.softmax(fused_logits, axis=1),
        modality_probs=[dc.softmax(lg, axis=1) for lg in modality_logits],
        fused_logits=fused_logits,
        modality_logits=modality_logits,
        embeddings=embeddings,
    )


def adaptable_parameters(model: MultimodalModel, include_heads: bool = False) -> list[dc.Node]:
    """Parameters updated at test time.

    The last encoder layer of every modality (here the only one) plus the
    fusion head; modality heads stay frozen unless ``include_heads``.
    """
    params = []
    for enc in model.encoders:
        params += [enc.weight, enc.bias]
    params += [model.fusion.weight, model.fusion.bias]
    if include_heads:
        for head in model.heads:
            params += [head.weight, head.bias]
    return params


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MultimodalModel, path) -> None:
    spec = model.spec
    payload = {
        "spec": {"d_in": list(spec.d_in), "d_emb": list(spec.d_emb),
                 "num_classes": spec.num_classes, "activation": spec.activation,
                 "seed": spec.seed},
        # float.hex keeps the round trip bit-exact
        "params": {name: {"shape": list(arr.shape), "data": [float(v).hex() for v in arr.ravel()]}
                   for name, arr in model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_checkpoint(path) -> MultimodalModel:
    payload = json.loads(Path(path).read_text())
    s = payload["spec"]
    spec = ModelSpec(tuple(s["d_in"]), tuple(s["d_emb"]), s["num_classes"],
                     s["activation"], s["seed"])
    model = init(spec)
    state = {name: np.array([float.fromhex(v) for v in entry["data"]]).reshape(entry["shape"])
             for name, entry in payload["params"].items()}
    model.load_state_dict(state)
    return model

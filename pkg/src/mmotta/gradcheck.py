"""Central finite-difference checks for every loss in :mod:`mmotta.losses`.

Each check draws random logits, maps them through softmax inside the graph,
and compares the reverse-mode gradient with respect to the logits against
central differences of the forward value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import losses as L


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<32} trials={self.trials} max_rel_err={self.max_rel_err:.3e}"


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray],
                 eps: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            up = f(arrays)
            a[idx] = orig - eps
            down = f(arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_grad(build: Callable[[list[dc.Node]], dc.Node], arrays: list[np.ndarray]) -> list[np.ndarray]:
    params = [dc.parameter(a.copy()) for a in arrays]
    dc.backward(build(params))
    return [p.grad.copy() for p in params]


def relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(build: Callable[[list[dc.Node]], dc.Node], arrays: list[np.ndarray], eps: float = 1e-5,
          oracle: Callable[[list[dc.Node]], dc.Node] | None = None) -> float:
    """Relative error between reverse-mode and central-difference gradients.

    ``oracle`` (default ``build``) is the function differenced numerically;
    detached-weight losses pass a version with the weight frozen as a constant.
    """
    oracle = build if oracle is None else oracle
    value = lambda arrs: oracle([dc.constant(x) for x in arrs]).item()
    return relative_error(analytic_grad(build, arrays), numeric_grad(value, [a.copy() for a in arrays], eps))


class _Out:
    """Minimal stand-in for ForwardOutput (probabilities only)."""

    def __init__(self, fused, modality):
        self.fused_probs = fused
        self.modality_probs = modality


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _loss_builders(cfg: L.LossConfig, arrays: list[np.ndarray]) -> dict[str, tuple[Callable, Callable]]:
    """name -> (builder, oracle). arrays[0] are fused logits, the rest per modality."""
    if cfg.detach_weight:
        H0 = L.entropy_np(_softmax_np(arrays[0]))
        w_frozen = dc.constant(np.tanh(cfg.beta * (H0 - cfg.alpha)))
        frozen = lambda fused: w_frozen
    else:
        frozen = None

    def probs(nodes):
        return [dc.softmax(n) for n in nodes]

    def weight(fused):
        return L.adaptive_weight(L.normalized_entropy(fused), cfg)

    def pair(make):
        build = lambda nodes: make(nodes, weight)
        oracle = build if frozen is None else (lambda nodes: make(nodes, frozen))
        return build, oracle

    def uae(nodes, wf):
        p = probs(nodes)[0]
        return L.uae_loss(p, cfg, weight=wf(p))

    def amp_ent(nodes, wf):
        p = probs(nodes)
        return L.amp_entropy_loss(p[1:], wf(p[0]), cfg)

    def amp_dis(nodes, wf):
        p = probs(nodes)
        return L.amp_discrepancy_loss(p[1:], wf(p[0]), cfg)

    def total(nodes, wf):
        p = probs(nodes)
        W = wf(p[0])
        ent = L.uae_loss(p[0], cfg, weight=W)
        amp = dc.add(L.amp_entropy_loss(p[1:], W), L.amp_discrepancy_loss(p[1:], W))
        return dc.add(dc.add(ent, dc.scale(amp, cfg.gamma1)), dc.scale(L.div_loss(p[0]), cfg.gamma2))

    def total_public(nodes):
        p = probs(nodes)
        return L.aeo_loss(_Out(p[0], p[1:]), cfg).total_node

    out = {"uae": pair(uae), "amp_entropy": pair(amp_ent), "amp_discrepancy": pair(amp_dis)}
    _, total_oracle = pair(total)
    out["aeo_total"] = (total_public, total_oracle)
    if cfg.detach_weight:
        div = lambda nodes: L.div_loss(probs(nodes)[0])
        tent = lambda nodes: L.tent_loss(probs(nodes)[0])
        out["div"] = (div, div)
        out["tent"] = (tent, tent)
    return out


def run_suite(trials: int = 20, seed: int = 0, batch: int = 3, num_classes: int = 4,
              num_modalities: int = 2, tol: float = 1e-4, eps: float = 1e-5) -> list[CheckResult]:
    """Every loss in both detach modes on ``trials`` random logit sets each."""
    rng = np.random.default_rng(seed)
    results = []
    for detach in (True, False):
        cfg = L.LossConfig(detach_weight=detach)
        worst: dict[str, float] = {}
        for _ in range(trials):
            scale = rng.uniform(0.2, 3.0)
            arrays = [rng.standard_normal((batch, num_classes)) * scale for _ in range(num_modalities + 1)]
            for name, (build, oracle) in _loss_builders(cfg, arrays).items():
                worst[name] = max(worst.get(name, 0.0), check(build, arrays, eps, oracle))
        tag = "detach" if detach else "through"
        results += [CheckResult(f"{name}[{tag}]", trials, err, tol) for name, err in worst.items()]
    return results


def _rebuild(model, nodes):
    """Same architecture as ``model`` with parameters taken from ``nodes``
    (in ``named_parameters`` order)."""
    from . import model as mdl

    it = iter(nodes)
    enc = [mdl.ModalityEncoder(next(it), next(it), e.activation) for e in model.encoders]
    fusion = mdl.Linear(next(it), next(it))
    heads = [mdl.Linear(next(it), next(it)) for _ in model.heads]
    return mdl.MultimodalModel(enc, fusion, heads, model.num_classes, model.spec)


def model_check(seed: int = 0, tol: float = 1e-4, eps: float = 1e-5) -> CheckResult:
    """AEO total loss (weight not detached) with respect to every model parameter."""
    from . import model as mdl

    rng = np.random.default_rng(seed)
    model = mdl.init(mdl.ModelSpec((3, 4), (3, 2), 4, "tanh", seed))
    feats = [rng.standard_normal((5, d)) for d in model.spec.d_in]
    cfg = L.LossConfig(detach_weight=False)

    def build(nodes):
        return L.aeo_loss(mdl.forward(_rebuild(model, nodes), feats), cfg).total_node

    err = check(build, [p.value.copy() for p in model.parameters()], eps)
    return CheckResult("model_parameters[aeo_total]", 1, err, tol)

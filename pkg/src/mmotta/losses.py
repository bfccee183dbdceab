"""Adaptive entropy-aware objectives on top of :mod:`mmotta.diffcore`.

All per-sample terms are averaged over the batch. The adaptive weight is
computed from the *fused* prediction and, by default, carries no gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.8
    beta: float = 4.0
    gamma1: float = 0.1
    gamma2: float = 0.1
    detach_weight: bool = True
    discrepancy: str = "l1"
    use_uae: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigError("gamma1 and gamma2 must be >= 0")
        if self.discrepancy != "l1":
            raise ConfigError(f"unsupported discrepancy {self.discrepancy!r}")


@dataclass
class LossBreakdown:
    ada_ent: float
    ada_ent_star: float
    ada_dis: float
    div: float
    total: float
    per_sample_entropy: np.ndarray
    per_sample_weight: np.ndarray
    total_node: Node = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {"ada_ent": self.ada_ent, "ada_ent_star": self.ada_ent_star,
                "ada_dis": self.ada_dis, "div": self.div, "total": self.total}


def _node(x) -> Node:
    return x if isinstance(x, Node) else dc.constant(x)


def _check_batch(p: Node) -> None:
    if p.value.ndim != 2 or p.shape[0] == 0:
        raise dc.ContractError(f"expected a non-empty (B, C) batch, got shape {p.shape}")


def normalized_entropy(p, num_classes: int | None = None) -> Node:
    """Shannon entropy of each row divided by log C; 0 for one-hot, 1 for uniform."""
    p = _node(p)
    C = p.shape[-1] if num_classes is None else num_classes
    if C < 2:
        raise ConfigError(f"normalized entropy needs C >= 2, got {C}")
    plogp = dc.mul(p, dc.log(p))
    return dc.scale(dc.reduce_sum(plogp, axis=-1), -1.0 / math.log(C))


def adaptive_weight(H, cfg: LossConfig) -> Node:
    """tanh(beta * (H - alpha)); stop-gradient when ``cfg.detach_weight``."""
    H = _node(H)
    w = dc.tanh(dc.scale(dc.add(H, dc.constant(-cfg.alpha)), cfg.beta))
    return dc.detach(w) if cfg.detach_weight else w


def _weighted_mean(values: Node, weight: Node) -> Node:
    # -(1/B) * sum_i values_i * W_i
    return dc.neg(dc.reduce_mean(dc.mul(values, weight)))


def uae_loss(fused_probs, cfg: LossConfig, weight=None) -> Node:
    p = _node(fused_probs)
    _check_batch(p)
    H = normalized_entropy(p)
    W = adaptive_weight(H, cfg) if weight is None else _node(weight)
    return _weighted_mean(H, W)


def amp_entropy_loss(modality_probs: Sequence, weight, cfg: LossConfig | None = None) -> Node:
    """Mean over modalities of the weighted normalized entropy."""
    probs = [_node(p) for p in modality_probs]
    for p in probs:
        _check_batch(p)
    M = len(probs)
    mean_H = dc.scale(_sum_nodes([normalized_entropy(p) for p in probs]), 1.0 / M)
    return _weighted_mean(mean_H, _node(weight))


def discrepancy(p1, p2) -> Node:
    """Row-wise L1 distance; a 1-D pair gives a scalar."""
    p1, p2 = _node(p1), _node(p2)
    if p1.shape != p2.shape:
        raise dc.DimensionError(f"discrepancy shapes differ: {p1.shape} vs {p2.shape}")
    return dc.reduce_sum(dc.abs_(dc.sub(p1, p2)), axis=-1)


def amp_discrepancy_loss(modality_probs: Sequence, weight, cfg: LossConfig | None = None) -> Node:
    """All-pairs form with coefficient 2 / (M (M - 1)); plain pair for M = 2."""
    probs = [_node(p) for p in modality_probs]
    M = len(probs)
    if M < 2:
        raise ConfigError("discrepancy loss needs at least two modalities")
    pairs = [discrepancy(probs[i], probs[j]) for i, j in combinations(range(M), 2)]
    mean_dis = dc.scale(_sum_nodes(pairs), 2.0 / (M * (M - 1)))
    return _weighted_mean(mean_dis, _node(weight))


def div_loss(fused_probs) -> Node:
    """sum_c pbar_c log pbar_c where pbar is the batch-mean prediction."""
    p = _node(fused_probs)
    _check_batch(p)
    pbar = dc.reduce_mean(p, axis=0)
    return dc.reduce_sum(dc.mul(pbar, dc.log(pbar)))


def tent_loss(fused_probs) -> Node:
    """Batch-mean unnormalized entropy of the fused prediction."""
    p = _node(fused_probs)
    _check_batch(p)
    return dc.neg(dc.reduce_mean(dc.reduce_sum(dc.mul(p, dc.log(p)), axis=-1)))


def _sum_nodes(nodes: list[Node]) -> Node:
    out = nodes[0]
    for n in nodes[1:]:
        out = dc.add(out, n)
    return out


def aeo_loss(output, cfg: LossConfig) -> LossBreakdown:
    """L_AdaEnt + gamma1 (L_AdaEnt* + L_AdaDis) + gamma2 L_Div.

    ``output`` needs ``fused_probs`` and ``modality_probs`` (a ForwardOutput).
    With ``cfg.use_uae`` off the first term is dropped (AMP-only ablation).
    The AMP terms are skipped when there is a single modality.
    """
    fused = output.fused_probs
    _check_batch(fused)
    H = normalized_entropy(fused)
    W = adaptive_weight(H, cfg)
    zero = dc.constant(0.0)

    ada_ent = _weighted_mean(H, W)
    M = len(output.modality_probs)
    if M >= 2:
        ada_ent_star = amp_entropy_loss(output.modality_probs, W)
        ada_dis = amp_discrepancy_loss(output.modality_probs, W)
    elif M == 1:
        ada_ent_star, ada_dis = amp_entropy_loss(output.modality_probs, W), zero
    else:
        ada_ent_star, ada_dis = zero, zero
    div = div_loss(fused)

    terms = []
    if cfg.use_uae:
        terms.append(ada_ent)
    if cfg.gamma1:
        terms.append(dc.scale(dc.add(ada_ent_star, ada_dis), cfg.gamma1))
    if cfg.gamma2:
        terms.append(dc.scale(div, cfg.gamma2))
    total = _sum_nodes(terms) if terms else zero

    return LossBreakdown(
        ada_ent=ada_ent.item(), ada_ent_star=ada_ent_star.item(), ada_dis=ada_dis.item(),
        div=div.item(), total=total.item(),
        per_sample_entropy=H.value.copy(), per_sample_weight=W.value.copy(),
        total_node=total,
    )


# ---------------------------------------------------------------------------
# plain numpy helpers for recording (no graph)

def entropy_np(p: np.ndarray, normalized: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    h = -(p * np.log(p + dc.EPS_LOG)).sum(axis=-1)
    return h / math.log(p.shape[-1]) if normalized else h

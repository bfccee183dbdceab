"""Online test-time adaptation loop for the source, tent and aeo methods.

Per batch: forward, record predictions and scores (pre-update), build the
method's loss, backpropagate and take one Adam step on the adaptable
parameters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import diffcore as dc
from . import losses as L
from . import metrics as mt
from . import model as mdl
from .optimizer import Adam, NonFiniteGradient

log = logging.getLogger(__name__)

METHODS = ("source", "tent", "aeo")
ABLATIONS = ("full", "uae_only", "amp_only", "no_div")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    method: str = "aeo"
    loss_cfg: L.LossConfig = field(default_factory=L.LossConfig)
    score_kind: str = "msp"
    ablation: str = "full"
    lr: float = 2e-5
    include_heads: bool = False
    clip_norm: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.score_kind not in mt.SCORE_KINDS:
            raise ConfigError(f"unknown score kind {self.score_kind!r}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    @property
    def effective_loss_cfg(self) -> L.LossConfig:
        cfg = self.loss_cfg
        if self.ablation == "uae_only":
            return replace(cfg, gamma1=0.0)
        if self.ablation == "amp_only":
            return replace(cfg, use_uae=False)
        if self.ablation == "no_div":
            return replace(cfg, gamma2=0.0)
        return cfg

    @property
    def label(self) -> str:
        return self.method if self.ablation == "full" else f"{self.method}-{self.ablation}"


@dataclass
class BatchRecord:
    batch_index: int
    segment: str
    labels: np.ndarray
    preds: np.ndarray
    scores: np.ndarray
    entropy: np.ndarray
    weight: np.ndarray
    loss: dict = field(default_factory=dict)
    skipped: bool = False
    detected_known: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "batch_index": self.batch_index, "segment": self.segment,
            "labels": self.labels.tolist(), "preds": self.preds.tolist(),
            "scores": self.scores.tolist(), "entropy": self.entropy.tolist(),
            "weight": self.weight.tolist(), "loss": dict(self.loss), "skipped": self.skipped,
        }
        if self.detected_known is not None:
            out["detected_known"] = self.detected_known.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BatchRecord":
        det = d.get("detected_known")
        return cls(d["batch_index"], d["segment"], np.array(d["labels"], dtype=np.int64),
                   np.array(d["preds"], dtype=np.int64), np.array(d["scores"], dtype=np.float64),
                   np.array(d["entropy"], dtype=np.float64), np.array(d["weight"], dtype=np.float64),
                   dict(d["loss"]), bool(d["skipped"]),
                   None if det is None else np.array(det, dtype=bool))


class AdaptState:
    """Model, optimizer and batch counter; never reset within an episode."""

    def __init__(self, model: mdl.MultimodalModel, cfg: MethodConfig, eta: float | None = None):
        self.model = model
        self.cfg = cfg
        self.params = mdl.adaptable_parameters(model, include_heads=cfg.include_heads)
        self.optimizer = Adam(self.params, lr=cfg.lr, clip_norm=cfg.clip_norm)
        self.batch_index = 0
        self.detector = None if eta is None else mt.DetectorConfig(eta)


def _method_loss(out: mdl.ForwardOutput, cfg: MethodConfig):
    if cfg.method == "tent":
        node = L.tent_loss(out.fused_probs)
        return node, {"tent": node.item(), "total": node.item()}
    bd = L.aeo_loss(out, cfg.effective_loss_cfg)
    return bd.total_node, bd.as_dict()


def adapt_batch(state: AdaptState, batch, cfg: MethodConfig | None = None) -> BatchRecord:
    cfg = state.cfg if cfg is None else cfg
    model = state.model
    out = mdl.forward(model, batch.features)
    fused = out.fused_probs.value
    preds = fused.argmax(axis=1)
    scores = mt.score(out, cfg.score_kind)
    H = L.entropy_np(fused)
    lc = cfg.loss_cfg
    W = np.tanh(lc.beta * (H - lc.alpha))
    detected = None if state.detector is None else mt.detect(scores, state.detector)

    record = BatchRecord(state.batch_index, batch.segment, np.asarray(batch.labels).copy(),
                         preds, scores, H, W, detected_known=detected)
    state.batch_index += 1
    if cfg.method == "source":
        return record

    loss, values = _method_loss(out, cfg)
    record.loss = values
    if not math.isfinite(loss.item()):
        log.warning("batch %d: non-finite loss, update skipped", record.batch_index)
        record.skipped = True
        return record
    state.optimizer.zero_grad()
    dc.backward(loss)
    try:
        state.optimizer.step(record.batch_index)
    except NonFiniteGradient as exc:
        log.warning("%s", exc)
        record.skipped = True
    return record


# ---------------------------------------------------------------------------
# evaluation over records

def eval_set(records: Iterable[BatchRecord]) -> mt.EvalSet:
    ev = mt.EvalSet()
    for r in records:
        ev.extend(r.scores, r.labels, r.preds)
    return ev


def segment_metrics(records: list[BatchRecord]) -> list[tuple[str, dict]]:
    """Metrics per segment in first-appearance order, then ``all``."""
    order: dict[str, list[BatchRecord]] = {}
    for r in records:
        order.setdefault(r.segment, []).append(r)
    out = [(seg, mt.evaluate(eval_set(rs))) for seg, rs in order.items()]
    if len(order) > 1:
        out.append(("all", mt.evaluate(eval_set(records))))
    return out


def entropy_gap(records: Iterable[BatchRecord]) -> float:
    """Mean normalized entropy of unknown samples minus that of known ones."""
    H = np.concatenate([r.entropy for r in records])
    y = np.concatenate([r.labels for r in records])
    if not (y >= 0).any() or not (y < 0).any():
        return float("nan")
    return float(H[y < 0].mean() - H[y >= 0].mean())


def entropy_gap_trace(records: list[BatchRecord], window: int = 5) -> list[float]:
    if window < 1:
        raise ValueError("window must be >= 1")
    return [entropy_gap(records[i:i + window]) for i in range(0, len(records), window)]


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise mt.MetricUndefined("need two equal-length series of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise mt.MetricUndefined("correlation undefined for a constant series")
    return float(dx @ dy) / math.sqrt(sxx * syy)


def gap_fpr_correlation(gaps, fpr95s) -> float:
    """Pearson r between pre-adaptation entropy gap and 1 - FPR95."""
    return pearson(gaps, 1.0 - np.asarray(fpr95s, dtype=np.float64))


@dataclass
class EpisodeReport:
    segments: list[tuple[str, dict]]
    gap: float
    trace: list[float]
    histogram: tuple
    skipped_batches: int

    def metrics(self, segment: str | None = None) -> dict:
        if segment is None:
            segment = "all" if any(s == "all" for s, _ in self.segments) else self.segments[0][0]
        return dict(self.segments)[segment]


def run_episode(model: mdl.MultimodalModel, stream: Iterable, cfg: MethodConfig,
                eta: float | None = None, window: int = 5, copy_model: bool = True):
    """Adapt over a whole stream; returns (records, report, adapted model)."""
    model = model.copy() if copy_model else model
    state = AdaptState(model, cfg, eta)
    records = [adapt_batch(state, b) for b in stream]
    if not records:
        raise mt.MetricUndefined("empty stream")
    ev = eval_set(records)
    report = EpisodeReport(
        segments=segment_metrics(records),
        gap=entropy_gap(records),
        trace=entropy_gap_trace(records, window),
        histogram=mt.histogram(ev.known_scores, ev.unknown_scores, 50),
        skipped_batches=sum(r.skipped for r in records),
    )
    return records, report, model

"""Synthetic multimodal open-set data with controllable domain shift.

Every class has one prototype per modality; samples are prototype plus
isotropic Gaussian noise, with modalities conditionally independent given
the class. Unknown-class prototypes sit angularly between several known
prototypes (a different random subset in each modality), so each modality
finds them ambiguous and the modalities tend to disagree with one another.

A target domain applies, per modality, an affine map
``x -> s (I + j G / sqrt(d)) x + o u`` and inflates the noise by a factor.

Labels: known samples carry their class id in ``[0, C)``; unknown samples
carry ``-1 - u`` for unknown class ``u``, so ``label < 0`` marks unknown.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from . import model as mdl
from .optimizer import Adam


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainShift:
    name: str = "identity"
    contraction: tuple[float, ...] = (1.0,)
    jitter: tuple[float, ...] = (0.0,)
    offset: tuple[float, ...] = (0.0,)
    noise_mult: tuple[float, ...] = (1.0,)

    def per_modality(self, M: int) -> "DomainShift":
        """Broadcast length-1 knobs to M modalities."""
        def fit(t, name):
            t = tuple(float(v) for v in t)
            if len(t) == 1:
                return t * M
            if len(t) != M:
                raise ConfigError(f"domain {self.name!r}: {name} has {len(t)} entries, expected {M}")
            return t
        return DomainShift(self.name, fit(self.contraction, "contraction"), fit(self.jitter, "jitter"),
                           fit(self.offset, "offset"), fit(self.noise_mult, "noise_mult"))


def default_domains() -> tuple[DomainShift, ...]:
    # a symmetric shift, then two where one modality is hit harder than the other
    return (
        DomainShift("shiftA", (0.44,), (0.085,), (0.30,), (1.07,)),
        DomainShift("shiftB", (0.33, 0.55), (0.085,), (0.30,), (1.07,)),
        DomainShift("shiftC", (0.55, 0.33), (0.085,), (0.30,), (1.07,)),
    )


@dataclass(frozen=True)
class ScenarioConfig:
    """User-facing scenario knobs (everything needed to rebuild the data)."""
    num_modalities: int = 2
    d_in: tuple[int, ...] = (16, 16)
    num_classes: int = 6
    num_unknown: int = 4
    r_known: float = 3.0
    r_unknown: float | tuple[float, ...] = 2.4
    unknown_mix: int = 4
    unknown_jitter: float = 0.30
    unknown_overlap: float = 0.17
    noise_sigma: float = 0.19
    min_separation: float = 0.5
    domains: tuple[DomainShift, ...] = field(default_factory=default_domains)
    n_source: int = 1200
    n_target: int = 640
    unknown_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_modalities < 1:
            raise ConfigError("num_modalities must be >= 1")
        if len(self.d_in) != self.num_modalities:
            raise ConfigError(f"d_in has {len(self.d_in)} entries for {self.num_modalities} modalities")
        if any(d < 1 for d in self.d_in):
            raise ConfigError("every d_in must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (entropy normalization uses log C)")
        if self.num_unknown < 1:
            raise ConfigError("num_unknown must be >= 1")
        if not 0.0 <= self.unknown_overlap <= 1.0:
            raise ConfigError("unknown_overlap must lie in [0, 1]")
        if not 2 <= self.unknown_mix <= self.num_classes:
            raise ConfigError("unknown_mix must lie in [2, num_classes]")
        if not 0.0 < self.unknown_ratio < 1.0:
            raise ConfigError("unknown_ratio must lie in (0, 1)")
        if np.ndim(self.r_unknown) != 0 and len(self.r_unknown) != self.num_unknown:
            raise ConfigError(f"r_unknown has {len(self.r_unknown)} radii for {self.num_unknown} unknown classes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.domains:
            raise ConfigError("at least one target domain is required")

    def unknown_radii(self) -> tuple[float, ...]:
        r = self.r_unknown
        if np.ndim(r) == 0:
            return (float(r),) * self.num_unknown
        return tuple(float(v) for v in r)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.r_unknown, tuple):
            d["r_unknown"] = list(self.r_unknown)
        d["d_in"] = list(self.d_in)
        d["domains"] = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(s).items()}
                        for s in self.domains]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "d_in" in d:
            d["d_in"] = tuple(d["d_in"])
        if isinstance(d.get("r_unknown"), list):
            d["r_unknown"] = tuple(d["r_unknown"])
        if "domains" in d:
            d["domains"] = tuple(
                DomainShift(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in s.items()})
                for s in d["domains"])
        return cls(**d)


@dataclass
class DomainTransform:
    matrices: list[np.ndarray]
    offsets: list[np.ndarray]
    noise_mult: tuple[float, ...]

    def apply(self, k: int, x: np.ndarray) -> np.ndarray:
        return x @ self.matrices[k].T + self.offsets[k]


@dataclass
class Scenario:
    config: ScenarioConfig
    known_protos: list[np.ndarray]      # per modality, (C, d_k)
    unknown_protos: list[np.ndarray]    # per modality, (C_unk, d_k)
    transforms: list[DomainTransform]

    @property
    def num_modalities(self) -> int:
        return self.config.num_modalities

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def min_pairwise_distance(self) -> float:
        best = np.inf
        for k in range(self.num_modalities):
            P = np.vstack([self.known_protos[k], self.unknown_protos[k]])
            diff = P[:, None, :] - P[None, :, :]
            d = np.sqrt((diff ** 2).sum(-1))
            d[np.diag_indices_from(d)] = np.inf
            best = min(best, float(d.min()))
        return best


@dataclass(frozen=True)
class Batch:
    features: tuple[np.ndarray, ...]
    labels: np.ndarray
    segment: str = ""
    domain: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def known_mask(self) -> np.ndarray:
        return self.labels >= 0


@dataclass
class Dataset:
    features: list[np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def to_csv(self, path) -> None:
        """One row per sample: all modality features, label column last."""
        cols = []
        for k, X in enumerate(self.features):
            cols += [f"m{k}_f{j}" for j in range(X.shape[1])]
        data = np.hstack(self.features + [self.labels[:, None].astype(np.float64)])
        with open(path, "w") as fh:
            fh.write(",".join(cols + ["label"]) + "\n")
            for row in data:
                fh.write(",".join(format(v, ".17g") for v in row[:-1]) + f",{int(row[-1])}\n")


PROTOCOLS = ("single", "long_term", "continual", "mixed")


@dataclass(frozen=True)
class Protocol:
    kind: str = "single"
    rounds: int = 10
    domains: tuple[int, ...] | None = None   # indices into ScenarioConfig.domains

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.kind!r}; choose from {PROTOCOLS}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")

    def domain_indices(self, n_domains: int) -> tuple[int, ...]:
        if self.domains is not None:
            idx = tuple(self.domains)
        elif self.kind in ("continual", "mixed"):
            idx = tuple(range(n_domains))
        else:
            idx = (0,)
        for i in idx:
            if not 0 <= i < n_domains:
                raise ConfigError(f"domain index {i} out of range (have {n_domains})")
        return idx


# ---------------------------------------------------------------------------

def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _orthogonal_unit(rng, K: np.ndarray) -> np.ndarray:
    """Random unit vector orthogonal to the rows of K (when the dimension allows)."""
    v = rng.standard_normal(K.shape[1])
    if K.shape[0] < K.shape[1]:
        q, _ = np.linalg.qr(K.T)
        v = v - q @ (q.T @ v)
    return v / np.linalg.norm(v)


def make_scenario(cfg: ScenarioConfig, max_tries: int = 200) -> Scenario:
    """Draw prototypes and domain transforms deterministically from ``cfg.seed``.

    Prototypes are redrawn until every pair (known and unknown, per modality)
    is at least ``cfg.min_separation`` apart.
    """
    rng = np.random.default_rng([cfg.seed, 11])
    C, U = cfg.num_classes, cfg.num_unknown
    radii = cfg.unknown_radii()
    for _ in range(max_tries):
        known, unknown = [], []
        for d in cfg.d_in:
            K = _unit_rows(rng, C, d) * cfg.r_known
            rows = []
            for _u in range(U):
                subset = rng.choice(C, size=cfg.unknown_mix, replace=False)
                between = K[subset].sum(axis=0) + cfg.unknown_jitter * cfg.r_known * _unit_rows(rng, 1, d)[0]
                between /= np.linalg.norm(between)
                novel = _orthogonal_unit(rng, K)
                a = cfg.unknown_overlap
                direction = a * between + (1.0 - a) * novel
                rows.append(direction / np.linalg.norm(direction) * radii[_u])
            known.append(K)
            unknown.append(np.array(rows))
        scen = Scenario(cfg, known, unknown, [])
        if scen.min_pairwise_distance() >= cfg.min_separation:
            break
    else:
        raise ConfigError("could not draw prototypes meeting min_separation; lower it or raise dims")

    M = cfg.num_modalities
    for i, shift in enumerate(cfg.domains):
        shift = shift.per_modality(M)
        drng = np.random.default_rng([cfg.seed, 23, i])
        mats, offs = [], []
        for k, d in enumerate(cfg.d_in):
            G = drng.standard_normal((d, d)) / np.sqrt(d)
            mats.append(shift.contraction[k] * (np.eye(d) + shift.jitter[k] * G))
            offs.append(shift.offset[k] * _unit_rows(drng, 1, d)[0] * cfg.r_known)
        scen.transforms.append(DomainTransform(mats, offs, shift.noise_mult))
    return scen


def _sample(scen: Scenario, rng, labels: np.ndarray, transform: DomainTransform | None):
    feats = []
    sigma = scen.config.noise_sigma
    for k in range(scen.num_modalities):
        protos = np.where(labels[:, None] >= 0,
                          scen.known_protos[k][np.clip(labels, 0, None)],
                          scen.unknown_protos[k][np.clip(-1 - labels, 0, None)])
        noise = rng.standard_normal(protos.shape)
        if transform is None:
            x = protos + sigma * noise
        else:
            x = transform.apply(k, protos) + sigma * transform.noise_mult[k] * noise
        feats.append(x)
    return feats


def source_dataset(scen: Scenario, n: int | None = None, stream: int = 0) -> Dataset:
    """Known-only, unshifted samples with round-robin labels."""
    n = scen.config.n_source if n is None else n
    rng = np.random.default_rng([scen.config.seed, 31, stream])
    labels = np.arange(n) % scen.num_classes
    return Dataset(_sample(scen, rng, labels, None), labels)


def calibration_dataset(scen: Scenario, n: int = 512) -> Dataset:
    return source_dataset(scen, n, stream=1)


def _batch_labels(rng, B, n_unk, C, U):
    labels = np.concatenate([rng.integers(C, size=B - n_unk), -1 - rng.integers(U, size=n_unk)])
    return labels[rng.permutation(B)]


def domain_batches(scen: Scenario, domain: int, batch_size: int = 64, stream: int = 0,
                   unknown_ratio: float | None = None) -> list[Batch]:
    """One pass over a single target domain."""
    cfg = scen.config
    ratio = cfg.unknown_ratio if unknown_ratio is None else unknown_ratio
    n_batches = max(1, cfg.n_target // batch_size)
    n_unk = int(round(batch_size * ratio))
    rng = np.random.default_rng([cfg.seed, 41, domain, stream])
    name = cfg.domains[domain].name
    out = []
    for _ in range(n_batches):
        labels = _batch_labels(rng, batch_size, n_unk, cfg.num_classes, cfg.num_unknown)
        feats = _sample(scen, rng, labels, scen.transforms[domain])
        out.append(Batch(tuple(feats), labels, name, np.full(batch_size, domain)))
    return out


def mixed_batches(scen: Scenario, domains: Sequence[int], batch_size: int = 64,
                  unknown_ratio: float | None = None) -> list[Batch]:
    """Every batch draws each sample's domain uniformly from ``domains``."""
    cfg = scen.config
    ratio = cfg.unknown_ratio if unknown_ratio is None else unknown_ratio
    n_batches = max(1, len(domains) * cfg.n_target // batch_size)
    n_unk = int(round(batch_size * ratio))
    rng = np.random.default_rng([cfg.seed, 43, *domains])
    out = []
    for _ in range(n_batches):
        labels = _batch_labels(rng, batch_size, n_unk, cfg.num_classes, cfg.num_unknown)
        dom = np.asarray(domains)[rng.integers(len(domains), size=batch_size)]
        feats = [np.empty((batch_size, d)) for d in cfg.d_in]
        for i in domains:
            sel = dom == i
            if sel.any():
                part = _sample(scen, rng, labels[sel], scen.transforms[i])
                for k in range(scen.num_modalities):
                    feats[k][sel] = part[k]
        out.append(Batch(tuple(feats), labels, "mixed", dom))
    return out


def target_stream(scen: Scenario, protocol: Protocol, batch_size: int = 64,
                  unknown_ratio: float | None = None) -> Iterator[Batch]:
    """Yield target batches for ``protocol``; the segment field names the
    round (long_term), domain (continual) or ``mixed``/domain name otherwise."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    idx = protocol.domain_indices(len(scen.config.domains))
    if protocol.kind == "single":
        yield from domain_batches(scen, idx[0], batch_size, unknown_ratio=unknown_ratio)
    elif protocol.kind == "long_term":
        one_pass = domain_batches(scen, idx[0], batch_size, unknown_ratio=unknown_ratio)
        for r in range(protocol.rounds):
            for b in one_pass:
                yield replace(b, segment=f"round{r + 1:02d}")
    elif protocol.kind == "continual":
        for i in idx:
            yield from domain_batches(scen, i, batch_size, unknown_ratio=unknown_ratio)
    else:
        yield from mixed_batches(scen, idx, batch_size, unknown_ratio=unknown_ratio)


# ---------------------------------------------------------------------------
# source pretraining

def cross_entropy(probs: dc.Node, labels: np.ndarray) -> dc.Node:
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return dc.neg(dc.reduce_mean(dc.reduce_sum(dc.mul(dc.constant(onehot), dc.log(probs)), axis=1)))


@dataclass
class TrainResult:
    epoch_losses: list[float]
    source_accuracy: float


def model_spec_for(scen: Scenario, d_emb: int = 16, seed: int = 0) -> mdl.ModelSpec:
    return mdl.ModelSpec(tuple(scen.config.d_in), (d_emb,) * scen.num_modalities,
                         scen.num_classes, "tanh", seed)


def pretrain_source(model: mdl.MultimodalModel, data: Dataset, epochs: int = 30,
                    lr: float = 1e-2, seed: int = 0, batch_size: int = 64,
                    head_weight: float = 1.0) -> TrainResult:
    """Cross-entropy on the fused head plus auxiliary cross-entropy on each
    modality head, minibatch Adam over all parameters."""
    rng = np.random.default_rng([seed, 53])
    opt = Adam(model.parameters(), lr=lr)
    losses = []
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            y = data.labels[sel]
            out = mdl.forward(model, [X[sel] for X in data.features])
            loss = cross_entropy(out.fused_probs, y)
            for p in out.modality_probs:
                loss = dc.add(loss, dc.scale(cross_entropy(p, y), head_weight))
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            total += loss.item() * len(sel)
        losses.append(total / n)
    return TrainResult(losses, evaluate_accuracy(model, data))


def evaluate_accuracy(model: mdl.MultimodalModel, data: Dataset) -> float:
    out = mdl.forward(model, data.features)
    return float((out.fused_probs.value.argmax(axis=1) == data.labels).mean())

"""Experiment configuration, orchestration, persistence and the ``mmotta`` CLI."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import adapt as A
from . import losses as L
from . import metrics as mt
from . import model as mdl
from . import streams as S
from . import gradcheck

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# number formatting: every float is written with 17 significant digits

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj) -> str:
    """Compact JSON with floats at 17 significant digits (round-trips exactly)."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer, float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# configuration

DEFAULT_ADAPT_LR = 4e-4


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 28
    lr: float = 3e-3
    batch_size: int = 64
    d_emb: int = 16

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1 or self.d_emb < 1:
            raise ConfigError("pretrain: epochs >= 0, lr > 0, batch_size >= 1, d_emb >= 1")


def default_methods(lr: float = DEFAULT_ADAPT_LR) -> tuple[A.MethodConfig, ...]:
    return tuple(A.MethodConfig(m, lr=lr) for m in A.METHODS)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: S.ScenarioConfig = field(default_factory=S.ScenarioConfig)
    scenario_name: str = "default"
    protocol: S.Protocol = field(default_factory=S.Protocol)
    methods: tuple[A.MethodConfig, ...] = field(default_factory=default_methods)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"
    batch_size: int = 64
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eta_quantile: float = 0.05
    window: int = 5
    histogram_bins: int = 50

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(m.label for m in self.methods)) != len(self.methods):
            raise ConfigError("method labels must be unique")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.eta_quantile < 1.0:
            raise ConfigError("eta_quantile must lie in (0, 1)")
        if self.window < 1 or self.histogram_bins < 1:
            raise ConfigError("window and histogram_bins must be >= 1")

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "scenario_name": self.scenario_name,
            "protocol": {"kind": self.protocol.kind, "rounds": self.protocol.rounds,
                         "domains": None if self.protocol.domains is None else list(self.protocol.domains)},
            "methods": [method_to_dict(m) for m in self.methods],
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "batch_size": self.batch_size,
            "pretrain": {f.name: getattr(self.pretrain, f.name) for f in fields(PretrainConfig)},
            "eta_quantile": self.eta_quantile,
            "window": self.window,
            "histogram_bins": self.histogram_bins,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict, text: str | None = None, source: str = "<config>") -> "ExperimentConfig":
        return _parse_experiment(d, _Locator(text, source))

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{source}:1: top level must be an object")
        return cls.from_dict(d, text, source)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(), str(path))


def method_to_dict(m: A.MethodConfig) -> dict:
    lc = m.loss_cfg
    return {"method": m.method, "score_kind": m.score_kind, "ablation": m.ablation, "lr": m.lr,
            "include_heads": m.include_heads, "clip_norm": m.clip_norm,
            "loss": {f.name: getattr(lc, f.name) for f in fields(L.LossConfig)}}


class _Locator:
    """Maps a key path to the line where the key first appears in the source text."""

    def __init__(self, text: str | None, source: str):
        self.text, self.source = text, source

    def line(self, key: str | None) -> int:
        if not self.text or key is None:
            return 1
        m = re.search(r'"%s"\s*:' % re.escape(key), self.text)
        return self.text.count("\n", 0, m.start()) + 1 if m else 1

    def error(self, key: str | None, path: str, msg: str) -> ConfigError:
        return ConfigError(f"{self.source}:{self.line(key)}: {path}: {msg}")


def _check_keys(d: Any, allowed: Iterable[str], path: str, loc: _Locator) -> dict:
    if not isinstance(d, dict):
        raise loc.error(path.rsplit(".", 1)[-1].split("[")[0] or None, path, "expected an object")
    for k in d:
        if k not in allowed:
            raise loc.error(k, f"{path}.{k}" if path else k, "unknown key")
    return d


def _wrap(loc: _Locator, key: str | None, path: str, fn):
    try:
        return fn()
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError) and str(exc).startswith(loc.source + ":"):
            raise
        raise loc.error(key, path, str(exc)) from None


_TOP_KEYS = ("scenario", "scenario_name", "protocol", "methods", "seeds", "output_dir", "batch_size",
             "pretrain", "eta_quantile", "window", "histogram_bins")


def _parse_method(d: dict, path: str, loc: _Locator) -> A.MethodConfig:
    allowed = [f.name for f in fields(A.MethodConfig) if f.name != "loss_cfg"] + ["loss"]
    _check_keys(d, allowed, path, loc)
    loss = _check_keys(d.get("loss", {}), [f.name for f in fields(L.LossConfig)], f"{path}.loss", loc)
    lc = _wrap(loc, "loss", f"{path}.loss", lambda: L.LossConfig(**loss))
    kw = {k: v for k, v in d.items() if k != "loss"}
    kw.setdefault("lr", DEFAULT_ADAPT_LR)
    return _wrap(loc, "method", path, lambda: A.MethodConfig(loss_cfg=lc, **kw))


def _parse_experiment(d: dict, loc: _Locator) -> ExperimentConfig:
    _check_keys(d, _TOP_KEYS, "", loc)
    kw: dict[str, Any] = {}
    if "scenario" in d:
        sc = _check_keys(d["scenario"], [f.name for f in fields(S.ScenarioConfig)], "scenario", loc)
        for i, dom in enumerate(sc.get("domains", []) or []):
            _check_keys(dom, [f.name for f in fields(S.DomainShift)], f"scenario.domains[{i}]", loc)
        kw["scenario"] = _wrap(loc, "scenario", "scenario", lambda: S.ScenarioConfig.from_dict(sc))
    if "protocol" in d:
        pr = dict(_check_keys(d["protocol"], ("kind", "rounds", "domains"), "protocol", loc))
        if pr.get("domains") is not None:
            pr["domains"] = tuple(pr["domains"])
        kw["protocol"] = _wrap(loc, "protocol", "protocol", lambda: S.Protocol(**pr))
    if "methods" in d:
        if not isinstance(d["methods"], list):
            raise loc.error("methods", "methods", "expected a list")
        kw["methods"] = tuple(_parse_method(m, f"methods[{i}]", loc) for i, m in enumerate(d["methods"]))
    if "pretrain" in d:
        pt = _check_keys(d["pretrain"], [f.name for f in fields(PretrainConfig)], "pretrain", loc)
        kw["pretrain"] = _wrap(loc, "pretrain", "pretrain", lambda: PretrainConfig(**pt))
    if "seeds" in d:
        if not isinstance(d["seeds"], list) or not all(isinstance(s, int) for s in d["seeds"]):
            raise loc.error("seeds", "seeds", "expected a list of integers")
        kw["seeds"] = tuple(d["seeds"])
    for k in ("scenario_name", "output_dir", "batch_size", "eta_quantile", "window", "histogram_bins"):
        if k in d:
            kw[k] = d[k]
    return _wrap(loc, None, "config", lambda: ExperimentConfig(**kw))


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class SourceModel:
    scenario: S.Scenario
    model: mdl.MultimodalModel
    train: S.TrainResult
    calibration: S.Dataset


@dataclass
class JobResult:
    method: str
    scenario: str
    seed: int
    eta: float
    records: list[A.BatchRecord]
    report: A.EpisodeReport
    source_accuracy: float

    @property
    def key(self):
        return (self.method, self.scenario, self.seed)


def prepare_source(cfg: ExperimentConfig, seed: int) -> SourceModel:
    scen = S.make_scenario(replace(cfg.scenario, seed=seed))
    model = mdl.init(S.model_spec_for(scen, cfg.pretrain.d_emb, seed))
    train = S.pretrain_source(model, S.source_dataset(scen), epochs=cfg.pretrain.epochs,
                              lr=cfg.pretrain.lr, seed=seed, batch_size=cfg.pretrain.batch_size)
    return SourceModel(scen, model, train, S.calibration_dataset(scen))


def calibrate_eta(src: SourceModel, score_kind: str, quantile: float = 0.05) -> float:
    """Score quantile of the source model on held-out source (known) samples."""
    out = mdl.forward(src.model, src.calibration.features)
    return mt.default_eta(mt.score(out, score_kind), quantile)


def run_job(cfg: ExperimentConfig, mcfg: A.MethodConfig, seed: int, src: SourceModel) -> JobResult:
    eta = calibrate_eta(src, mcfg.score_kind, cfg.eta_quantile)
    stream = S.target_stream(src.scenario, cfg.protocol, cfg.batch_size)
    records, report, _ = A.run_episode(src.model, stream, mcfg, eta=eta, window=cfg.window)
    if cfg.histogram_bins != 50:
        ev = A.eval_set(records)
        report.histogram = mt.histogram(ev.known_scores, ev.unknown_scores, cfg.histogram_bins)
    return JobResult(mcfg.label, cfg.scenario_name, seed, eta, records, report, src.train.source_accuracy)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[JobResult]:
    """All (method, seed) runs; output order is canonical regardless of ``jobs``."""
    sources = {seed: prepare_source(cfg, seed) for seed in cfg.seeds}
    tasks = [(m, seed) for m in cfg.methods for seed in cfg.seeds]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda t: run_job(cfg, t[0], t[1], sources[t[1]]), tasks))
    else:
        results = [run_job(cfg, m, seed, sources[seed]) for m, seed in tasks]
    return sorted(results, key=lambda r: r.key)


# ---------------------------------------------------------------------------
# persistence

SUMMARY_COLUMNS = ("method", "scenario", "seed", "segment", "acc", "fpr95", "auroc", "h_score",
                   "entropy_gap", "skipped_batches")


def summary_rows(results: Sequence[JobResult]) -> list[dict]:
    rows = []
    for r in results:
        for seg, m in r.report.segments:
            seg_records = r.records if seg == "all" else [x for x in r.records if x.segment == seg]
            rows.append({"method": r.method, "scenario": r.scenario, "seed": r.seed, "segment": seg,
                         "acc": m["acc"], "fpr95": m["fpr95"], "auroc": m["auroc"], "h_score": m["h_score"],
                         "entropy_gap": A.entropy_gap(seg_records),
                         "skipped_batches": sum(x.skipped for x in seg_records)})
    rows.sort(key=lambda row: (row["method"], row["scenario"], row["seed"], row["segment"]))
    return rows


def _csv_text(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in (row[c] for c in columns)])
    return buf.getvalue()


def records_jsonl(results: Sequence[JobResult]) -> str:
    lines = []
    for r in results:
        for rec in r.records:
            obj = {"method": r.method, "scenario": r.scenario, "seed": r.seed, "eta": r.eta}
            obj.update(rec.to_dict())
            lines.append(dumps(obj))
    return "".join(line + "\n" for line in lines)


def read_records(path) -> list[tuple[dict, A.BatchRecord]]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            meta = {k: d.pop(k) for k in ("method", "scenario", "seed", "eta")}
            out.append((meta, A.BatchRecord.from_dict(d)))
    return out


def histogram_rows(results: Sequence[JobResult]) -> list[dict]:
    rows = []
    for r in results:
        edges, kc, uc = r.report.histogram
        for i in range(len(kc)):
            rows.append({"method": r.method, "scenario": r.scenario, "seed": r.seed, "bin": i,
                         "lo": edges[i], "hi": edges[i + 1], "known": kc[i], "unknown": uc[i]})
    return rows


def trace_rows(results: Sequence[JobResult], window: int) -> list[dict]:
    rows = []
    for r in results:
        for i, g in enumerate(r.report.trace):
            rows.append({"method": r.method, "scenario": r.scenario, "seed": r.seed, "window": i,
                         "first_batch": i * window, "gap": g})
    return rows


def write_outputs(results: Sequence[JobResult], out_dir, cfg: ExperimentConfig | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    window = cfg.window if cfg is not None else 5
    files = {
        "records.jsonl": records_jsonl(results),
        "summary.csv": _csv_text(SUMMARY_COLUMNS, summary_rows(results)),
        "histograms.csv": _csv_text(("method", "scenario", "seed", "bin", "lo", "hi", "known", "unknown"),
                                    histogram_rows(results)),
        "trace.csv": _csv_text(("method", "scenario", "seed", "window", "first_batch", "gap"),
                               trace_rows(results, window)),
    }
    if cfg is not None:
        files["config.json"] = cfg.to_json()
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
    return paths


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in ("acc", "fpr95", "auroc", "h_score", "entropy_gap"):
            if k in row and row[k] != "":
                row[k] = float(row[k])
        row["seed"] = int(row["seed"])
    return rows


# ---------------------------------------------------------------------------
# report: percent tables, columns Acc, FPR95, AUROC, H-score

REPORT_COLUMNS = ("method", "scenario", "segment", "seeds", "Acc", "FPR95", "AUROC", "H-score")


def report_rows(rows: Sequence[dict]) -> list[dict]:
    """Average over seeds; H-score is recomputed per row from the other three
    metrics before averaging."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["method"], row["scenario"], row["segment"]), []).append(row)
    out = []
    for (method, scen, seg), rs in sorted(groups.items()):
        acc = np.mean([r["acc"] for r in rs])
        fpr = np.mean([r["fpr95"] for r in rs])
        au = np.mean([r["auroc"] for r in rs])
        hs = np.mean([mt.h_score(r["acc"], r["fpr95"], r["auroc"]) for r in rs])
        out.append({"method": method, "scenario": scen, "segment": seg, "seeds": len(rs),
                    "Acc": 100 * acc, "FPR95": 100 * fpr, "AUROC": 100 * au, "H-score": 100 * hs})
    return out


def report_csv(rows: Sequence[dict], digits: int = 2) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report_rows(rows):
        w.writerow([r["method"], r["scenario"], r["segment"], r["seeds"]]
                   + [f"{r[c]:.{digits}f}" for c in REPORT_COLUMNS[4:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# analyze: pre-adaptation entropy gap vs (1 - FPR95) across shift severities

def scaled_scenario(base: S.ScenarioConfig, severity: float) -> S.ScenarioConfig:
    """Interpolate every domain knob between identity (0) and the base shift (1), beyond at > 1."""
    doms = []
    for d in base.domains:
        lerp = lambda t, ident: tuple((1.0 - severity) * ident + severity * v for v in t)
        doms.append(S.DomainShift(d.name, lerp(d.contraction, 1.0), lerp(d.jitter, 0.0),
                                  lerp(d.offset, 0.0), lerp(d.noise_mult, 1.0)))
    return replace(base, domains=tuple(doms))


def analyze(cfg: ExperimentConfig, severities: Sequence[float], seed: int | None = None) -> tuple[list[dict], float]:
    """Source-model gap and FPR95 per severity, plus their Pearson r (vs 1 - FPR95)."""
    seed = cfg.seeds[0] if seed is None else seed
    src_cfg = A.MethodConfig("source", score_kind=cfg.methods[0].score_kind)
    rows = []
    for sev in severities:
        c = replace(cfg, scenario=scaled_scenario(cfg.scenario, sev), scenario_name=f"severity{sev:g}")
        src = prepare_source(c, seed)
        records, report, _ = A.run_episode(src.model, S.target_stream(src.scenario, c.protocol, c.batch_size),
                                           src_cfg, window=c.window)
        m = report.metrics()
        rows.append({"scenario": c.scenario_name, "severity": sev, "gap": report.gap, **m})
    try:
        r = A.gap_fpr_correlation([x["gap"] for x in rows], [x["fpr95"] for x in rows])
    except mt.MetricUndefined:
        r = float("nan")
    return rows, r


# ---------------------------------------------------------------------------
# sweep

SWEEP_PARAMS = ("alpha", "beta", "gamma1", "gamma2", "unknown_ratio")


def apply_params(cfg: ExperimentConfig, params: dict) -> ExperimentConfig:
    loss_kw = {k: v for k, v in params.items() if k in ("alpha", "beta", "gamma1", "gamma2")}
    if loss_kw:
        cfg = replace(cfg, methods=tuple(replace(m, loss_cfg=replace(m.loss_cfg, **loss_kw)) for m in cfg.methods))
    if "unknown_ratio" in params:
        cfg = replace(cfg, scenario=replace(cfg.scenario, unknown_ratio=params["unknown_ratio"]))
    return cfg


def parse_grid(specs: Sequence[str]) -> dict[str, list[float]]:
    grid = {}
    for spec in specs:
        name, _, values = spec.partition("=")
        if name not in SWEEP_PARAMS or not values:
            raise ConfigError(f"bad grid spec {spec!r}; use NAME=v1,v2 with NAME in {SWEEP_PARAMS}")
        grid[name] = [float(v) for v in values.split(",")]
    return grid


def sweep(cfg: ExperimentConfig, grid: dict[str, list[float]], jobs: int = 1) -> list[dict]:
    names = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        params = dict(zip(names, values))
        for row in summary_rows(run_experiment(apply_params(cfg, params), jobs)):
            rows.append({**params, **row})
    return rows


# ---------------------------------------------------------------------------
# CLI

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--method", choices=A.METHODS, help="run only this method")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--gamma1", type=float)
    common.add_argument("--gamma2", type=float)
    common.add_argument("--unknown-ratio", type=float)
    common.add_argument("--score-fn", choices=mt.SCORE_KINDS)
    common.add_argument("--protocol", choices=S.PROTOCOLS)
    common.add_argument("--rounds", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--seed", type=int, action="append", help="repeatable")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--jobs", type=int, default=1)

    p = argparse.ArgumentParser(prog="mmotta", description="Multimodal open-set test-time adaptation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one configuration")
    sw = sub.add_parser("sweep", parents=[common], help="grid over loss weights / unknown ratio")
    sw.add_argument("--grid", action="append", default=[], metavar="NAME=v1,v2",
                    help=f"NAME in {SWEEP_PARAMS}; repeatable")
    an = sub.add_parser("analyze", parents=[common], help="entropy gap vs FPR95 across shift severities")
    an.add_argument("--severities", default="0,0.25,0.5,0.75,1,1.25,1.5")
    gc = sub.add_parser("gradcheck", help="finite-difference suite")
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--tol", type=float, default=1e-4)
    rp = sub.add_parser("report", help="percent table (Acc, FPR95, AUROC, H-score) from a summary.csv")
    rp.add_argument("summary", type=Path)
    rp.add_argument("--out", type=Path)
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    methods = cfg.methods
    if args.method:
        methods = tuple(m for m in methods if m.method == args.method) or (A.MethodConfig(args.method, lr=DEFAULT_ADAPT_LR),)
    loss_kw = {k: getattr(args, k) for k in ("alpha", "beta", "gamma1", "gamma2") if getattr(args, k) is not None}
    new = []
    for m in methods:
        if loss_kw:
            m = replace(m, loss_cfg=replace(m.loss_cfg, **loss_kw))
        if args.score_fn:
            m = replace(m, score_kind=args.score_fn)
        if args.lr is not None:
            m = replace(m, lr=args.lr)
        new.append(m)
    kw: dict[str, Any] = {"methods": tuple(new)}
    if args.unknown_ratio is not None:
        kw["scenario"] = replace(cfg.scenario, unknown_ratio=args.unknown_ratio)
    if args.protocol or args.rounds:
        kw["protocol"] = replace(cfg.protocol, **({"kind": args.protocol} if args.protocol else {}),
                                 **({"rounds": args.rounds} if args.rounds else {}))
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    if args.seed:
        kw["seeds"] = tuple(args.seed)
    if args.out is not None:
        kw["output_dir"] = str(args.out)
    return replace(cfg, **kw)


def _print_summary(rows: Sequence[dict], stream) -> None:
    for r in report_rows(rows):
        stream.write(f"{r['method']:<16} {r['segment']:<10} Acc {r['Acc']:6.2f}  FPR95 {r['FPR95']:6.2f}  "
                     f"AUROC {r['AUROC']:6.2f}  H {r['H-score']:6.2f}\n")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            results = gradcheck.run_suite(trials=args.trials, tol=args.tol) + [gradcheck.model_check(tol=args.tol)]
            for r in results:
                print(r.line())
            return 0 if all(r.passed for r in results) else 1
        if args.command == "report":
            text = report_csv(read_summary(args.summary))
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
        cfg = config_from_args(args)
        out = Path(cfg.output_dir)
        if args.command == "run":
            results = run_experiment(cfg, args.jobs)
            write_outputs(results, out, cfg)
            _print_summary(summary_rows(results), sys.stdout)
            return 0
        if args.command == "sweep":
            grid = parse_grid(args.grid)
            if not grid:
                raise ConfigError("sweep needs at least one --grid NAME=v1,v2")
            rows = sweep(cfg, grid, args.jobs)
            out.mkdir(parents=True, exist_ok=True)
            cols = tuple(sorted(grid)) + SUMMARY_COLUMNS
            (out / "sweep.csv").write_text(_csv_text(cols, rows))
            print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
            return 0
        if args.command == "analyze":
            sev = [float(s) for s in args.severities.split(",")]
            rows, r = analyze(cfg, sev)
            out.mkdir(parents=True, exist_ok=True)
            (out / "analyze.csv").write_text(_csv_text(("scenario", "severity", "gap", "acc", "fpr95", "auroc",
                                                        "h_score"), rows))
            for row in rows:
                print(f"{row['scenario']:<14} gap {row['gap']:.4f}  FPR95 {row['fpr95']:.4f}  H {row['h_score']:.4f}")
            print(f"pearson r(gap, 1 - FPR95) = {r:.4f}")
            return 0
    except (ConfigError, S.ConfigError, A.ConfigError, L.ConfigError, mdl.ConfigError, mt.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())

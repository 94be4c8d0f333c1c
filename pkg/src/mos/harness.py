"""End-to-end class-incremental runs, ablations and report files."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterRegistry, init_adapter, save_registry
from .backbone import BackboneConfig, FrozenBackbone, backward, build_backbone, forward, save_backbone
from .inference import (CYCLE, infer_task_id, predict_with_adapter, self_refine,
                        write_diagnostics)
from .numerics import make_rng
from .stream import ClassTaskMap, Dataset, StreamSpec, load_dataset, make_splits, synthetic_cil_dataset
from .training import (DataAccessAudit, GaussianStats, PrototypeBank, SGDMomentum, TrainConfig,
                       align_classifier, compute_gaussian_stats, cosine_lr, extract_prototypes, iter_batches,
                       save_gaussian_stats, train_task, write_trace)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    per_class: int = 50
    separation: float = 10.0
    noise: float = 1.0
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "csv", "f32bin"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source != "synthetic" and not (self.train_path and self.test_path):
            raise ValueError("file data sources need train_path and test_path")


@dataclass(frozen=True)
class VariantFlags:
    use_merge: bool = True
    use_retrieval: bool = True
    use_self_refine: bool = True
    use_ensemble: bool = True
    use_alignment: bool = False
    oracle_task_ids: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamSpec
    backbone: BackboneConfig
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    flags: VariantFlags = VariantFlags()
    output_dir: str = "runs/default"
    seed: int = 1993
    backbone_path: str | None = None
    eval_every_stage: bool = True
    write_diagnostics: bool = True
    completion: str = "drift"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        nested = {"stream": StreamSpec, "backbone": BackboneConfig, "train": TrainConfig,
                  "data": DataConfig, "flags": VariantFlags}
        try:
            kwargs = _strict(cls, raw, "config")
            for key, typ in nested.items():
                if key in kwargs:
                    kwargs[key] = typ(**_strict(typ, kwargs[key], key))
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)


def _strict(typ, raw, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def standard_benchmark(seed: int = 1993, **flags) -> ExperimentConfig:
    """10 tasks x 5 classes, D=32, separation 10, noise 1."""
    return ExperimentConfig(
        stream=StreamSpec(total_classes=50, base_m=0, inc_n=5, shuffle_seed=seed),
        backbone=BackboneConfig(input_dim=32, embed_dim=32, hidden_dim=64, num_blocks=2, init_seed=seed),
        train=TrainConfig(seed=seed),
        data=DataConfig(per_class=50, separation=10.0, noise=1.0),
        flags=VariantFlags(**flags),
        seed=seed,
        write_diagnostics=False,
    )


@dataclass
class MetricsReport:
    variant: str
    stage_accuracy: list[float]
    retrieval_accuracy: list[float]
    mean_iterations: list[float]
    cycle_rate: list[float]
    task_sizes: list[int]
    seed: int
    aligned_accuracy: list[float] | None = None
    refine_calls: int = 0

    @property
    def last_accuracy(self) -> float:
        return self.stage_accuracy[-1]

    @property
    def average_accuracy(self) -> float:
        return sum(self.stage_accuracy) / len(self.stage_accuracy)

    def to_dict(self) -> dict:
        if not self.stage_accuracy:
            raise ValueError("report has no evaluated stages")
        out = {
            "variant": self.variant,
            "seed": self.seed,
            "task_sizes": self.task_sizes,
            "num_stages": len(self.stage_accuracy),
            "stage_accuracy": self.stage_accuracy,
            "last_accuracy": self.last_accuracy,
            "average_accuracy": self.average_accuracy,
            "retrieval_accuracy": self.retrieval_accuracy,
            "mean_iterations": self.mean_iterations,
            "cycle_rate": self.cycle_rate,
            "refine_calls": self.refine_calls,
        }
        if self.aligned_accuracy is not None:
            out["aligned_accuracy"] = self.aligned_accuracy
        return out


def _pct(hits: int, n: int) -> float:
    return round(100.0 * hits / n, 6) if n else 0.0


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    dc = config.data
    C = config.stream.total_classes
    if dc.source == "synthetic":
        rng = make_rng(config.seed, 0)
        return synthetic_cil_dataset(C, config.backbone.input_dim, dc.per_class,
                                     dc.separation, dc.noise, rng)
    train = load_dataset(dc.train_path, dc.source, C, "train")
    test = load_dataset(dc.test_path, dc.source, C, "test")
    for ds in (train, test):
        if ds.features.shape[1] != config.backbone.input_dim:
            raise ConfigError("dataset feature dim does not match backbone input_dim")
    return train, test


@dataclass
class StreamData:
    tasks: list[list[int]]
    task_map: ClassTaskMap
    train: list[Dataset]
    test: list[Dataset]


def prepare_stream(config: ExperimentConfig) -> StreamData:
    """Split classes into tasks and renumber labels in arrival order."""
    train, test = load_data(config)
    tasks, tmap = make_splits(config.stream)
    order = [c for t in tasks for c in t]
    train, test = train.relabel(order), test.relabel(order)
    per_train, per_test = [], []
    for b in range(tmap.num_tasks):
        lo, hi = tmap.offsets[b], tmap.offsets[b + 1]
        for src, dst in ((train, per_train), (test, per_test)):
            ds = src.subset((src.labels >= lo) & (src.labels < hi))
            ds.task = b
            dst.append(ds)
    return StreamData(tasks, tmap, per_train, per_test)


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(np.vstack([p.features for p in parts]), np.concatenate([p.labels for p in parts]), "test")


@dataclass
class RunArtifacts:
    report: MetricsReport
    backbone: FrozenBackbone
    registry: AdapterRegistry
    bank: PrototypeBank
    stats: GaussianStats
    audit: DataAccessAudit
    trace: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def _variant_name(flags: VariantFlags) -> str:
    if flags.oracle_task_ids:
        return "oracle"
    if not flags.use_retrieval:
        return "baseline"
    parts = ["merge" if flags.use_merge else "nomerge"]
    if flags.use_self_refine:
        parts.append("refine")
    if flags.use_ensemble:
        parts.append("ensemble")
    return "+".join(parts)


def evaluate_stage(b: int, stream: StreamData, backbone, registry, bank, flags: VariantFlags,
                   global_head=None):
    """Accuracy over all classes seen up to stage ``b``; returns stats and rows."""
    test = _concat(stream.test[: b + 1])
    smap = stream.task_map.upto(b)
    C = smap.num_classes
    emb = [forward(test.features, backbone, registry[t]) for t in range(b + 1)]
    logits = [predict_with_adapter(emb[t], t, bank, C) for t in range(b + 1)]
    hits = retrieved = iters = cycles = calls = aligned_hits = 0
    rows = []
    for n, y in enumerate(test.labels.tolist()):
        true_task = smap(y)
        first = logits[0][n]
        initial = infer_task_id(first, smap)
        reason, n_iter = "", 0
        if flags.oracle_task_ids:
            task = true_task
        elif flags.use_self_refine:
            task, tr = self_refine(lambda t: logits[t][n], smap)
            calls += 1
            reason, n_iter = tr.reason, tr.iterations
            iters += n_iter
            cycles += tr.reason == CYCLE
        elif flags.use_retrieval:
            task = initial
        else:
            task = 0
        scores = logits[task][n] + first if flags.use_ensemble and flags.use_retrieval else logits[task][n]
        if flags.oracle_task_ids:
            cls = smap.classes(task)
            pred = cls.start + int(np.argmax(scores[cls.start:cls.stop]))
        else:
            pred = int(np.argmax(scores))
        hits += pred == y
        retrieved += task == true_task
        if global_head is not None:
            aligned_hits += int(np.argmax(emb[task][n] @ global_head)) == y
        rows.append({"stage": b, "instance": n, "true_label": y, "true_task": true_task,
                     "initial_task": initial, "final_task": task, "iterations": n_iter,
                     "reason": reason, "top1_before": int(np.argmax(first)), "top1_after": pred})
    N = len(test)
    out = {"accuracy": _pct(hits, N), "retrieval": round(retrieved / N, 6),
           "iterations": round(iters / N, 6), "cycle_rate": round(cycles / N, 6), "calls": calls}
    if global_head is not None:
        out["aligned"] = _pct(aligned_hits, N)
    return out, rows


def run_experiment(config: ExperimentConfig, variant: str | None = None,
                   stream: StreamData | None = None) -> RunArtifacts:
    """Train stage by stage and evaluate over the classes seen so far."""
    flags = config.flags
    stream = prepare_stream(config) if stream is None else stream
    tmap = stream.task_map
    backbone = build_backbone(config.backbone, config.backbone_path)
    train_cfg = dataclasses.replace(config.train, merge=flags.use_merge)
    registry = AdapterRegistry(alpha=train_cfg.alpha)
    bank, stats, audit = PrototypeBank(), GaussianStats(), DataAccessAudit()
    d = config.backbone.embed_dim
    global_head = np.zeros((d, 0)) if flags.use_alignment else None
    align_cfg = dataclasses.replace(train_cfg, align_classifier=True)
    report = MetricsReport(variant or _variant_name(flags), [], [], [], [], list(tmap.sizes), config.seed,
                           [] if flags.use_alignment else None)
    trace, diagnostics = [], []
    B = tmap.num_tasks
    for b in range(B):
        data = stream.train[b]
        try:
            audit.stage = b
            res = train_task(data, backbone, registry, train_cfg, classes=list(tmap.classes(b)), audit=audit)
            trace.extend(res.trace)
            for adapter in registry.history:
                extract_prototypes(data, backbone, adapter, bank, audit=audit)
            bank.complete(len(registry), tmap.offsets[b + 1], config.completion)
            stats.update(compute_gaussian_stats(data, backbone, res.adapter, audit=audit))
            audit.stage = None
            if global_head is not None:
                global_head = np.hstack([global_head, np.zeros((d, tmap.sizes[b]))])
                global_head = align_classifier(global_head, stats, align_cfg, make_rng(train_cfg.seed, b, 1))
            if config.eval_every_stage or b == B - 1:
                ev, rows = evaluate_stage(b, stream, backbone, registry, bank, flags, global_head)
                report.stage_accuracy.append(ev["accuracy"])
                report.retrieval_accuracy.append(ev["retrieval"])
                report.mean_iterations.append(ev["iterations"])
                report.cycle_rate.append(ev["cycle_rate"])
                report.refine_calls += ev["calls"]
                if global_head is not None:
                    report.aligned_accuracy.append(ev["aligned"])
                if config.write_diagnostics:
                    diagnostics.extend(rows)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage {b}: {exc}") from exc
    registry.audit()
    return RunArtifacts(report, backbone, registry, bank, stats, audit, trace, diagnostics)


def run_naive_baseline(config: ExperimentConfig, stream: StreamData | None = None) -> MetricsReport:
    """One adapter and a growing linear head fine-tuned task after task.

    No merging, no prototypes, no retrieval: the comparison anchor for
    sequential adapter fine-tuning.
    """
    stream = prepare_stream(config) if stream is None else stream
    tmap = stream.task_map
    cfg = config.train
    backbone = build_backbone(config.backbone, config.backbone_path)
    bcfg = backbone.config
    rng = make_rng(cfg.seed, 0)
    adapter = init_adapter(0, bcfg.num_blocks, bcfg.embed_dim, cfg.r, rng)
    head = np.zeros((bcfg.embed_dim, 0))
    report = MetricsReport("naive", [], [], [], [], list(tmap.sizes), config.seed)
    for b in range(tmap.num_tasks):
        data = stream.train[b]
        new = rng.uniform(-bcfg.init_scale, bcfg.init_scale, (bcfg.embed_dim, tmap.sizes[b]))
        head = np.hstack([head, new])
        opt = SGDMomentum([*adapter.arrays(), head], cfg.momentum)
        steps = math.ceil(len(data) / cfg.batch_size)
        total, step = cfg.epochs * steps, 0
        for _ in range(cfg.epochs):
            for idx in iter_batches(len(data), cfg.batch_size, rng):
                _, g = backward(data.features[idx], data.labels[idx], backbone, adapter, head)
                opt.step([*g.down, *g.up, g.head], cosine_lr(step, total, cfg.lr0))
                step += 1
        if config.eval_every_stage or b == tmap.num_tasks - 1:
            test = _concat(stream.test[: b + 1])
            pred = np.argmax(forward(test.features, backbone, adapter) @ head, axis=1)
            report.stage_accuracy.append(_pct(int((pred == test.labels).sum()), len(test)))
            report.retrieval_accuracy.append(0.0)
            report.mean_iterations.append(0.0)
            report.cycle_rate.append(0.0)
    return report


# --- reporting ---------------------------------------------------------------

def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def emit_report(report: MetricsReport, directory) -> list[Path]:
    """Write ``metrics.json``, ``stages.csv`` and ``curve.csv``."""
    payload = report.to_dict()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    metrics = directory / "metrics.json"
    _dump_json(payload, metrics)
    stages = directory / "stages.csv"
    with open(stages, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["stage", "accuracy", "retrieval_accuracy", "mean_iterations", "cycle_rate"]
        if report.aligned_accuracy is not None:
            cols.append("aligned_accuracy")
        w.writerow(cols)
        for b in range(len(report.stage_accuracy)):
            row = [b + 1, f"{report.stage_accuracy[b]:.6f}", f"{report.retrieval_accuracy[b]:.6f}",
                   f"{report.mean_iterations[b]:.6f}", f"{report.cycle_rate[b]:.6f}"]
            if report.aligned_accuracy is not None:
                row.append(f"{report.aligned_accuracy[b]:.6f}")
            w.writerow(row)
    curve = directory / "curve.csv"
    seen = np.cumsum(report.task_sizes)[-len(report.stage_accuracy):]
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["classes_seen", "accuracy"])
        for n, acc in zip(seen.tolist(), report.stage_accuracy):
            w.writerow([n, f"{acc:.6f}"])
    return [metrics, stages, curve]


def save_run(art: RunArtifacts, config: ExperimentConfig, directory) -> list[Path]:
    """Report files plus checkpoints, loss trace and diagnostics."""
    directory = Path(directory)
    files = emit_report(art.report, directory)
    ck = directory / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    save_backbone(art.backbone, ck / "backbone.mos")
    save_registry(art.registry, ck / "adapters")
    save_gaussian_stats(art.stats, ck / "gaussian_stats.mos")
    write_trace(art.trace, directory / "loss_trace.csv")
    if config.write_diagnostics:
        write_diagnostics(art.diagnostics, directory / "diagnostics.csv")
    _dump_json(config.to_dict(), directory / "config.json")
    return files


def resolve_output_dir(config: ExperimentConfig, environ=None) -> Path:
    env = os.environ if environ is None else environ
    return Path(env.get("MOS_OUT") or config.output_dir)


ABLATION_VARIANTS = {
    "baseline": VariantFlags(use_merge=False, use_retrieval=False, use_self_refine=False, use_ensemble=False),
    "merge": VariantFlags(use_merge=True, use_retrieval=True, use_self_refine=False, use_ensemble=False),
    "self_refine": VariantFlags(use_merge=True, use_retrieval=True, use_self_refine=True, use_ensemble=False),
    "ensemble": VariantFlags(use_merge=True, use_retrieval=True, use_self_refine=True, use_ensemble=True),
}


def run_ablation(base: ExperimentConfig, directory=None,
                 variants: dict[str, VariantFlags] | None = None) -> dict[str, MetricsReport]:
    """Run each variant on the same stream; optionally write ``ablation.csv``."""
    variants = ABLATION_VARIANTS if variants is None else variants
    stream = prepare_stream(base)
    reports = {}
    for name, flags in variants.items():
        cfg = dataclasses.replace(base, flags=dataclasses.replace(flags, use_alignment=base.flags.use_alignment))
        art = run_experiment(cfg, variant=name, stream=stream)
        reports[name] = art.report
        if directory is not None:
            save_run(art, cfg, Path(directory) / name)
    if directory is not None:
        write_ablation_table(reports, Path(directory) / "ablation.csv")
    return reports


def write_ablation_table(reports: dict[str, MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "last_accuracy", "average_accuracy", "final_retrieval_accuracy"])
        for name, rep in reports.items():
            w.writerow([name, f"{rep.last_accuracy:.6f}", f"{rep.average_accuracy:.6f}",
                        f"{rep.retrieval_accuracy[-1]:.6f}"])

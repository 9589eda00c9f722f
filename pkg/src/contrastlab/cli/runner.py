"""Experiment orchestration behind the ``lab`` subcommands.

Output directory layout::

    <out>/config.json                          frozen copy of the validated config
    <out>/records.jsonl                        metric records (unique-key upsert)
    <out>/checkpoints/<method>/seed_<s>/epoch_<eeee>.json
    <out>/analysis/<analysis>.csv              per-analysis tables
    <out>/analysis/embeddings/<method>_seed<s>_<domain>.{csv,bin}
    <out>/ablations/<axis>/<value>/checkpoints/...
    <out>/ablations/<axis>.csv                 ablation curve (value -> accuracy)
    <out>/report/...                           written by ``lab report``

Work fans out over (method x seed) or (grid value x seed) jobs. Each job
owns its state and returns records; the parent writes them in job order, so
the record file does not depend on the worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import analysis as an
from .. import evaluation as ev
from ..data.augment import AugmentationPolicy
from ..data.domains import Dataset, DomainSpec, generate_domain
from ..errors import ConfigError, MissingArtifactError
from ..model import ModelState, init_model, read_checkpoint, save_checkpoint
from ..numerics import OptimizerState, RngStream, Schedule
from ..objectives import train_epoch
from ..records import MetricRecord, RecordStore, make_records, now_timestamp
from .config import ANALYSES, AXES, METHODS, PROTOCOLS, ExperimentConfig, write_frozen

log = logging.getLogger(__name__)


# paths and fan-out


def checkpoint_dir(root, method: str, seed: int) -> Path:
    return Path(root) / "checkpoints" / method / f"seed_{seed}"


def epoch_path(directory, epoch: int) -> Path:
    return Path(directory) / f"epoch_{epoch:04d}.json"


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("LAB_THREADS", "1"))
    except ValueError:
        raise ConfigError([f"LAB_THREADS must be an integer, got {os.environ['LAB_THREADS']!r}"]) from None
    return max(1, min(cap, n_jobs))


def fan_out(fn: Callable, jobs: Sequence) -> list:
    """Run ``fn`` over ``jobs``; results come back in job order."""
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, jobs))


def _store(cfg: ExperimentConfig) -> RecordStore:
    return RecordStore(Path(cfg.output_dir) / "records.jsonl")


def _write(cfg: ExperimentConfig, batches: Iterable[list[MetricRecord]]) -> int:
    records = [r for b in batches for r in b]
    _store(cfg).upsert(records)
    return len(records)


def _records(cfg, method, protocol, domain, seed, epoch, values: dict) -> list[MetricRecord]:
    return make_records(
        values,
        timestamp=now_timestamp(),
        experiment_id=cfg.experiment_id,
        method=method,
        protocol=protocol,
        domain=domain,
        seed=seed,
        epoch=epoch,
    )


# pretraining


@dataclasses.dataclass(frozen=True)
class PretrainJob:
    cfg: ExperimentConfig
    method: str
    seed: int
    root: str
    tag: str
    epochs: int
    checkpoint_epochs: tuple[int, ...]
    model_overrides: tuple = ()
    policy: str | None = None


def _schedule(cfg: ExperimentConfig, epochs: int) -> Schedule:
    """Pretraining schedule; cosine warm-up is clamped to ``epochs - 1`` for short runs."""
    p = cfg.pretrain
    if p.schedule == "cosine" and epochs > 0:
        return Schedule.cosine(p.lr, epochs, min(p.warmup_epochs, epochs - 1))
    if p.schedule == "step":
        return Schedule.step(p.lr, tuple(m for m in (int(epochs * 0.5), int(epochs * 0.75)) if 0 < m < epochs), 0.1, max(epochs, 1))
    return Schedule.constant(p.lr)


def default_checkpoint_epochs(epochs: int, every: int) -> tuple[int, ...]:
    """Epoch 0 (initial), every ``every``-th epoch, and the final epoch."""
    marks = {0, epochs}
    if every > 0:
        marks.update(range(every, epochs, every))
    return tuple(sorted(marks))


def run_pretrain_job(job: PretrainJob) -> list[MetricRecord]:
    cfg = job.cfg
    src = generate_domain(cfg.source_spec(job.seed))
    train = src.split("train")
    mcfg = cfg.model_config(job.method, src.num_classes, train.images.shape[1], **dict(job.model_overrides)).validate()
    state = init_model(mcfg, RngStream(job.seed, "init"))
    policy = AugmentationPolicy.named(job.policy) if job.policy else cfg.policy(job.method)
    opt = OptimizerState(lr=cfg.pretrain.lr, momentum=cfg.pretrain.sgd_momentum, weight_decay=cfg.pretrain.weight_decay)
    schedule = _schedule(cfg, job.epochs)
    rng = RngStream(job.seed, "train")
    out_dir = checkpoint_dir(job.root, job.method, job.seed)
    meta = {"experiment_id": cfg.experiment_id, "method": job.tag, "seed": job.seed, "source": src.domain_id}
    records = []
    if 0 in job.checkpoint_epochs:
        save_checkpoint(state, epoch_path(out_dir, 0), opt, {"train": rng.state()}, meta)
    for e in range(job.epochs):
        m = train_epoch(
            state, train.images, train.labels, opt, schedule, e, rng, batch_size=cfg.pretrain.batch_size, policy=policy
        )
        values = {"loss": m.loss, "lr": m.lr, **{f"{k}_term": v for k, v in m.terms.items()}}
        records += _records(cfg, job.tag, "pretrain", src.domain_id, job.seed, e + 1, values)
        if e + 1 in job.checkpoint_epochs:
            save_checkpoint(state, epoch_path(out_dir, e + 1), opt, {"train": rng.state()}, meta)
    return records


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    write_frozen(cfg, cfg.output_dir)
    epochs = cfg.pretrain.epochs
    marks = default_checkpoint_epochs(epochs, cfg.pretrain.checkpoint_every)
    jobs = [
        PretrainJob(cfg, m, s, cfg.output_dir, m, epochs, marks, policy=None)
        for m in cfg.methods
        for s in cfg.seeds
    ]
    n = _write(cfg, fan_out(run_pretrain_job, jobs))
    log.info("pretrain: %d jobs, %d records", len(jobs), n)
    return 0


# evaluation


def select_checkpoints(directory, selector: str) -> list[tuple[int | str, Path]]:
    """``final`` -> [("final", last)], ``all`` -> every epoch, ``<n>`` -> that epoch."""
    found = ev.list_checkpoints(directory)
    if not found:
        raise MissingArtifactError(f"no checkpoints in {directory}; run `lab pretrain` first")
    if selector == "final":
        return [("final", found[-1][1])]
    if selector == "all":
        return [(e, p) for e, p in found]
    try:
        want = int(selector)
    except ValueError:
        raise ConfigError([f"checkpoint selector must be final, all or an epoch number, got {selector!r}"]) from None
    for e, p in found:
        if e == want:
            return [(e, p)]
    raise MissingArtifactError(f"no checkpoint for epoch {want} in {directory}")


def evaluate_state(
    cfg: ExperimentConfig, state: ModelState, protocol: str, target: Dataset, seed: int, sample_cap=None
) -> list[tuple[str, dict]]:
    """[(protocol tag, metric values)] for one model on one target domain."""
    rng = RngStream(seed, f"eval/{protocol}/{target.domain_id}")
    if protocol == "fewshot":
        out = []
        test = target.split("test")
        feats = ev.extract_features(state, test.images)
        ways = min(cfg.fewshot.ways, target.num_classes)
        for shots in cfg.fewshot.shots:
            spec = cfg.episode_spec(shots, ways)
            res = ev.fewshot_from_features(feats, test.labels, target.num_classes, spec, rng.split(f"{shots}shot"), cfg.fewshot.l2)
            out.append((f"fewshot-{shots}shot", {**res.metrics(), "ways": float(ways)}))
        return out
    if protocol == "finetune":
        cap = cfg.finetune.sample_cap if sample_cap is None else sample_cap
        res = ev.run_protocol(state, "finetune", target, rng, cfg.probe_config(), sample_cap=cap)
        return [("finetune" if cap is None else f"finetune-cap{cap}", res.metrics())]
    res = ev.run_protocol(state, protocol, target, rng, cfg.probe_config())
    return [(protocol, res.metrics())]


@dataclasses.dataclass(frozen=True)
class EvalJob:
    cfg: ExperimentConfig
    method: str
    seed: int
    root: str
    tag: str
    protocols: tuple[str, ...]
    selector: str


def run_eval_job(job: EvalJob) -> list[MetricRecord]:
    cfg = job.cfg
    targets = [generate_domain(spec) for spec in cfg.target_specs(job.seed)]
    records = []
    for epoch, path in select_checkpoints(checkpoint_dir(job.root, job.method, job.seed), job.selector):
        state = read_checkpoint(path).state
        for target in targets:
            for protocol in job.protocols:
                for tag, values in evaluate_state(cfg, state, protocol, target, job.seed):
                    records += _records(cfg, job.tag, tag, target.domain_id, job.seed, epoch, values)
    return records


def cmd_eval(cfg: ExperimentConfig, protocol: str | None = None, selector: str = "final") -> int:
    protocols = (protocol,) if protocol else cfg.protocols
    bad = [p for p in protocols if p not in PROTOCOLS]
    if bad:
        raise ConfigError([f"unknown protocol {p!r}; expected one of {list(PROTOCOLS)}" for p in bad])
    jobs = [EvalJob(cfg, m, s, cfg.output_dir, m, tuple(protocols), selector) for m in cfg.methods for s in cfg.seeds]
    for j in jobs:
        d = checkpoint_dir(j.root, j.method, j.seed)
        if not d.exists():
            raise MissingArtifactError(f"missing checkpoints for {j.method} seed {j.seed}: {d}")
    n = _write(cfg, fan_out(run_eval_job, jobs))
    log.info("eval: %d jobs, %d records", len(jobs), n)
    return 0


# analysis


def _analysis_domain(cfg: ExperimentConfig, seed: int) -> Dataset:
    name = cfg.analysis.domain
    if name in ("source", cfg.source.get("domain_id", "source")):
        return generate_domain(cfg.source_spec(seed))
    for spec in cfg.target_specs(seed):
        if spec.domain_id == name:
            return generate_domain(spec)
    raise ConfigError([f"analysis.domain {name!r} is neither the source nor a configured target"])


def _final_state(cfg: ExperimentConfig, method: str, seed: int) -> ModelState:
    return read_checkpoint(select_checkpoints(checkpoint_dir(cfg.output_dir, method, seed), "final")[0][1]).state


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return path


@dataclasses.dataclass(frozen=True)
class AnalysisJob:
    cfg: ExperimentConfig
    method: str
    seed: int
    analyses: tuple[str, ...]


def run_analysis_job(job: AnalysisJob) -> list[MetricRecord]:
    cfg, a = job.cfg, job.cfg.analysis
    data = _analysis_domain(cfg, job.seed)
    train, test = data.split("train"), data.split("test")
    state = _final_state(cfg, job.method, job.seed)
    records = []

    def emit(protocol, values):
        records.extend(_records(cfg, job.method, protocol, data.domain_id, job.seed, "final", values))

    classifier = None
    if {"calibration", "corruption", "pgd"} & set(job.analyses):
        probe = ev.run_protocol(state, "probe", data, RngStream(job.seed, f"analysis/head/{data.domain_id}"), cfg.probe_config())
        classifier = an.Classifier(state, probe.head)
    if "calibration" in job.analyses:
        emit("calibration", an.calibration(classifier.logits(test.images), test.labels).metrics())
    if "separation" in job.analyses:
        feats = ev.extract_features(state, test.images)
        intra, inter = an.class_separation(feats, test.labels)
        _, inter_lit = an.class_separation(feats, test.labels, literal_denominator=True)
        emit("separation", {"r_intra": intra, "r_inter": inter, "r_inter_literal": inter_lit})
    if "corruption" in job.analyses:
        res = an.corruption_sweep(classifier, test, a.corruption_types, a.severities, seed=job.seed)
        emit("corruption", res.metrics())
    if "pgd" in job.analyses:
        n = min(a.pgd_samples, len(test))
        res = an.pgd_attack(classifier, test.images[:n], test.labels[:n], a.pgd_epsilons, a.pgd_steps)
        emit("pgd", res.metrics())
    if "export" in job.analyses:
        base = Path(cfg.output_dir) / "analysis" / "embeddings"
        for ds in [data] + [generate_domain(s) for s in cfg.target_specs(job.seed) if s.domain_id != data.domain_id]:
            an.export_embeddings(state, ds, base / f"{job.method}_seed{job.seed}_{ds.domain_id}")
    return records


def run_cka(cfg: ExperimentConfig, seed: int) -> list[MetricRecord]:
    data = _analysis_domain(cfg, seed)
    test = data.split("test")
    images = test.images[: cfg.analysis.cka_samples]
    models = {m: _final_state(cfg, m, seed) for m in cfg.methods}
    if len(models) < 2:
        warnings.warn("across-model CKA needs at least two methods; only the within-model grid is computed", stacklevel=2)
    grids = an.cka_stage_grid(models, images)
    rows = grids.rows()
    _write_csv(
        Path(cfg.output_dir) / "analysis" / f"cka_seed{seed}.csv",
        ["kind", "model_a", "model_b", "stage_a", "stage_b", "cka"],
        [[r["kind"], r["model_a"], r["model_b"], r["stage_a"], r["stage_b"], float(r["cka"])] for r in rows],
    )
    records = []
    for r in rows:
        if r["kind"] == "within":
            metric = f"within/{r['stage_a']}-{r['stage_b']}"
            method = r["model_a"]
        elif r["model_a"] < r["model_b"]:
            metric = f"across/stage{r['stage_a']}"
            method = f"{r['model_a']}|{r['model_b']}"
        else:
            continue
        records += _records(cfg, method, "cka", data.domain_id, seed, "final", {metric: float(r["cka"])})
    return records


def cmd_analyze(cfg: ExperimentConfig, analysis: str | None = None) -> int:
    analyses = ANALYSES if analysis in (None, "all") else (analysis,)
    bad = [x for x in analyses if x not in ANALYSES]
    if bad:
        raise ConfigError([f"unknown analysis {x!r}; expected one of {list(ANALYSES)}" for x in bad])
    batches = []
    if "cka" in analyses:
        batches += [run_cka(cfg, s) for s in cfg.seeds]
    rest = tuple(x for x in analyses if x != "cka")
    if rest:
        jobs = [AnalysisJob(cfg, m, s, rest) for m in cfg.methods for s in cfg.seeds]
        batches += fan_out(run_analysis_job, jobs)
    _write(cfg, batches)
    _write_analysis_tables(cfg)
    return 0


def _write_analysis_tables(cfg: ExperimentConfig) -> None:
    recs = [r for r in _store(cfg).read() if r.experiment_id == cfg.experiment_id]
    for protocol in ("calibration", "separation", "corruption", "pgd"):
        rows = sorted(
            (r.method, r.seed, r.domain, r.metric, r.value) for r in recs if r.protocol == protocol
        )
        if rows:
            _write_csv(Path(cfg.output_dir) / "analysis" / f"{protocol}.csv", ["method", "seed", "domain", "metric", "value"], rows)


# ablations


def _axis_grid(cfg: ExperimentConfig, axis: str) -> tuple:
    if axis not in AXES:
        raise ConfigError([f"unknown ablation axis {axis!r}; expected one of {list(AXES)}"])
    grid = getattr(cfg.ablation, axis)
    if not grid:
        raise ConfigError([f"ablation.{axis}: the grid is empty"])
    return tuple(grid)


def ablation_tag(method: str, axis: str, value) -> str:
    return f"{method}[{axis}={value:g}]" if isinstance(value, (int, float)) else f"{method}[{axis}={value}]"


@dataclasses.dataclass(frozen=True)
class AblationJob:
    cfg: ExperimentConfig
    axis: str
    value: object
    seed: int


def run_ablation_job(job: AblationJob) -> list[MetricRecord]:
    cfg, ab = job.cfg, job.cfg.ablation
    method = {
        "alpha": ab.alpha_method,
        "queue_size": ab.queue_method,
        "augmentation": ab.augmentation_method,
        "epochs": ab.epochs_method,
    }[job.axis]
    tag = ablation_tag(method, job.axis, job.value)
    root = str(Path(cfg.output_dir) / "ablations" / job.axis / str(job.value))
    epochs = cfg.pretrain.epochs
    overrides, policy = (), None
    if job.axis == "alpha":
        overrides = (("alpha", float(job.value)),)
    elif job.axis == "queue_size":
        overrides = (("queue_size", int(job.value)),)
    elif job.axis == "augmentation":
        policy = str(job.value)
    else:
        epochs = int(job.value)
    pj = PretrainJob(cfg, method, job.seed, root, tag, epochs, (epochs,), overrides, policy)
    records = run_pretrain_job(pj)
    ej = EvalJob(cfg, method, job.seed, root, tag, (ab.protocol,), "final")
    return records + run_eval_job(ej)


def cmd_ablate(cfg: ExperimentConfig, axis: str) -> int:
    grid = _axis_grid(cfg, axis)
    write_frozen(cfg, cfg.output_dir)
    jobs = [AblationJob(cfg, axis, v, s) for v in grid for s in cfg.seeds]
    _write(cfg, fan_out(run_ablation_job, jobs))
    write_ablation_curve(cfg, axis)
    return 0


def ablation_curve(records: Sequence[MetricRecord], axis: str, protocol: str) -> list[tuple[str, str, float, float, float, int]]:
    """Rows (value, domain, mean, std, n) from records tagged ``[axis=value]``; domain "mean" pools domains."""
    marker = f"[{axis}="
    per: dict[tuple[str, str], list[float]] = {}
    for r in records:
        if marker in r.method and r.protocol == protocol and r.metric == "accuracy":
            value = r.method.split(marker, 1)[1].rstrip("]")
            per.setdefault((value, r.domain), []).append(r.value)
    pooled: dict[str, dict[int, list[float]]] = {}
    for r in records:
        if marker in r.method and r.protocol == protocol and r.metric == "accuracy":
            value = r.method.split(marker, 1)[1].rstrip("]")
            pooled.setdefault(value, {}).setdefault(r.seed, []).append(r.value)
    rows = []
    for (value, domain), vals in per.items():
        rows.append((value, domain, *mean_std(vals), len(vals)))
    for value, by_seed in pooled.items():
        vals = [float(np.mean(v)) for _, v in sorted(by_seed.items())]
        rows.append((value, "mean", *mean_std(vals), len(vals)))
    return sorted(rows, key=lambda r: (_num_key(r[0]), r[1]))


def _num_key(v: str):
    try:
        return (0, float(v), "")
    except ValueError:
        return (1, 0.0, v)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def write_ablation_curve(cfg: ExperimentConfig, axis: str) -> Path:
    recs = [r for r in _store(cfg).read() if r.experiment_id == cfg.experiment_id]
    rows = ablation_curve(recs, axis, cfg.ablation.protocol)
    return _write_csv(Path(cfg.output_dir) / "ablations" / f"{axis}.csv", [axis, "domain", "mean", "std", "n"], rows)

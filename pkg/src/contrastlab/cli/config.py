"""Experiment configuration: strict JSON loading and whole-config validation.

Every section rejects unknown keys, and :func:`load_config` collects every
violation before raising a single :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..data.augment import AugmentationPolicy
from ..data.domains import DomainSpec, far_brightness_domain, far_texture_domain, near_domain, source_domain
from ..data.episodes import EpisodeSpec
from ..errors import ConfigError, MissingArtifactError
from ..evaluation import ProbeConfig
from ..model import EncoderConfig, ModelConfig, Objective

PRESETS = {
    "source": source_domain,
    "near": near_domain,
    "far-texture": far_texture_domain,
    "far-brightness": far_brightness_domain,
}

# method tag -> (objective, augmentation policy name or None for the objective default)
METHODS = {o.value: (o, None) for o in Objective}
METHODS["CE(strong)"] = (Objective.CE, "strong")

PROTOCOLS = ("probe", "finetune", "fewshot")
ANALYSES = ("cka", "calibration", "separation", "corruption", "pgd", "export")
AXES = ("alpha", "queue_size", "augmentation", "epochs")


@dataclass(frozen=True)
class ModelSection:
    temperature: float = 0.07
    momentum: float = 0.99
    queue_size: int = 512
    alpha: float = 1.0
    supcon_sum_mode: str = "mean"
    shared_header: bool = False


@dataclass(frozen=True)
class EncoderSection:
    widths: tuple[int, ...] = (256, 128, 128, 64)
    proj_hidden: int = 64
    embed_dim: int = 32


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 100
    lr: float = 0.05
    schedule: str = "cosine"
    warmup_epochs: int = 5
    batch_size: int = 64
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    checkpoint_every: int = 10


@dataclass(frozen=True)
class ProbeSection:
    epochs: int = 50
    milestones: tuple[int, ...] = (25, 37)
    decay: float = 0.1
    lrs: tuple[float, ...] = (0.001, 0.01, 0.1)
    batch_sizes: tuple[int, ...] = (32, 128)
    small_batch_sizes: tuple[int, ...] = (16, 64)
    small_threshold: int = 512
    weight_decays: tuple[float, ...] = (0.0, 1e-4, 1e-5)
    val_fraction: float = 0.3
    momentum: float = 0.9


@dataclass(frozen=True)
class FinetuneSection:
    sample_cap: int | None = None


@dataclass(frozen=True)
class FewshotSection:
    ways: int = 5
    shots: tuple[int, ...] = (5,)
    queries: int = 15
    episodes: int = 600
    l2: float = 1e-4


@dataclass(frozen=True)
class AnalysisSection:
    domain: str = "source"
    cka_samples: int = 256
    pgd_epsilons: tuple[float, ...] = (0.0, 0.01, 0.02, 0.04, 0.08)
    pgd_steps: int = 20
    pgd_samples: int = 128
    corruption_types: tuple[str, ...] = ("gaussian-noise", "blur", "contrast", "pixelate")
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class AblationSection:
    alpha: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 5.0)
    alpha_method: str = "CE+SelfSupCon"
    queue_size: tuple[int, ...] = (64, 256, 512)
    queue_method: str = "SelfSupCon"
    augmentation: tuple[str, ...] = ("weak", "strong")
    augmentation_method: str = "CE"
    epochs: tuple[int, ...] = (10, 25, 50, 100)
    epochs_method: str = "CE+SelfSupCon"
    protocol: str = "probe"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    seeds: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = ("CE", "SelfSupCon", "SupCon", "CE+SelfSupCon", "SupCon+SelfSupCon")
    model: ModelSection = ModelSection()
    encoder: EncoderSection = EncoderSection()
    source: dict = field(default_factory=lambda: {"preset": "source"})
    targets: tuple[dict, ...] = ({"preset": "near"}, {"preset": "far-texture"}, {"preset": "far-brightness"})
    pretrain: PretrainSection = PretrainSection()
    protocols: tuple[str, ...] = ("probe",)
    probe: ProbeSection = ProbeSection()
    finetune: FinetuneSection = FinetuneSection()
    fewshot: FewshotSection = FewshotSection()
    analysis: AnalysisSection = AnalysisSection()
    ablation: AblationSection = AblationSection()
    output_dir: str = "runs"

    # derived objects

    def domain_spec(self, entry: dict, seed: int) -> DomainSpec:
        entry = dict(entry)
        preset = entry.pop("preset", None)
        entry.setdefault("seed", seed)
        for k, v in list(entry.items()):
            if isinstance(v, list):
                entry[k] = tuple(v)
        if preset is None:
            return DomainSpec.from_dict(entry)
        return PRESETS[preset](**entry)

    def source_spec(self, seed: int) -> DomainSpec:
        return self.domain_spec(self.source, seed)

    def target_specs(self, seed: int) -> list[DomainSpec]:
        return [self.domain_spec(t, seed) for t in self.targets]

    def model_config(self, method: str, num_classes: int, input_dim: int, **overrides) -> ModelConfig:
        objective, _ = METHODS[method]
        enc = EncoderConfig(input_dim, self.encoder.widths, self.encoder.proj_hidden, self.encoder.embed_dim)
        params = dataclasses.asdict(self.model)
        params.update(overrides)
        return ModelConfig(enc, num_classes, objective, **params)

    def policy(self, method: str) -> AugmentationPolicy | None:
        name = METHODS[method][1]
        return None if name is None else AugmentationPolicy.named(name)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(**dataclasses.asdict(self.probe))

    def episode_spec(self, shots: int, ways: int | None = None) -> EpisodeSpec:
        f = self.fewshot
        return EpisodeSpec(ways=ways or f.ways, shots=shots, queries=f.queries, episodes=f.episodes)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


_SECTIONS = {
    "model": ModelSection,
    "encoder": EncoderSection,
    "pretrain": PretrainSection,
    "probe": ProbeSection,
    "finetune": FinetuneSection,
    "fewshot": FewshotSection,
    "analysis": AnalysisSection,
    "ablation": AblationSection,
}


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _type_ok(value, default) -> bool:
    if default is None:
        return value is None or isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, tuple):
        return isinstance(value, (list, tuple))
    return True


def _load_section(cls, data, prefix: str, violations: list[str]):
    if not isinstance(data, dict):
        violations.append(f"{prefix}: expected an object, got {type(data).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            violations.append(f"{prefix}.{key}: unknown field")
            continue
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        if not _type_ok(value, default):
            violations.append(f"{prefix}.{key}: bad value {value!r}")
            continue
        kwargs[key] = _coerce(value, default)
    return cls(**kwargs)


def _domain_violations(entry, where: str, violations: list[str]) -> None:
    if not isinstance(entry, dict):
        violations.append(f"{where}: expected an object")
        return
    preset = entry.get("preset")
    if preset is not None and preset not in PRESETS:
        violations.append(f"{where}.preset: unknown preset {preset!r}; known: {sorted(PRESETS)}")
        return
    spec_fields = {f.name for f in dataclasses.fields(DomainSpec)}
    unknown = sorted(set(entry) - spec_fields - {"preset"})
    for k in unknown:
        violations.append(f"{where}.{k}: unknown field")
    if unknown:
        return
    try:
        tmp = dict(entry)
        tmp.pop("preset", None)
        tmp = {k: tuple(v) if isinstance(v, list) else v for k, v in tmp.items()}
        spec = PRESETS[preset](**tmp) if preset else DomainSpec.from_dict(tmp)
    except TypeError as exc:
        violations.append(f"{where}: {exc}")
        return
    violations.extend(f"{where}: {v}" for v in spec.violations())


def parse_config(data: Any) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from decoded JSON."""
    violations: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in sorted(set(data) - top):
        violations.append(f"{key}: unknown field")
    kwargs: dict[str, Any] = {}
    if not isinstance(data.get("experiment_id"), str) or not data.get("experiment_id"):
        violations.append("experiment_id: required non-empty string")
    else:
        kwargs["experiment_id"] = data["experiment_id"]
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _load_section(cls, data[name], name, violations)
    for name in ("seeds", "methods", "protocols", "targets"):
        if name in data:
            if not isinstance(data[name], list):
                violations.append(f"{name}: expected a list")
            else:
                kwargs[name] = tuple(data[name])
    if "source" in data:
        kwargs["source"] = data["source"]
    if "output_dir" in data:
        if isinstance(data["output_dir"], str):
            kwargs["output_dir"] = data["output_dir"]
        else:
            violations.append("output_dir: expected a string")
    cfg = ExperimentConfig(**{"experiment_id": "invalid", **kwargs})
    violations.extend(config_violations(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def config_violations(cfg: ExperimentConfig) -> list[str]:
    out = []
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        out.append(f"seeds: need a non-empty list of non-negative integers, got {list(cfg.seeds)}")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        out.append("seeds: duplicates")
    if not cfg.methods:
        out.append("methods: empty")
    for m in cfg.methods:
        if m not in METHODS:
            out.append(f"methods: unknown method {m!r}; known: {sorted(METHODS)}")
    for p in cfg.protocols:
        if p not in PROTOCOLS:
            out.append(f"protocols: unknown protocol {p!r}; known: {list(PROTOCOLS)}")
    _domain_violations(cfg.source, "source", out)
    if not cfg.targets:
        out.append("targets: need at least one target domain")
    for i, t in enumerate(cfg.targets):
        _domain_violations(t, f"targets[{i}]", out)
    ids = [t.get("domain_id") or t.get("preset") for t in cfg.targets if isinstance(t, dict)]
    if len(set(ids)) != len(ids):
        out.append(f"targets: duplicate domain ids {ids}")
    enc = EncoderConfig(1, cfg.encoder.widths, cfg.encoder.proj_hidden, cfg.encoder.embed_dim)
    out.extend(enc.violations())
    mm = cfg.model
    if not mm.temperature > 0:
        out.append(f"model.temperature must be > 0, got {mm.temperature}")
    if not 0 <= mm.momentum <= 1:
        out.append(f"model.momentum must lie in [0, 1], got {mm.momentum}")
    if mm.queue_size < 1:
        out.append(f"model.queue_size must be >= 1, got {mm.queue_size}")
    if mm.alpha < 0:
        out.append(f"model.alpha must be >= 0, got {mm.alpha}")
    if mm.supcon_sum_mode not in ("mean", "sum"):
        out.append(f"model.supcon_sum_mode must be 'mean' or 'sum', got {mm.supcon_sum_mode!r}")
    if mm.shared_header and any(m in METHODS and METHODS[m][0].is_joint for m in cfg.methods):
        out.append("model.shared_header: joint objectives need separate heads; a single shared header diverges")
    p = cfg.pretrain
    if p.epochs < 0:
        out.append(f"pretrain.epochs must be >= 0, got {p.epochs}")
    if not p.lr >= 0:
        out.append(f"pretrain.lr must be >= 0, got {p.lr}")
    if p.schedule not in ("cosine", "step", "constant"):
        out.append(f"pretrain.schedule must be cosine, step or constant, got {p.schedule!r}")
    if p.warmup_epochs < 0:
        out.append(f"pretrain.warmup_epochs must be >= 0, got {p.warmup_epochs}")
    if p.batch_size < 1:
        out.append("pretrain.batch_size must be >= 1")
    if not 0 <= p.sgd_momentum <= 1:
        out.append("pretrain.sgd_momentum must lie in [0, 1]")
    if p.weight_decay < 0:
        out.append("pretrain.weight_decay must be >= 0")
    if p.checkpoint_every < 0:
        out.append("pretrain.checkpoint_every must be >= 0")
    out.extend(cfg.probe_config().violations("probe"))
    if cfg.finetune.sample_cap is not None and cfg.finetune.sample_cap < 1:
        out.append("finetune.sample_cap must be >= 1")
    f = cfg.fewshot
    if f.ways < 1 or f.queries < 1 or f.episodes < 1 or not f.shots or min(f.shots) < 1:
        out.append("fewshot: ways, shots, queries and episodes must be >= 1")
    a = cfg.analysis
    if any(e < 0 for e in a.pgd_epsilons) or not a.pgd_epsilons:
        out.append("analysis.pgd_epsilons: need a non-empty list of values >= 0")
    if a.pgd_steps < 1 or a.pgd_samples < 1 or a.cka_samples < 2:
        out.append("analysis: pgd_steps, pgd_samples must be >= 1 and cka_samples >= 2")
    if any(s not in (1, 2, 3, 4, 5) for s in a.severities):
        out.append("analysis.severities must be integers in 1..5")
    for t in a.corruption_types:
        if t not in ("gaussian-noise", "blur", "contrast", "pixelate"):
            out.append(f"analysis.corruption_types: unknown type {t!r}")
    ab = cfg.ablation
    for key in ("alpha_method", "queue_method", "augmentation_method", "epochs_method"):
        if getattr(ab, key) not in METHODS:
            out.append(f"ablation.{key}: unknown method {getattr(ab, key)!r}")
    if any(v < 0 for v in ab.alpha):
        out.append("ablation.alpha values must be >= 0")
    if any(v < 1 for v in ab.queue_size):
        out.append("ablation.queue_size values must be >= 1")
    # every step enqueues a whole batch of keys, so a queue must hold at least one batch
    queued = [m for m in cfg.methods if m in METHODS and METHODS[m][0].heads]
    if queued and mm.queue_size < p.batch_size:
        out.append(f"model.queue_size={mm.queue_size} is smaller than pretrain.batch_size={p.batch_size} (methods {queued})")
    if ab.queue_method in METHODS and METHODS[ab.queue_method][0].heads:
        small = [v for v in ab.queue_size if 1 <= v < p.batch_size]
        if small:
            out.append(f"ablation.queue_size values {small} are smaller than pretrain.batch_size={p.batch_size}")
    if any(v not in ("weak", "strong", "identity") for v in ab.augmentation):
        out.append("ablation.augmentation values must be weak, strong or identity")
    if any(v < 0 for v in ab.epochs):
        out.append("ablation.epochs values must be >= 0")
    if ab.protocol not in PROTOCOLS:
        out.append(f"ablation.protocol: unknown protocol {ab.protocol!r}")
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})"]) from exc
    return parse_config(data)


def write_frozen(cfg: ExperimentConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path

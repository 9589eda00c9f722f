"""Staged dense encoder, classifier/projection heads, key encoder and key queues.

Parameter naming (also used in checkpoints)::

    enc.{i}.W, enc.{i}.b            stage i affine map, W stored as (out, in)
    cls.W, cls.b                    classifier, W in R^{K x D}
    proj.{head}.0.W / .0.b          projection MLP hidden layer
    proj.{head}.1.W / .1.b          projection MLP output layer

``head`` is ``selfsup`` or ``supcon``. The key encoder mirrors the ``enc.*``
and ``proj.*`` entries and is only ever changed by :func:`momentum_update`.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    DimensionError,
    MissingArtifactError,
)
from .numerics import RngStream, Tensor, l2_normalize, linear, relu
from .numerics.optim import OptimizerState

SCHEMA_VERSION = 1


class Objective(str, Enum):
    CE = "CE"
    SELFSUP = "SelfSupCon"
    SUPCON = "SupCon"
    CE_SELFSUP = "CE+SelfSupCon"
    SUPCON_SELFSUP = "SupCon+SelfSupCon"

    @property
    def uses_ce(self) -> bool:
        return self in (Objective.CE, Objective.CE_SELFSUP)

    @property
    def uses_selfsup(self) -> bool:
        return self in (Objective.SELFSUP, Objective.CE_SELFSUP, Objective.SUPCON_SELFSUP)

    @property
    def uses_supcon(self) -> bool:
        return self in (Objective.SUPCON, Objective.SUPCON_SELFSUP)

    @property
    def is_joint(self) -> bool:
        return self in (Objective.CE_SELFSUP, Objective.SUPCON_SELFSUP)

    @property
    def heads(self) -> tuple[str, ...]:
        out = []
        if self.uses_supcon:
            out.append("supcon")
        if self.uses_selfsup:
            out.append("selfsup")
        return tuple(out)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 256
    widths: tuple[int, ...] = (256, 128, 128, 64)
    proj_hidden: int = 64
    embed_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def violations(self) -> list[str]:
        out = []
        if self.input_dim <= 0:
            out.append(f"encoder.input_dim must be positive, got {self.input_dim}")
        if len(self.widths) < 2:
            out.append(f"encoder.widths needs at least 2 stages, got {list(self.widths)}")
        if any(w <= 0 for w in self.widths):
            out.append(f"encoder.widths must be positive, got {list(self.widths)}")
        if self.proj_hidden <= 0 or self.embed_dim <= 0:
            out.append("encoder.proj_hidden and encoder.embed_dim must be positive")
        return out


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    num_classes: int
    objective: Objective
    temperature: float = 0.07
    momentum: float = 0.99
    queue_size: int = 512
    alpha: float = 1.0
    supcon_sum_mode: str = "mean"
    shared_header: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))

    def violations(self) -> list[str]:
        out = list(self.encoder.violations())
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.temperature > 0:
            out.append(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            out.append(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.queue_size < 1:
            out.append(f"queue_size must be >= 1, got {self.queue_size}")
        if self.alpha < 0:
            out.append(f"alpha must be >= 0, got {self.alpha}")
        if self.supcon_sum_mode not in ("mean", "sum"):
            out.append(f"supcon_sum_mode must be 'mean' or 'sum', got {self.supcon_sum_mode!r}")
        if self.shared_header and self.objective.is_joint:
            out.append(
                f"{self.objective.value} requires separate heads; a single shared header "
                "diverges during training"
            )
        return out

    def validate(self) -> "ModelConfig":
        v = self.violations()
        if v:
            raise ConfigError(v)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["encoder"]["widths"] = list(self.encoder.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        return cls(encoder=enc, **d)


class KeyQueue:
    """Fixed-capacity FIFO ring buffer of unit-norm key embeddings.

    The buffer starts out filled with random unit vectors labelled -1; these
    seed entries are never exposed. ``fill`` counts real entries and losses
    only see :meth:`region` (the first ``fill`` slots before the first
    wrap-around, the whole buffer afterwards).
    """

    def __init__(self, capacity: int, dim: int, labeled: bool = False, rng: RngStream | None = None):
        if capacity < 1:
            raise ContractError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.labeled = labeled
        rng = rng or RngStream(0, "queue-seed")
        seed = rng.normal(size=(self.capacity, self.dim))
        self.embeddings = seed / np.linalg.norm(seed, axis=1, keepdims=True)
        self.labels = np.full(self.capacity, -1, dtype=np.int64)
        self.ptr = 0
        self.fill = 0

    @property
    def warmup(self) -> bool:
        return self.fill < self.capacity

    def enqueue(self, keys, labels=None) -> None:
        keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise DimensionError(f"keys must be B x {self.dim}, got {keys.shape}")
        b = keys.shape[0]
        if b > self.capacity:
            raise ContractError(f"batch of {b} keys exceeds queue capacity {self.capacity}")
        norms = np.linalg.norm(keys, axis=1)
        if b and np.abs(norms - 1.0).max() > 1e-6:
            raise ContractError(f"keys must be unit-norm (max |norm-1| = {np.abs(norms - 1).max():.3g})")
        if labels is not None and self.labeled:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != b:
                raise DimensionError(f"{labels.shape[0]} labels for {b} keys")
        else:
            labels = np.full(b, -1, dtype=np.int64)
        idx = (self.ptr + np.arange(b)) % self.capacity
        self.embeddings[idx] = keys
        self.labels[idx] = labels
        self.ptr = int((self.ptr + b) % self.capacity)
        self.fill = min(self.capacity, self.fill + b)

    def region(self) -> tuple[np.ndarray, np.ndarray]:
        """Real entries in buffer order (order is irrelevant to the losses)."""
        return self.embeddings[: self.fill], self.labels[: self.fill]

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Real entries oldest-first."""
        if self.fill < self.capacity:
            return self.embeddings[: self.fill].copy(), self.labels[: self.fill].copy()
        order = (self.ptr + np.arange(self.capacity)) % self.capacity
        return self.embeddings[order], self.labels[order]

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "labeled": self.labeled,
            "ptr": self.ptr,
            "fill": self.fill,
            "embeddings": self.embeddings.tolist(),
            "labels": self.labels.tolist(),
        }

    def copy(self) -> "KeyQueue":
        q = KeyQueue.__new__(KeyQueue)
        q.capacity, q.dim, q.labeled = self.capacity, self.dim, self.labeled
        q.embeddings, q.labels = self.embeddings.copy(), self.labels.copy()
        q.ptr, q.fill = self.ptr, self.fill
        return q

    @classmethod
    def from_dict(cls, d: Mapping) -> "KeyQueue":
        q = cls.__new__(cls)
        q.capacity, q.dim, q.labeled = int(d["capacity"]), int(d["dim"]), bool(d["labeled"])
        q.embeddings = np.array(d["embeddings"], dtype=np.float64)
        q.labels = np.array(d["labels"], dtype=np.int64)
        if q.embeddings.shape != (q.capacity, q.dim) or q.labels.shape != (q.capacity,):
            raise CheckpointShapeError(
                f"queue buffer shape {q.embeddings.shape} does not match capacity/dim {(q.capacity, q.dim)}"
            )
        q.ptr, q.fill = int(d["ptr"]), int(d["fill"])
        return q


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    key_params: dict[str, Tensor] = field(default_factory=dict)
    queues: dict[str, KeyQueue] = field(default_factory=dict)
    epoch: int = 0

    @property
    def num_stages(self) -> int:
        return len(self.config.encoder.widths)

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())


def _init_layer(params, name, fan_in, fan_out, rng, gain):
    params[f"{name}.W"] = Tensor(
        rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_out, fan_in)), requires_grad=True, name=f"{name}.W"
    )
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")


def init_encoder(cfg: EncoderConfig, rng: RngStream) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    fan_in = cfg.input_dim
    for i, w in enumerate(cfg.widths):
        _init_layer(params, f"enc.{i}", fan_in, w, rng.split(f"enc.{i}"), gain=2.0)
        fan_in = w
    return params


def init_projection(cfg: EncoderConfig, head: str, rng: RngStream) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_layer(params, f"proj.{head}.0", cfg.feature_dim, cfg.proj_hidden, rng.split(head, "0"), gain=2.0)
    _init_layer(params, f"proj.{head}.1", cfg.proj_hidden, cfg.embed_dim, rng.split(head, "1"), gain=1.0)
    return params


def init_classifier(feature_dim: int, num_classes: int, rng: RngStream) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_layer(params, "cls", feature_dim, num_classes, rng, gain=1.0)
    return params


def init_model(config: ModelConfig, rng: RngStream) -> ModelState:
    """Fresh query encoder + heads; key encoder copied from the query side."""
    config.validate()
    enc = config.encoder
    params = init_encoder(enc, rng.split("encoder"))
    if config.objective.uses_ce:
        params.update(init_classifier(enc.feature_dim, config.num_classes, rng.split("classifier")))
    for head in config.objective.heads:
        params.update(init_projection(enc, head, rng.split("projection")))
    key_params = {}
    queues = {}
    if config.objective.heads:
        key_params = {
            n: Tensor(p.data.copy(), name=n) for n, p in params.items() if n.startswith(("enc.", "proj."))
        }
        for head in config.objective.heads:
            queues[head] = KeyQueue(
                config.queue_size, enc.embed_dim, labeled=(head == "supcon"), rng=rng.split("queue", head)
            )
    return ModelState(config=config, params=params, key_params=key_params, queues=queues)


def stage_count(params: Mapping[str, Tensor]) -> int:
    n = 0
    while f"enc.{n}.W" in params:
        n += 1
    return n


def forward_stages(x, params: Mapping[str, Tensor]) -> list[Tensor]:
    """Activations of every encoder stage; the last one is the feature ``v``."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    n = stage_count(params)
    if n == 0:
        raise ContractError("parameter set contains no encoder stages")
    if h.data.ndim != 2 or h.shape[1] != params["enc.0.W"].shape[1]:
        raise DimensionError(f"input {h.shape} does not match encoder input dim {params['enc.0.W'].shape[1]}")
    out = []
    for i in range(n):
        h = relu(linear(h, params[f"enc.{i}.W"], params[f"enc.{i}.b"]))
        out.append(h)
    return out


def encode(x, params: Mapping[str, Tensor]) -> Tensor:
    return forward_stages(x, params)[-1]


def project(v: Tensor, params: Mapping[str, Tensor], head: str) -> Tensor:
    h = relu(linear(v, params[f"proj.{head}.0.W"], params[f"proj.{head}.0.b"]))
    z = linear(h, params[f"proj.{head}.1.W"], params[f"proj.{head}.1.b"])
    return l2_normalize(z)


def classify(v: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return linear(v, params["cls.W"], params["cls.b"])


def momentum_update(key_params: Mapping[str, Tensor], query_params: Mapping[str, Tensor], m: float) -> None:
    """In place: ``p_k <- m * p_k + (1 - m) * p_q`` for every key parameter."""
    if not 0.0 <= m <= 1.0:
        raise ContractError(f"momentum coefficient must lie in [0, 1], got {m}")
    for name, pk in key_params.items():
        pq = query_params.get(name)
        if pq is None or pq.shape != pk.shape:
            raise DimensionError(f"key parameter {name!r} has no query counterpart of shape {pk.shape}")
        pk.data = m * pk.data + (1.0 - m) * pq.data


# checkpoint io


def _dump_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.tolist()}


def _load_array(d: Mapping, name: str, expected_shape=None) -> np.ndarray:
    shape = tuple(d["shape"])
    try:
        arr = np.array(d["data"], dtype=np.float64)
    except ValueError as exc:
        raise CheckpointShapeError(f"{name}: ragged data") from exc
    if arr.shape != shape:
        raise CheckpointShapeError(f"{name}: declared shape {shape}, data shape {arr.shape}")
    if expected_shape is not None and shape != tuple(expected_shape):
        raise CheckpointShapeError(f"{name}: shape {shape}, config implies {tuple(expected_shape)}")
    return arr


def save_checkpoint(
    state: ModelState,
    path,
    optimizer: OptimizerState | None = None,
    rng_states: Mapping[str, dict] | None = None,
    meta: Mapping | None = None,
) -> Path:
    """Write a JSON checkpoint. Output is a deterministic function of the inputs."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "epoch": state.epoch,
        "config": state.config.to_dict(),
        "params": {n: _dump_array(p.data) for n, p in state.params.items()},
        "key_params": {n: _dump_array(p.data) for n, p in state.key_params.items()},
        "queues": {n: q.to_dict() for n, q in state.queues.items()},
        "optimizer": None,
        "rng": dict(rng_states or {}),
        "meta": dict(meta or {}),
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "lr": optimizer.lr,
            "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay,
            "velocity": {n: _dump_array(v) for n, v in sorted(optimizer.velocity.items())},
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    state: ModelState
    optimizer: OptimizerState | None
    rng_states: dict[str, dict]
    meta: dict


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointTruncatedError(f"{path}: unreadable or truncated checkpoint ({exc.msg})") from exc
    version = doc.get("schema_version") if isinstance(doc, dict) else None
    if version != SCHEMA_VERSION:
        raise CheckpointVersionError(f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        reference = init_model(config, RngStream(0, "shape-reference"))
        params = {}
        for name, ref in reference.params.items():
            if name not in doc["params"]:
                raise CheckpointShapeError(f"{path}: parameter {name!r} missing")
            params[name] = Tensor(_load_array(doc["params"][name], name, ref.shape), requires_grad=True, name=name)
        key_params = {
            name: Tensor(_load_array(doc["key_params"][name], name, ref.shape), name=name)
            for name, ref in reference.key_params.items()
        }
        queues = {n: KeyQueue.from_dict(q) for n, q in doc["queues"].items()}
        optimizer = None
        if doc.get("optimizer"):
            o = doc["optimizer"]
            optimizer = OptimizerState(
                lr=o["lr"],
                momentum=o["momentum"],
                weight_decay=o["weight_decay"],
                velocity={n: _load_array(v, n, params[n].shape if n in params else None) for n, v in o["velocity"].items()},
            )
    except KeyError as exc:
        raise CheckpointTruncatedError(f"{path}: missing field {exc}") from exc
    state = ModelState(config, params, key_params, queues, epoch=int(doc["epoch"]))
    return Checkpoint(state, optimizer, dict(doc.get("rng") or {}), dict(doc.get("meta") or {}))


def load_checkpoint(path) -> ModelState:
    return read_checkpoint(path).state


def clone_state(state: ModelState) -> ModelState:
    params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in state.params.items()}
    key_params = {n: Tensor(p.data.copy(), name=n) for n, p in state.key_params.items()}
    queues = {n: q.copy() for n, q in state.queues.items()}
    return ModelState(replace(state.config), params, key_params, queues, state.epoch)

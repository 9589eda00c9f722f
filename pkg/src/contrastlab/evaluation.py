"""Transfer protocols: frozen-feature linear probe, full fine-tune, few-shot episodes.

Probe and fine-tune share one sweep procedure: stratified 70/30 split of the
downstream training set, every grid cell trained from scratch on the 70%
part and scored on the 30% part, then the best cell retrained on all
training data and scored once on the test split. Test data is only ever
handed to :func:`_score`.
"""

from __future__ import annotations

import itertools
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.domains import Dataset
from .data.episodes import EpisodeSpec, sample_episode
from .errors import ConfigError, ContractError, DimensionError, LabError
from .model import ModelState, encode, forward_stages, read_checkpoint
from .numerics import (
    OptimizerState,
    RngStream,
    Schedule,
    Tape,
    Tensor,
    backward,
    batch_norm,
    linear,
    log_softmax,
    sgd_step,
    softmax_cross_entropy,
    zero_grad,
)

log = logging.getLogger(__name__)

# Variance offset of the fine-tune normalisation layer, relative to the mean
# feature variance. The usual absolute 1e-5 lets near-dead ReLU features be
# scaled up ~300x, and their amplified gradients collapse the encoder.
BN_EPS_REL = 1e-2


@dataclass(frozen=True)
class ProbeConfig:
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

    def violations(self, prefix="probe") -> list[str]:
        out = []
        if self.epochs < 1:
            out.append(f"{prefix}.epochs must be >= 1")
        if any(m >= self.epochs for m in self.milestones):
            out.append(f"{prefix}.milestones {list(self.milestones)} must all be < epochs={self.epochs}")
        if not (self.lrs and self.batch_sizes and self.weight_decays):
            out.append(f"{prefix}: hyperparameter grid is empty")
        if not 0 < self.val_fraction < 1:
            out.append(f"{prefix}.val_fraction must lie in (0, 1)")
        return out

    def grid(self, n_train: int) -> list[tuple[float, int, float]]:
        sizes = self.small_batch_sizes if n_train < self.small_threshold else self.batch_sizes
        return list(itertools.product(self.lrs, sizes, self.weight_decays))


class FeatureStandardizer:
    """Per-dimension standardisation fitted on training features only.

    Dimensions with variance below ``eps`` are only centred (scale 1).
    """

    def __init__(self, eps: float = 1e-12):
        self.eps = eps
        self.mean: np.ndarray | None = None
        self.scale: np.ndarray | None = None

    def fit(self, x: np.ndarray) -> "FeatureStandardizer":
        x = np.asarray(x, dtype=np.float64)
        self.mean = x.mean(axis=0)
        var = x.var(axis=0)
        self.scale = np.where(var > self.eps, np.sqrt(var), 1.0)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ContractError("standardizer used before fit()")
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def transform_tensor(self, v: Tensor) -> Tensor:
        return (v - self.mean) * (1.0 / self.scale)


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray


def _as_state(model) -> ModelState:
    if isinstance(model, ModelState):
        return model
    return read_checkpoint(model).state


def extract_features(model, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Penultimate (final-stage) features, no augmentation."""
    state = _as_state(model)
    images = np.asarray(images, dtype=np.float64)
    expected = state.params["enc.0.W"].shape[1]
    if images.ndim != 2 or images.shape[1] != expected:
        raise DimensionError(f"images {images.shape} do not match encoder input dim {expected}")
    chunks = [encode(images[i : i + batch_size], state.params).data for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, state.config.encoder.feature_dim))


def stage_activations(model, images: np.ndarray) -> list[np.ndarray]:
    state = _as_state(model)
    return [a.data for a in forward_stages(np.asarray(images, dtype=np.float64), state.params)]


def stratified_split(labels: np.ndarray, val_fraction: float, rng: RngStream, attempts: int = 10):
    """Per-class split into (train_idx, val_idx).

    Every class with at least two samples contributes ``round(val_fraction *
    n_c)`` (clamped to [1, n_c - 1]) samples to validation. If either side
    ends up with fewer than two classes the split is redrawn; after
    ``attempts`` failures the full set is used for both training and
    validation.
    """
    labels = np.asarray(labels)
    for a in range(attempts):
        r = rng.split("attempt", a)
        tr, va = [], []
        for c in np.unique(labels):
            idx = r.permutation(np.flatnonzero(labels == c))
            n_val = int(round(val_fraction * len(idx))) if len(idx) > 1 else 0
            n_val = min(max(n_val, 1 if len(idx) > 1 else 0), len(idx) - 1)
            va.append(idx[:n_val])
            tr.append(idx[n_val:])
        tr, va = np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))
        if len(np.unique(labels[tr])) >= 2 and len(np.unique(labels[va])) >= 2:
            return tr, va
    log.warning("stratified split degenerate after %d attempts; validating on the training set", attempts)
    full = np.arange(len(labels))
    return full, full


def _score(predict: Callable[[np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(x) == y).mean()) if len(y) else float("nan")


def _fit_classifier(
    params: Sequence[Tensor],
    forward: Callable[[np.ndarray], Tensor],
    x: np.ndarray,
    y: np.ndarray,
    lr: float,
    batch_size: int,
    weight_decay: float,
    config: ProbeConfig,
    rng: RngStream,
) -> bool:
    """SGD with the probe schedule; returns False (and stops) if the loss diverges."""
    opt = OptimizerState(lr=lr, momentum=config.momentum, weight_decay=weight_decay)
    sched = Schedule.step(lr, config.milestones, config.decay, config.epochs)
    n = len(y)
    for epoch in range(config.epochs):
        opt.lr = sched.lr(epoch)
        order = rng.split("epoch", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                loss = softmax_cross_entropy(forward(x[idx]), y[idx])
            if not np.isfinite(loss.item()):
                return False
            backward(loss, tape, params)
            sgd_step(params, opt)
            zero_grad(params)
    return all(np.isfinite(p.data).all() for p in params)


def _diverged_predict(x: np.ndarray) -> np.ndarray:
    return np.full(len(x), -1)


def _init_head(dim: int, num_classes: int, rng: RngStream) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal(0.0, np.sqrt(1.0 / dim), size=(num_classes, dim)), requires_grad=True, name="head.W")
    b = Tensor(np.zeros(num_classes), requires_grad=True, name="head.b")
    return w, b


@dataclass
class LinearHead:
    standardizer: FeatureStandardizer
    weight: np.ndarray
    bias: np.ndarray
    diverged: bool = False

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.standardizer.transform(features) @ self.weight.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.diverged:
            return _diverged_predict(features)
        return self.logits(features).argmax(axis=1)


def train_linear_head(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    lr: float,
    batch_size: int,
    weight_decay: float,
    config: ProbeConfig,
    rng: RngStream,
) -> LinearHead:
    """Standardise on ``features`` and fit a softmax-regression head by SGD."""
    std = FeatureStandardizer().fit(features)
    z = std.transform(features)
    w, b = _init_head(z.shape[1], num_classes, rng.split("init"))

    def forward(xb):
        return linear(Tensor(xb), w, b)

    ok = _fit_classifier([w, b], forward, z, np.asarray(labels), lr, batch_size, weight_decay, config, rng.split("sgd"))
    return LinearHead(std, w.data.copy(), b.data.copy(), diverged=not ok)


def _cell_key(cell) -> str:
    lr, bs, wd = cell
    return f"lr={lr:g},bs={bs},wd={wd:g}"


@dataclass
class SweepResult:
    best: tuple[float, int, float]
    val_scores: dict[str, float]


def select_hyperparameters(
    train: FeatureSet | Dataset,
    num_classes: int,
    config: ProbeConfig,
    rng: RngStream,
    fit: Callable,
) -> SweepResult:
    """Grid sweep on a 70/30 split of the training data only.

    ``fit(x, y, cell, rng)`` must return a predict function. Ties keep the
    earliest cell in grid order; a diverged cell predicts nothing and scores 0.
    """
    x, y = (train.features, train.labels) if isinstance(train, FeatureSet) else (train.images, train.labels)
    if len(np.unique(y)) < 2:
        raise ContractError("hyperparameter sweep needs at least two classes")
    tr, va = stratified_split(y, config.val_fraction, rng.split("split"))
    scores = {}
    best, best_score = None, -1.0
    for cell in config.grid(len(tr)):
        predict = fit(x[tr], y[tr], cell, rng.split("cell", _cell_key(cell)))
        s = _score(predict, x[va], y[va])
        scores[_cell_key(cell)] = s
        if s > best_score:
            best, best_score = cell, s
    return SweepResult(best, scores)


@dataclass
class ProbeResult:
    test_accuracy: float
    best: tuple[float, int, float]
    val_scores: dict[str, float]
    head: LinearHead | None = None
    test_logits: np.ndarray | None = None

    def metrics(self) -> dict[str, float]:
        lr, bs, wd = self.best
        return {"accuracy": self.test_accuracy, "best_lr": lr, "best_batch_size": bs, "best_weight_decay": wd}


def linear_probe(
    train: FeatureSet, test: FeatureSet, num_classes: int, config: ProbeConfig, rng: RngStream
) -> ProbeResult:
    """Sweep on ``train`` only, retrain the best cell on all of it, score on ``test``."""

    def fit(x, y, cell, r):
        head = train_linear_head(x, y, num_classes, *cell, config, r)
        return head.predict

    sweep = select_hyperparameters(train, num_classes, config, rng, fit)
    head = train_linear_head(train.features, train.labels, num_classes, *sweep.best, config, rng.split("final"))
    logits = head.logits(test.features)
    acc = _score(head.predict, test.features, test.labels)
    return ProbeResult(acc, sweep.best, sweep.val_scores, head, logits)


def fixed_linear_probe(
    train: FeatureSet, test: FeatureSet, num_classes: int, config: ProbeConfig, rng: RngStream,
    cell=(0.01, 128, 0.0),
) -> ProbeResult:
    """Probe with one fixed cell, no sweep (used by the analysis commands)."""
    head = train_linear_head(train.features, train.labels, num_classes, *cell, config, rng.split("final"))
    return ProbeResult(_score(head.predict, test.features, test.labels), tuple(cell), {}, head, head.logits(test.features))


def balanced_subsample(labels: np.ndarray, cap: int, num_classes: int, rng: RngStream) -> np.ndarray:
    """At most ``cap`` indices, spread over classes as evenly as possible."""
    if cap < num_classes:
        raise ConfigError(f"sample cap {cap} is smaller than the class count {num_classes}")
    labels = np.asarray(labels)
    pools = [rng.split("class", c).permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    per = [0] * num_classes
    remaining = cap
    while remaining > 0:
        progressed = False
        for c in range(num_classes):
            if remaining and per[c] < len(pools[c]):
                per[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return np.sort(np.concatenate([p[:k] for p, k in zip(pools, per)]))


class _FinetuneModel:
    """Encoder copy plus a non-affine normalisation layer and a linear head.

    Training normalises with batch statistics; prediction uses the statistics
    of the current encoder on the full training split, the deterministic
    counterpart of running averages. The variance offset is fixed at
    :data:`BN_EPS_REL` times the initial mean feature variance.
    """

    def __init__(self, state: ModelState, train_images: np.ndarray, num_classes: int, rng: RngStream):
        n = len([k for k in state.params if k.startswith("enc.")]) // 2
        self.params = {
            f"enc.{i}.{p}": Tensor(state.params[f"enc.{i}.{p}"].data.copy(), requires_grad=True, name=f"enc.{i}.{p}")
            for i in range(n)
            for p in ("W", "b")
        }
        self.train_images = train_images
        ref = encode(train_images, self.params).data
        self.eps = max(BN_EPS_REL * float(ref.var(axis=0).mean()), 1e-12)
        self.w, self.b = _init_head(state.config.encoder.feature_dim, num_classes, rng)

    def trainable(self) -> list[Tensor]:
        return list(self.params.values()) + [self.w, self.b]

    def forward(self, x) -> Tensor:
        return linear(batch_norm(encode(x, self.params), self.eps), self.w, self.b)

    def logits(self, x: np.ndarray) -> np.ndarray:
        ref = encode(self.train_images, self.params).data
        mean, scale = ref.mean(axis=0), np.sqrt(ref.var(axis=0) + self.eps)
        z = (encode(x, self.params).data - mean) / scale
        return z @ self.w.data.T + self.b.data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def finetune(
    model,
    train: Dataset,
    test: Dataset,
    config: ProbeConfig,
    rng: RngStream,
    sample_cap: int | None = None,
) -> ProbeResult:
    """Full-network transfer: encoder and a fresh linear head are both trained.

    A parameter-free batch normalisation sits between encoder and head (see
    :class:`_FinetuneModel`), so low-variance features cannot amplify encoder
    updates the way a fixed standardiser would.
    """
    state = _as_state(model)
    k = train.num_classes
    if sample_cap is not None:
        train = train.subset(balanced_subsample(train.labels, sample_cap, k, rng.split("cap")))

    def fit(x, y, cell, r):
        lr, bs, wd = cell
        net = _FinetuneModel(state, x, k, r.split("init"))
        ok = _fit_classifier(net.trainable(), net.forward, x, y, lr, bs, wd, config, r.split("sgd"))
        return net.predict if ok else _diverged_predict

    sweep = select_hyperparameters(train, k, config, rng, fit)
    lr, bs, wd = sweep.best
    r = rng.split("final")
    net = _FinetuneModel(state, train.images, k, r.split("init"))
    ok = _fit_classifier(net.trainable(), net.forward, train.images, train.labels, lr, bs, wd, config, r.split("sgd"))
    logits = net.logits(test.images)
    predict = net.predict if ok else _diverged_predict
    return ProbeResult(_score(predict, test.images, test.labels), sweep.best, sweep.val_scores, None, logits)


# few-shot


@dataclass
class LogisticFit:
    weight: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool


def fit_logistic_regression(
    x: np.ndarray, y: np.ndarray, num_classes: int, l2: float = 1e-4, max_iter: int = 500, tol: float = 1e-6
) -> LogisticFit:
    """Multinomial logistic regression by full-batch gradient descent.

    Bias is folded in as a constant-one column. Step size is ``1/L`` with
    ``L = 0.5 * ||X||_2^2 / n + l2``, an upper bound on the Hessian norm.
    Stops when the gradient norm drops below ``tol`` or after ``max_iter``
    steps; ``converged`` is False only if the iterate became non-finite.
    """
    n = len(y)
    xa = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(num_classes)[y]
    if not np.isfinite(xa).all():
        return LogisticFit(np.zeros((xa.shape[1], num_classes)), 0, float("nan"), False)
    lip = 0.5 * np.linalg.norm(xa, 2) ** 2 / n + l2
    step = 1.0 / lip
    w = np.zeros((xa.shape[1], num_classes))
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = np.exp(log_softmax(xa @ w))
        grad = xa.T @ (p - onehot) / n + l2 * w
        gnorm = float(np.linalg.norm(grad))
        if not np.isfinite(gnorm) or gnorm < tol:
            break
        w = w - step * grad
    finite = bool(np.isfinite(w).all() and np.isfinite(gnorm))
    return LogisticFit(w, it, gnorm, finite)


def episode_accuracy(support_x, support_y, query_x, query_y, num_classes: int, l2: float = 1e-4):
    """Standardise on the support set, fit, classify the queries. Returns (acc, fit)."""
    std = FeatureStandardizer().fit(support_x)
    fit = fit_logistic_regression(std.transform(support_x), np.asarray(support_y), num_classes, l2)
    zq = std.transform(query_x)
    pred = (np.hstack([zq, np.ones((len(zq), 1))]) @ fit.weight).argmax(axis=1)
    return float((pred == np.asarray(query_y)).mean()), fit


@dataclass
class FewShotResult:
    accuracies: np.ndarray
    mean: float
    ci95: float
    excluded: int = 0
    diagnostics: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {"accuracy": self.mean, "ci95": self.ci95, "excluded_episodes": float(self.excluded)}


def summarize_episodes(accuracies) -> tuple[float, float]:
    """Mean and 1.96 * sample-std / sqrt(E)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan")
    sd = a.std(ddof=1) if a.size > 1 else 0.0
    return float(a.mean()), float(1.96 * sd / np.sqrt(a.size))


def fewshot_from_features(
    features: np.ndarray, labels: np.ndarray, num_classes: int, spec: EpisodeSpec, rng: RngStream, l2: float = 1e-4
) -> FewShotResult:
    accs, excluded = [], 0
    iters = []
    for e in range(spec.episodes):
        ep = sample_episode(labels, num_classes, spec, rng.split("episode", e))
        acc, fit = episode_accuracy(
            features[ep.support_idx], ep.support_y, features[ep.query_idx], ep.query_y, spec.ways, l2
        )
        iters.append(fit.iterations)
        if not fit.converged:
            excluded += 1
            continue
        accs.append(acc)
    mean, ci = summarize_episodes(accs)
    diag = {"mean_iterations": float(np.mean(iters)) if iters else 0.0, "non_converged": excluded}
    return FewShotResult(np.asarray(accs), mean, ci, excluded, diag)


def fewshot_eval(model, dataset: Dataset, spec: EpisodeSpec, rng: RngStream, l2: float = 1e-4) -> FewShotResult:
    """Frozen features once, then ``spec.episodes`` logistic-regression episodes."""
    feats = extract_features(model, dataset.images)
    return fewshot_from_features(feats, dataset.labels, dataset.num_classes, spec, rng, l2)


# checkpoint curves

_EPOCH_RE = re.compile(r"epoch_(\d+)\.json$")


def list_checkpoints(directory) -> list[tuple[int, Path]]:
    out = []
    for p in Path(directory).glob("epoch_*.json"):
        m = _EPOCH_RE.search(p.name)
        if m:
            out.append((int(m.group(1)), p))
    return sorted(out)


@dataclass
class CurvePoint:
    epoch: int
    domain: str
    accuracy: float


def checkpoint_sweep_eval(
    directory,
    protocol: str,
    domains: Mapping[str, Dataset],
    rng: RngStream,
    probe_config: ProbeConfig | None = None,
    episode_spec: EpisodeSpec | None = None,
    epochs: Sequence[int] | None = None,
) -> list[CurvePoint]:
    """Run ``protocol`` on every per-epoch checkpoint; points sorted by (epoch, domain).

    Requested epochs without a readable checkpoint are skipped with a warning.
    """
    found = dict(list_checkpoints(directory))
    wanted = sorted(found) if epochs is None else sorted(epochs)
    points = []
    for epoch in wanted:
        path = found.get(epoch)
        if path is None:
            warnings.warn(f"no checkpoint for epoch {epoch} in {directory}; skipped", stacklevel=2)
            continue
        try:
            state = read_checkpoint(path).state
        except LabError as exc:
            warnings.warn(f"unreadable checkpoint {path}: {exc}; skipped", stacklevel=2)
            continue
        for name in sorted(domains):
            ds = domains[name]
            acc = run_protocol(state, protocol, ds, rng.split(name), probe_config, episode_spec).metrics()["accuracy"]
            points.append(CurvePoint(epoch, name, acc))
    return points


def curve_means(points: Sequence[CurvePoint]) -> list[tuple[int, float]]:
    by_epoch: dict[int, list[float]] = {}
    for p in points:
        by_epoch.setdefault(p.epoch, []).append(p.accuracy)
    return [(e, float(np.mean(v))) for e, v in sorted(by_epoch.items())]


def run_protocol(
    state: ModelState,
    protocol: str,
    dataset: Dataset,
    rng: RngStream,
    probe_config: ProbeConfig | None = None,
    episode_spec: EpisodeSpec | None = None,
    sample_cap: int | None = None,
):
    """Dispatch one protocol on one domain (train split for fitting, test split for scoring)."""
    probe_config = probe_config or ProbeConfig()
    if protocol == "probe":
        train, test = dataset.split("train"), dataset.split("test")
        return linear_probe(
            FeatureSet(extract_features(state, train.images), train.labels),
            FeatureSet(extract_features(state, test.images), test.labels),
            dataset.num_classes,
            probe_config,
            rng,
        )
    if protocol == "finetune":
        return finetune(state, dataset.split("train"), dataset.split("test"), probe_config, rng, sample_cap)
    if protocol == "fewshot":
        spec = episode_spec or EpisodeSpec()
        return fewshot_eval(state, dataset.split("test"), spec, rng)
    raise ConfigError(f"unknown protocol {protocol!r}; expected probe, finetune or fewshot")

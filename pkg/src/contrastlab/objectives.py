"""The five pretraining objectives and the pretraining loop.

All three base losses are expressed through
:func:`~contrastlab.numerics.soft_target_cross_entropy`; they differ only in
how the logit matrix and its positive-mass weights are assembled. Keys come
from the key encoder, whose parameters never require gradients, so nothing
recorded on the tape can reach them.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data.augment import AugmentationPolicy, augment_batch
from .errors import ContractError, NumericalError
from .model import ModelState, Objective, classify, encode, momentum_update, project
from .numerics import (
    OptimizerState,
    RngStream,
    Schedule,
    Tape,
    Tensor,
    backward,
    concat,
    sgd_step,
    soft_target_cross_entropy,
    softmax_cross_entropy,
    zero_grad,
)

log = logging.getLogger(__name__)


@dataclass
class AugmentedBatch:
    x: np.ndarray
    view1: np.ndarray
    view2: np.ndarray | None = None
    labels: np.ndarray | None = None


@dataclass
class LossBreakdown:
    total: Tensor
    ce_term: float | None = None
    selfsup_term: float | None = None
    supcon_term: float | None = None
    alpha: float | None = None
    positives: tuple[int, float, int] | None = None
    cold_start: bool = False
    pending: dict[str, tuple[np.ndarray, np.ndarray | None]] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()

    def terms(self) -> dict[str, float]:
        return {
            k: v
            for k, v in (("ce", self.ce_term), ("selfsup", self.selfsup_term), ("supcon", self.supcon_term))
            if v is not None
        }


# embedding-level losses


def selfsupcon_from_embeddings(q, k_pos, queue_keys, tau: float) -> Tensor:
    """Mean over queries of ``-log(e^{q.k+/tau} / (e^{q.k+/tau} + sum_j e^{q.k_j/tau}))``.

    ``q`` may carry gradient; ``k_pos`` (B x E) and ``queue_keys`` (M x E) are
    constants. The fresh positive sits in column 0 of the (M+1)-way softmax.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    queue_keys = np.asarray(queue_keys, dtype=np.float64)
    if queue_keys.shape[0] == 0:
        raise ContractError("key queue has no filled entries; run the warm-up fill before training")
    b = q.shape[0]
    l_pos = (q * k_pos).sum(axis=1, keepdims=True)
    l_neg = q @ queue_keys.T
    logits = concat([l_pos, l_neg], axis=1) * (1.0 / tau)
    w = np.zeros(logits.shape)
    w[:, 0] = 1.0 / b
    return soft_target_cross_entropy(logits, w)


@dataclass
class SupConStats:
    positives: np.ndarray
    valid_queries: int

    @property
    def summary(self) -> tuple[int, float, int]:
        p = self.positives
        return (int(p.min()), float(p.mean()), int(p.max())) if p.size else (0, 0.0, 0)


def supcon_from_embeddings(q, q_labels, keys, key_labels, tau: float, mode: str = "mean"):
    """Supervised contrastive loss over a labelled key set.

    Per query: sum over same-label keys of ``-log softmax(q.K/tau)_j``, divided
    by the positive count in ``mean`` mode. Averaged over queries that have
    at least one positive. Returns ``(loss, SupConStats)``; when no query has a
    positive the loss is a constant zero.
    """
    if mode not in ("mean", "sum"):
        raise ContractError(f"supcon mode must be 'mean' or 'sum', got {mode!r}")
    q = q if isinstance(q, Tensor) else Tensor(q)
    keys = np.asarray(keys, dtype=np.float64)
    q_labels = np.asarray(q_labels).reshape(-1)
    key_labels = np.asarray(key_labels).reshape(-1)
    pos = (key_labels[None, :] == q_labels[:, None]) & (key_labels[None, :] >= 0)
    counts = pos.sum(axis=1)
    valid = counts > 0
    stats = SupConStats(counts, int(valid.sum()))
    if not valid.any():
        return Tensor(0.0), stats
    w = pos.astype(np.float64)
    if mode == "mean":
        w[valid] /= counts[valid][:, None]
    w /= valid.sum()
    logits = (q @ keys.T) * (1.0 / tau)
    return soft_target_cross_entropy(logits, w), stats


# model-level losses


def _key_embeddings(state: ModelState, view2: np.ndarray, heads) -> dict[str, np.ndarray]:
    v = encode(view2, state.key_params)
    return {h: project(v, state.key_params, h).data for h in heads}


def _require_labels(batch: AugmentedBatch):
    if batch.labels is None:
        raise ContractError("this objective needs labels but the batch has none")
    return np.asarray(batch.labels, dtype=np.int64)


def _ce_term(batch, state, v) -> Tensor:
    labels = _require_labels(batch)
    return softmax_cross_entropy(classify(v, state.params), labels)


def _selfsup_term(batch, state, v, keys) -> Tensor:
    if batch.view2 is None:
        raise ContractError("self-supervised contrastive loss needs two augmented views")
    q = project(v, state.params, "selfsup")
    queue_keys, _ = state.queues["selfsup"].region()
    return selfsupcon_from_embeddings(q, keys["selfsup"], queue_keys, state.config.temperature)


def _supcon_term(batch, state, v, keys):
    labels = _require_labels(batch)
    q = project(v, state.params, "supcon")
    queue = state.queues["supcon"]
    q_keys, q_labels = queue.region()
    all_keys = np.concatenate([keys["supcon"], q_keys])
    all_labels = np.concatenate([labels, q_labels])
    loss, stats = supcon_from_embeddings(
        q, labels, all_keys, all_labels, state.config.temperature, state.config.supcon_sum_mode
    )
    if stats.valid_queries == 0:
        warnings.warn("SupCon: no query has a positive key (cold start); term contributes zero", stacklevel=3)
    return loss, stats


def compute_objective(batch: AugmentedBatch, state: ModelState, enqueue: bool = True) -> LossBreakdown:
    """Loss for ``state.config.objective`` on one batch.

    With ``enqueue=True`` the batch keys are pushed into the queues before
    returning; otherwise they are left in ``LossBreakdown.pending``.
    """
    obj = state.config.objective
    v = encode(batch.view1, state.params)
    keys = {}
    if obj.heads:
        if batch.view2 is None:
            raise ContractError(f"{obj.value} needs two augmented views")
        keys = _key_embeddings(state, batch.view2, obj.heads)
    out = LossBreakdown(total=Tensor(0.0))
    total = None
    alpha = state.config.alpha

    if obj.uses_ce:
        ce = _ce_term(batch, state, v)
        out.ce_term = ce.item()
        total = ce
    if obj.uses_supcon:
        sc, stats = _supcon_term(batch, state, v, keys)
        out.supcon_term = sc.item()
        out.positives = stats.summary
        out.cold_start = stats.valid_queries == 0
        total = sc if total is None else total + sc
        out.pending["supcon"] = (keys["supcon"], _require_labels(batch))
    if obj.uses_selfsup:
        ss = _selfsup_term(batch, state, v, keys)
        out.selfsup_term = ss.item()
        if obj.is_joint:
            out.alpha = alpha
            weighted = ss * alpha
            total = weighted if total is None else total + weighted
        else:
            total = ss
        if out.positives is None:
            out.positives = (1, 1.0, 1)
        out.pending["selfsup"] = (keys["selfsup"], None)
    out.total = total
    if enqueue:
        flush_pending(state, out)
    return out


def flush_pending(state: ModelState, breakdown: LossBreakdown) -> None:
    for head, (k, y) in breakdown.pending.items():
        state.queues[head].enqueue(k, y)
    breakdown.pending = {}


def _check_kind(state, kinds, name):
    if state.config.objective not in kinds:
        raise ContractError(f"{name} is not the configured objective ({state.config.objective.value})")


def ce_loss(batch, state, enqueue=True) -> LossBreakdown:
    _check_kind(state, (Objective.CE,), "ce_loss")
    return compute_objective(batch, state, enqueue)


def selfsupcon_loss(batch, state, enqueue=True) -> LossBreakdown:
    _check_kind(state, (Objective.SELFSUP,), "selfsupcon_loss")
    return compute_objective(batch, state, enqueue)


def supcon_loss(batch, state, enqueue=True) -> LossBreakdown:
    _check_kind(state, (Objective.SUPCON,), "supcon_loss")
    return compute_objective(batch, state, enqueue)


def joint_loss(batch, state, enqueue=True) -> LossBreakdown:
    if not state.config.objective.is_joint:
        raise ContractError(f"joint_loss needs a joint objective, got {state.config.objective.value}")
    if state.config.alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {state.config.alpha}")
    return compute_objective(batch, state, enqueue)


# training loop


def default_policy(objective: Objective) -> AugmentationPolicy:
    """Cross-entropy pretrains with the weak pipeline, contrastive methods with the strong one."""
    return AugmentationPolicy.weak() if objective == Objective.CE else AugmentationPolicy.strong()


def make_batch(images, labels, idx, state: ModelState, policy: AugmentationPolicy, rng: RngStream) -> AugmentedBatch:
    x = images[idx]
    view1 = augment_batch(x, policy, rng.split("view1"))
    view2 = augment_batch(x, policy, rng.split("view2")) if state.config.objective.heads else None
    return AugmentedBatch(x=x, view1=view1, view2=view2, labels=None if labels is None else labels[idx])


def warmup_queues(state: ModelState, images, labels, policy: AugmentationPolicy, rng: RngStream, batch_size=64):
    """Fill empty queues with key-encoder embeddings of augmented training images."""
    empty = [h for h, q in state.queues.items() if q.fill == 0]
    if not empty:
        return
    n = len(images)
    cap = min(q.capacity for q in state.queues.values())
    order = rng.split("order").permutation(n)[: min(n, max(q.capacity for q in state.queues.values()))]
    step = max(1, min(batch_size, cap))
    for j, start in enumerate(range(0, len(order), step)):
        idx = order[start : start + step]
        view = augment_batch(images[idx], policy, rng.split("aug", j))
        keys = _key_embeddings(state, view, empty)
        for h in empty:
            state.queues[h].enqueue(keys[h], None if labels is None else labels[idx])


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    terms: dict[str, float]
    steps: int


def train_step(state: ModelState, batch: AugmentedBatch, optimizer: OptimizerState, step_info=None) -> LossBreakdown:
    """compute objective -> backward -> SGD -> momentum update -> enqueue."""
    params = state.trainable()
    with Tape() as tape:
        out = compute_objective(batch, state, enqueue=False)
    if not np.isfinite(out.value):
        info = dict(step_info or {})
        info.update(lr=optimizer.lr, loss=out.value, **{f"{k}_term": v for k, v in out.terms().items()})
        raise NumericalError(f"non-finite loss at {info}", info)
    backward(out.total, tape, params)
    sgd_step(params, optimizer)
    zero_grad(params)
    if state.key_params:
        momentum_update(state.key_params, state.params, state.config.momentum)
    flush_pending(state, out)
    return out


def train_epoch(
    state: ModelState,
    images: np.ndarray,
    labels: np.ndarray | None,
    optimizer: OptimizerState,
    schedule: Schedule,
    epoch: int,
    rng: RngStream,
    batch_size: int = 64,
    policy: AugmentationPolicy | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> EpochMetrics:
    """One pass over shuffled minibatches (the last batch may be short).

    Randomness for the epoch comes from ``rng.split("epoch", epoch)`` so an
    epoch replays identically after a checkpoint reload.
    """
    n = len(images)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    policy = policy or default_policy(state.config.objective)
    if state.queues and any(q.fill == 0 for q in state.queues.values()):
        warmup_queues(state, images, labels, policy, rng.split("warmup"), batch_size)
    ep_rng = rng.split("epoch", epoch)
    order = ep_rng.split("shuffle").permutation(n)
    optimizer.lr = schedule.lr(epoch)
    losses, term_sums = [], {}
    for step, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        batch = make_batch(images, labels, idx, state, policy, ep_rng.split("step", step))
        out = train_step(state, batch, optimizer, {"epoch": epoch, "step": step})
        losses.append(out.value)
        for k, v in out.terms().items():
            term_sums[k] = term_sums.get(k, 0.0) + v
        if on_step is not None:
            on_step(step, out)
    state.epoch = epoch + 1
    steps = len(losses)
    return EpochMetrics(epoch, optimizer.lr, float(np.mean(losses)), {k: v / steps for k, v in term_sums.items()}, steps)

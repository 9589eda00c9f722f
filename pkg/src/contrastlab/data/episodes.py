"""N-way K-shot episode sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..numerics import RngStream
from .domains import Dataset


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 5
    queries: int = 15
    episodes: int = 600

    def violations(self) -> list[str]:
        out = []
        for name in ("ways", "shots", "queries", "episodes"):
            if getattr(self, name) < 1:
                out.append(f"fewshot.{name} must be >= 1")
        return out


@dataclass
class Episode:
    classes: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    support_y: np.ndarray
    query_y: np.ndarray


def sample_episode(labels, num_classes: int, spec: EpisodeSpec, rng: RngStream) -> Episode:
    """Draw ``ways`` classes, then ``shots + queries`` distinct samples per class.

    Labels inside the episode are re-indexed 0..ways-1 in draw order.
    """
    labels = np.asarray(labels)
    if spec.ways > num_classes:
        raise ConfigError(f"{spec.ways}-way episodes need at least {spec.ways} classes, dataset has {num_classes}")
    need = spec.shots + spec.queries
    pools = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, pool in enumerate(pools):
        if len(pool) < need:
            raise ConfigError(f"class {c} has {len(pool)} samples, episode needs {need}")
    classes = rng.choice(num_classes, size=spec.ways, replace=False)
    support, query, sy, qy = [], [], [], []
    for j, c in enumerate(classes):
        picked = rng.choice(pools[c], size=need, replace=False)
        support.append(picked[: spec.shots])
        query.append(picked[spec.shots :])
        sy.append(np.full(spec.shots, j))
        qy.append(np.full(spec.queries, j))
    return Episode(
        classes=np.asarray(classes),
        support_idx=np.concatenate(support),
        query_idx=np.concatenate(query),
        support_y=np.concatenate(sy),
        query_y=np.concatenate(qy),
    )


def sample_dataset_episode(dataset: Dataset, spec: EpisodeSpec, rng: RngStream):
    """(support set, query set) as datasets with episode-local labels."""
    ep = sample_episode(dataset.labels, dataset.num_classes, spec, rng)
    support = dataset.subset(ep.support_idx)
    query = dataset.subset(ep.query_idx)
    support.labels, query.labels = ep.support_y, ep.query_y
    support.num_classes = query.num_classes = spec.ways
    return support, query

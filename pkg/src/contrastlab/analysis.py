"""Representation and reliability analytics.

Linear CKA across stages and models, calibration (ECE/NLL), intra/inter
class separation, corruption sweeps with unnormalised mCE, an L-infinity
PGD robustness curve, and embedding export.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data.corrupt import CORRUPTION_TYPES, CorruptionSpec, corrupt_images
from .data.domains import Dataset
from .data.io import read_array_file, read_manifest, write_array_file
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError, UndefinedSimilarityError
from .evaluation import LinearHead, extract_features, stage_activations
from .model import ModelState, encode
from .numerics import Tape, Tensor, backward, linear, log_softmax, softmax_cross_entropy

# CKA


@dataclass
class ActivationMatrix:
    """n x d activations with provenance."""

    data: np.ndarray
    model_id: str = ""
    stage: int = -1
    domain: str = ""
    split: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError(f"activation matrix must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] < 2:
            raise DimensionError("activation matrix needs at least 2 samples")
        if not np.isfinite(self.data).all():
            raise ContractError("activation matrix contains non-finite values")


def _matrix(x) -> np.ndarray:
    return x.data if isinstance(x, ActivationMatrix) else ActivationMatrix(x).data


def linear_cka(x, y) -> float:
    """Linear CKA with the biased HSIC estimator.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` on column-centred inputs.
    """
    x, y = _matrix(x), _matrix(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"CKA needs equal sample counts, got {x.shape[0]} and {y.shape[0]}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    # scale-free: normalising first keeps the products well inside float range
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx == 0 or ny == 0:
        raise UndefinedSimilarityError("CKA is undefined for a zero-variance activation matrix")
    xc, yc = xc / nx, yc / ny
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0:
        raise UndefinedSimilarityError("CKA is undefined for a zero-variance activation matrix")
    return float(np.clip(np.linalg.norm(yc.T @ xc) ** 2 / denom, 0.0, 1.0))


@dataclass
class CKAGrids:
    """``within[model]`` is stage x stage; ``across[stage]`` is model x model."""

    model_ids: list[str]
    within: dict[str, np.ndarray]
    across: dict[int, np.ndarray]

    def rows(self) -> list[dict]:
        out = []
        for mid in self.model_ids:
            g = self.within[mid]
            for i in range(g.shape[0]):
                for j in range(g.shape[1]):
                    out.append({"kind": "within", "model_a": mid, "model_b": mid, "stage_a": i, "stage_b": j, "cka": g[i, j]})
        for s in sorted(self.across):
            g = self.across[s]
            for a, ma in enumerate(self.model_ids):
                for b, mb in enumerate(self.model_ids):
                    out.append({"kind": "across", "model_a": ma, "model_b": mb, "stage_a": s, "stage_b": s, "cka": g[a, b]})
        return out


def cka_grid_from_activations(acts: Mapping[str, Sequence[np.ndarray]]) -> CKAGrids:
    ids = sorted(acts)
    counts = {m: len(acts[m]) for m in ids}
    if len(set(counts.values())) > 1:
        raise ConfigError(f"models disagree on stage count: {counts}")
    s = counts[ids[0]] if ids else 0
    within = {}
    for m in ids:
        g = np.eye(s)
        for i in range(s):
            for j in range(i + 1, s):
                g[i, j] = g[j, i] = linear_cka(acts[m][i], acts[m][j])
        within[m] = g
    across = {}
    for st in range(s):
        g = np.eye(len(ids))
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                g[a, b] = g[b, a] = linear_cka(acts[ids[a]][st], acts[ids[b]][st])
        across[st] = g
    return CKAGrids(ids, within, across)


def cka_stage_grid(models: Mapping[str, ModelState], images: np.ndarray) -> CKAGrids:
    """Within-model and across-model CKA grids on one shared image set.

    Diagonals are exactly 1 (a matrix compared with itself).
    """
    return cka_grid_from_activations({m: stage_activations(st, images) for m, st in models.items()})


# calibration

N_BINS = 15


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray


@dataclass
class CalibrationResult:
    ece: float
    nll: float
    accuracy: float
    bins: ReliabilityBins

    def metrics(self) -> dict[str, float]:
        return {"ece": self.ece, "nll": self.nll, "accuracy": self.accuracy}


def bin_index(confidence: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """0-based bin of each confidence; bin b covers ((b-1)/n, b/n]."""
    return np.clip(np.ceil(np.asarray(confidence) * n_bins).astype(np.int64) - 1, 0, n_bins - 1)


def calibration(logits, labels, n_bins: int = N_BINS) -> CalibrationResult:
    """ECE over equal-width confidence bins and mean negative log-likelihood."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) != len(labels) or len(labels) == 0:
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not describe n >= 1 samples")
    logp = log_softmax(logits)
    n = len(labels)
    conf = np.exp(logp.max(axis=1))
    correct = (logp.argmax(axis=1) == labels).astype(np.float64)
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    nz = counts > 0
    mean_conf = np.where(nz, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(nz, acc_sum / np.maximum(counts, 1), 0.0)
    ece = float(np.sum(counts / n * np.abs(mean_acc - mean_conf)))
    nll = float(-logp[np.arange(n), labels].mean())
    bins = ReliabilityBins(np.linspace(0.0, 1.0, n_bins + 1), counts, mean_conf, mean_acc)
    return CalibrationResult(ece, nll, float(correct.mean()), bins)


# class separation


def class_separation(features, labels, literal_denominator: bool = False) -> tuple[float, float]:
    """(R_intra, R_inter): mean cosine distance within and across classes.

    ``R_intra`` averages, over classes, the mean of ``1 - cos`` over all
    ordered pairs ``(i, j)`` of the class including ``i == j``. ``R_inter``
    averages over ordered class pairs ``k != m`` the mean over the
    ``N_k * N_m`` cross pairs; ``literal_denominator=True`` divides by
    ``N_k**2`` instead, as the formula is sometimes written.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionError(f"features {x.shape} and labels {y.shape} disagree")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError(f"{int(np.sum(norms == 0))} zero feature vector(s); cosine undefined")
    z = x / norms[:, None]
    dist = 1.0 - z @ z.T
    classes = np.unique(y)
    members = [np.flatnonzero(y == c) for c in classes]
    k = len(classes)
    intra = float(np.mean([dist[np.ix_(m, m)].sum() / len(m) ** 2 for m in members]))
    if k < 2:
        return intra, float("nan")
    total = 0.0
    for a in range(k):
        for b in range(k):
            if a != b:
                ma, mb = members[a], members[b]
                denom = len(ma) ** 2 if literal_denominator else len(ma) * len(mb)
                total += dist[np.ix_(ma, mb)].sum() / denom
    return intra, float(total / (k * (k - 1)))


# classifier wrapper used by corruption sweeps and PGD


@dataclass
class Classifier:
    """Frozen encoder plus a linear head on standardised features."""

    state: ModelState
    head: LinearHead

    def logits_tensor(self, x) -> Tensor:
        v = encode(x, self.state.params)
        z = self.head.standardizer.transform_tensor(v)
        return linear(z, Tensor(self.head.weight), Tensor(self.head.bias))

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.head.logits(extract_features(self.state, images))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def error(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(images) != np.asarray(labels)).mean())


def _require_head(classifier):
    if classifier is None or getattr(classifier, "head", None) is None:
        raise ContractError("a trained classification head is required")


@dataclass
class CorruptionResult:
    clean_error: float
    cells: dict[tuple[str, int], float]
    mce: float

    def metrics(self) -> dict[str, float]:
        out = {"clean_error": self.clean_error, "mce": self.mce}
        out.update({f"error/{t}/{s}": e for (t, s), e in sorted(self.cells.items())})
        return out


def corruption_sweep(
    classifier: Classifier,
    test: Dataset,
    types: Sequence[str] = CORRUPTION_TYPES,
    severities: Sequence[int] = (1, 2, 3, 4, 5),
    seed: int = 0,
    tables: Mapping[str, Sequence[float]] | None = None,
) -> CorruptionResult:
    """Top-1 error per (type, severity); mCE is the unweighted mean of the cells."""
    _require_head(classifier)
    if not types or not severities:
        raise ConfigError("corruption sweep needs at least one type and one severity")
    tables = tables or {}
    clean = classifier.error(test.images, test.labels)
    cells = {}
    for t in types:
        table = tables.get(t)
        for s in severities:
            spec = CorruptionSpec(t, int(s), None if table is None else tuple(table))
            cells[(t, int(s))] = classifier.error(corrupt_images(test.images, spec, seed), test.labels)
    # averaged in the sorted order the cells are emitted in, so the identity is bit-exact
    return CorruptionResult(clean, cells, float(np.mean([cells[k] for k in sorted(cells)])))


def severity_monotone(result: CorruptionResult) -> dict[str, bool]:
    """Per type: is the error non-decreasing in severity? (soft check)"""
    out = {}
    for t in sorted({t for t, _ in result.cells}):
        errs = [result.cells[(t, s)] for s in sorted(s for tt, s in result.cells if tt == t)]
        out[t] = bool(np.all(np.diff(errs) >= 0))
    return out


# PGD


def pgd_step(x: np.ndarray, x0: np.ndarray, grad: np.ndarray, eps: float, step_size: float) -> np.ndarray:
    """One signed-gradient ascent step projected onto the eps-ball and [0, 1]."""
    x = x + step_size * np.sign(grad)
    x = np.clip(x, x0 - eps, x0 + eps)
    return np.clip(x, 0.0, 1.0)


def input_gradient(logits_fn: Callable[[Tensor], Tensor], x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, name="input")
    with Tape() as tape:
        loss = softmax_cross_entropy(logits_fn(xt), labels)
    backward(loss, tape, [xt])
    return xt.grad


def pgd_perturb(
    logits_fn: Callable[[Tensor], Tensor],
    images: np.ndarray,
    labels: np.ndarray,
    eps: float,
    steps: int = 20,
    step_size: float | None = None,
) -> np.ndarray:
    """L-infinity PGD without random start; asserts the constraints every step."""
    if eps < 0:
        raise ContractError(f"eps must be >= 0, got {eps}")
    x0 = np.asarray(images, dtype=np.float64)
    if x0.min(initial=0.0) < 0 or x0.max(initial=0.0) > 1:
        raise ContractError("PGD inputs must lie in [0, 1]")
    eta = 2.5 * eps / steps if step_size is None else step_size
    x = x0.copy()
    if eps == 0:
        return x
    for _ in range(steps):
        x = pgd_step(x, x0, input_gradient(logits_fn, x, labels), eps, eta)
        if np.abs(x - x0).max() > eps + 1e-12 or x.min() < 0 or x.max() > 1:
            raise ContractError("PGD iterate left the feasible set")
    return x


@dataclass
class PGDResult:
    epsilons: list[float]
    accuracy: list[float]
    raw_accuracy: list[float]
    clean_accuracy: float
    steps: int

    def metrics(self) -> dict[str, float]:
        out = {"clean_accuracy": self.clean_accuracy}
        for e, a, r in zip(self.epsilons, self.accuracy, self.raw_accuracy):
            out[f"adv_accuracy/{e:g}"] = a
            out[f"adv_accuracy_raw/{e:g}"] = r
        return out


def pgd_curve(
    logits_fn: Callable[[Tensor], Tensor],
    images: np.ndarray,
    labels: np.ndarray,
    epsilons: Sequence[float],
    steps: int = 20,
) -> PGDResult:
    """Adversarial accuracy over an eps grid.

    ``accuracy[e]`` counts a sample as robust only if no attack at any grid
    radius ``<= e`` fooled it (a larger ball contains the smaller one, so the
    strongest attack found so far is a valid attack at ``e``). This makes the
    curve non-increasing; ``raw_accuracy`` keeps the per-radius PGD result.
    """
    labels = np.asarray(labels)
    images = np.asarray(images, dtype=np.float64)
    clean_pred = logits_fn(Tensor(images)).data.argmax(axis=1)
    robust = clean_pred == labels
    clean_acc = float(robust.mean())
    order = np.argsort(epsilons, kind="stable")
    acc, raw = [0.0] * len(epsilons), [0.0] * len(epsilons)
    for i in order:
        adv = pgd_perturb(logits_fn, images, labels, float(epsilons[i]), steps)
        ok = logits_fn(Tensor(adv)).data.argmax(axis=1) == labels
        robust = robust & ok
        raw[i] = float(ok.mean())
        acc[i] = float(robust.mean())
    return PGDResult([float(e) for e in epsilons], acc, raw, clean_acc, steps)


def pgd_attack(
    classifier: Classifier, images: np.ndarray, labels: np.ndarray, epsilons: Sequence[float], steps: int = 20
) -> PGDResult:
    _require_head(classifier)
    return pgd_curve(classifier.logits_tensor, images, labels, epsilons, steps)


# embedding export


def export_embeddings(model, dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (row, sample_id, split, label) and ``<path>.bin`` (features)."""
    feats = extract_features(model, dataset.images)
    path = Path(path)
    bin_path = write_array_file(path.with_suffix(".bin"), feats, (1, feats.shape[1]))
    csv_path = path.with_suffix(".csv")
    lines = ["row,sample_id,split,label"]
    lines += [f"{i},{int(dataset.sample_ids[i])},{dataset.splits[i]},{int(dataset.labels[i])}" for i in range(len(dataset))]
    csv_path.write_text("\n".join(lines) + "\n")
    return csv_path, bin_path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    feats, _ = read_array_file(path.with_suffix(".bin"))
    labels = np.array([int(r["label"]) for r in read_manifest(path.with_suffix(".csv"))], dtype=np.int64)
    if len(labels) != len(feats):
        raise ContractError(f"{path}: manifest has {len(labels)} rows but the feature file has {len(feats)}")
    return feats, labels

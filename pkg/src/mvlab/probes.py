"""Measurements of what a trained patch network has actually learned."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attacks import AttackConfig, attack_batch
from .data import Dataset, FeatureBank, feature_key
from .errors import ContractError

LEARNED_THRESHOLD = 0.5


@dataclass
class AlignmentReport:
    cosines: np.ndarray  # (m, 2k)
    raw: np.ndarray  # (m, 2k) raw inner products <w_i, v>
    per_feature_max: np.ndarray  # (2k,)
    per_feature_max_raw: np.ndarray  # (2k,)
    learned_set: set
    per_class_coverage: np.ndarray  # (k,) in {0, 1, 2}
    mixture_mass: np.ndarray  # (m,)
    threshold: float

    def to_json(self) -> dict:
        return {
            "cosines": self.cosines.tolist(),
            "per_feature_max": self.per_feature_max.tolist(),
            "per_feature_max_raw": self.per_feature_max_raw.tolist(),
            "learned_set": sorted([list(f) for f in self.learned_set]),
            "per_class_coverage": self.per_class_coverage.tolist(),
            "mixture_mass": self.mixture_mass.tolist(),
            "threshold": self.threshold,
        }


def _hidden(model) -> np.ndarray:
    return model.hidden if hasattr(model, "hidden") and isinstance(model.hidden, np.ndarray) else np.asarray(model)


def cosine_matrix(hidden: np.ndarray, bank: FeatureBank) -> np.ndarray:
    if hidden.shape[1] != bank.d:
        raise ContractError(f"model weights have d={hidden.shape[1]}, bank has d={bank.d}")
    raw = hidden @ bank.vectors.T
    norms = np.linalg.norm(hidden, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.clip(np.where(norms > 0, raw / safe, 0.0), -1.0, 1.0)


def dominant_features(cosines: np.ndarray, threshold: float = LEARNED_THRESHOLD) -> np.ndarray:
    """Per-neuron argmax feature, or -1 when no cosine reaches ``threshold``."""
    best = cosines.argmax(axis=1)
    return np.where(cosines.max(axis=1) >= threshold, best, -1)


def mixture_mass(model, bank: FeatureBank, dominant_assignment: Optional[np.ndarray] = None, threshold: float = LEARNED_THRESHOLD) -> np.ndarray:
    """Sum of |cosine| over every feature except the neuron's dominant one.

    Neurons without a dominant feature (assignment -1) report their total mass.
    """
    cos = cosine_matrix(_hidden(model), bank)
    if dominant_assignment is None:
        dominant_assignment = dominant_features(cos, threshold)
    mass = np.abs(cos).sum(axis=1)
    for i, f in enumerate(dominant_assignment):
        if f is not None and f >= 0:
            mass[i] -= abs(cos[i, f])
    return np.maximum(mass, 0.0)


def feature_alignment(model, bank: FeatureBank, threshold: float = LEARNED_THRESHOLD) -> AlignmentReport:
    hidden = _hidden(model)
    cos = cosine_matrix(hidden, bank)
    raw = hidden @ bank.vectors.T
    per_max = cos.max(axis=0)
    learned = {feature_key(f) for f in np.flatnonzero(per_max >= threshold)}
    coverage = np.zeros(bank.k, dtype=np.int64)
    for j, _ in learned:
        coverage[j] += 1
    return AlignmentReport(
        cosines=cos,
        raw=raw,
        per_feature_max=per_max,
        per_feature_max_raw=raw.max(axis=0),
        learned_set=learned,
        per_class_coverage=coverage,
        mixture_mass=mixture_mass(hidden, bank, dominant_features(cos, threshold)),
        threshold=threshold,
    )


def correct_class_probs(model, X, y, chunk: int = 1000) -> np.ndarray:
    """softmax(F(X))[y] per sample."""
    out = []
    for s in range(0, len(X), chunk):
        logits = model(X[s : s + chunk]).data
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        out.append(p[np.arange(len(p)), np.asarray(y[s : s + chunk])])
    return np.concatenate(out) if out else np.zeros(0)


def adversarial_inputs(model, dataset: Dataset, attack_cfg: AttackConfig, seed: int = 0, chunk: int = 500) -> np.ndarray:
    if attack_cfg.epsilon == 0:
        return dataset.X
    parts = []
    for s in range(0, dataset.N, chunk):
        ids = np.arange(s, min(s + chunk, dataset.N))
        parts.append(attack_batch(model, attack_cfg, dataset.X[ids], dataset.labels[ids], seed=seed, sample_ids=ids))
    return np.concatenate(parts)


def training_errors(model, dataset: Dataset, attack_cfg: AttackConfig, seed: int = 0) -> tuple:
    """Mean (1 - correct-class probability) on clean and on attacked inputs."""
    clean = 1.0 - correct_class_probs(model, dataset.X, dataset.labels)
    if attack_cfg.epsilon == 0:
        robust = clean
    else:
        X_adv = adversarial_inputs(model, dataset, attack_cfg, seed)
        robust = 1.0 - correct_class_probs(model, X_adv, dataset.labels)
    return float(clean.mean()), float(robust.mean())


def perturbation_alignment(delta, bank: FeatureBank) -> tuple:
    """Split the patch-summed perturbation into feature-span and complement parts.

    Returns ``(in_span_mass, off_span_mass, projections)`` where the masses are
    L2 norms and ``projections[f] = <sum_p delta_p, v_f>``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2 or delta.shape[1] != bank.d:
        raise ContractError(f"perturbation must have shape (P, {bank.d}), got {delta.shape}")
    total = delta.sum(axis=0)
    proj = bank.vectors @ total
    residual = total - bank.vectors.T @ proj
    return float(np.linalg.norm(proj)), float(np.linalg.norm(residual)), proj


def single_view_learning_report(model, bank: FeatureBank, dataset: Dataset, threshold: float = LEARNED_THRESHOLD) -> dict:
    """Single-view accuracy split by whether the sample's dominant feature was learned."""
    report = feature_alignment(model, bank, threshold)
    learned_idx = {2 * j + l for j, l in report.learned_set}
    pred = np.concatenate([model(dataset.X[s : s + 1000]).data.argmax(axis=-1) for s in range(0, dataset.N, 1000)])
    correct = pred == dataset.labels
    dom = dataset.dominant_feature()
    sv = dom >= 0
    is_learned = np.array([f in learned_idx for f in dom])
    groups = {}
    for name, mask in (("learned", sv & is_learned), ("not_learned", sv & ~is_learned)):
        n = int(mask.sum())
        groups[name] = {"n": n, "accuracy": float(correct[mask].mean()) if n else None}
    return {
        "learned_set": sorted([list(f) for f in report.learned_set]),
        "per_class_coverage": report.per_class_coverage.tolist(),
        "sv_accuracy_by_learned_status": groups,
        "sv_accuracy": float(correct[sv].mean()) if sv.any() else None,
    }


def probe_report(model, bank: FeatureBank, dataset: Optional[Dataset] = None, threshold: float = LEARNED_THRESHOLD) -> dict:
    out = feature_alignment(model, bank, threshold).to_json()
    if dataset is not None:
        sv = single_view_learning_report(model, bank, dataset, threshold)
        out["sv_accuracy_by_learned_status"] = sv["sv_accuracy_by_learned_status"]
        out["sv_accuracy"] = sv["sv_accuracy"]
    else:
        out["sv_accuracy_by_learned_status"] = None
    return out


def learning_order(history, threshold: float = LEARNED_THRESHOLD) -> dict:
    """First epoch at which each feature's best cosine reaches ``threshold``.

    ``history`` is a sequence of per-feature-max vectors, one per epoch.
    """
    first = {}
    for epoch, row in enumerate(history):
        for f in np.flatnonzero(np.asarray(row) >= threshold):
            first.setdefault(feature_key(int(f)), epoch)
    n = len(history[0]) if len(history) else 0
    return {feature_key(f): first.get(feature_key(f)) for f in range(n)}

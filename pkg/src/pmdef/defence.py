"""Adversarial scoring, threshold calibration, the detect-and-correct
pipeline and the checkpoint-ensemble vote.

The score of an instance is the divergence between the classifier's
prediction distribution on the instance and on its autoencoder
reconstruction. Scores above a threshold flag the instance; flagged
instances take the reconstruction's label instead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import kl_rows
from .errors import ConfigError, DataError, ParameterError
from .training import temperature_scale

SCORE_METRICS = ("kl", "mse")


@dataclass
class DefenceVerdict:
    score: float
    threshold: float
    flagged: bool
    label: int
    source: str  # original | reconstructed | ensemble


@dataclass
class EnsembleMember:
    ae: object  # any model exposing reconstruct()
    weight: float


@dataclass
class EnsembleSpec:
    members: list[EnsembleMember]

    def __post_init__(self):
        total = 0.0
        for m in self.members:
            if m.weight < 0:
                raise ConfigError(f"ensemble weights must be >= 0, got {m.weight}")
            total += m.weight
        if total > 1.0 + 1e-12:
            raise ConfigError(f"ensemble weights must sum to at most 1, got {total}")
        if not self.members and self.classifier_weight == 0.0:
            raise ConfigError("ensemble has no members and no classifier weight")

    @property
    def classifier_weight(self) -> float:
        return 1.0 - sum(m.weight for m in self.members)


def adversarial_score(classifier, ae, x: np.ndarray, metric: str = "kl", temperature: float | None = None) -> np.ndarray:
    """Per-instance divergence between M(x) and M(AE(x)); higher means more
    suspicious. With a temperature, the original-side distribution is
    sharpened the same way the training target was."""
    if metric not in SCORE_METRICS:
        raise ParameterError(f"score metric must be one of {SCORE_METRICS}, got {metric!r}")
    p = classifier.predict_proba(x)
    q = classifier.predict_proba(ae.reconstruct(x))
    if temperature is not None:
        p = temperature_scale(p, temperature)
    if metric == "mse":
        return ((p - q) ** 2).mean(axis=1)
    return kl_rows(p, q)


def calibrate_threshold(scores_normal, eps_fpr: float) -> float:
    """Smallest observed score t such that the fraction of normal scores
    strictly above t is at most eps_fpr; eps_fpr=1 gives -inf (flag all)."""
    scores = np.asarray(scores_normal, dtype=np.float64)
    if scores.size == 0:
        raise DataError("cannot calibrate a threshold from no scores")
    if not 0.0 <= eps_fpr <= 1.0:
        raise ParameterError(f"false positive budget must be in [0, 1], got {eps_fpr}")
    if eps_fpr == 1.0:
        return -math.inf
    n = scores.size
    ordered = np.sort(scores)
    above = n - np.searchsorted(ordered, ordered, side="right")  # strictly greater counts
    ok = above / n <= eps_fpr
    return float(ordered[np.argmax(ok)])  # first (smallest) admissible value


def detect_and_correct(classifier, ae, x: np.ndarray, threshold: float, metric: str = "kl", temperature: float | None = None) -> list[DefenceVerdict]:
    """Route each instance: below threshold keep the classifier's label,
    above it take the label of the reconstruction."""
    scores = adversarial_score(classifier, ae, x, metric=metric, temperature=temperature)
    labels_orig = classifier.predict_class(x)
    labels_recon = classifier.predict_class(ae.reconstruct(x))
    out = []
    for s, lo, lr in zip(scores, labels_orig, labels_recon):
        flagged = bool(s > threshold)
        out.append(
            DefenceVerdict(
                score=float(s),
                threshold=float(threshold),
                flagged=flagged,
                label=int(lr if flagged else lo),
                source="reconstructed" if flagged else "original",
            )
        )
    return out


def corrected_labels(verdicts: list[DefenceVerdict]) -> np.ndarray:
    return np.asarray([v.label for v in verdicts], dtype=np.int64)


def weighted_vote(labels, weights, num_classes: int) -> int:
    """argmax of weighted label counts; ties break to the lowest class index.

    The argmax is invariant under uniform positive rescaling of all weights.
    """
    votes = np.zeros(num_classes)
    for lab, w in zip(labels, weights):
        votes[int(lab)] += w
    return int(votes.argmax())


def ensemble_predict(spec: EnsembleSpec, classifier, x: np.ndarray) -> np.ndarray:
    """Weighted majority vote of the corrected labels of every ensemble
    autoencoder plus the bare classifier."""
    n = x.shape[0]
    num_classes = classifier.num_classes
    member_labels = [classifier.predict_class(m.ae.reconstruct(x)) for m in spec.members]
    clf_labels = classifier.predict_class(x)
    weights = [m.weight for m in spec.members] + [spec.classifier_weight]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        labels = [labs[i] for labs in member_labels] + [clf_labels[i]]
        out[i] = weighted_vote(labels, weights, num_classes)
    return out


def verdicts_to_csv(verdicts: list[DefenceVerdict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "score", "threshold", "flagged", "label", "source"])
        for i, v in enumerate(verdicts):
            writer.writerow([i, f"{v.score:.17g}", f"{v.threshold:.17g}", int(v.flagged), v.label, v.source])

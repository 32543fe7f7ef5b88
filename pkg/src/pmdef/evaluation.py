"""Detection and correction metrics: ROC/AUC over adversarial scores,
accuracy tables, the two-sample Kolmogorov-Smirnov test, synthetic
corruptions and the drift report splitting corrupted instances into
harmful and not-harmful groups.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .defence import adversarial_score, corrected_labels, detect_and_correct
from .errors import DataError, ParameterError

# per-kind corruption parameter tables, severity 1..5 (strictly monotone harm)
CORRUPTION_PARAMS: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),  # added noise sigma
    "blur": (1, 2, 3, 4, 5),                            # box-blur radius
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),            # additive shift
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.15),           # contraction factor
}
SEVERITIES = (1, 2, 3, 4, 5)


# ---------------------------------------------------------------------------
# ROC / AUC


@dataclass
class RocCurve:
    points: list[tuple[float, float]]  # (fpr, tpr), monotone from (0,0) to (1,1)
    auc: float
    thresholds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"points": [list(p) for p in self.points], "auc": self.auc, "thresholds": self.thresholds}


def roc_auc(scores_normal, scores_adversarial) -> RocCurve:
    """Threshold sweep over all distinct scores (flag when score > t).

    The trapezoid integral is accumulated over integer counts and divided
    once, so the AUC equals the Mann-Whitney statistic
    P(adv > normal) + 0.5 P(tie) exactly, not just approximately.
    """
    normal = np.asarray(scores_normal, dtype=np.float64)
    adv = np.asarray(scores_adversarial, dtype=np.float64)
    if normal.size == 0 or adv.size == 0:
        raise DataError("roc_auc needs non-empty score lists for both classes")
    nn, na = normal.size, adv.size
    normal_sorted = np.sort(normal)
    adv_sorted = np.sort(adv)
    distinct = np.unique(np.concatenate([normal, adv]))[::-1]  # descending
    counts = [(0, 0)]
    thresholds = [math.inf]
    for v in distinct:
        cn = nn - int(np.searchsorted(normal_sorted, v, side="right"))
        ca = na - int(np.searchsorted(adv_sorted, v, side="right"))
        counts.append((cn, ca))
        thresholds.append(float(v))
    if counts[-1] != (nn, na):
        counts.append((nn, na))
        thresholds.append(-math.inf)
    auc_num = 0
    for (cn0, ca0), (cn1, ca1) in zip(counts, counts[1:]):
        auc_num += (cn1 - cn0) * (ca0 + ca1)
    points = [(cn / nn, ca / na) for cn, ca in counts]
    return RocCurve(points=points, auc=auc_num / (2 * nn * na), thresholds=thresholds)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov


def _kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """Two-sided asymptotic survival function 2*sum (-1)^(k-1) exp(-2 k^2 lam^2),
    truncated at a fixed number of terms."""
    if lam <= 0.0:
        return 1.0
    total = 0.0
    for k in range(1, terms + 1):
        total += (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
    return min(max(2.0 * total, 0.0), 1.0)


def ks_two_sample(a, b) -> tuple[float, float]:
    """D = sup |F_a - F_b| over the empirical CDFs, plus the asymptotic
    p-value at effective sample size n_a n_b / (n_a + n_b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("ks_two_sample needs two non-empty samples")
    a_sorted = np.sort(a)
    b_sorted = np.sort(b)
    pooled = np.concatenate([a_sorted, b_sorted])
    cdf_a = np.searchsorted(a_sorted, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b_sorted, pooled, side="right") / b.size
    d = float(np.abs(cdf_a - cdf_b).max())
    n_eff = a.size * b.size / (a.size + b.size)
    return d, _kolmogorov_sf(math.sqrt(n_eff) * d)


# ---------------------------------------------------------------------------
# accuracy tables


def accuracy_report(
    classifier,
    defences: dict[str, object],
    attack_sets: dict[str, tuple[np.ndarray, np.ndarray]],
    clean_set: tuple[np.ndarray, np.ndarray],
    thresholds: dict[str, float] | None = None,
    metric: str = "kl",
) -> list[dict]:
    """One row per attack: clean accuracy, undefended accuracy, then one
    pure-correction column per defence (every instance routed through the
    autoencoder, threshold -inf). When a threshold is supplied for a defence,
    a detection-gated column is added as well."""
    x_clean, y_clean = clean_set
    clean_acc = float((classifier.predict_class(x_clean) == y_clean).mean())
    rows = []
    for attack_name, (x_adv, y) in attack_sets.items():
        row: dict[str, object] = {"attack": attack_name, "no_attack": clean_acc}
        row["no_defence"] = float((classifier.predict_class(x_adv) == y).mean())
        for name, ae in defences.items():
            verdicts = detect_and_correct(classifier, ae, x_adv, -math.inf, metric=metric)
            row[name] = float((corrected_labels(verdicts) == y).mean())
            if thresholds and name in thresholds:
                gated = detect_and_correct(classifier, ae, x_adv, thresholds[name], metric=metric)
                row[f"{name}@detect"] = float((corrected_labels(gated) == y).mean())
        rows.append(row)
    return rows


def accuracy_report_to_csv(rows: list[dict], path) -> None:
    if not rows:
        raise DataError("empty accuracy report")
    columns = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], str) else f"{row[c]:.17g}" for c in columns])


# ---------------------------------------------------------------------------
# synthetic corruptions


def _box_blur(x: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with a (2r+1)^2 window and replicated edges, via cumsum."""
    k = 2 * radius + 1
    xp = np.pad(x, ((0, 0), (radius, radius), (radius, radius), (0, 0)), mode="edge")
    c = np.cumsum(xp, axis=1)
    c = np.concatenate([np.zeros_like(c[:, :1]), c], axis=1)
    rows = c[:, k:, :, :] - c[:, :-k, :, :]
    c2 = np.cumsum(rows, axis=2)
    c2 = np.concatenate([np.zeros_like(c2[:, :, :1]), c2], axis=2)
    sums = c2[:, :, k:, :] - c2[:, :, :-k, :]
    return sums / (k * k)


def corrupt_dataset(x: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Deterministically corrupt an image batch; parameters scale
    monotonically with severity 1..5; output clipped to [0, 1]."""
    if kind not in CORRUPTION_PARAMS:
        raise ParameterError(f"unknown corruption kind {kind!r}; choose from {sorted(CORRUPTION_PARAMS)}")
    if severity not in SEVERITIES:
        raise ParameterError(f"severity must be in {SEVERITIES}, got {severity}")
    param = CORRUPTION_PARAMS[kind][severity - 1]
    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        out = x + rng.normal(0.0, param, size=x.shape)
    elif kind == "blur":
        out = _box_blur(x, int(param))
    elif kind == "brightness":
        out = x + param
    else:  # contrast
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        out = mu + param * (x - mu)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# drift report


@dataclass
class DriftRow:
    severity: int
    n_harmful: int
    n_not_harmful: int
    harmful_mean: float | None
    harmful_std: float | None
    not_harmful_mean: float | None
    not_harmful_std: float | None
    accuracy: float
    ks_d: float | None
    ks_p: float | None

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class DriftReport:
    kinds: list[str]
    rows: list[DriftRow]

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"kinds": self.kinds, "rows": [r.to_dict() for r in self.rows]}, fh, sort_keys=True, indent=1)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            cols = [
                "severity", "n_harmful", "n_not_harmful", "harmful_mean", "harmful_std",
                "not_harmful_mean", "not_harmful_std", "accuracy", "ks_d", "ks_p",
            ]
            writer.writerow(cols)
            for r in self.rows:
                d = r.to_dict()
                writer.writerow(["" if d[c] is None else (d[c] if isinstance(d[c], int) else f"{d[c]:.17g}") for c in cols])


def _group_stats(scores: np.ndarray):
    if scores.size == 0:
        return None, None
    return float(scores.mean()), float(scores.std())


def drift_report(
    classifier,
    ae,
    x: np.ndarray,
    y: np.ndarray,
    kinds=tuple(CORRUPTION_PARAMS),
    severities=SEVERITIES,
    seed: int = 0,
    metric: str = "kl",
    temperature: float | None = None,
) -> DriftReport:
    """Score corrupted copies of the test set per severity, pooled over
    corruption kinds. Instances whose prediction changed relative to the
    clean prediction form the harmful group; unchanged ones the not-harmful
    group. Severity 0 is the clean set itself."""
    kinds = list(kinds)
    clean_pred = classifier.predict_class(x)
    clean_scores = adversarial_score(classifier, ae, x, metric=metric, temperature=temperature)
    rows = [
        DriftRow(
            severity=0,
            n_harmful=0,
            n_not_harmful=int(x.shape[0]),
            harmful_mean=None,
            harmful_std=None,
            not_harmful_mean=_group_stats(clean_scores)[0],
            not_harmful_std=_group_stats(clean_scores)[1],
            accuracy=float((clean_pred == y).mean()),
            ks_d=None,
            ks_p=None,
        )
    ]
    for sev in severities:
        harm_scores = []
        safe_scores = []
        correct = 0
        total = 0
        for j, kind in enumerate(kinds):
            xc = corrupt_dataset(x, kind, sev, seed=seed * 1000 + sev * 10 + j)
            pred = classifier.predict_class(xc)
            scores = adversarial_score(classifier, ae, xc, metric=metric, temperature=temperature)
            changed = pred != clean_pred
            harm_scores.append(scores[changed])
            safe_scores.append(scores[~changed])
            correct += int((pred == y).sum())
            total += xc.shape[0]
        harm = np.concatenate(harm_scores)
        safe = np.concatenate(safe_scores)
        hm, hs = _group_stats(harm)
        sm, ss = _group_stats(safe)
        if harm.size and safe.size:
            ks_d, ks_p = ks_two_sample(harm, safe)
        else:
            ks_d = ks_p = None
        rows.append(
            DriftRow(
                severity=int(sev),
                n_harmful=int(harm.size),
                n_not_harmful=int(safe.size),
                harmful_mean=hm,
                harmful_std=hs,
                not_harmful_mean=sm,
                not_harmful_std=ss,
                accuracy=correct / total,
                ks_d=ks_d,
                ks_p=ks_p,
            )
        )
    return DriftReport(kinds=kinds, rows=rows)

"""Accuracy, class-wise F1, confusion matrices and McNemar's paired test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ALPHA = 0.01


class MetricsError(ValueError):
    pass


@dataclass
class Metrics:
    accuracy: float
    per_class_f1: list[float]
    macro_f1: float
    confusion: np.ndarray  # rows true, columns predicted
    undefined_f1: list[int]  # classes with no predictions and no instances

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1,
                "per_class_f1": self.per_class_f1, "confusion": self.confusion.tolist(),
                "undefined_f1": self.undefined_f1}


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def metrics(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> Metrics:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0:
        raise MetricsError("cannot score an empty prediction set")
    if preds.shape != labels.shape:
        raise MetricsError(f"{preds.size} predictions for {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise MetricsError(f"{name} outside [0, {num_classes})")
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    actual = cm.sum(axis=1).astype(float)
    f1 = []
    for c in range(num_classes):
        p = tp[c] / predicted[c] if predicted[c] else 0.0
        r = tp[c] / actual[c] if actual[c] else 0.0
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    undefined = [c for c in range(num_classes) if predicted[c] == 0 and actual[c] == 0]
    return Metrics(accuracy=float(tp.sum() / cm.sum()), per_class_f1=f1,
                   macro_f1=float(np.mean(f1)), confusion=cm, undefined_f1=undefined)


@dataclass
class PairedOutcome:
    """Joint correctness counts; the first digit refers to system A, the second to B."""

    n00: int
    n01: int
    n10: int
    n11: int

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11


def paired_outcome(preds_a, preds_b, labels) -> PairedOutcome:
    a = np.asarray(preds_a)
    b = np.asarray(preds_b)
    y = np.asarray(labels)
    if not (a.shape == b.shape == y.shape):
        raise MetricsError(f"length mismatch: A={a.size}, B={b.size}, labels={y.size}")
    ca, cb = a == y, b == y
    return PairedOutcome(int(np.sum(~ca & ~cb)), int(np.sum(~ca & cb)),
                         int(np.sum(ca & ~cb)), int(np.sum(ca & cb)))


def mcnemar_from_counts(n01: int, n10: int, alpha: float = ALPHA) -> dict:
    """Continuity-corrected McNemar chi-square (1 dof)."""
    disc = n01 + n10
    if disc == 0:
        return {"n01": n01, "n10": n10, "statistic": 0.0, "p_value": 1.0, "significant": False}
    stat = (abs(n01 - n10) - 1) ** 2 / disc
    # chi-square survival with one degree of freedom
    p = math.erfc(math.sqrt(stat / 2.0))
    return {"n01": n01, "n10": n10, "statistic": stat, "p_value": p, "significant": p < alpha}


def mcnemar(preds_a, preds_b, labels, alpha: float = ALPHA) -> dict:
    po = paired_outcome(preds_a, preds_b, labels)
    out = mcnemar_from_counts(po.n01, po.n10, alpha)
    out.update(n00=po.n00, n11=po.n11)
    return out


# ---------------------------------------------------------------------
# results files and side-by-side reports
# ---------------------------------------------------------------------

def save_results(path, clips: list[dict], classes: list[str] | None = None) -> None:
    body = {"clips": clips}
    if classes is not None:
        body["classes"] = classes
    Path(path).write_text(json.dumps(body, indent=1) + "\n")


def load_results(path) -> dict:
    raw = json.loads(Path(path).read_text())
    if "clips" not in raw:
        raise MetricsError(f"{path}: results file lacks 'clips'")
    return raw


def _num_classes(results: dict) -> int:
    if "classes" in results:
        return len(results["classes"])
    clips = results["clips"]
    if clips and clips[0].get("probs"):
        return len(clips[0]["probs"])
    return 1 + max(max(c["label"], c["pred"]) for c in clips)


def compare_report(results_a: dict, results_b: dict, names=("A", "B")) -> dict:
    """Metrics for two systems on the same clips, per-class F1 deltas (B - A), McNemar."""
    a = {c["clip_id"]: c for c in results_a["clips"]}
    b = {c["clip_id"]: c for c in results_b["clips"]}
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        raise MetricsError(f"clip sets differ: missing from {names[1]}: {only_a}; "
                           f"missing from {names[0]}: {only_b}")
    ids = sorted(a)
    labels = [a[i]["label"] for i in ids]
    if labels != [b[i]["label"] for i in ids]:
        raise MetricsError("systems disagree on ground-truth labels")
    c = max(_num_classes(results_a), _num_classes(results_b))
    ma = metrics([a[i]["pred"] for i in ids], labels, c)
    mb = metrics([b[i]["pred"] for i in ids], labels, c)
    test = mcnemar([a[i]["pred"] for i in ids], [b[i]["pred"] for i in ids], labels)
    return {
        "systems": list(names),
        "num_clips": len(ids),
        names[0]: ma.to_json(),
        names[1]: mb.to_json(),
        "delta_accuracy": mb.accuracy - ma.accuracy,
        "delta_macro_f1": mb.macro_f1 - ma.macro_f1,
        "delta_per_class_f1": [fb - fa for fa, fb in zip(ma.per_class_f1, mb.per_class_f1)],
        "mcnemar": test,
        "classes": results_a.get("classes") or results_b.get("classes"),
    }


def format_metrics(m: Metrics, classes: list[str] | None = None) -> str:
    lines = [f"accuracy  {100 * m.accuracy:.3f}%",
             f"macro F1  {100 * m.macro_f1:.3f}%"]
    names = classes or [str(i) for i in range(len(m.per_class_f1))]
    width = max(len(n) for n in names)
    for c, (n, f) in enumerate(zip(names, m.per_class_f1)):
        flag = "  (no predictions, no instances)" if c in m.undefined_f1 else ""
        lines.append(f"  {n:<{width}}  F1 {100 * f:7.3f}%{flag}")
    return "\n".join(lines)


def format_report(report: dict) -> str:
    na, nb = report["systems"]
    a, b = report[na], report[nb]
    k = len(a["per_class_f1"])
    classes = report.get("classes") or [str(i) for i in range(k)]
    width = max(12, max(len(c) for c in classes))
    lines = [f"{'':<{width}}  {na:>10}  {nb:>10}  {'delta':>10}",
             f"{'accuracy':<{width}}  {a['accuracy']:10.3f}  {b['accuracy']:10.3f}  "
             f"{report['delta_accuracy']:+10.3f}",
             f"{'macro F1':<{width}}  {a['macro_f1']:10.3f}  {b['macro_f1']:10.3f}  "
             f"{report['delta_macro_f1']:+10.3f}"]
    for i, name in enumerate(classes):
        lines.append(f"{name:<{width}}  {a['per_class_f1'][i]:10.3f}  {b['per_class_f1'][i]:10.3f}  "
                     f"{report['delta_per_class_f1'][i]:+10.3f}")
    t = report["mcnemar"]
    verdict = "significant" if t["significant"] else "not significant"
    lines.append(f"McNemar: n01={t['n01']} n10={t['n10']} statistic={t['statistic']:.4f} "
                 f"p={t['p_value']:.4g} -> {verdict} at p<{ALPHA}")
    return "\n".join(lines)

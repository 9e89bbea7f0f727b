"""Accuracy and per-class precision/recall/F1 in the fake/real table layout."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

COLUMNS = ("accuracy", "fake_precision", "fake_recall", "fake_f1", "real_precision", "real_recall", "real_f1")


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    fake: ClassMetrics
    real: ClassMetrics
    confusion: tuple[tuple[int, int], tuple[int, int]]  # [true label][predicted label]

    def row(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "fake_precision": self.fake.precision,
            "fake_recall": self.fake.recall,
            "fake_f1": self.fake.f1,
            "real_precision": self.real.precision,
            "real_recall": self.real.recall,
            "real_f1": self.real.f1,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = [list(r) for r in self.confusion]
        return d


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _class_metrics(tp: int, fp: int, fn: int) -> ClassMetrics:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return ClassMetrics(p, r, f1)


def metrics_report(labels, predictions) -> MetricsReport:
    """Confusion-matrix metrics; label 1 is fake. Empty denominators give 0."""
    y = np.asarray(labels, dtype=int)
    yhat = np.asarray(predictions, dtype=int)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError("labels and predictions must be 1-D and the same length")
    if y.size == 0:
        raise ValueError("cannot score an empty split")
    cm = [[int(np.sum((y == t) & (yhat == p))) for p in (0, 1)] for t in (0, 1)]
    (tn, fp), (fn, tp) = cm
    return MetricsReport(
        accuracy=(tp + tn) / y.size,
        fake=_class_metrics(tp, fp, fn),
        real=_class_metrics(tn, fn, fp),
        confusion=(tuple(cm[0]), tuple(cm[1])),
    )


def format_table(rows: dict[str, MetricsReport | None], title: str = "") -> str:
    """Fixed-width text table: one row per entry, accuracy then fake and real P/R/F1."""
    name_w = max([len("Method")] + [len(k) for k in rows])
    w = 9
    group_w = 3 * w + 2 * 2
    head1 = f"{'':<{name_w}}  {'':>{w}}  {'Fake News':^{group_w}}  {'Real News':^{group_w}}"
    head2 = f"{'Method':<{name_w}}  {'Accuracy':>{w}}  " + "  ".join(
        f"{c:>{w}}" for c in ("Precision", "Recall", "F1-score") * 2
    )
    lines = [title] if title else []
    lines += [head1, head2, "-" * len(head2)]
    for name, rep in rows.items():
        if rep is None:
            lines.append(f"{name:<{name_w}}  {'failed':>{w}}")
            continue
        vals = rep.row()
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{vals[c]:>{w}.3f}" for c in COLUMNS))
    return "\n".join(lines) + "\n"

"""Utility and group-fairness metrics, reported as percentages.

Rates are computed from integer counts and divided once, so every value is
the correctly rounded float of the exact rational result.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T


class UndefinedMetricError(ValueError):
    """A metric's conditioning group is empty."""


def _select(arr, mask) -> np.ndarray:
    arr = np.asarray(arr)
    if mask is None:
        return arr
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return arr[mask]
    return arr[mask.astype(np.int64)]


def _binary(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr).astype(np.int64)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{what} must be binary")
    return arr


def _rate_gap(pos0: int, n0: int, pos1: int, n1: int) -> float:
    return 100 * abs(pos0 * n1 - pos1 * n0) / (n0 * n1)


def delta_dp(preds, sens, mask=None) -> float:
    """|P(pred=1 | s=0) - P(pred=1 | s=1)| in percent."""
    p = _binary(_select(preds, mask), "predictions")
    s = _binary(_select(sens, mask), "sensitive attribute")
    n0, n1 = int((s == 0).sum()), int((s == 1).sum())
    if n0 == 0 or n1 == 0:
        raise UndefinedMetricError("demographic parity needs both groups present")
    return _rate_gap(int(p[s == 0].sum()), n0, int(p[s == 1].sum()), n1)


def delta_eo(preds, labels, sens, mask=None) -> float:
    """|TPR(s=0) - TPR(s=1)| in percent."""
    p = _binary(_select(preds, mask), "predictions")
    y = _binary(_select(labels, mask), "labels")
    s = _binary(_select(sens, mask), "sensitive attribute")
    g0 = (s == 0) & (y == 1)
    g1 = (s == 1) & (y == 1)
    n0, n1 = int(g0.sum()), int(g1.sum())
    if n0 == 0 or n1 == 0:
        raise UndefinedMetricError("equal opportunity needs positives in both groups")
    return _rate_gap(int(p[g0].sum()), n0, int(p[g1].sum()), n1)


def accuracy(preds, labels, mask=None) -> float:
    p = _binary(_select(preds, mask), "predictions")
    y = _binary(_select(labels, mask), "labels")
    if p.size == 0:
        raise ValueError("accuracy over an empty mask")
    return 100 * int((p == y).sum()) / p.size


def f1(preds, labels, mask=None) -> float:
    """Binary F1 for the positive class.

    Zero when there are no true positives; 100 when both predictions and
    labels are entirely negative.
    """
    p = _binary(_select(preds, mask), "predictions")
    y = _binary(_select(labels, mask), "labels")
    if p.size == 0:
        raise ValueError("f1 over an empty mask")
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    if tp + fp + fn == 0:
        return 100.0
    return 200 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunMetrics:
    acc: float
    f1: float
    fairness: dict[str, dict[str, float]]
    seed: int | None = None
    strategy: str = ""
    config_hash: str = ""

    def flat(self) -> dict[str, float]:
        out = {"acc": self.acc, "f1": self.f1}
        for attr in sorted(self.fairness):
            out[f"dp[{attr}]"] = self.fairness[attr]["dp"]
            out[f"eo[{attr}]"] = self.fairness[attr]["eo"]
        return out


def evaluate_predictions(preds, labels, sensitive: Mapping[str, np.ndarray], mask, **meta) -> RunMetrics:
    fairness = {
        name: {"dp": delta_dp(preds, s, mask), "eo": delta_eo(preds, labels, s, mask)}
        for name, s in sensitive.items()
    }
    return RunMetrics(acc=accuracy(preds, labels, mask), f1=f1(preds, labels, mask), fairness=fairness, **meta)


def predict(model, view) -> np.ndarray:
    """Hard 0/1 predictions: sigmoid(logit) > 0.5."""
    with T.no_grad():
        _, logits = model(view)
        probs = T.sigmoid(logits).values[:, 0]
    return (probs > 0.5).astype(np.int64)


def evaluate_multi_sensitive(model, view, names: Sequence[str] | None = None, split: str = "test", **meta) -> RunMetrics:
    """One forward pass, fairness gaps for every named sensitive attribute."""
    g = view.source
    names = list(g.sensitive) if names is None else list(names)
    for name in names:
        if name not in g.sensitive:
            raise KeyError(f"unknown sensitive attribute {name!r}")
    preds = predict(model, view)
    return evaluate_predictions(preds, g.labels, {k: g.sensitive[k] for k in names}, g.splits[split], **meta)


@dataclass
class MetricsReport:
    runs: list[RunMetrics]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.runs:
            raise ValueError("a report needs at least one run")
        keys = list(self.runs[0].flat())
        for r in self.runs[1:]:
            if list(r.flat()) != keys:
                raise ValueError("runs have heterogeneous metric structure")
        for r in self.runs:
            for k, v in r.flat().items():
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"{k}={v} outside [0, 100]")

    @property
    def metric_names(self) -> list[str]:
        return list(self.runs[0].flat())

    @property
    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for key in self.metric_names:
            vals = [r.flat()[key] for r in self.runs]
            mean = math.fsum(vals) / len(vals)
            if len(vals) > 1:
                var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
                std = math.sqrt(var)
            else:
                std = 0.0
            out[key] = {"mean": mean, "std": std}
        return out

    def mean(self, key: str) -> float:
        return self.aggregate[key]["mean"]

    def to_dict(self) -> dict:
        return {"meta": self.meta, "runs": [asdict(r) for r in self.runs], "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(runs=[RunMetrics(**r) for r in d["runs"]], meta=dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def summary_header(self) -> list[str]:
        cols = ["strategy", "runs"]
        for k in self.metric_names:
            cols += [f"{k}_mean", f"{k}_std"]
        return cols + ["config_hash"]

    def summary_row(self) -> list:
        agg = self.aggregate
        row = [self.meta.get("strategy", ""), len(self.runs)]
        for k in self.metric_names:
            row += [f"{agg[k]['mean']:.6f}", f"{agg[k]['std']:.6f}"]
        return row + [self.meta.get("config_hash", "")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.summary_header())
        w.writerow(self.summary_row())
        return buf.getvalue()


def aggregate(reports: Iterable[MetricsReport | RunMetrics], **meta) -> MetricsReport:
    runs: list[RunMetrics] = []
    for r in reports:
        runs.extend(r.runs if isinstance(r, MetricsReport) else [r])
    return MetricsReport(runs=runs, meta=meta)

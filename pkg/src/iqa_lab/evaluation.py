"""Evaluation reports: correlations of a prediction table against labels."""
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import metrics
from .errors import DegenerateInput, IdSetMismatch
from .inference import image_id

METRIC_KEYS = ("plcc", "srcc", "krcc", "main_score")


@dataclass
class EvalReport:
    name: str
    n: int
    plcc: float
    srcc: float
    krcc: float
    main_score: float
    # (image_id, predicted, target) rows
    predictions: List[list] = field(default_factory=list)
    note: Optional[str] = None

    def metrics(self):
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_json(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as f:
            # NaN is written as null so any JSON reader accepts the file
            payload = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                       for k, v in asdict(self).items()}
            json.dump(payload, f, indent=2)
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        for k in METRIC_KEYS:
            if d.get(k) is None:
                d[k] = float("nan")
        return cls(**d)


def labels_by_id(records):
    out = {}
    for r in records:
        if r.mos is None:
            continue
        iid = image_id(r)
        if iid in out:
            raise IdSetMismatch(f"duplicate image id {iid} in labels")
        out[iid] = r.mos
    return out


def evaluate(predictions, labels, name="eval", strict=True):
    """Correlate ``predictions`` (id -> score) against ``labels`` (id -> mos).

    Image-id sets must match. With ``strict=False`` a degenerate (constant)
    prediction vector yields NaN metrics and a note instead of raising.
    """
    if set(predictions) != set(labels):
        diff = sorted(set(predictions) ^ set(labels))
        raise IdSetMismatch(f"{len(diff)} ids differ between predictions and labels, e.g. {diff[:5]}")
    ids = sorted(predictions)
    p = np.array([predictions[i] for i in ids], dtype=np.float64)
    t = np.array([labels[i] for i in ids], dtype=np.float64)
    rows = [[i, float(a), float(b)] for i, a, b in zip(ids, p, t)]
    try:
        c = metrics.correlations(p, t)
    except DegenerateInput as exc:
        if strict:
            raise
        nan = float("nan")
        return EvalReport(name, len(ids), nan, nan, nan, nan, rows, note=str(exc))
    return EvalReport(name, len(ids), c["plcc"], c["srcc"], c["krcc"], c["main_score"], rows)


def comparison_table(reports, fmt="markdown"):
    """Rows = methods, columns = metrics."""
    header = ["method", "PLCC", "SRCC", "KRCC", "Main Score"]
    rows = [[r.name] + [f"{getattr(r, k):.4f}" for k in METRIC_KEYS] for r in reports]
    if fmt == "csv":
        return "\n".join(",".join(x) for x in [header] + rows) + "\n"
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def scatter_rows(reports):
    """(method, image_id, predicted, target) rows for a predicted-vs-MOS plot."""
    return [[r.name, iid, p, t] for r in reports for iid, p, t in r.predictions]

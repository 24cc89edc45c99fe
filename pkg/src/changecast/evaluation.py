"""Foreground metrics, PR curves, early/late confusion and report plots."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

EARLY_MONTHS = 12
TIMERANGE_HORIZON = 24


def _ratio(num, den, default=0.0):
    return float(num) / float(den) if den else default


def counts_to_metrics(tp, fp, fn, tn=0) -> dict:
    """Foreground precision/recall/F1 from counts.

    With no positives predicted or present at all (tp = fp = fn = 0) every
    score is 1; otherwise any 0/0 term is 0.
    """
    if tp == fp == fn == 0:
        p = r = f1 = 1.0
    else:
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return {"f1": f1, "precision": p, "recall": r,
            "counts": {"tp": int(tp), "fp": int(fp), "fn": int(fn), "tn": int(tn)}}


def confusion_counts(pred, label) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    label = np.asarray(label).astype(bool)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    tp = int(np.count_nonzero(pred & label))
    fp = int(np.count_nonzero(pred & ~label))
    fn = int(np.count_nonzero(~pred & label))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def binary_metrics(pred, label):
    """(f1, precision, recall, counts) of the foreground class."""
    m = counts_to_metrics(*confusion_counts(pred, label))
    return m["f1"], m["precision"], m["recall"], m["counts"]


class Counter:
    """Micro-averaged tp/fp/fn/tn pooled over many patches."""

    def __init__(self):
        self.tp = self.fp = self.fn = self.tn = 0

    def add(self, pred, label):
        tp, fp, fn, tn = confusion_counts(pred, label)
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.tn += tn
        return self

    def metrics(self) -> dict:
        return counts_to_metrics(self.tp, self.fp, self.fn, self.tn)


def pr_curve(scores, labels, n_thresholds: int = 256) -> list[tuple[float, float, float]]:
    """(recall, precision, threshold) points with prediction `score > threshold`.

    Thresholds are score quantiles plus one point just below the minimum score
    (recall 1). Thresholds at which nothing is predicted positive are dropped.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("PR curve needs at least one positive label")
    qs = np.quantile(s, np.linspace(0.0, 1.0, n_thresholds), method="inverted_cdf")
    thresholds = np.unique(np.concatenate([[np.nextafter(s.min(), -np.inf)], qs]))
    s_sorted = np.sort(s)
    pos_sorted = np.sort(s[y])
    pp = s.size - np.searchsorted(s_sorted, thresholds, side="right")
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="right")
    keep = pp > 0
    return [(float(t_p / n_pos), float(t_p / p_p), float(t))
            for t_p, p_p, t in zip(tp[keep], pp[keep], thresholds[keep])]


def oracle_threshold(scores, labels) -> tuple[float, float]:
    """Test-set F1-maximising threshold and its F1."""
    from .thresholding import f1_sweep

    thresholds, f1 = f1_sweep(scores, labels)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(thresholds[best]), float(f1[best])


def confusion_report(conf) -> dict:
    """Accuracy, per-class precision/recall/F1 and their mean (aF1) from a
    2x2 confusion matrix with rows = ground truth (early, late) and columns =
    prediction (early, late)."""
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    out = {"confusion": conf.tolist(), "n": total,
           "accuracy": _ratio(np.trace(conf), total)}
    for k, name in enumerate(("early", "late")):
        tp = int(conf[k, k])
        fp = int(conf[:, k].sum() - tp)
        fn = int(conf[k, :].sum() - tp)
        m = counts_to_metrics(tp, fp, fn)
        out[name] = {"precision": m["precision"], "recall": m["recall"], "f1": m["f1"]}
    out["aF1"] = (out["early"]["f1"] + out["late"]["f1"]) / 2.0
    return out


class TimeRangeAccumulator:
    """Pools the early/late confusion and the change-forecast counts over patches."""

    def __init__(self, change_threshold: float, horizon: int = TIMERANGE_HORIZON, early_months: int = EARLY_MONTHS):
        self.change_threshold = float(change_threshold)
        self.horizon = horizon
        self.early_months = early_months
        self.conf = np.zeros((2, 2), dtype=np.int64)
        self.change = Counter()

    def add(self, p_e, p_c, first_change_month):
        p_e = np.asarray(p_e)
        p_c = np.asarray(p_c)
        fcm = np.asarray(first_change_month)
        changed = (fcm >= 1) & (fcm <= self.horizon)
        gt_late = fcm[changed] > self.early_months
        pred_late = ~(p_e[changed] > 0.5)
        np.add.at(self.conf, (gt_late.astype(int), pred_late.astype(int)), 1)
        self.change.add(p_c > self.change_threshold, changed)
        return self

    def report(self) -> dict:
        out = {"change_forecast": self.change.metrics() | {"threshold_used": self.change_threshold}}
        if self.conf.sum() == 0:
            out["applicable"] = False
            return out
        out["applicable"] = True
        out.update(confusion_report(self.conf))
        return out


def timerange_eval(p_e, p_c, first_change_month, change_threshold: float = 0.33,
                   r_horizon: int = TIMERANGE_HORIZON) -> dict:
    return TimeRangeAccumulator(change_threshold, r_horizon).add(p_e, p_c, first_change_month).report()


@dataclass
class EvalReport:
    task: str
    ranges: dict[int, dict] = field(default_factory=dict)
    pr_curve: list = field(default_factory=list)
    timerange: dict | None = None
    label: str = "model"

    def to_json(self) -> dict:
        return {"task": self.task, "label": self.label,
                "ranges": {str(k): v for k, v in sorted(self.ranges.items())},
                "pr_curve": [list(p) for p in self.pr_curve],
                "timerange": self.timerange}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(d["task"], {int(k): v for k, v in d["ranges"].items()},
                   [tuple(p) for p in d.get("pr_curve", [])], d.get("timerange"), d.get("label", "model"))


# ---------------------------------------------------------------- plots

def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def _series(rows, ycol):
    out = {}
    for row in rows:
        out.setdefault(row["series"], ([], []))
        out[row["series"]][0].append(float(row["range"]))
        out[row["series"]][1].append(float(row[ycol]))
    return out


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt.subplots(figsize=(6, 4))


def render_range_plot(csv_path, ycols=("f1",), ylabel="F1 score"):
    rows = read_csv(csv_path)
    fig, ax = _figure()
    for ycol in ycols:
        for name, (x, y) in _series(rows, ycol).items():
            label = name if len(ycols) == 1 else f"{name} {ycol}"
            ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel("Forecasting range [months]")
    ax.set_ylabel(ylabel)
    ax.grid(True, linestyle="--")
    ax.legend()
    return fig


def render_pr_curve(csv_path):
    rows = read_csv(csv_path)
    fig, ax = _figure()
    ax.plot([float(r["recall"]) for r in rows], [float(r["precision"]) for r in rows])
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    return fig


def render_confusion(csv_path):
    rows = read_csv(csv_path)
    conf = np.array([[float(r["pred_early"]), float(r["pred_late"])] for r in rows])
    fig, ax = _figure()
    ax.imshow(conf, cmap="Blues")
    for (i, j), v in np.ndenumerate(conf):
        ax.text(j, i, f"{int(v)}", ha="center", va="center")
    ax.set_xticks([0, 1], ["early", "late"])
    ax.set_yticks([0, 1], ["early", "late"])
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Ground truth")
    return fig


def _save(fig, path):
    import matplotlib.pyplot as plt

    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def emit_plots(reports, out_dir) -> dict[str, Path]:
    """Write one CSV per plot and render each plot from its CSV."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    labels = [rep.label for rep in reports]
    if len(set(labels)) != len(labels):
        raise ValueError(f"report labels must be unique, got {labels}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    range_rows = [(rep.label, r, m["f1"], m["precision"], m["recall"], m.get("threshold_used", ""))
                  for rep in reports for r, m in sorted(rep.ranges.items())]
    if range_rows:
        header = ("series", "range", "f1", "precision", "recall", "threshold_used")
        written["f1_csv"] = _write_csv(out / "f1_vs_range.csv", header, range_rows)
        _save(render_range_plot(written["f1_csv"]), out / "f1_vs_range.png")
        written["pr_csv"] = _write_csv(out / "precision_recall_vs_range.csv", header, range_rows)
        _save(render_range_plot(written["pr_csv"], ("precision", "recall"), "Precision / recall"),
              out / "precision_recall_vs_range.png")

    for rep in reports:
        if rep.pr_curve:
            p = _write_csv(out / f"pr_curve_{rep.label}.csv", ("recall", "precision", "threshold"), rep.pr_curve)
            _save(render_pr_curve(p), p.with_suffix(".png"))
            written[f"pr_curve_{rep.label}"] = p
        if rep.timerange and rep.timerange.get("applicable"):
            conf = rep.timerange["confusion"]
            p = _write_csv(out / f"confusion_{rep.label}.csv", ("gt", "pred_early", "pred_late"),
                           [("early", *conf[0]), ("late", *conf[1])])
            _save(render_confusion(p), p.with_suffix(".png"))
            written[f"confusion_{rep.label}"] = p
    return written


def reference_csv(name: str = "fig4_f1_reference.csv") -> Path:
    """Path of a bundled published-curve CSV."""
    return Path(str(resources.files("changecast") / "data" / name))


def plot_reference(out_dir, name: str = "fig4_f1_reference.csv") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png = out / Path(name).with_suffix(".png").name
    _save(render_range_plot(reference_csv(name), ("f1",), "F1 score (%)"), png)
    return png

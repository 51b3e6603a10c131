"""Evaluation metrics: PSNR, top-k accuracy, mean IoU, and report emission."""

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 99.0


def psnr(a, b, peak=1.0):
    """10*log10(peak^2 / MSE) in dB over all channels jointly.

    Identical images would be +inf; the value is capped at 99 dB to keep
    reports finite.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def topk_accuracy(logits, labels, k):
    """Fraction of rows whose true label ranks in the k largest logits.

    Ties rank the lower class index first (stable sort on descending value).
    """
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(getattr(labels, "data", labels)).reshape(-1)
    if logits.ndim != 2:
        raise ValueError(f"topk_accuracy expects (N,K) logits, got {logits.shape}")
    n, kk = logits.shape
    if not 1 <= k <= kk:
        raise ValueError(f"k must be in [1, {kk}], got {k}")
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= kk):
        raise ValueError(f"label out of range [0, {kk})")
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def mean_iou(pred, gt, num_classes, ignore_label=None):
    """Mean over classes of intersection/union on non-ignored pixels.

    Classes absent from both prediction and ground truth are excluded from
    the average.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mean_iou: shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    p = pred[valid]
    g = gt[valid]
    ious = []
    for c in range(num_classes):
        pc = p == c
        gc = g == c
        union = int(np.logical_or(pc, gc).sum())
        if union == 0:
            continue
        ious.append(int(np.logical_and(pc, gc).sum()) / union)
    return float(np.mean(ious)) if ious else 1.0


@dataclass
class MetricsReport:
    """Records of (variant, sigma, metric, value), emitted as line-oriented
    text with a '#'-commented human-readable table at the end."""

    records: list = field(default_factory=list)

    def add(self, variant, sigma, metric, value):
        self.records.append((str(variant), float(sigma), str(metric), float(value)))

    def extend(self, other):
        self.records.extend(other.records)

    def value(self, variant, sigma, metric):
        for v, s, m, x in self.records:
            if v == variant and s == float(sigma) and m == metric:
                return x
        raise KeyError(f"no record for ({variant}, {sigma}, {metric})")

    def lines(self):
        return [f"{v}\t{s:g}\t{m}\t{x:.6f}" for v, s, m, x in self.records]

    def table(self):
        variants = sorted({r[0] for r in self.records})
        sigmas = sorted({r[1] for r in self.records})
        metrics = sorted({r[2] for r in self.records})
        out = []
        for m in metrics:
            out.append(f"{m}:")
            header = "sigma".ljust(8) + "".join(v.ljust(12) for v in variants)
            out.append(header)
            for s in sigmas:
                row = f"{s:<8g}"
                for v in variants:
                    try:
                        row += f"{self.value(v, s, m):<12.4f}"
                    except KeyError:
                        row += "-".ljust(12)
                out.append(row)
        return out

    def save(self, path):
        with open(path, "w") as f:
            for line in self.lines():
                f.write(line + "\n")
            for line in self.table():
                f.write("# " + line + "\n")

    @classmethod
    def load(cls, path):
        rep = cls()
        with open(path) as f:
            for line in f:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                v, s, m, x = line.split("\t")
                rep.add(v, float(s), m, float(x))
        return rep

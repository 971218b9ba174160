"""Saliency evaluation measures (MAE, max F, S, E, weighted F) and a dataset
evaluator that aggregates them into a report row."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EPS = np.finfo(np.float64).eps
N_THRESHOLDS = 256
FMAX_BETA_SQ = 0.3  # beta^2 of the thresholded F-measure
WF_BETA_SQ = 1.0    # beta^2 of the weighted F-measure
WF_SIGMA = 5.0      # Gaussian sigma of the weighted F-measure
WF_KERNEL = 7       # kernel truncation (7x7) of that Gaussian


def _validate_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shape mismatch: {pred.shape} vs {gt.shape}")


def binarize_gt(gt: np.ndarray) -> np.ndarray:
    return (np.asarray(gt, dtype=np.float64) >= 0.5)


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error between the prediction and the ground truth."""
    _validate_pair(pred, gt)
    return float(np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64))))


def quantize_pred(pred: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] map to the 256 threshold levels (integers 0..255)."""
    return np.round(np.asarray(pred, np.float64) * 255.0).astype(np.int64)


def threshold_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """True positives and predicted positives at every threshold t in 0..255,
    where a pixel counts as positive when its quantized value is >= t."""
    _validate_pair(pred, gt)
    fg = binarize_gt(gt)
    pq = quantize_pred(pred)
    tp_hist = np.bincount(pq[fg], minlength=N_THRESHOLDS)
    all_hist = np.bincount(pq.ravel(), minlength=N_THRESHOLDS)
    # counts at level >= t, accumulated from the top
    tp = np.cumsum(tp_hist[::-1])[::-1]
    pp = np.cumsum(all_hist[::-1])[::-1]
    return tp, pp, int(fg.sum())


class FmaxAccumulator:
    """Accumulates per-threshold precision/recall over a dataset; F_max is the
    best F-measure (beta^2 = 0.3) over the 256-threshold sweep of the means.

    Images without any foreground pixel are skipped (recall undefined) and
    counted in `n_skipped`.
    """

    def __init__(self):
        self.precision_sum = np.zeros(N_THRESHOLDS)
        self.recall_sum = np.zeros(N_THRESHOLDS)
        self.n_images = 0
        self.n_skipped = 0

    def add(self, pred: np.ndarray, gt: np.ndarray):
        tp, pp, npos = threshold_counts(pred, gt)
        if npos == 0:
            self.n_skipped += 1
            return
        precision = np.where(pp > 0, tp / np.maximum(pp, 1), 0.0)
        recall = tp / npos
        self.precision_sum += precision
        self.recall_sum += recall
        self.n_images += 1

    def result(self) -> tuple[float, np.ndarray]:
        """(f_max, curve) where curve[t] = (mean precision, mean recall)."""
        if self.n_images == 0:
            return 0.0, np.zeros((N_THRESHOLDS, 2))
        p = self.precision_sum / self.n_images
        r = self.recall_sum / self.n_images
        den = FMAX_BETA_SQ * p + r
        f = np.where(den > 0, (1.0 + FMAX_BETA_SQ) * p * r / np.maximum(den, EPS), 0.0)
        return float(f.max()), np.stack([p, r], axis=1)


def f_max(pairs) -> tuple[float, np.ndarray]:
    """F_max over an iterable of (pred, gt) pairs, plus the P/R curve."""
    acc = FmaxAccumulator()
    for pred, gt in pairs:
        acc.add(pred, gt)
    return acc.result()


def _s_object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + EPS))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = _s_object_score(pred[gt])
    bg = _s_object_score((1.0 - pred)[~gt])
    u = gt.mean()
    return float(u * fg + (1.0 - u) * bg)


def _gt_centroid(gt: np.ndarray) -> tuple[int, int]:
    rows, cols = np.argwhere(gt).T
    return int(np.round(rows.mean())) + 1, int(np.round(cols.mean())) + 1


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 1.0
    x, y = p.mean(), g.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cy, cx = _gt_centroid(gt)
    area = h * w
    w1 = (cy * cx) / area
    w2 = (cy * (w - cx)) / area
    w3 = ((h - cy) * cx) / area
    w4 = 1.0 - w1 - w2 - w3
    q1 = _region_ssim(pred[:cy, :cx], gt[:cy, :cx].astype(np.float64))
    q2 = _region_ssim(pred[:cy, cx:], gt[:cy, cx:].astype(np.float64))
    q3 = _region_ssim(pred[cy:, :cx], gt[cy:, :cx].astype(np.float64))
    q4 = _region_ssim(pred[cy:, cx:], gt[cy:, cx:].astype(np.float64))
    return float(w1 * q1 + w2 * q2 + w3 * q3 + w4 * q4)


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object similarity + (1 - alpha) * region
    similarity (4-way split at the GT centroid). Edge rules: an all-background
    GT scores 1 - mean(pred); an all-foreground GT scores mean(pred)."""
    _validate_pair(pred, gt)
    pred = np.asarray(pred, np.float64)
    fg = binarize_gt(gt)
    y = fg.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, fg) + (1.0 - alpha) * _s_region(pred, fg)
    return float(max(score, 0.0))


def e_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Enhanced-alignment measure of the prediction binarized at the adaptive
    threshold min(2 * mean(pred), 1); the enhanced alignment map is averaged
    over all pixels."""
    _validate_pair(pred, gt)
    pred = np.asarray(pred, np.float64)
    fg = binarize_gt(gt).astype(np.float64)
    thr = min(2.0 * pred.mean(), 1.0)
    fm = (pred >= thr).astype(np.float64)
    if fg.sum() == 0:
        enhanced = 1.0 - fm
    elif fg.sum() == fg.size:
        enhanced = fm
    else:
        dfm = fm - fm.mean()
        dgt = fg - fg.mean()
        align = 2.0 * dfm * dgt / (dfm * dfm + dgt * dgt + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def _wf_gaussian_kernel(size: int = WF_KERNEL, sigma: float = WF_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k1 = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def weighted_f(pred: np.ndarray, gt: np.ndarray) -> float:
    """Weighted F-measure: the absolute error map is propagated from the GT
    distance transform (errors in the background are read at the nearest
    foreground pixel, blurred with a 7x7 sigma-5 Gaussian, and discounted with
    distance), then combined into weighted precision/recall with beta^2 = 1.

    Returns 0 for an empty ground truth (weighted recall undefined).
    """
    _validate_pair(pred, gt)
    fg = binarize_gt(gt)
    if not fg.any():
        return 0.0
    pred = np.asarray(pred, np.float64)
    gtf = fg.astype(np.float64)
    err = np.abs(pred - gtf)

    dist, (iy, ix) = ndimage.distance_transform_edt(~fg, return_indices=True)
    err_t = err.copy()
    err_t[~fg] = err[iy[~fg], ix[~fg]]
    blurred = ndimage.correlate(err_t, _wf_gaussian_kernel(), mode="constant", cval=0.0)
    min_e_ea = np.where(fg & (blurred < err), blurred, err)

    bias = np.ones_like(gtf)
    bias[~fg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[~fg])
    ew = min_e_ea * bias

    tpw = fg.sum() - ew[fg].sum()
    fpw = ew[~fg].sum()
    recall = 1.0 - ew[fg].mean()
    precision = tpw / (tpw + fpw + EPS)
    den = recall + WF_BETA_SQ * precision
    if den <= 0:
        return 0.0
    f = (1.0 + WF_BETA_SQ) * precision * recall / (den + EPS)
    return float(max(f, 0.0))


@dataclass
class MetricReport:
    """Evaluation summary for one dataset (columns in F_max, MAE, S_m, E_m,
    F_w order, matching the reporting convention)."""

    dataset: str
    n_images: int
    f_max: float
    mae: float
    s_m: float
    e_m: float
    f_w: float
    n_empty_gt: int = 0
    f_curve: list = field(default_factory=list)  # 256 (precision, recall) pairs

    COLUMNS = ("F_max", "MAE", "S_m", "E_m", "F_w")

    def row(self) -> tuple[float, float, float, float, float]:
        return (self.f_max, self.mae, self.s_m, self.e_m, self.f_w)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "n_images": self.n_images,
            "n_empty_gt": self.n_empty_gt,
            "f_max": self.f_max,
            "mae": self.mae,
            "s_m": self.s_m,
            "e_m": self.e_m,
            "f_w": self.f_w,
            "f_curve": [[float(p), float(r)] for p, r in self.f_curve],
        }


def evaluate_pairs(pairs, dataset: str = "dataset") -> MetricReport:
    """Evaluate an iterable of (pred, gt) array pairs.

    Predictions must already be at GT resolution and in [0, 1]. MAE, S and E
    are averaged per image (S and E use their empty-GT edge rules); images
    with an empty GT are excluded from the precision/recall aggregation behind
    F_max and F_w, with their count reported.
    """
    acc = FmaxAccumulator()
    maes, ss, es, fws = [], [], [], []
    n = 0
    for pred, gt in pairs:
        pred = np.asarray(pred, np.float64)
        gt = np.asarray(gt, np.float64)
        _validate_pair(pred, gt)
        acc.add(pred, gt)
        maes.append(mae(pred, gt))
        ss.append(s_measure(pred, gt))
        es.append(e_measure(pred, gt))
        if binarize_gt(gt).any():
            fws.append(weighted_f(pred, gt))
        n += 1
    fmax, curve = acc.result()
    return MetricReport(
        dataset=dataset,
        n_images=n,
        f_max=fmax,
        mae=float(np.mean(maes)) if maes else 0.0,
        s_m=float(np.mean(ss)) if ss else 0.0,
        e_m=float(np.mean(es)) if es else 0.0,
        f_w=float(np.mean(fws)) if fws else 0.0,
        n_empty_gt=acc.n_skipped,
        f_curve=[(float(p), float(r)) for p, r in curve],
    )


def reports_to_markdown(reports: list[MetricReport]) -> str:
    header = "| Dataset | n | " + " | ".join(MetricReport.COLUMNS) + " |"
    sep = "|" + "---|" * (len(MetricReport.COLUMNS) + 2)
    lines = [header, sep]
    for r in reports:
        vals = " | ".join(f"{v:.4f}" for v in r.row())
        lines.append(f"| {r.dataset} | {r.n_images} | {vals} |")
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["dataset", "n_images"] + list(MetricReport.COLUMNS))
    for r in reports:
        writer.writerow([r.dataset, r.n_images] + [f"{v:.6f}" for v in r.row()])
    return buf.getvalue()


def reports_to_json(reports: list[MetricReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)

"""Loss ledger: per-pixel weight maps, the elementary losses, the dual
foreground/background saliency loss, the contour loss, and the combined
training objective over all supervised heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .model import HeadId, full_head_set

FG_WINDOW = 31  # sliding-max window for the foreground weight map
IOU_EPS = 1e-6
DICE_EPS = 1.0
CONTOUR_BCE_WEIGHT = 0.001


def _as4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def fg_weight_map(gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel foreground weight: the largest ground-truth value inside the
    31x31 window centered on each pixel (replicate padding at the borders)."""
    x = _as4d(gt)
    r = FG_WINDOW // 2
    padded = F.pad(x, (r, r, r, r), mode="replicate")
    out = F.max_pool2d(padded, FG_WINDOW, stride=1)
    return out.reshape(gt.shape)


def bg_ground_truth(gt: torch.Tensor) -> torch.Tensor:
    """Background ground truth: the elementwise complement 1 - gt."""
    return 1.0 - gt


def background_logits(fg_logits: torch.Tensor) -> torch.Tensor:
    """Background-side pre-sigmoid predictions: the negated foreground logits,
    so that sigmoid(bg) = 1 - sigmoid(fg)."""
    return -fg_logits


def compute_weight_maps(gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(alpha_fg, alpha_bg) aligned to the resolution of `gt`."""
    return fg_weight_map(gt), bg_ground_truth(gt)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def weighted_bce(logits: torch.Tensor, gt: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of alpha * BCE(sigmoid(logit), gt), evaluated in the
    numerically stable logit-space form."""
    _check_same_shape(logits, gt, "weighted_bce")
    _check_same_shape(logits, alpha, "weighted_bce")
    return F.binary_cross_entropy_with_logits(logits, gt, weight=alpha, reduction="mean")


def weighted_iou(probs: torch.Tensor, gt: torch.Tensor, alpha: torch.Tensor,
                 eps: float = IOU_EPS) -> torch.Tensor:
    """Weighted soft IoU loss, 1 - (sum a*p*g + eps) / (sum a*(p+g-p*g) + eps),
    computed per sample and averaged.

    The epsilon appears in both numerator and denominator so the degenerate
    all-zero case (alpha = gt = probs = 0) scores 0 rather than 1.
    """
    _check_same_shape(probs, gt, "weighted_iou")
    _check_same_shape(probs, alpha, "weighted_iou")
    p, g, a = _as4d(probs), _as4d(gt), _as4d(alpha)
    dims = (1, 2, 3)
    inter = (a * p * g).sum(dims)
    union = (a * (p + g - p * g)).sum(dims)
    return (1.0 - (inter + eps) / (union + eps)).mean()


def weighted_l1(probs: torch.Tensor, gt: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of alpha * |p - g|."""
    _check_same_shape(probs, gt, "weighted_l1")
    _check_same_shape(probs, alpha, "weighted_l1")
    return (alpha * (probs - gt).abs()).mean()


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft dice loss 1 - (2*sum(p*g) + eps) / (sum p + sum g + eps), computed
    per sample and averaged."""
    _check_same_shape(probs, gt, "dice_loss")
    p, g = _as4d(probs), _as4d(gt)
    dims = (1, 2, 3)
    num = 2.0 * (p * g).sum(dims) + eps
    den = p.sum(dims) + g.sum(dims) + eps
    return (1.0 - num / den).mean()


def saliency_head_loss(fg_logits: torch.Tensor, gt: torch.Tensor, beta: float,
                       weight_gt: torch.Tensor | None = None):
    """Dual-side saliency loss for one head.

    The foreground side weights BCE + IoU + L1 by the window-max map; the
    background side runs the same three losses on negated logits against
    1 - gt, weighted by the background map. Returns (L_fg, L_bg, L_fg + beta*L_bg).
    `weight_gt` lets the caller compute weight maps from a re-binarized ground
    truth while supervising against the soft one.
    """
    _check_same_shape(fg_logits, gt, "saliency_head_loss")
    if weight_gt is None:
        weight_gt = gt
    alpha_fg, alpha_bg = compute_weight_maps(weight_gt)
    probs = torch.sigmoid(fg_logits)

    l_fg = (weighted_bce(fg_logits, gt, alpha_fg)
            + weighted_iou(probs, gt, alpha_fg)
            + weighted_l1(probs, gt, alpha_fg))

    bg_log = background_logits(fg_logits)
    bg_gt = bg_ground_truth(gt)
    bg_probs = torch.sigmoid(bg_log)
    l_bg = (weighted_bce(bg_log, bg_gt, alpha_bg)
            + weighted_iou(bg_probs, bg_gt, alpha_bg)
            + weighted_l1(bg_probs, bg_gt, alpha_bg))

    return l_fg, l_bg, l_fg + beta * l_bg


def contour_head_loss(con_logits: torch.Tensor, contour_gt: torch.Tensor) -> torch.Tensor:
    """Contour loss for one head: 0.001 * BCE + dice."""
    _check_same_shape(con_logits, contour_gt, "contour_head_loss")
    bce = F.binary_cross_entropy_with_logits(con_logits, contour_gt, reduction="mean")
    return CONTOUR_BCE_WEIGHT * bce + dice_loss(torch.sigmoid(con_logits), contour_gt)


def morphological_gradient(binary: torch.Tensor) -> torch.Tensor:
    """3x3 dilation minus 3x3 erosion of a binary map; the image border is
    treated as replicated so edge-touching objects grow no phantom contour."""
    x = _as4d(binary)
    dil = F.max_pool2d(x, 3, stride=1, padding=1)
    ero = 1.0 - F.max_pool2d(1.0 - x, 3, stride=1, padding=1)
    return (dil - ero).clamp(0.0, 1.0).reshape(binary.shape)


def _resize_map(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False).clamp(0.0, 1.0)


@dataclass
class LossBreakdown:
    """Per-head loss components plus the combined objective.

    `per_head` maps each head to detached (fg, bg, contour) floats; `total`
    stays a tensor so it can drive backprop.
    """

    per_head: dict[HeadId, tuple[float, float, float]]
    total: torch.Tensor
    beta: float

    def as_record(self) -> dict:
        """Flat JSON-serializable record for the step log."""
        rec = {"total": float(self.total.detach()), "beta": self.beta}
        for head, (fg, bg, con) in self.per_head.items():
            if head.kind == "saliency":
                rec[f"{head.key}.fg"] = fg
                rec[f"{head.key}.bg"] = bg
            else:
                rec[f"{head.key}.con"] = con
        return rec


def total_loss(outputs: dict[HeadId, torch.Tensor], gt: torch.Tensor,
               contour_gt: torch.Tensor, beta: float,
               expected_heads: tuple[HeadId, ...] | None = None) -> LossBreakdown:
    """Combined objective: the dual fg/bg saliency loss summed over every
    saliency head plus the contour loss summed over every contour head.

    Ground truth is resized (bilinear, clamped) to each head's resolution; the
    weight maps use the resized map re-binarized at 0.5, and coarse contour
    targets are re-derived from that binarized map rather than resized.
    """
    expected = expected_heads if expected_heads is not None else full_head_set()
    missing = [h for h in expected if h not in outputs]
    if missing:
        raise KeyError(f"missing heads in forward outputs: {[h.key for h in missing]}")

    gt = _as4d(gt)
    contour_gt = _as4d(contour_gt)
    per_head: dict[HeadId, tuple[float, float, float]] = {}
    total = None
    for head in expected:
        logits = outputs[head]
        size = tuple(logits.shape[-2:])
        if head.kind == "saliency":
            target = _resize_map(gt, size)
            weight_gt = (target >= 0.5).to(target.dtype)
            l_fg, l_bg, l_sal = saliency_head_loss(logits, target, beta, weight_gt=weight_gt)
            per_head[head] = (float(l_fg.detach()), float(l_bg.detach()), 0.0)
            contrib = l_sal
        else:
            if size == tuple(contour_gt.shape[-2:]):
                target = contour_gt
            else:
                target = morphological_gradient((_resize_map(gt, size) >= 0.5).to(gt.dtype))
            l_con = contour_head_loss(logits, target)
            per_head[head] = (0.0, 0.0, float(l_con.detach()))
            contrib = l_con
        total = contrib if total is None else total + contrib
    return LossBreakdown(per_head=per_head, total=total, beta=beta)

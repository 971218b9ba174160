"""Prediction export and the qualitative comparison grid."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .checkpoint import load_checkpoint
from .data import load_image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}
LABEL_STRIP = 14
PLACEHOLDER_GRAY = 128


def saliency_to_png(prob: np.ndarray, path):
    """Quantize a [0, 1] map to an 8-bit grayscale PNG."""
    arr = np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


@torch.no_grad()
def predict_image(model, image: np.ndarray) -> np.ndarray:
    """Saliency probabilities for one (3, H, W) image at its native size."""
    model.eval()
    h, w = image.shape[-2:]
    ih, iw = model.config.input_size
    x = torch.from_numpy(image[None])
    if (h, w) != (ih, iw):
        x = torch.nn.functional.interpolate(x, size=(ih, iw), mode="bilinear",
                                            align_corners=False)
    prob = model.predict_saliency(x)
    if prob.shape[-2:] != (h, w):
        prob = torch.nn.functional.interpolate(prob, size=(h, w), mode="bilinear",
                                               align_corners=False)
    return prob[0, 0].numpy()


def predict(checkpoint_path, images_dir, out_dir) -> list[Path]:
    """Export one saliency PNG per readable image in the directory."""
    model = load_checkpoint(checkpoint_path)
    images_dir, out_dir = Path(images_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        try:
            image = load_image(path)
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", path.name, exc)
            continue
        prob = predict_image(model, image)
        out_path = out_dir / f"{path.stem}.png"
        saliency_to_png(prob, out_path)
        written.append(out_path)
    return written


def _load_tile(cell, size) -> Image.Image:
    if cell is None:
        return Image.new("RGB", size, (PLACEHOLDER_GRAY,) * 3)
    if isinstance(cell, np.ndarray):
        arr = cell
        if arr.max() <= 1.0:
            arr = arr * 255.0
        img = Image.fromarray(np.round(arr).astype(np.uint8))
    else:
        try:
            img = Image.open(cell)
            img.load()
        except Exception as exc:
            log.warning("grid cell %s unreadable (%s); using placeholder", cell, exc)
            return Image.new("RGB", size, (PLACEHOLDER_GRAY,) * 3)
    return img.convert("RGB").resize(size, Image.BILINEAR)


def _cell_size(cell) -> tuple[int, int] | None:
    if isinstance(cell, np.ndarray):
        return (cell.shape[-1], cell.shape[-2])
    try:
        with Image.open(cell) as img:
            return img.size
    except Exception:
        return None


def report_grid(rows, out_path, labels=None, tile_size=None):
    """Tile images into a comparison grid: one row per case, one column per
    source (input, ground truth, predictions, ...), plus an optional label
    strip. Missing cells become gray placeholder tiles.
    """
    if not rows:
        raise ValueError("grid needs at least one row")
    n_cols = max(len(r) for r in rows)
    if tile_size is None:
        sizes = (_cell_size(c) for r in rows for c in r if c is not None)
        tile_size = next((s for s in sizes if s is not None), (64, 64))
    tw, th = tile_size
    strip = LABEL_STRIP if labels else 0
    canvas = Image.new("RGB", (n_cols * tw, len(rows) * th + strip), (255, 255, 255))
    if labels:
        draw = ImageDraw.Draw(canvas)
        for j, label in enumerate(labels[:n_cols]):
            draw.text((j * tw + 2, 1), str(label), fill=(0, 0, 0))
    for i, row in enumerate(rows):
        for j in range(n_cols):
            cell = row[j] if j < len(row) else None
            canvas.paste(_load_tile(cell, (tw, th)), (j * tw, strip + i * th))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return canvas.size

"""Rasterization of instance-segmentation records (polygons and run-length
encodings) into binary saliency ground truth."""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def rasterize_polygon(polygon, height: int, width: int) -> np.ndarray:
    """Fill a polygon given as a flat [x1, y1, x2, y2, ...] list.

    A pixel (row r, column c) is inside when its center (c + 0.5, r + 0.5)
    falls inside the polygon under the even-odd rule, computed row by row from
    edge crossings.
    """
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) < 3:
        return mask
    x1, y1 = pts[:, 0], pts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for r in range(height):
        yc = r + 0.5
        crossing = ((y1 <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < y1))
        if not crossing.any():
            continue
        t = (yc - y1[crossing]) / (y2[crossing] - y1[crossing])
        xs = np.sort(x1[crossing] + t * (x2[crossing] - x1[crossing]))
        for x_start, x_end in zip(xs[0::2], xs[1::2]):
            c0 = max(int(np.ceil(x_start - 0.5)), 0)
            c1 = min(int(np.ceil(x_end - 0.5)), width)
            if c1 > c0:
                mask[r, c0:c1] = True
    return mask


def _expand_compressed_counts(data) -> list[int]:
    """Decode the compact string form of run-length counts."""
    if isinstance(data, bytes):
        data = data.decode("ascii")
    counts: list[int] = []
    i = 0
    while i < len(data):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(data[i]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            i += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def decode_rle(rle: dict) -> np.ndarray:
    """Decode a run-length-encoded mask {'size': [h, w], 'counts': ...} where
    counts is either a list of run lengths or the compact string form. Runs
    alternate background/foreground starting with background, in column-major
    order."""
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = _expand_compressed_counts(counts)
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for run in counts:
        if val:
            flat[pos:pos + run] = True
        pos += run
        val = not val
    return flat.reshape((w, h)).T  # column-major storage


def binarize_annotations(segmentations, height: int, width: int) -> tuple[np.ndarray, int]:
    """Union of all instance masks as a {0, 1} map.

    Each record is either a list of polygons or an RLE dict. Degenerate
    polygons (fewer than 3 points) are skipped; the skip count is returned so
    callers can warn and drop images left without any valid mask.
    """
    mask = np.zeros((height, width), dtype=bool)
    skipped = 0
    for seg in segmentations:
        if isinstance(seg, dict):
            decoded = decode_rle(seg)
            if decoded.shape != (height, width):
                log.warning("RLE size %s does not match image %s; skipping",
                            decoded.shape, (height, width))
                skipped += 1
                continue
            mask |= decoded
        else:
            for polygon in seg:
                if len(polygon) < 6:
                    skipped += 1
                    continue
                mask |= rasterize_polygon(polygon, height, width)
    return mask.astype(np.uint8), skipped

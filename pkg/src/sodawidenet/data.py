"""Dataset tooling: manifests with flip expansion, contour ground truth,
sample preparation, and the builders for the binarized pretraining corpus and
DUTS-style fine-tuning data."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .masks import binarize_annotations

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "hflip", "vflip")
PHASES = ("pretrain", "finetune", "eval")


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    gt: str
    contour: str
    aug: str = "none"

    def to_dict(self):
        return {"image": self.image, "gt": self.gt, "contour": self.contour, "aug": self.aug}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    phase: str
    source: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for e in self.entries:
            if e.aug not in AUGMENTATIONS:
                raise ValueError(f"unknown augmentation {e.aug!r} in manifest")

    def __len__(self):
        return len(self.entries)

    def save(self, path):
        path = Path(path)
        with path.open("w") as f:
            f.write(json.dumps({"phase": self.phase, "source": self.source}) + "\n")
            for e in self.entries:
                f.write(json.dumps(e.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with path.open() as f:
            header = json.loads(f.readline())
            entries = [ManifestEntry(**json.loads(line)) for line in f if line.strip()]
        return cls(entries=entries, phase=header["phase"], source=header.get("source", ""))

    def validate(self):
        """Check that every referenced file exists and decodes."""
        for e in self.entries:
            for p in (e.image, e.gt, e.contour):
                path = Path(p)
                if not path.exists():
                    raise FileNotFoundError(f"manifest references missing file: {p}")
                with Image.open(path) as img:
                    img.verify()


def expand_with_flips(entries: list[ManifestEntry]) -> list[ManifestEntry]:
    """Triple the manifest: each source entry plus its horizontal and vertical
    flip variants."""
    out = []
    for e in entries:
        for aug in AUGMENTATIONS:
            out.append(ManifestEntry(image=e.image, gt=e.gt, contour=e.contour, aug=aug))
    return out


def derive_contour(gt: np.ndarray) -> np.ndarray:
    """Contour ground truth as the 3x3 morphological gradient of the binarized
    foreground: dilation XOR erosion, a roughly 2 px boundary band. The border
    is treated as replicated, so objects touching the image edge contribute no
    contour along that edge."""
    fg = np.asarray(gt) >= 0.5
    structure = np.ones((3, 3), dtype=bool)
    dil = ndimage.binary_dilation(fg, structure=structure, border_value=0)
    ero = ndimage.binary_erosion(fg, structure=structure, border_value=1)
    return (dil ^ ero).astype(np.uint8)


@dataclass
class SaliencySample:
    """One prepared training/eval unit: image in [0, 1], soft saliency GT,
    binary contour GT, and a provenance id."""

    image: np.ndarray   # (3, H, W) float32
    gt: np.ndarray      # (1, H, W) float32
    contour: np.ndarray  # (1, H, W) float32, binary
    id: str


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return arr


def save_mask_png(mask: np.ndarray, path):
    arr = np.asarray(mask, dtype=np.float64)
    if arr.max() <= 1.0:
        arr = arr * 255.0
    Image.fromarray(np.round(arr).astype(np.uint8), mode="L").save(path)


def flip_map(arr: np.ndarray, mode: str) -> np.ndarray:
    """Flip the last two axes of a (..., H, W) array."""
    if mode == "none":
        return arr
    if mode == "hflip":
        return np.ascontiguousarray(arr[..., :, ::-1])
    if mode == "vflip":
        return np.ascontiguousarray(arr[..., ::-1, :])
    raise ValueError(f"unknown augmentation {mode!r}")


def augment(sample: SaliencySample, mode: str) -> SaliencySample:
    """Apply the same flip jointly to image, gt, and contour."""
    if mode == "none":
        return sample
    return SaliencySample(
        image=flip_map(sample.image, mode),
        gt=flip_map(sample.gt, mode),
        contour=flip_map(sample.contour, mode),
        id=f"{sample.id}#{mode}",
    )


def _resize_2d(arr: np.ndarray, size: tuple[int, int], mode) -> np.ndarray:
    h, w = size
    img = Image.fromarray(arr)
    return np.asarray(img.resize((w, h), mode), dtype=np.float32)


def prepare(entry: ManifestEntry, size: tuple[int, int] = (384, 384)) -> SaliencySample | None:
    """Load, resize and augment one manifest entry.

    The image and gt are resized bilinearly (gt clamped to [0, 1]); the
    contour is re-derived from the resized, binarized gt rather than resized
    directly. Undecodable files are skipped with a log message.
    """
    try:
        image = load_image(entry.image)
        gt = load_mask(entry.gt)
    except Exception as exc:  # corrupt files must never abort an epoch
        log.warning("skipping %s: %s", entry.image, exc)
        return None
    h, w = size
    if image.shape[-2:] != (h, w):
        image = np.stack([_resize_2d(c, size, Image.BILINEAR) for c in image])
    if gt.shape != (h, w):
        gt = _resize_2d(gt, size, Image.BILINEAR)
    gt = np.clip(gt, 0.0, 1.0)
    contour = derive_contour(gt).astype(np.float32)
    sample = SaliencySample(
        image=np.clip(image, 0.0, 1.0),
        gt=gt[None],
        contour=contour[None],
        id=Path(entry.image).stem,
    )
    return augment(sample, entry.aug)


def iter_samples(manifest: DatasetManifest, size=(384, 384), order=None):
    """Yield prepared samples in deterministic order (by entry index, or the
    given index order), silently skipping entries whose files fail to decode."""
    indices = range(len(manifest.entries)) if order is None else order
    for i in indices:
        sample = prepare(manifest.entries[i], size=size)
        if sample is not None:
            yield sample


def build_coco_manifest(ann_file, images_dir, out_dir) -> DatasetManifest:
    """Binarize an instance-annotation file into saliency ground truth.

    Every image holding at least one valid instance mask yields a gt/contour
    PNG pair and three manifest entries (original + two flips); images with no
    valid mask are excluded.
    """
    ann_file, images_dir, out_dir = Path(ann_file), Path(images_dir), Path(out_dir)
    gt_dir = out_dir / "gt"
    contour_dir = out_dir / "contour"
    gt_dir.mkdir(parents=True, exist_ok=True)
    contour_dir.mkdir(parents=True, exist_ok=True)

    with ann_file.open() as f:
        payload = json.load(f)
    by_image: dict[int, list] = {}
    for ann in payload.get("annotations", []):
        seg = ann.get("segmentation")
        if seg:
            by_image.setdefault(ann["image_id"], []).append(seg)

    entries: list[ManifestEntry] = []
    skipped_polygons = 0
    excluded_images = 0
    for info in payload.get("images", []):
        segs = by_image.get(info["id"], [])
        if not segs:
            excluded_images += 1
            continue
        mask, skipped = binarize_annotations(segs, info["height"], info["width"])
        skipped_polygons += skipped
        if not mask.any():
            excluded_images += 1
            continue
        stem = Path(info["file_name"]).stem
        gt_path = gt_dir / f"{stem}.png"
        contour_path = contour_dir / f"{stem}.png"
        save_mask_png(mask, gt_path)
        save_mask_png(derive_contour(mask), contour_path)
        entries.append(ManifestEntry(
            image=str(images_dir / info["file_name"]),
            gt=str(gt_path),
            contour=str(contour_path),
        ))
    if skipped_polygons:
        log.warning("skipped %d degenerate polygons", skipped_polygons)
    if excluded_images:
        log.info("excluded %d images without a valid mask", excluded_images)

    manifest = DatasetManifest(expand_with_flips(entries), phase="pretrain", source=str(ann_file))
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def _find_pair_dirs(root: Path) -> tuple[Path, Path]:
    candidates = [
        ("images", "gt"), ("images", "masks"), ("Image", "Mask"),
        ("DUTS-TR-Image", "DUTS-TR-Mask"), ("DUTS-TE-Image", "DUTS-TE-Mask"),
    ]
    for img_name, mask_name in candidates:
        img_dir, mask_dir = root / img_name, root / mask_name
        if img_dir.is_dir() and mask_dir.is_dir():
            return img_dir, mask_dir
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    for img_dir in subdirs:
        if "image" in img_dir.name.lower():
            for mask_dir in subdirs:
                if "mask" in mask_dir.name.lower() or "gt" in mask_dir.name.lower():
                    return img_dir, mask_dir
    raise FileNotFoundError(f"could not locate an image/mask directory pair under {root}")


def build_duts_manifest(root, out_dir, phase: str = "finetune") -> DatasetManifest:
    """Index a DUTS-style directory (paired image and mask folders), derive
    contour maps, and write a flip-expanded manifest."""
    root, out_dir = Path(root), Path(out_dir)
    img_dir, mask_dir = _find_pair_dirs(root)
    contour_dir = out_dir / "contour"
    contour_dir.mkdir(parents=True, exist_ok=True)

    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.is_file()}
    entries: list[ManifestEntry] = []
    for img_path in sorted(img_dir.iterdir()):
        mask_path = masks.get(img_path.stem)
        if mask_path is None:
            log.warning("no mask for %s; skipping", img_path.name)
            continue
        contour_path = contour_dir / f"{img_path.stem}.png"
        save_mask_png(derive_contour(load_mask(mask_path)), contour_path)
        entries.append(ManifestEntry(
            image=str(img_path), gt=str(mask_path), contour=str(contour_path),
        ))
    if phase == "finetune":
        entries = expand_with_flips(entries)
    manifest = DatasetManifest(entries, phase=phase, source=str(root))
    manifest.save(out_dir / "manifest.jsonl")
    return manifest

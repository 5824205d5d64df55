"""Manifest-level plumbing: preprocessing chains, dataset loading, segmentation
inference, SIJ cropping and classifier scoring.

Segmentation chain: resize to the U-Net input (bilinear) -> CLAHE -> z-score.
Classification chain: source image (full radiograph or SIJ crop) -> CLAHE ->
bilinear resize to the training size -> z-score. Both classifier variants use
exactly the same chain; only the source image differs.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import anatomy, imgproc
from .errors import ConfigError, LocalizationError, UpstreamMissingError
from .manifest import Manifest, ManifestEntry, read_png, write_png

log = logging.getLogger(__name__)

VARIANTS = ("standard", "anatomy_aware")
CROP_OK = "ok"
CROP_FALLBACK = "fallback-full"


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return variant


# ---------------------------------------------------------------------------
# segmentation


def seg_preprocess(image: np.ndarray, size, clahe_params: imgproc.ClaheParams) -> np.ndarray:
    small = imgproc.resize(image, size[0], size[1], "bilinear")
    return imgproc.znormalize(imgproc.clahe(small, clahe_params)).astype(np.float32)


def seg_mask_preprocess(mask: np.ndarray, size) -> np.ndarray:
    return imgproc.resize(mask, size[0], size[1], "nearest")


def load_seg_dataset(manifest: Manifest, size, clahe_params: imgproc.ClaheParams):
    """Preprocessed images (N, H, W) float32 and masks (N, H, W) uint8."""
    if not manifest.entries:
        raise ConfigError("empty manifest")
    images, masks = [], []
    for e in manifest.entries:
        if not e.mask_path:
            raise UpstreamMissingError(f"{e.sample_id} has no mask; run `generate`")
        images.append(seg_preprocess(read_png(manifest.resolve(e.image_path)), size, clahe_params))
        masks.append(seg_mask_preprocess(read_png(manifest.resolve(e.mask_path)), size))
    return np.stack(images), np.stack(masks)


@torch.no_grad()
def predict_mask(model, image: np.ndarray, clahe_params: imgproc.ClaheParams) -> np.ndarray:
    """Full-resolution label map from a U-Net prediction at the model input size."""
    size = tuple(model.config.input_size)
    x = torch.from_numpy(seg_preprocess(image, size, clahe_params))[None, None]
    labels = model(x).argmax(1)[0].numpy().astype(np.uint8)
    return imgproc.resize(labels, image.shape[0], image.shape[1], "nearest")


def segment_manifest(manifest: Manifest, out_dir, model=None, clahe_params=None,
                     use_ground_truth: bool = False) -> Manifest:
    """Write a segmentation map per entry; ``use_ground_truth`` copies the phantom masks."""
    out_dir = Path(out_dir)
    (out_dir / "segmentations").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.entries:
        target = out_dir / "segmentations" / f"{e.sample_id}.png"
        if use_ground_truth:
            if not e.mask_path:
                raise UpstreamMissingError(f"{e.sample_id} has no ground-truth mask")
            seg = read_png(manifest.resolve(e.mask_path))
        else:
            if model is None:
                raise UpstreamMissingError("no segmentation model; run `train-seg`")
            seg = predict_mask(model, read_png(manifest.resolve(e.image_path)), clahe_params)
        write_png(target, seg.astype(np.uint8))
        entries.append(replace(e, seg_path=str(target.resolve())))
    return manifest.with_entries(entries).rebased(out_dir)


def crop_manifest(manifest: Manifest, out_dir, fallback_full: bool = False,
                  radius: int | None = None, margin: float = anatomy.DEFAULT_MARGIN) -> Manifest:
    """Locate both SIJs on each segmentation and write the anatomy-aware crop.

    Without ``fallback_full`` a localization failure aborts the stage; with it
    the entry keeps the full radiograph and is flagged ``fallback-full``.
    """
    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.entries:
        if not e.seg_path:
            raise UpstreamMissingError(f"{e.sample_id} has no segmentation; run `segment`")
        image_path = manifest.resolve(e.image_path)
        seg = read_png(manifest.resolve(e.seg_path))
        try:
            boxes = anatomy.locate_sij(seg, radius, margin)
        except LocalizationError as exc:
            if not fallback_full:
                raise
            log.warning("%s: %s; using full image", e.sample_id, exc)
            entries.append(replace(e, sij_boxes=None, crop_path=str(image_path),
                                   crop_status=CROP_FALLBACK))
            continue
        image = read_png(image_path)
        target = out_dir / "crops" / f"{e.sample_id}.png"
        write_png(target, anatomy.crop_to_sij(image, boxes))
        entries.append(replace(e, sij_boxes=boxes.to_dict(), crop_path=str(target.resolve()),
                               crop_status=CROP_OK))
    return manifest.with_entries(entries).rebased(out_dir)


# ---------------------------------------------------------------------------
# classification


def crop_offset(entry: ManifestEntry):
    """Crop box of an anatomy-aware entry in the full-image frame, or None for full-image use."""
    if entry.crop_status != CROP_OK or not entry.sij_boxes:
        return None
    return anatomy.crop_box(anatomy.SijBoxes.from_dict(entry.sij_boxes))


def source_image(manifest: Manifest, entry: ManifestEntry, variant: str) -> np.ndarray:
    check_variant(variant)
    if variant == "standard":
        return read_png(manifest.resolve(entry.image_path))
    if not entry.crop_path:
        raise UpstreamMissingError(f"{entry.sample_id} has no SIJ crop; run `crop`")
    return read_png(manifest.resolve(entry.crop_path))


def clf_base(image: np.ndarray, clahe_params: imgproc.ClaheParams) -> np.ndarray:
    return imgproc.clahe(image, clahe_params)


def clf_at_size(base: np.ndarray, size) -> np.ndarray:
    small = imgproc.resize(base.astype(np.float64), size[0], size[1], "bilinear")
    return imgproc.znormalize(small).astype(np.float32)


def load_clf_sources(manifest: Manifest, variant: str, clahe_params: imgproc.ClaheParams):
    """CLAHE-equalized source images (variable size) and labels."""
    bases = [clf_base(source_image(manifest, e, variant), clahe_params) for e in manifest.entries]
    return bases, np.array(manifest.labels, dtype=np.int64)


def stack_at_size(bases, size) -> np.ndarray:
    return np.stack([clf_at_size(b, size) for b in bases])


@torch.no_grad()
def predict_proba(model, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Positive-class probabilities for preprocessed images (N, H, W)."""
    model.eval()
    out = []
    for i in range(0, len(images), batch):
        x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch]))[:, None]
        out.append(torch.softmax(model(x).double(), dim=1)[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros(0)


def score_manifest(model, manifest: Manifest, variant: str, size, clahe_params,
                   batch: int = 32) -> np.ndarray:
    bases, _ = load_clf_sources(manifest, variant, clahe_params)
    return predict_proba(model, stack_at_size(bases, size), batch)

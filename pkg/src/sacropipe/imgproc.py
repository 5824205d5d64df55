"""Preprocessing and augmentation shared by the standard and anatomy-aware paths."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError

# ---------------------------------------------------------------------------
# CLAHE


@dataclass(frozen=True)
class ClaheParams:
    tiles: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if min(self.tiles) < 1:
            raise ParameterError("tiles must be >= (1, 1)")
        if not self.clip_limit > 0:
            raise ParameterError("clip_limit must be > 0")
        if self.bins < 2:
            raise ParameterError("bins must be >= 2")


def _max_value(image: np.ndarray) -> int:
    if image.dtype == np.uint8:
        return 255
    if image.dtype == np.uint16:
        return 65535
    raise ParameterError(f"CLAHE expects uint8 or uint16 input, got {image.dtype}")


def intensity_bins(image: np.ndarray, bins: int) -> np.ndarray:
    """Histogram bin index of every pixel: floor(v * bins / (max + 1))."""
    top = _max_value(image) + 1
    return (image.astype(np.int64) * bins) // top


def _tile_edges(n_pixels: int, n_tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n_pixels, n_tiles + 1)).astype(int)


def clahe_mappings(image: np.ndarray, params: ClaheParams = ClaheParams()):
    """Per-tile gray-level mappings (float, in output units) and tile centers.

    Returns ``(maps, row_centers, col_centers)`` with ``maps`` of shape
    ``(tile_rows, tile_cols, bins)``.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ParameterError("CLAHE needs a non-empty 2-D image")
    top = _max_value(image)
    rows, cols = params.tiles
    redges, cedges = _tile_edges(image.shape[0], rows), _tile_edges(image.shape[1], cols)
    if np.diff(redges).min() < 2 or np.diff(cedges).min() < 2:
        raise ParameterError(f"tiles {params.tiles} too fine for image {image.shape}: "
                             "each tile needs at least 2x2 pixels")
    b = intensity_bins(image, params.bins)
    maps = np.empty((rows, cols, params.bins))
    for i in range(rows):
        for j in range(cols):
            tile = b[redges[i]:redges[i + 1], cedges[j]:cedges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=params.bins).astype(np.float64)
            n = tile.size
            if math.isfinite(params.clip_limit):
                clip = params.clip_limit * n / params.bins
                excess = np.maximum(hist - clip, 0.0).sum()
                hist = np.minimum(hist, clip) + excess / params.bins
            maps[i, j] = np.cumsum(hist) / n * top
    rc = (redges[:-1] + redges[1:] - 1) / 2.0
    cc = (cedges[:-1] + cedges[1:] - 1) / 2.0
    return maps, rc, cc


def _interp_axis(coords: np.ndarray, centers: np.ndarray):
    """Lower/upper neighbor tile index and the weight of the upper one."""
    n = len(centers)
    hi = np.searchsorted(centers, coords, side="right")
    lo = np.clip(hi - 1, 0, n - 1)
    hi = np.clip(hi, 0, n - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(image: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Histograms are clipped at ``clip_limit * tile_pixels / bins`` with one pass of
    uniform redistribution; tile mappings are bilinearly interpolated between
    tile centers (nearest tile beyond the outermost centers). Output keeps the
    input dtype and spans its full range.
    """
    image = np.asarray(image)
    maps, rc, cc = clahe_mappings(image, params)
    b = intensity_bins(image, params.bins)
    r0, r1, wr = _interp_axis(np.arange(image.shape[0], dtype=float), rc)
    c0, c1, wc = _interp_axis(np.arange(image.shape[1], dtype=float), cc)
    R0, R1, WR = r0[:, None], r1[:, None], wr[:, None]
    C0, C1, WC = c0[None, :], c1[None, :], wc[None, :]
    top = (1 - WC) * maps[R0, C0, b] + WC * maps[R0, C1, b]
    bottom = (1 - WC) * maps[R1, C0, b] + WC * maps[R1, C1, b]
    out = (1 - WR) * top + WR * bottom
    hi = _max_value(image)
    return np.clip(np.rint(out), 0, hi).astype(image.dtype)


# ---------------------------------------------------------------------------
# geometry & intensity


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center alignment
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize(image: np.ndarray, target_h: int, target_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize without letterboxing. ``bilinear`` for images, ``nearest`` for label masks."""
    if target_h < 1 or target_w < 1:
        raise ParameterError("resize targets must be >= 1")
    image = np.asarray(image)
    h, w = image.shape[:2]
    if (h, w) == (target_h, target_w):
        return image.copy()
    if mode == "nearest":
        ri = np.minimum(np.floor((np.arange(target_h) + 0.5) * h / target_h), h - 1).astype(int)
        ci = np.minimum(np.floor((np.arange(target_w) + 0.5) * w / target_w), w - 1).astype(int)
        return image[ri[:, None], ci[None, :]]
    if mode != "bilinear":
        raise ParameterError(f"unknown resize mode {mode!r}")
    ys = np.clip(_source_coords(target_h, h), 0, h - 1)
    xs = np.clip(_source_coords(target_w, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (ys - y0)[:, None], (xs - x0)[None, :]
    src = image.astype(np.float64)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(image.dtype)
    return out.astype(image.dtype)


def znormalize(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    sd = x.std()
    if sd == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def center_crop_to_aspect(image: np.ndarray, aspect_hw: float) -> np.ndarray:
    """Largest centered crop with height/width == ``aspect_hw``."""
    h, w = image.shape[:2]
    if h / w > aspect_hw:
        nh = max(1, int(round(w * aspect_hw)))
        r0 = (h - nh) // 2
        return image[r0:r0 + nh]
    nw = max(1, int(round(h / aspect_hw)))
    c0 = (w - nw) // 2
    return image[:, c0:c0 + nw]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    zoom_range: float = 0.10
    max_shear_deg: float = 5.0
    intensity_shift: float = 0.0
    contrast_range: float = 0.0
    gauss_noise_sigma: float = 0.0

    def __post_init__(self):
        values = (self.flip_prob, self.max_rotation_deg, self.zoom_range, self.max_shear_deg,
                  self.intensity_shift, self.contrast_range, self.gauss_noise_sigma)
        if any(v < 0 for v in values):
            raise ParameterError("augmentation magnitudes must be >= 0")
        if self.flip_prob > 1:
            raise ParameterError("flip_prob must be <= 1")
        if self.max_rotation_deg > 10:
            raise ParameterError("rotation is limited to 10 degrees")
        if self.zoom_range >= 1:
            raise ParameterError("zoom_range must be < 1")


NO_AUGMENT = AugmentParams(flip_prob=0.0, max_rotation_deg=0.0, zoom_range=0.0, max_shear_deg=0.0)
SEGMENTATION_AUGMENT = AugmentParams(flip_prob=0.0, max_rotation_deg=10.0, zoom_range=0.10,
                                     max_shear_deg=5.0, intensity_shift=0.1, contrast_range=0.1,
                                     gauss_noise_sigma=0.05)


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    rotation_deg: float
    zoom: float
    shear_deg: float
    intensity: float
    contrast: float


def draw_augmentation(params: AugmentParams, rng: np.random.Generator) -> AugmentDraw:
    """Consume the geometric and photometric draws, in fixed order.

    Order: flip, rotate, zoom, shear, intensity, contrast. Noise is drawn after
    these, by :func:`augment`, only when ``gauss_noise_sigma > 0``.
    """
    flip = bool(rng.random() < params.flip_prob)
    rot = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    zoom = rng.uniform(1.0 - params.zoom_range, 1.0 + params.zoom_range)
    shear = rng.uniform(-params.max_shear_deg, params.max_shear_deg)
    shift = rng.uniform(-params.intensity_shift, params.intensity_shift)
    contrast = rng.uniform(1.0 - params.contrast_range, 1.0 + params.contrast_range)
    return AugmentDraw(flip, float(rot), float(zoom), float(shear), float(shift), float(contrast))


def _affine_matrix(draw: AugmentDraw) -> np.ndarray:
    """Output->input coordinate map (row, col) for rotation, zoom and shear about the center."""
    t = math.radians(draw.rotation_deg)
    s = math.tan(math.radians(draw.shear_deg))
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    shear = np.array([[1.0, 0.0], [s, 1.0]])
    forward = draw.zoom * rot @ shear
    return np.linalg.inv(forward)


def apply_geometry(array: np.ndarray, draw: AugmentDraw, order: int, cval: float = 0.0):
    out = np.fliplr(array) if draw.flip else array
    if draw.rotation_deg == 0.0 and draw.zoom == 1.0 and draw.shear_deg == 0.0:
        return np.array(out, copy=True)
    m = _affine_matrix(draw)
    center = (np.array(array.shape, dtype=float) - 1) / 2
    offset = center - m @ center
    mode = "nearest" if order > 0 else "constant"
    return ndimage.affine_transform(out, m, offset=offset, order=order, mode=mode, cval=cval,
                                    prefilter=False)


def augment(image: np.ndarray, mask: np.ndarray | None, params: AugmentParams,
            rng: np.random.Generator):
    """Random joint geometric transform of (image, mask) plus image-only photometric jitter.

    The image is returned as float64. Photometric magnitudes are relative to the
    image's own scale: intensity shift in units of its dynamic range, noise in
    units of its standard deviation.
    """
    if mask is not None and mask.shape != image.shape:
        raise ParameterError("mask and image must share a shape")
    draw = draw_augmentation(params, rng)
    img = apply_geometry(np.asarray(image, dtype=np.float64), draw, order=1)
    out_mask = None if mask is None else apply_geometry(np.asarray(mask), draw, order=0)
    if draw.intensity or draw.contrast != 1.0:
        lo, hi = float(img.min()), float(img.max())
        mean = img.mean()
        img = (img - mean) * draw.contrast + mean + draw.intensity * (hi - lo)
    if params.gauss_noise_sigma > 0:
        sd = img.std()
        img = img + rng.normal(0.0, params.gauss_noise_sigma * (sd if sd > 0 else 1.0), img.shape)
    return img, out_mask


# ---------------------------------------------------------------------------
# mixup


@dataclass(frozen=True)
class MixupParams:
    alpha: float = 0.2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError("mixup alpha must be > 0")


def mixup(x_a, x_b, y_a, y_b, params: MixupParams, rng: np.random.Generator,
          lam: float | None = None):
    """Convex combination ``lam * x_a + (1 - lam) * x_b`` with ``lam ~ Beta(alpha, alpha)``.

    Targets are not blended here: train with ``lam * loss(y_a) + (1 - lam) * loss(y_b)``.
    Works on numpy arrays and torch tensors alike.
    """
    if params.alpha <= 0:
        raise ParameterError("mixup alpha must be > 0")
    if tuple(x_a.shape) != tuple(x_b.shape):
        raise ParameterError("mixup inputs must share a shape")
    if lam is None:
        lam = float(rng.beta(params.alpha, params.alpha))
    return lam * x_a + (1.0 - lam) * x_b, lam

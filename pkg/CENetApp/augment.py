"""
Training augmentations: the 8 dihedral flips, HSV color jitter, random
scaling and shifting, and the seeded per-sample augmentation stream.
"""

import logging
from dataclasses import dataclass
from itertools import product
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import AugmentConfig
from .nn_ops import interp_matrix
from .state import Sample

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
DIVISOR = 32


# ─── dihedral group ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class D4Element:
    """transpose, then vertical flip, then horizontal flip, on the last two axes."""

    transpose: bool
    flip_v: bool
    flip_h: bool

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.transpose:
            x = np.swapaxes(x, -1, -2)
        if self.flip_v:
            x = x[..., ::-1, :]
        if self.flip_h:
            x = x[..., :, ::-1]
        return np.ascontiguousarray(x)

    @property
    def index(self) -> int:
        return D4.index(self)

    def inverse(self) -> "D4Element":
        return D4[_INVERSE[self.index]]

    def compose(self, other: "D4Element") -> "D4Element":
        """Element acting as self after other."""
        return D4[_COMPOSE[self.index][other.index]]


D4: List[D4Element] = [D4Element(t, v, h) for t, v, h in product((False, True), repeat=3)]
IDENTITY = D4[0]


def _build_tables() -> Tuple[List[int], List[List[int]]]:
    probe = np.arange(9).reshape(3, 3)
    images = [g.apply(probe).tobytes() for g in D4]
    lookup = {img: i for i, img in enumerate(images)}
    compose = [[lookup[a.apply(b.apply(probe)).tobytes()] for b in D4] for a in D4]
    inverse = [row.index(0) for row in compose]
    return inverse, compose


_INVERSE, _COMPOSE = _build_tables()


def square_pad(sample: Sample) -> Sample:
    """Pad bottom/right to a square (image 0, mask ignore label)."""
    _, h, w = sample["image"].shape
    n = max(h, w)
    if h == w:
        return sample
    image = np.pad(sample["image"], ((0, 0), (0, n - h), (0, n - w)))
    mask = np.pad(sample["mask"], ((0, n - h), (0, n - w)), constant_values=IGNORE_LABEL)
    return Sample(id=sample["id"], image=image, mask=mask)


def flip_expand_8x(sample: Sample) -> List[Sample]:
    """
    The sample under all 8 dihedral symmetries, identity first. Non-square
    samples are padded to a square before flipping.
    """
    sample = square_pad(sample)
    return [
        Sample(id=f"{sample['id']}#d4-{g.index}", image=g.apply(sample["image"]), mask=g.apply(sample["mask"]))
        for g in D4
    ]


# ─── color ──────────────────────────────────────────────────────────────────

def rgb_hsv(image: np.ndarray) -> np.ndarray:
    """[3, H, W] RGB in [0, 1] -> HSV with hue in [0, 1)."""
    image = np.asarray(image)
    rgb = image.astype(np.float64)
    r, g, b = rgb
    v = rgb.max(axis=0)
    c = v - rgb.min(axis=0)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h % 1.0, s, v]).astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64)


def hsv_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv)
    h, s, v = hsv.astype(np.float64)
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(hsv.dtype)


def jitter_hsv(image: np.ndarray, dh: float, ds: float, dv: float) -> np.ndarray:
    if dh == 0 and ds == 0 and dv == 0:
        return image
    h, s, v = rgb_hsv(image)
    hsv = np.stack([(h + dh) % 1.0, np.clip(s + ds, 0.0, 1.0), np.clip(v + dv, 0.0, 1.0)])
    return hsv_rgb(hsv).astype(image.dtype)


# ─── geometry ───────────────────────────────────────────────────────────────

def resize_bilinear(image: np.ndarray, h: int, w: int) -> np.ndarray:
    _, h0, w0 = image.shape
    mh = interp_matrix(h0, h, np.float64)
    mw = interp_matrix(w0, w, np.float64)
    return ((mh @ image.astype(np.float64)) @ mw.T).astype(image.dtype)


def resize_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    h0, w0 = mask.shape
    rows = np.minimum(((np.arange(h) + 0.5) * h0 / h).astype(np.int64), h0 - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * w0 / w).astype(np.int64), w0 - 1)
    return mask[rows[:, None], cols[None, :]]


def fit_center(array: np.ndarray, h: int, w: int, fill) -> np.ndarray:
    """Center-crop or center-pad the last two axes to h x w."""
    h0, w0 = array.shape[-2:]
    out = np.full(array.shape[:-2] + (h, w), fill, dtype=array.dtype)
    sy, sx = max((h0 - h) // 2, 0), max((w0 - w) // 2, 0)
    dy, dx = max((h - h0) // 2, 0), max((w - w0) // 2, 0)
    ch, cw = min(h, h0), min(w, w0)
    out[..., dy:dy + ch, dx:dx + cw] = array[..., sy:sy + ch, sx:sx + cw]
    return out


def shift(array: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """Translate content by (dy, dx) pixels; exposed area takes `fill`."""
    h, w = array.shape[-2:]
    out = np.full(array.shape, fill, dtype=array.dtype)
    src_y, dst_y = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    src_x, dst_x = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    if abs(dy) < h and abs(dx) < w:
        out[..., dst_y, dst_x] = array[..., src_y, src_x]
    return out


def pad_to_divisor(sample: Sample, divisor: int = DIVISOR) -> Sample:
    _, h, w = sample["image"].shape
    ph, pw = (-h) % divisor, (-w) % divisor
    if not ph and not pw:
        return sample
    return Sample(
        id=sample["id"],
        image=np.pad(sample["image"], ((0, 0), (0, ph), (0, pw))),
        mask=np.pad(sample["mask"], ((0, ph), (0, pw)), constant_values=IGNORE_LABEL),
    )


def random_augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """
    Scale (bilinear image, nearest mask) then re-fit to the original size,
    HSV jitter on the image, random shift (image zero-filled, mask ignore-filled),
    finally padding to a multiple of 32. Draw order: scale, hue, saturation,
    value, vertical shift, horizontal shift.
    """
    image, mask = sample["image"], sample["mask"]
    _, h, w = image.shape

    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    dh = rng.uniform(-cfg.hue_delta, cfg.hue_delta)
    ds = rng.uniform(-cfg.sat_delta, cfg.sat_delta)
    dv = rng.uniform(-cfg.val_delta, cfg.val_delta)
    max_dy, max_dx = int(cfg.shift_fraction * h), int(cfg.shift_fraction * w)
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))

    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (sh, sw) != (h, w):
        image = fit_center(resize_bilinear(image, sh, sw), h, w, 0.0)
        mask = fit_center(resize_nearest(mask, sh, sw), h, w, IGNORE_LABEL)
    image = jitter_hsv(image, dh, ds, dv)
    if dy or dx:
        image = shift(image, dy, dx, 0.0)
        mask = shift(mask, dy, dx, IGNORE_LABEL)
    return pad_to_divisor(Sample(id=sample["id"], image=image, mask=mask))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def iter_augmented(samples: Sequence[Sample], cfg: AugmentConfig, seed: int, epoch: int,
                   order: Optional[Sequence[int]] = None) -> Iterator[Sample]:
    """
    Augmented samples in `order` (default: dataset order). Each sample draws
    from its own (seed, epoch, index) stream, so results do not depend on
    which other samples are processed or in what order.
    """
    for index in (range(len(samples)) if order is None else order):
        yield random_augment(samples[index], cfg, sample_rng(seed, epoch, int(index)))

"""
Dataset ingestion: binary NetPBM (P5/P6) read/write, optional PNG via Pillow,
the images/ + masks/ directory layout and the brightest-point crop.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .exceptions import DataError, ParseError
from .state import Sample

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")
MASK_SUFFIXES = (".pgm", ".png")
IGNORE_LABEL = 255

_WHITESPACE = b" \t\r\n\v\f"


# ─── NetPBM ─────────────────────────────────────────────────────────────────

def parse_netpbm(data: bytes, path: Union[str, Path] = "<bytes>") -> np.ndarray:
    """
    Decode a binary P5 (gray) or P6 (RGB) file with maxval 255.

    Returns uint8 [H, W] for P5 and [H, W, 3] for P6. Header comments
    ('#' to end of line) are allowed between tokens.
    """
    pos = 0

    def token(what: str) -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos] in _WHITESPACE:
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"expected {what}, reached end of header", path, start)
        return data[start:pos]

    def number(what: str) -> int:
        raw = token(what)
        if not raw.isdigit():
            raise ParseError(f"expected {what}, got {raw[:16]!r}", path, pos - len(raw))
        return int(raw)

    magic = token("magic number")
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic[:8]!r}; only binary P5/P6 are read", path, 0)
    width = number("width")
    height = number("height")
    maxval_at = pos
    maxval = number("maxval")
    if width < 1 or height < 1:
        raise ParseError(f"image size {width}x{height} must be positive", path, maxval_at)
    if maxval != 255:
        raise ParseError(f"maxval {maxval} is not supported (need 255)", path, maxval_at)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ParseError("missing whitespace after maxval", path, pos)
    pos += 1

    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    if len(data) - pos < expected:
        raise ParseError(f"pixel data truncated: need {expected} bytes, have {len(data) - pos}", path, len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def read_netpbm(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    return parse_netpbm(path.read_bytes(), path)


def write_pgm(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write a [H, W] uint8 array as binary P5."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise DataError(f"PGM data must be [H, W], got {list(array.shape)}")
    return _write(path, b"P5", array.astype(np.uint8))


def write_ppm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Write a [3, H, W] float image in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"PPM data must be [3, H, W], got {list(image.shape)}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return _write(path, b"P6", np.transpose(pixels, (1, 2, 0)))


def _write(path: Union[str, Path], magic: bytes, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape[:2]
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes())
    return path


# ─── generic readers ────────────────────────────────────────────────────────

def _read_png(path: Path, mode: Optional[str]) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if mode == "mask":
                if img.mode not in ("L", "P"):
                    raise DataError(f"{path}: mask PNG must be 8-bit gray or palette, got mode {img.mode}")
                return np.asarray(img, dtype=np.uint8).copy()
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"{path}: cannot read PNG ({e})") from e


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Image file -> [3, H, W] float32 values k / 255. Gray images are replicated to 3 channels."""
    path = Path(path)
    raw = _read_png(path, None) if path.suffix.lower() == ".png" else read_netpbm(path)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return (np.transpose(raw, (2, 0, 1)).astype(np.float32) / np.float32(255.0))


def read_mask(path: Union[str, Path]) -> np.ndarray:
    """Mask file -> [H, W] uint8 class indices."""
    path = Path(path)
    raw = _read_png(path, "mask") if path.suffix.lower() == ".png" else read_netpbm(path)
    if raw.ndim != 2:
        raise DataError(f"{path}: mask must be single-channel")
    return raw


# ─── dataset ────────────────────────────────────────────────────────────────

def _by_stem(folder: Path, suffixes: Tuple[str, ...]) -> Dict[str, Path]:
    files: Dict[str, Path] = {}
    if not folder.is_dir():
        return files
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            if p.stem in files:
                raise DataError(f"{folder}: more than one file with stem {p.stem!r}")
            files[p.stem] = p
    return files


def load_dataset(root: Union[str, Path]) -> List[Sample]:
    """
    Load <root>/images/* and <root>/masks/* paired by file stem, in
    lexicographic stem order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    images = _by_stem(root / "images", IMAGE_SUFFIXES)
    masks = _by_stem(root / "masks", MASK_SUFFIXES)
    if not images and not masks:
        logger.warning(f"⚠️ Dataset {root} is empty")
        return []

    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise DataError(f"{root}: stems without a partner image/mask: {unmatched}")

    samples: List[Sample] = []
    for stem in sorted(images):
        image = read_image(images[stem])
        mask = read_mask(masks[stem])
        if image.shape[1:] != mask.shape:
            raise DataError(f"{stem}: image is {image.shape[1]}x{image.shape[2]} but mask is "
                            f"{mask.shape[0]}x{mask.shape[1]}")
        samples.append(Sample(id=stem, image=image, mask=mask))
    logger.info(f"📂 Loaded {len(samples)} samples from {root}")
    return samples


# ─── preprocessing ──────────────────────────────────────────────────────────

def brightest_point(image: np.ndarray, window: int = 51) -> Tuple[int, int]:
    """Argmax (row, col) of the window x window box-filtered mean intensity."""
    intensity = np.asarray(image, dtype=np.float64).mean(axis=0)
    smoothed = ndimage.uniform_filter(intensity, size=window, mode="nearest")
    r, c = np.unravel_index(int(np.argmax(smoothed)), smoothed.shape)
    return int(r), int(c)


def crop_brightest(sample: Sample, size: int = 800, window: int = 51) -> Sample:
    """
    size x size crop centred on the brightest point, shifted to stay inside the
    image; images smaller than `size` on an axis keep that axis whole.
    """
    image, mask = sample["image"], sample["mask"]
    _, h, w = image.shape
    r, c = brightest_point(image, window)
    ch, cw = min(size, h), min(size, w)
    top = int(np.clip(r - ch // 2, 0, h - ch))
    left = int(np.clip(c - cw // 2, 0, w - cw))
    return Sample(
        id=sample["id"],
        image=image[:, top:top + ch, left:left + cw].copy(),
        mask=mask[top:top + ch, left:left + cw].copy(),
    )

"""
Seeded synthetic segmentation data: bright discs and ellipses on noisy
backgrounds, with exact masks.
"""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np

from .data import write_pgm, write_ppm
from .state import Sample

logger = logging.getLogger(__name__)


def synthetic_sample(index: int, size: int = 64, seed: int = 0, multiscale: bool = False) -> Sample:
    """
    One image/mask pair. The default mode draws one ellipse with radii of
    15-30% of the image; `multiscale` draws 1-3 discs with radii 2-20 pixels.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    image = rng.uniform(0.0, 0.35, size=(3, size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)

    if multiscale:
        shapes = [(r, r) for r in rng.uniform(2.0, 20.0, size=int(rng.integers(1, 4)))]
    else:
        shapes = [tuple(rng.uniform(0.15, 0.30, size=2) * size)]
    for ry, rx in shapes:
        cy = rng.uniform(ry, size - ry)
        cx = rng.uniform(rx, size - rx)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        color = rng.uniform(0.6, 1.0, size=3)
        image[:, inside] = color[:, None] * rng.uniform(0.9, 1.0, size=(3, int(inside.sum())))
        mask[inside] = 1

    # quantize the way the PPM round trip would
    image = (np.rint(image * 255.0) / 255.0).astype(np.float32)
    return Sample(id=f"sample_{index:03d}", image=image, mask=mask)


def make_synthetic(root: Union[str, Path], count: int = 8, size: int = 64, seed: int = 0,
                   multiscale: bool = False) -> List[Sample]:
    """Write <root>/images/*.ppm and <root>/masks/*.pgm (labels 0/1); returns the samples."""
    root = Path(root)
    samples = [synthetic_sample(i, size, seed, multiscale) for i in range(count)]
    for s in samples:
        write_ppm(root / "images" / f"{s['id']}.ppm", s["image"])
        write_pgm(root / "masks" / f"{s['id']}.pgm", s["mask"])
    logger.info(f"🎨 Wrote {count} synthetic samples ({size}x{size}, seed {seed}) to {root}")
    return samples

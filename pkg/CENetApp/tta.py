"""
Test-time augmentation: average a prediction over the 8 dihedral flips.
"""

from typing import Callable, Sequence

import numpy as np

from .augment import D4, D4Element

Predictor = Callable[[np.ndarray], np.ndarray]


def tta_predict(predict: Predictor, image: np.ndarray, group: Sequence[D4Element] = D4) -> np.ndarray:
    """
    mean over g of g^-1(predict(g(image))).

    Args:
        predict: maps a [C, H, W] image to a [K, H, W] probability map in eval mode
        image: [C, H, W]
    """
    total = None
    for g in group:
        out = g.inverse().apply(np.asarray(predict(g.apply(image)), dtype=np.float64))
        total = out if total is None else total + out
    return total / len(group)

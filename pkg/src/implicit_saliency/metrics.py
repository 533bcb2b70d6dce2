"""Fixation-based saliency scores."""
import numpy as np

from .errors import DegenerateMap, NoFixations, ShapeMismatch


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"map shape {list(a.shape)} != ground-truth shape {list(b.shape)}")


def nss(saliency_map, fixations) -> float:
    """Normalized Scanpath Saliency.

    The map is z-scored with the population standard deviation and the
    z-values are averaged over fixated pixels. Any nonzero entry of
    ``fixations`` counts as a fixation.
    """
    sal = np.asarray(saliency_map, dtype=np.float64)
    fix = np.asarray(fixations) != 0
    _same_shape(sal, fix)
    if not fix.any():
        raise NoFixations("fixation map has no fixated pixels")
    std = sal.std()
    if not std > 0:
        raise DegenerateMap("saliency map is constant; NSS undefined")
    z = (sal - sal.mean()) / std
    return float(z[fix].mean())


def cc(saliency_map, density) -> float:
    """Pearson linear correlation between a map and a fixation density."""
    a = np.asarray(saliency_map, dtype=np.float64)
    b = np.asarray(density, dtype=np.float64)
    _same_shape(a, b)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if not denom > 0:
        raise DegenerateMap("constant input; correlation undefined")
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))

"""Stochastic image- and feature-level perturbations.

Every function takes an explicit ``numpy.random.Generator``; nothing reads
global random state. Image transforms fire in the fixed order
flip -> crop-and-resize -> erase -> occlude.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F

from .config import PerturbConfig
from .errors import ConfigError

__all__ = ["PerturbConfig", "perturb_image", "feature_dropout", "view_streams", "image_stream"]


def image_stream(*key: int) -> np.random.Generator:
    """Independent generator keyed by integers, e.g. ``(seed, stage, epoch, step, index, view)``."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def view_streams(seed: int, n_views: int = 2):
    children = np.random.SeedSequence(seed).spawn(n_views)
    return [np.random.default_rng(c) for c in children]


def _rect(rng, h, w, area_frac, ratio):
    area = area_frac * h * w
    rh = int(round(math.sqrt(area * ratio)))
    rw = int(round(math.sqrt(area / ratio)))
    rh, rw = min(max(rh, 1), h), min(max(rw, 1), w)
    return rh, rw


def _flip(img, rng):
    return img[:, ::-1].copy()


def _crop_resize(img, scale, rng):
    h, w = img.shape[:2]
    s = math.sqrt(scale)
    ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = torch.from_numpy(np.ascontiguousarray(img[y0:y0 + ch, x0:x0 + cw])).permute(2, 0, 1)[None]
    out = F.interpolate(crop.double(), size=(h, w), mode="bilinear", align_corners=False)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0).astype(img.dtype)


def erase(img, area_frac, ratio, rng):
    """Replace one rectangle with per-pixel uniform noise."""
    h, w = img.shape[:2]
    rh, rw = _rect(rng, h, w, area_frac, ratio)
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    out = img.copy()
    out[y0:y0 + rh, x0:x0 + rw] = rng.random((rh, rw, img.shape[2])).astype(img.dtype)
    return out


def occlude(img, area_frac, rng):
    """Paste a solid-colour block anchored to a random image edge."""
    h, w = img.shape[:2]
    edge = int(rng.integers(0, 4))
    if edge in (0, 1):  # bottom or top: full-width band
        rh, rw = max(1, min(h, int(round(area_frac * h)))), w
    else:  # left or right: full-height band
        rh, rw = h, max(1, min(w, int(round(area_frac * w))))
    y0 = {0: h - rh, 1: 0}.get(edge, 0)
    x0 = {2: 0, 3: w - rw}.get(edge, 0)
    out = img.copy()
    out[y0:y0 + rh, x0:x0 + rw] = rng.random(img.shape[2]).astype(img.dtype)
    return out


def perturb_image(image, config: PerturbConfig, rng: np.random.Generator):
    """Apply flip, crop, erase and occlusion, each gated by its own probability draw.

    Output keeps the input shape, dtype and [0, 1] range.
    """
    img = np.asarray(image)
    if rng.random() < config.flip_prob:
        img = _flip(img, rng)
    if rng.random() < config.crop_prob:
        img = _crop_resize(img, rng.uniform(*config.crop_scale), rng)
    if rng.random() < config.erase_prob:
        ratio = math.exp(rng.uniform(math.log(config.erase_ratio[0]), math.log(config.erase_ratio[1])))
        img = erase(img, rng.uniform(*config.erase_area), ratio, rng)
    if rng.random() < config.occlude_prob:
        img = occlude(img, rng.uniform(*config.occlude_area), rng)
    return img if img is not image else img.copy()


def feature_dropout(V, p: float, rng: np.random.Generator):
    """Inverted dropout: zero each coordinate with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1], got {p}")
    shape = tuple(V.shape)
    if p == 0.0:
        return V
    if p == 1.0:
        return V * 0
    keep = rng.random(shape) >= p
    if isinstance(V, torch.Tensor):
        mask = torch.from_numpy(keep).to(device=V.device, dtype=V.dtype)
        return V * mask / (1.0 - p)
    return np.asarray(V) * keep / (1.0 - p)

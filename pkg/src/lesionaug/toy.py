"""Synthetic "textured disk" lesion images for desk-scale experiments.

A toy image is smooth background texture around 0.7 with a darker textured
lesion under the mask. The lesion type shifts the lesion brightness, so the
textual prompt carries information the generator can learn.
"""

import numpy as np
from scipy import ndimage

from .control import Vocabulary, sample_tags
from .maskgen import MaskGenConfig, gen_batch
from .rng import derive_seed, make_rng

TOY_MASKGEN = {"canvas": [32, 32], "r_min": 4.0, "r_max": 10.0, "blur_sigma": 1.0,
               "se_radii": [1, 1]}
BACKGROUND = 0.7
LESION_LEVELS = {"melanoma": 0.2, "nevus": 0.35, "seborrheic-keratosis": 0.45,
                 "basal-cell-carcinoma": 0.3}
DEFAULT_LESION = 0.32


def _texture(shape, rng, sigma=1.5, amplitude=0.06):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return amplitude * field / (field.std() + 1e-12)


def render_lesion(mask, tags, seed):
    """Render a ``(H, W, 1)`` image in [0, 1] for ``mask`` and ``tags``."""
    rng = make_rng(seed)
    mask = np.asarray(mask, dtype=np.float64)
    level = LESION_LEVELS.get(tags.lesion_type, DEFAULT_LESION)
    level -= 0.03 * len(tags.attributes)
    soft = ndimage.gaussian_filter(mask, 0.7)
    img = BACKGROUND + _texture(mask.shape, rng) \
        + soft * (level - BACKGROUND + _texture(mask.shape, rng, 1.0, 0.05))
    return np.clip(img, 0.0, 1.0)[:, :, None]


def make_toy_pairs(n, seed, maskgen=None, vocabulary=Vocabulary(), threads=1):
    """``n`` triples ``(image, mask, tags)``."""
    cfg = MaskGenConfig.from_dict(maskgen or TOY_MASKGEN)
    masks = gen_batch(n, cfg, derive_seed(seed, 0), threads)
    out = []
    for i, gm in enumerate(masks):
        tags = sample_tags(make_rng(seed, 1, i), vocabulary)
        out.append((render_lesion(gm.mask, tags, derive_seed(seed, 2, i)), gm.mask, tags))
    return out

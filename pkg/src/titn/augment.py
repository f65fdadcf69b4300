"""Training-time augmentation on numpy batches.

All functions are pure given their ``np.random.Generator``; they never touch
global random state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class CutMixBatch:
    images: np.ndarray  # [B, C, H, W]
    label_1: np.ndarray  # original labels
    label_2: np.ndarray  # labels of the pasted partner
    lam: float  # surviving fraction of the original image
    partner: np.ndarray  # permutation: sample i received its box from partner[i]
    box: tuple  # (y1, y2, x1, x2), half-open, clipped to the image


@dataclass
class AugmentConfig:
    crop_pad: int = 4
    flip_prob: float = 0.5
    cutmix_alpha: float = 0.5
    cutmix_prob: float = 1.0


def sample_lambda(beta_alpha: float, rng: np.random.Generator) -> float:
    if not beta_alpha > 0:
        raise ValueError(f"beta_alpha must be positive, got {beta_alpha}")
    return float(rng.beta(beta_alpha, beta_alpha))


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator,
               center: Optional[tuple] = None) -> tuple:
    """Box of side ``sqrt(1 - lam)`` times the image, centred uniformly.

    Returns ``(y1, y2, x1, x2)`` clipped to the image bounds.
    """
    ratio = np.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    if center is None:
        cy, cx = int(rng.integers(height)), int(rng.integers(width))
    else:
        cy, cx = center
    y1, y2 = np.clip([cy - cut_h // 2, cy + cut_h - cut_h // 2], 0, height)
    x1, x2 = np.clip([cx - cut_w // 2, cx + cut_w - cut_w // 2], 0, width)
    return int(y1), int(y2), int(x1), int(x2)


def cutmix(images: np.ndarray, labels: np.ndarray, lam: float, rng: np.random.Generator,
           partner: Optional[np.ndarray] = None, center: Optional[tuple] = None) -> CutMixBatch:
    """Paste one box from a permuted partner into every image of the batch.

    The returned ``lam`` is recomputed from the clipped box area, so it is
    exactly the fraction of pixels that kept their original source.
    """
    b, _, h, w = images.shape
    if b < 2:
        raise ValueError("cutmix needs a batch of at least 2")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if partner is None:
        partner = rng.permutation(b)
    y1, y2, x1, x2 = cutmix_box(h, w, lam, rng, center)
    out = images.copy()
    out[:, :, y1:y2, x1:x2] = images[partner, :, y1:y2, x1:x2]
    area = (y2 - y1) * (x2 - x1)
    lam_corrected = 1.0 - area / (h * w)
    labels = np.asarray(labels)
    return CutMixBatch(out, labels.copy(), labels[partner], lam_corrected, partner, (y1, y2, x1, x2))


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` on each side and crop back at a uniform offset.

    Accepts ``[C, H, W]`` or ``[B, C, H, W]``; batched input draws an
    independent offset per image.
    """
    if pad < 0:
        raise ValueError(f"pad must be non-negative, got {pad}")
    if pad == 0:
        return images.copy()
    single = images.ndim == 3
    batch = images[None] if single else images
    b, c, h, w = batch.shape
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = batch
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out[0] if single else out


def horizontal_flip(images: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Mirror along width with probability ``prob`` (per image when batched)."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must lie in [0, 1], got {prob}")
    single = images.ndim == 3
    batch = images[None] if single else images
    flip = rng.random(batch.shape[0]) < prob
    out = batch.copy()
    out[flip] = out[flip][..., ::-1]
    return out[0] if single else out


def normalize(images: np.ndarray, mean, std, dtype=np.float64) -> np.ndarray:
    """Per-channel standardization of a uint8 or float batch."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return ((images.astype(np.float64) - mean) / std).astype(dtype)


def augment_batch(images: np.ndarray, labels: np.ndarray, cfg: AugmentConfig,
                  rng: np.random.Generator) -> CutMixBatch:
    """Crop, flip, then CutMix with probability ``cutmix_prob``.

    When CutMix is skipped the batch carries ``lam == 1`` and identical labels.
    """
    x = random_crop(images, cfg.crop_pad, rng)
    x = horizontal_flip(x, cfg.flip_prob, rng)
    labels = np.asarray(labels)
    if x.shape[0] >= 2 and rng.random() < cfg.cutmix_prob:
        lam = sample_lambda(cfg.cutmix_alpha, rng)
        return cutmix(x, labels, lam, rng)
    ident = np.arange(x.shape[0])
    return CutMixBatch(x, labels.copy(), labels.copy(), 1.0, ident, (0, 0, 0, 0))

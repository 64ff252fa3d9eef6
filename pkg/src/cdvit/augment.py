"""Aligned two-level augmentation for self-supervised pretraining.

All geometric and photometric transforms are applied to the detail level;
the context level of an augmented view is then defined as the exact block
mean of the transformed detail image. This keeps the pair alignment
invariant bit-exact for crop/flip-only policies and makes brightness and
contrast jitter consistent across levels (affine maps commute with block
averaging up to float rounding).

Views are float32 in the 0..255 range: uint8 pixel values and their block
means are exactly representable, so the alignment guarantees are unaffected,
and the image pipeline moves half the bytes. The model converts to float64
at patch extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .pyramid import PatchPair, block_mean


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.6, 1.0)  # side-length fraction
    flip_prob: float = 0.5
    brightness: float = 0.12   # additive jitter, fraction of full range
    contrast: float = 0.25     # multiplicative jitter around 1


IDENTITY_POLICY = AugmentationPolicy(crop_scale=(1.0, 1.0), flip_prob=0.0,
                                     brightness=0.0, contrast=0.0)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment; identity when the size
    already matches. Preserves a float32/float64 input dtype."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(img, copy=True)
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    src = np.ascontiguousarray(img, dtype=dtype)
    return cv2.resize(src, (out_w, out_h), interpolation=cv2.INTER_LINEAR)


def augment_view(
    detail_img: np.ndarray,
    mag_ratio: int,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> PatchPair:
    """One augmented view of a pair, derived from its detail level."""
    det = np.asarray(detail_img, dtype=np.float32)
    h, w = det.shape[:2]

    scale = rng.uniform(policy.crop_scale[0], policy.crop_scale[1])
    ch = min(h, max(mag_ratio, int(round(h * scale))))
    cw = min(w, max(mag_ratio, int(round(w * scale))))
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    det = det[r0:r0 + ch, c0:c0 + cw]

    if rng.random() < policy.flip_prob:
        det = det[:, ::-1]

    det = resize_bilinear(det, h, w)

    if policy.contrast > 0.0 or policy.brightness > 0.0:
        gain = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        shift = 255.0 * rng.uniform(-policy.brightness, policy.brightness)
        det *= gain  # in place: resize_bilinear always returns a fresh array
        det += shift + 127.5 * (1.0 - gain)

    ctx = block_mean(det, mag_ratio)
    return PatchPair(context_img=ctx, detail_img=np.ascontiguousarray(det),
                     origin=(0, 0))


def augment_pair(
    pair: PatchPair,
    policy: AugmentationPolicy,
    seed_or_rng: int | np.random.Generator,
) -> tuple[PatchPair, PatchPair]:
    """Two independently augmented, still-aligned views of one pair."""
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    g = pair.mag_ratio
    return (augment_view(pair.detail_img, g, policy, rng),
            augment_view(pair.detail_img, g, policy, rng))

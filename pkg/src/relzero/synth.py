"""Seeded synthetic test scenes.

Structured random images — steep low-frequency color fields overlaid with
solid shapes in a saturated palette, plus fine texture noise — whose patch
means are widely spread in RGB space. Used for demos and for exercising the
pipeline without a real photo corpus.
"""

from __future__ import annotations

import numpy as np

from .imaging import ImageBuffer


def synth_scene(
    seed: int | np.random.SeedSequence,
    side: int = 224,
    band: tuple[float, float] = (0.03, 0.97),
) -> ImageBuffer:
    """One random scene: contrasty color field + 8-13 solid shapes + noise.

    `band` bounds the channel values (an exposure range): narrow bands give
    under/over-exposure-free scenes that photometric attacks map affinely.
    """
    lo_b, hi_b = band
    if not 0.0 <= lo_b < hi_b <= 1.0:
        raise ValueError(f"bad value band {band}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    img = np.empty((side, side, 3))
    for c in range(3):
        field = np.zeros((side, side))
        for _ in range(3):
            fx, fy = rng.uniform(0.3, 1.2, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            field += rng.uniform(0.3, 1.0) * np.cos(
                2.0 * np.pi * (fx * xx + fy * yy) + phase
            )
        lo, hi = field.min(), field.max()
        u = 2.0 * (field - lo) / (hi - lo) - 1.0
        s = np.sign(u) * np.abs(u) ** 0.35  # push channel values to extremes
        img[:, :, c] = (s + 1.0) / 2.0

    for _ in range(int(rng.integers(8, 14))):
        color = rng.beta(0.25, 0.25, size=3)
        cx, cy = rng.uniform(0.05, 0.95, size=2) * side
        if rng.random() < 0.5:
            w = rng.uniform(0.15, 0.55) * side
            h = rng.uniform(0.15, 0.55) * side
            mask = (np.abs(xx * side - cx) < w / 2) & (np.abs(yy * side - cy) < h / 2)
        else:
            r = rng.uniform(0.08, 0.30) * side
            mask = (xx * side - cx) ** 2 + (yy * side - cy) ** 2 < r * r
        img[mask] = color

    img = lo_b + (hi_b - lo_b) * img
    img += rng.normal(0.0, 0.008, size=img.shape)
    return ImageBuffer(np.clip(img, 0.0, 1.0))


def synth_corpus(
    n: int,
    seed: int,
    side: int = 224,
    band: tuple[float, float] | None = (0.03, 0.97),
) -> list[tuple[str, ImageBuffer]]:
    """n scenes with stable ids; per-image seeds are derived from `seed`.

    ``band=None`` draws a random exposure band per scene (width >= 0.25),
    giving a corpus that spans dark, mid, and bright value ranges.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    corpus = []
    for idx in range(n):
        if band is None:
            band_rng = np.random.default_rng(children[idx].spawn(1)[0])
            lo = float(band_rng.uniform(0.02, 0.55))
            hi = float(band_rng.uniform(lo + 0.25, 0.98))
            scene_band = (lo, hi)
        else:
            scene_band = band
        corpus.append(
            (f"scene{idx:03d}", synth_scene(children[idx], side=side, band=scene_band))
        )
    return corpus

"""Image decoding, patch-grid feature extraction, and the embedding exchange format.

Images are held as float64 RGB arrays with values in [0, 1]. Features are
per-patch vectors: either mean-RGB (computed here) or externally supplied
embeddings loaded from the ``RELZERO-EMB`` text format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

EMB_MAGIC = "RELZERO-EMB 1"


@dataclass(frozen=True)
class ImageBuffer:
    """An RGB image as a read-only (height, width, 3) float64 array in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("zero-dimension image")
        if not np.isfinite(px).all():
            raise ValueError("non-finite pixel value")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchFeatureMap:
    """Per-patch feature vectors over a row-major patch grid.

    ``features`` has shape (P, D) with P = grid_rows * grid_cols. Patch 0 is
    the top-left patch; indices advance along each row of the grid.
    """

    features: np.ndarray
    grid_rows: int
    grid_cols: int
    source: str = "mean_rgb"

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] != self.grid_rows * self.grid_cols:
            raise ValueError(
                f"P={feats.shape[0]} does not match grid "
                f"{self.grid_rows}x{self.grid_cols}"
            )
        if not np.isfinite(feats).all():
            raise ValueError("non-finite feature value")
        if self.source not in ("mean_rgb", "external"):
            raise ValueError(f"unknown feature source {self.source!r}")
        if self.source == "mean_rgb":
            if feats.shape[1] != 3:
                raise ValueError("mean_rgb features must have D=3")
            if feats.min() < 0.0 or feats.max() > 1.0:
                raise ValueError("mean_rgb features must lie in [0, 1]")
        feats = np.ascontiguousarray(feats)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def P(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]


def load_image(path: str | Path, target_side: int | None = 224) -> ImageBuffer:
    """Decode a PNG/JPEG file and bilinearly resize it to a square.

    The resize is unconditional (aspect ratio is not preserved) so every
    downstream quantity is computed on a fixed-size canvas. A file already at
    the target size is decoded as-is; ``target_side=None`` keeps the native
    size entirely.
    """
    if target_side is not None and target_side < 1:
        raise ValueError("target_side must be >= 1")
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if target_side is not None and img.size != (target_side, target_side):
                img = img.resize((target_side, target_side), Image.Resampling.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise ValueError(f"unsupported or corrupt image file: {path}") from exc
    return ImageBuffer(arr)


def save_image(img: ImageBuffer, path: str | Path) -> None:
    """Write an ImageBuffer as an 8-bit PNG (values rounded to the 1/255 grid)."""
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")


def extract_mean_rgb(img: ImageBuffer, patch_side: int = 16) -> PatchFeatureMap:
    """Partition the image into non-overlapping patches and average each one.

    Patches are taken row-major from the top-left; feature i is the arithmetic
    mean of that patch's pixels per channel, so D = 3 and values stay in [0, 1].
    """
    if patch_side < 1:
        raise ValueError("patch_side must be >= 1")
    h, w = img.height, img.width
    if h % patch_side or w % patch_side:
        raise ValueError(
            f"image {w}x{h} not divisible by patch_side {patch_side}"
        )
    rows, cols = h // patch_side, w // patch_side
    blocks = img.pixels.reshape(rows, patch_side, cols, patch_side, 3)
    means = blocks.mean(axis=(1, 3)).reshape(rows * cols, 3)
    return PatchFeatureMap(means, rows, cols, source="mean_rgb")


def save_embeddings(fm: PatchFeatureMap, path: str | Path) -> None:
    """Write a feature map in the RELZERO-EMB v1 text format.

    Layout: line 1 is the magic, line 2 "P D", line 3 "R C" (grid shape),
    then P rows of D space-separated reals at 9 significant digits. UTF-8,
    LF line endings.
    """
    lines = [EMB_MAGIC, f"{fm.P} {fm.D}", f"{fm.grid_rows} {fm.grid_cols}"]
    for row in fm.features:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def load_embeddings(path: str | Path) -> PatchFeatureMap:
    """Parse a RELZERO-EMB v1 file into a PatchFeatureMap with source='external'."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != EMB_MAGIC:
        raise ValueError(f"malformed header: expected {EMB_MAGIC!r}")
    if len(lines) < 3:
        raise ValueError("malformed header: missing size or grid line")
    try:
        p_count, dim = (int(tok) for tok in lines[1].split())
    except ValueError as exc:
        raise ValueError(f"malformed header: bad size line {lines[1]!r}") from exc
    try:
        rows, cols = (int(tok) for tok in lines[2].split())
    except ValueError as exc:
        raise ValueError(f"malformed header: bad grid line {lines[2]!r}") from exc
    if p_count < 1 or dim < 1:
        raise ValueError("malformed header: P and D must be positive")
    if rows * cols != p_count:
        raise ValueError(f"grid {rows}x{cols} does not match P={p_count}")

    data_lines = [ln for ln in lines[3:] if ln.strip()]
    if len(data_lines) != p_count:
        raise ValueError(
            f"row count mismatch: header says P={p_count}, found {len(data_lines)}"
        )
    feats = np.empty((p_count, dim), dtype=np.float64)
    for i, ln in enumerate(data_lines):
        toks = ln.split()
        if len(toks) != dim:
            raise ValueError(f"row {i}: expected {dim} values, found {len(toks)}")
        try:
            vals = [float(tok) for tok in toks]
        except ValueError as exc:
            raise ValueError(f"row {i}: non-numeric entry") from exc
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"row {i}: non-finite value")
        feats[i] = vals
    return PatchFeatureMap(feats, rows, cols, source="external")

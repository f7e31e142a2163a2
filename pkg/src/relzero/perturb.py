"""Seeded image perturbations: the evaluation attack suite and the surrogate editor.

Every attack is a pure function of (image, config): stochastic kinds draw from
a generator seeded by the config, with a frozen draw order, so outputs are
bit-reproducible. Outputs keep the input dimensions and are clipped to [0, 1].
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .imaging import ImageBuffer

KINDS = (
    "cropout",
    "rescale",
    "contrast",
    "brightness",
    "gaussian_noise",
    "salt_pepper",
    "jpeg",
    "rotation",
    "surrogate_edit",
)

_ALIASES = {
    "cropout": "cropout",
    "rescale": "rescale",
    "scaling": "rescale",
    "contrast": "contrast",
    "brightness": "brightness",
    "gaussian": "gaussian_noise",
    "gaussian_noise": "gaussian_noise",
    "sp": "salt_pepper",
    "salt_pepper": "salt_pepper",
    "jpeg": "jpeg",
    "rot": "rotation",
    "rotation": "rotation",
    "surrogate": "surrogate_edit",
    "surrogate_edit": "surrogate_edit",
}

_SHORT = {"gaussian_noise": "gaussian", "salt_pepper": "sp", "rotation": "rot",
          "surrogate_edit": "surrogate"}

# kinds whose strength parameter may be omitted (value -> documented default)
_DEFAULTS = {"cropout": 0.5, "rescale": 0.5, "gaussian_noise": 0.10}


@dataclass(frozen=True)
class AttackConfig:
    """One perturbation: a kind, its single strength value, and a seed.

    Ranges: cropout area (0,1); rescale factor (0,1]; contrast and brightness
    factors [0.5, 2.0]; gaussian std (0,1]; salt&pepper probability (0,1);
    jpeg quality integer 1..100; rotation degrees [-360, 360]; surrogate_edit
    takes no value.
    """

    kind: str
    value: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        v = self.value
        if self.kind == "surrogate_edit":
            if v is not None:
                raise ValueError("surrogate_edit takes no strength value")
            return
        if v is None:
            if self.kind not in _DEFAULTS:
                raise ValueError(f"{self.kind} requires a strength value")
            object.__setattr__(self, "value", float(_DEFAULTS[self.kind]))
            return
        v = float(v)
        ok = {
            "cropout": 0.0 < v < 1.0,
            "rescale": 0.0 < v <= 1.0,
            "contrast": 0.5 <= v <= 2.0,
            "brightness": 0.5 <= v <= 2.0,
            "gaussian_noise": 0.0 < v <= 1.0,
            "salt_pepper": 0.0 < v < 1.0,
            "jpeg": v == int(v) and 1 <= v <= 100,
            "rotation": -360.0 <= v <= 360.0,
        }[self.kind]
        if not ok:
            raise ValueError(f"parameter out of range for {self.kind}: {v}")
        object.__setattr__(self, "value", v)

    def label(self) -> str:
        """CLI-addressable spec string, e.g. 'contrast:2' or 'sp:0.03'."""
        name = _SHORT.get(self.kind, self.kind)
        if self.kind == "surrogate_edit":
            return name
        return f"{name}:{self.value:g}"


def parse_attack_spec(spec: str, seed: int = 0) -> AttackConfig:
    """Parse 'kind[:value[:seed]]' into a validated AttackConfig."""
    parts = spec.strip().split(":")
    if not parts or not parts[0]:
        raise ValueError(f"empty attack spec {spec!r}")
    kind = _ALIASES.get(parts[0].lower())
    if kind is None:
        raise ValueError(f"unknown attack kind {parts[0]!r}")
    value = None
    if len(parts) >= 2 and parts[1] != "":
        try:
            value = float(parts[1])
        except ValueError as exc:
            raise ValueError(f"bad strength value in {spec!r}") from exc
    if len(parts) >= 3:
        try:
            seed = int(parts[2])
        except ValueError as exc:
            raise ValueError(f"bad seed in {spec!r}") from exc
    if len(parts) > 3:
        raise ValueError(f"too many fields in attack spec {spec!r}")
    return AttackConfig(kind, value, seed)


def attack_matrix(seed: int = 0) -> list[AttackConfig]:
    """The canonical evaluation grid of common distortions, in a fixed order."""
    grid = [
        ("cropout", 0.5),
        ("rescale", 0.5),
        ("contrast", 0.5),
        ("contrast", 2.0),
        ("brightness", 0.5),
        ("brightness", 2.0),
        ("gaussian_noise", 0.10),
        ("salt_pepper", 0.01),
        ("salt_pepper", 0.03),
        ("jpeg", 90),
        ("jpeg", 50),
        ("rotation", 3),
        ("rotation", 5),
    ]
    return [AttackConfig(kind, value, seed) for kind, value in grid]


def _blur3x3(arr: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable 3x3 Gaussian blur with edge padding."""
    w = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
    w /= w.sum()
    h, wid = arr.shape[:2]
    pad = np.pad(arr, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(arr)
    for dy in range(3):
        for dx in range(3):
            out += w[dy] * w[dx] * pad[dy : dy + h, dx : dx + wid]
    return out


def _per_channel(arr: np.ndarray, fn) -> np.ndarray:
    chans = [fn(Image.fromarray(arr[:, :, c].astype(np.float32), mode="F"))
             for c in range(3)]
    return np.stack([np.asarray(ch, dtype=np.float64) for ch in chans], axis=2)


def _rect_dims(rng: np.random.Generator, w: int, h: int, area_fraction: float,
               aspect_lo: float, aspect_hi: float) -> tuple[int, int, int, int]:
    """Seeded rectangle of roughly area_fraction * w * h; returns x0, y0, rw, rh."""
    target = area_fraction * w * h
    aspect = rng.uniform(aspect_lo, aspect_hi)
    rw = int(np.clip(round(math.sqrt(target * aspect)), 1, w))
    rh = int(np.clip(round(target / rw), 1, h))
    x0 = int(rng.integers(0, w - rw + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    return x0, y0, rw, rh


def apply_attack(img: ImageBuffer, cfg: AttackConfig) -> ImageBuffer:
    """Apply one perturbation; returns a new buffer of the same size."""
    arr = img.pixels
    h, w = img.height, img.width
    rng = np.random.default_rng(cfg.seed)
    kind, v = cfg.kind, cfg.value

    if kind == "cropout":
        x0, y0, rw, rh = _rect_dims(rng, w, h, v, 0.5, 2.0)
        out = arr.copy()
        out[y0 : y0 + rh, x0 : x0 + rw, :] = 0.0
    elif kind == "rescale":
        dw, dh = max(1, round(w * v)), max(1, round(h * v))
        if (dw, dh) == (w, h):
            out = arr.copy()
        else:
            out = _per_channel(
                arr,
                lambda im: im.resize((dw, dh), Image.Resampling.BILINEAR).resize(
                    (w, h), Image.Resampling.BILINEAR
                ),
            )
    elif kind == "contrast":
        out = (arr - 0.5) * v + 0.5
    elif kind == "brightness":
        out = arr * v
    elif kind == "gaussian_noise":
        out = arr + rng.normal(0.0, v, size=arr.shape)
    elif kind == "salt_pepper":
        corrupt = rng.random((h, w)) < v
        salt = rng.random((h, w)) < 0.5
        out = arr.copy()
        out[corrupt & salt] = 1.0
        out[corrupt & ~salt] = 0.0
    elif kind == "jpeg":
        u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(u8, mode="RGB").save(buf, format="JPEG", quality=int(v))
        buf.seek(0)
        with Image.open(buf) as decoded:
            out = np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0
    elif kind == "rotation":
        out = _per_channel(
            arr,
            lambda im: im.rotate(v, resample=Image.Resampling.BILINEAR, fillcolor=0.0),
        )
    elif kind == "surrogate_edit":
        out = _blur3x3(arr)
        out = out + rng.normal(0.0, 0.02, size=arr.shape)
        frac = rng.uniform(0.10, 0.30)
        x0, y0, rw, rh = _rect_dims(rng, w, h, frac, 0.75, 4.0 / 3.0)
        offset = rng.uniform(-0.3, 0.3, size=3)
        region = _blur3x3(out[y0 : y0 + rh, x0 : x0 + rw, :]) + offset
        out[y0 : y0 + rh, x0 : x0 + rw, :] = region
    else:  # pragma: no cover - guarded by AttackConfig
        raise ValueError(f"unknown attack kind {kind!r}")

    return ImageBuffer(np.clip(out, 0.0, 1.0))


def surrogate_edit(img: ImageBuffer, seed: int) -> ImageBuffer:
    """The stand-in for generative reconstruction used to label stable pairs."""
    return apply_attack(img, AttackConfig("surrogate_edit", seed=seed))


def with_seed(cfg: AttackConfig, seed: int) -> AttackConfig:
    return replace(cfg, seed=seed)

"""Test-time ensembling: five overlapping crops of an expanded resize.

The image is resized to (input_size + e)^2 and cropped at the center and the
four corners; per-crop logits are averaged in fixed index order. Resizing is
bilinear with the corner-aligned-off convention (source coordinate
(dst + 0.5) * scale - 0.5), which makes a same-size resize an exact identity,
so e = 0 reproduces single-crop evaluation bit-exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

CROP_COUNT = 5
DEFAULT_EXPAND = 24


@dataclass(frozen=True)
class TteConfig:
    expand: int = DEFAULT_EXPAND
    enabled: bool = True

    def __post_init__(self):
        if self.expand < 0:
            raise ConfigError(f"expand must be >= 0, got {self.expand}")

    @staticmethod
    def off() -> "TteConfig":
        return TteConfig(expand=0, enabled=False)

    def to_json(self) -> dict:
        return {"expand": self.expand, "enabled": self.enabled}

    @staticmethod
    def from_json(doc: dict) -> "TteConfig":
        return TteConfig(**doc)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Channel-wise bilinear resize of a (C, H, W) image; float32 output."""
    out_w = out_h if out_w is None else out_w
    img = image.astype(np.float32)
    c, in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def src_coords(n_out, n_in):
        coords = (np.arange(n_out, dtype=np.float32) + 0.5) * (n_in / n_out) - 0.5
        return np.clip(coords, 0.0, n_in - 1.0)

    ys, xs = src_coords(out_h, in_h), src_coords(out_w, in_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)

    rows0 = img[:, y0, :]
    rows1 = img[:, y1, :]
    rows = rows0 * (1.0 - wy)[None, :, None] + rows1 * wy[None, :, None]
    cols0 = rows[:, :, x0]
    cols1 = rows[:, :, x1]
    return cols0 * (1.0 - wx)[None, None, :] + cols1 * wx[None, None, :]


def crop_offsets(e: int) -> list[tuple[int, int]]:
    """(row, col) origins: center, top-left, top-right, bottom-left, bottom-right."""
    return [(e // 2, e // 2), (0, 0), (0, e), (e, 0), (e, e)]


def five_crops(image: np.ndarray, input_size: int, e: int) -> list[np.ndarray]:
    """Resize to (input_size + e)^2 and return the five crops, in fixed order."""
    if e < 0:
        raise ConfigError(f"expand must be >= 0, got {e}")
    resized = bilinear_resize(image, input_size + e)
    crops = []
    for r, c in crop_offsets(e):
        crops.append(resized[:, r : r + input_size, c : c + input_size].copy())
    return crops


def ensemble_logits(crops_logits) -> np.ndarray:
    """Arithmetic mean of exactly five per-crop logit vectors."""
    rows = [np.asarray(z) for z in crops_logits]
    if len(rows) != CROP_COUNT:
        raise ValueError(f"ensemble requires exactly {CROP_COUNT} crop logits, got {len(rows)}")
    if any(r.shape != rows[0].shape for r in rows):
        raise ValueError(f"crop logits disagree in shape: {[r.shape for r in rows]}")
    total = rows[0].astype(np.float64, copy=True)
    for r in rows[1:]:
        total += r
    return (total / CROP_COUNT).astype(rows[0].dtype)


def validate_expand(e: int, patch_size: int) -> str | None:
    """Warn (never error) when crops would share patch grids."""
    if e > 0 and e % patch_size == 0:
        msg = (
            f"expand {e} is a multiple of the patch size {patch_size}; "
            "the five crops will share most patches and lose diversity"
        )
        warnings.warn(msg, stacklevel=2)
        return msg
    return None

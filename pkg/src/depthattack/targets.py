"""Target depth maps built from a model's own prediction.

All constructions take a depth map ``d`` of shape [H,W] or [1,H,W] (or a
leading batch axis for the purely elementwise ones) and return a map of the
same shape, clamped to the model's representable range.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .depth_net import DepthModel, predict
from .errors import ConfigError, DataError, EmptyMaskWarning, ShapeError
from .scenegen import Category, Scene

ALPHA_RANGE = (-0.45, 0.45)
SCALE_ALPHAS = (-0.10, -0.05, 0.05, 0.10)


def _clamp(d: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    return np.clip(d, np.float32(d_min), np.float32(d_max)).astype(np.float32)


def scale_target(d, alpha: float, d_min: float = 1.0, d_max: float = 80.0) -> np.ndarray:
    """(1 + alpha) * d, clamped."""
    if alpha <= -1:
        raise ConfigError(f"scale factor 1+alpha must be positive, got alpha={alpha}")
    d = np.asarray(d, dtype=np.float32)
    return _clamp((1 + alpha) * d, d_min, d_max)


def flip_target(d, axis: str) -> np.ndarray:
    """Mirror left-right (``"H"``) or top-bottom (``"V"``)."""
    d = np.asarray(d)
    if axis == "H":
        return d[..., ::-1].copy()
    if axis == "V":
        return d[..., ::-1, :].copy()
    raise ConfigError(f"flip axis must be 'H' or 'V', got {axis!r}")


def preset_target(model: DepthModel, other_image, like=None) -> np.ndarray:
    """The model's prediction for a different image, used as the target."""
    other = np.asarray(other_image, dtype=np.float32)
    if like is not None and np.asarray(like).shape[-2:] != other.shape[-2:]:
        raise ShapeError(f"preset image {other.shape} does not match {np.asarray(like).shape}")
    return predict(model, other)


def preset_partners(n: int, seed: int = 0) -> np.ndarray:
    """For each of n scenes, a different scene drawn at random to supply its target."""
    if n < 2:
        raise ConfigError("preset targets need at least two scenes")
    rng = np.random.default_rng(seed)
    draw = rng.integers(0, n - 1, size=n)
    return np.where(draw >= np.arange(n), draw + 1, draw)


def _check_mask(d: np.ndarray, mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != d.shape[-2:]:
        raise ShapeError(f"mask shape {m.shape} does not match depth {d.shape}")
    if not np.isin(m, (0, 1)).all():
        raise DataError("mask must be binary")
    return m.astype(np.float32)


def category_scale_target(d, mask, alpha: float, d_min: float = 1.0, d_max: float = 80.0) -> np.ndarray:
    """Scale only the masked pixels: (1 - M) * d + (1 + alpha) * M * d."""
    if alpha <= -1:
        raise ConfigError(f"scale factor 1+alpha must be positive, got alpha={alpha}")
    d = np.asarray(d, dtype=np.float32)
    m = _check_mask(d, mask)
    if not m.any():
        warnings.warn("category mask is empty; target equals the prediction", EmptyMaskWarning,
                      stacklevel=2)
    return _clamp((1 - m) * d + (1 + alpha) * m * d, d_min, d_max)


def _interp_rows(d2: np.ndarray, hole: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fill holes row by row; returns (filled, still_missing)."""
    out = d2.copy()
    missing = np.zeros_like(hole)
    cols = np.arange(d2.shape[1])
    for r in np.flatnonzero(hole.any(axis=1)):
        known = ~hole[r]
        if not known.any():
            missing[r] = True
            continue
        # np.interp holds the end value beyond the outermost known sample
        out[r, hole[r]] = np.interp(cols[hole[r]], cols[known], d2[r, known])
    return out, missing


def remove_instance_target(d, mask) -> np.ndarray:
    """Erase the masked instance by interpolating depth from its contour.

    Row-wise linear interpolation between the nearest unmasked pixels on the
    left and right; a one-sided row holds its single neighbour.  Rows that
    are fully masked fall back to column-wise interpolation, and anything
    still unresolved takes the value of the nearest unmasked pixel.
    """
    d = np.asarray(d, dtype=np.float32)
    m = _check_mask(d, mask).astype(bool)
    if m.all():
        raise DataError("mask covers the whole image; nothing to interpolate from")
    squeeze = d.ndim == 3
    d2 = d[0] if squeeze else d
    if d2.ndim != 2:
        raise ShapeError(f"remove_instance_target expects [H,W] or [1,H,W], got {d.shape}")
    src = d2.astype(np.float64)
    filled, missing = _interp_rows(src, m)
    if missing.any():
        by_col, still = _interp_rows(src.T, m.T)
        still = still.T
        take = missing & ~still
        filled[take] = by_col.T[take]
        if still.any():
            idx = ndimage.distance_transform_edt(m, return_distances=False, return_indices=True)
            nearest = src[idx[0], idx[1]]
            filled[still] = nearest[still]
    out = np.where(m, filled, src).astype(np.float32)
    out = np.where(m, out, d2)  # bit-identical outside the mask
    return out[None] if squeeze else out


def shift_mask(mask, dcol: int, drow: int) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    rows, cols = np.nonzero(m)
    h, w = m.shape
    r2, c2 = rows + drow, cols + dcol
    if len(rows) and (r2.min() < 0 or c2.min() < 0 or r2.max() >= h or c2.max() >= w):
        raise ConfigError(f"shift ({dcol},{drow}) moves the mask outside the {h}x{w} canvas")
    out = np.zeros_like(m)
    out[r2, c2] = True
    return out


def translate_instance_target(d, mask, dcol: int, drow: int) -> np.ndarray:
    """Remove the instance, then paste its original depth values shifted."""
    d = np.asarray(d, dtype=np.float32)
    m = _check_mask(d, mask).astype(bool)
    shift_mask(m, dcol, drow)  # bounds check
    out = remove_instance_target(d, m)
    o2 = out[0] if out.ndim == 3 else out
    d2 = d[0] if d.ndim == 3 else d
    rows, cols = np.nonzero(m)
    o2[rows + drow, cols + dcol] = d2[rows, cols]
    return out


def mask_from(label_map, selector) -> np.ndarray:
    """Binary float32 mask for a semantic category or a set of instance ids.

    ``selector`` is a :class:`Category` (or its name) to select from a
    semantic map, or an int / iterable of ints naming instance ids.
    """
    lm = np.asarray(label_map)
    if isinstance(selector, str):
        try:
            selector = Category[selector.upper()]
        except KeyError:
            raise ConfigError(f"unknown category {selector!r}") from None
    if isinstance(selector, Category):
        return (lm == int(selector)).astype(np.float32)
    ids = [selector] if np.isscalar(selector) else list(selector)
    present = set(np.unique(lm).tolist())
    for i in ids:
        if int(i) == 0 or int(i) not in present:
            raise ConfigError(f"instance id {i} not present in the map")
    return np.isin(lm, ids).astype(np.float32)


def category_mask(semantic, category) -> np.ndarray:
    if isinstance(category, (int, np.integer)) and not isinstance(category, Category):
        if int(category) not in {c.value for c in Category}:
            raise ConfigError(f"unknown category id {category}")
        category = Category(int(category))
    return mask_from(semantic, category)


def complement(mask) -> np.ndarray:
    return (1 - np.asarray(mask, dtype=np.float32)).astype(np.float32)


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class TargetSpec:
    """Declarative target.  ``kind`` is one of scale, fliph, flipv, preset,
    category, remove, translate."""

    kind: str
    alpha: float = 0.0
    category: str | None = None
    ids: tuple[int, ...] = ()
    dcol: int = 0
    drow: int = 0
    preset_index: int = 0

    KINDS = ("scale", "fliph", "flipv", "preset", "category", "remove", "translate")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown target kind {self.kind!r}")
        if self.kind in ("scale", "category") and not ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]:
            raise ConfigError(f"alpha {self.alpha} outside {ALPHA_RANGE}")
        if self.kind == "category" and self.category is None:
            raise ConfigError("category target needs a category name")
        if self.kind in ("remove", "translate") and not self.ids:
            raise ConfigError(f"{self.kind} target needs instance ids")
        if self.kind == "translate" and len(self.ids) != 1:
            raise ConfigError("translation moves exactly one instance")

    @property
    def label(self) -> str:
        if self.kind == "scale":
            return f"scale{self.alpha:+.2f}"
        if self.kind == "category":
            return f"category-{self.category}{self.alpha:+.2f}"
        if self.kind in ("remove", "translate"):
            extra = f"@{self.dcol},{self.drow}" if self.kind == "translate" else ""
            return f"{self.kind}-{'-'.join(map(str, self.ids))}{extra}"
        if self.kind == "preset":
            return f"preset-{self.preset_index}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "TargetSpec":
        """Parse ``scale:+0.10``, ``fliph``, ``flipv``, ``preset:3``,
        ``category:Vehicle:0.10``, ``remove:1,2``, ``translate:1:10:-5``."""
        parts = text.strip().split(":")
        kind = parts[0].lower()
        try:
            if kind == "scale":
                return cls("scale", alpha=float(parts[1]))
            if kind in ("fliph", "flipv") and len(parts) == 1:
                return cls(kind)
            if kind == "preset":
                return cls("preset", preset_index=int(parts[1]))
            if kind == "category":
                return cls("category", category=parts[1], alpha=float(parts[2]))
            if kind == "remove":
                return cls("remove", ids=tuple(int(i) for i in parts[1].split(",")))
            if kind == "translate":
                return cls("translate", ids=(int(parts[1]),), dcol=int(parts[2]), drow=int(parts[3]))
        except (IndexError, ValueError):
            pass
        raise ConfigError(f"cannot parse target spec {text!r}")


def build_target(spec: TargetSpec, model: DepthModel, scene: Scene, pred=None,
                 preset_scene: Scene | None = None) -> np.ndarray:
    """Target [1,H,W] for one scene, relative to ``model``'s prediction."""
    d = predict(model, scene.image) if pred is None else np.asarray(pred, dtype=np.float32)
    lo, hi = model.d_min, model.d_max
    if spec.kind == "scale":
        return scale_target(d, spec.alpha, lo, hi)
    if spec.kind == "fliph":
        return flip_target(d, "H")
    if spec.kind == "flipv":
        return flip_target(d, "V")
    if spec.kind == "preset":
        if preset_scene is None:
            raise ConfigError("preset target needs the other scene")
        return preset_target(model, preset_scene.image, like=scene.image)
    if spec.kind == "category":
        m = mask_from(scene.semantic, spec.category)
        return category_scale_target(d, m, spec.alpha, lo, hi)
    m = mask_from(scene.instance, spec.ids)
    if spec.kind == "remove":
        return _clamp(remove_instance_target(d, m), lo, hi)
    return _clamp(translate_instance_target(d, m, spec.dcol, spec.drow), lo, hi)

"""Synthetic road scenes with exact depth, semantic and instance labels.

A pinhole camera looks over a flat road.  Above the horizon everything is
sky at the far depth limit; below it the road depth follows
``depth(row) = focal * cam_height / (row - horizon)``.  Objects are upright
rectangles standing on the road; each has a single depth, so occlusion is a
per-pixel z-test.  Colors fade toward a haze color with distance, which is
the main monocular cue a small network can pick up.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import pnm
from .errors import ConfigError, DataError
from .tensor_graph import load_dtns, save_dtns


class Category(IntEnum):
    SKY = 0
    FLAT = 1
    CONSTRUCTION = 2
    VEHICLE = 3
    HUMAN = 4
    NATURE = 5
    TRAFFIC = 6


OBJECT_CATEGORIES = (Category.CONSTRUCTION, Category.VEHICLE, Category.HUMAN,
                     Category.NATURE, Category.TRAFFIC)
INSTANCE_CATEGORIES = (Category.VEHICLE, Category.HUMAN)

BASE_COLORS = {
    Category.SKY: (0.55, 0.70, 0.92),
    Category.FLAT: (0.30, 0.30, 0.32),
    Category.CONSTRUCTION: (0.62, 0.45, 0.35),
    Category.VEHICLE: (0.75, 0.12, 0.12),
    Category.HUMAN: (0.90, 0.72, 0.20),
    Category.NATURE: (0.15, 0.50, 0.18),
    Category.TRAFFIC: (0.85, 0.85, 0.10),
}
HAZE_COLOR = np.array([0.78, 0.80, 0.84])

# (height range, width range) in meters
OBJECT_SIZES = {
    Category.CONSTRUCTION: ((5.0, 12.0), (5.0, 14.0)),
    Category.VEHICLE: ((1.4, 2.0), (1.8, 4.5)),
    Category.HUMAN: ((1.5, 1.9), (0.5, 0.8)),
    Category.NATURE: ((3.0, 8.0), (1.5, 5.0)),
    Category.TRAFFIC: ((2.2, 3.5), (0.3, 0.9)),
}


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 128
    horizon_row: int = 24
    focal: float = 100.0
    cam_height: float = 1.6
    d_min: float = 1.0
    # far limit of the scene (sky); kept below the networks' 80 m output
    # ceiling so far regions do not sit on the sigmoid asymptote
    d_max: float = 50.0
    min_objects: int = 3
    max_objects: int = 8
    object_depth: tuple = (5.0, 40.0)
    haze_strength: float = 1.0
    noise_std: float = 0.02
    texture_amp: float = 0.05
    tint_std: float = 0.005

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"canvas too small: {self.height}x{self.width}")
        if not 0 < self.horizon_row < self.height - 1:
            raise ConfigError("horizon_row must lie strictly inside the image")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if self.max_objects > self.capacity:
            raise DataError(f"{self.max_objects} objects exceed canvas capacity {self.capacity}")

    @property
    def capacity(self) -> int:
        # rough bound: every object needs a few columns of its own to stay visible
        return self.width // 4


@dataclass
class Scene:
    image: np.ndarray      # float32 [3,H,W], in [0,1], quantized to 1/255
    depth_gt: np.ndarray   # float32 [1,H,W], meters
    semantic: np.ndarray   # uint8 [H,W], Category values
    instance: np.ndarray   # uint8 [H,W], 0 = none
    seed: int
    objects: list = field(default_factory=list)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.image, self.depth_gt, self.semantic, self.instance):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @property
    def instance_ids(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.instance) if i != 0)


def ground_depth(params: SceneParams) -> np.ndarray:
    """Per-row road depth, d_max at and above the horizon."""
    rows = np.arange(params.height, dtype=np.float64)
    below = rows - params.horizon_row
    with np.errstate(divide="ignore"):
        d = np.where(below > 0, params.focal * params.cam_height / np.maximum(below, 1e-9), params.d_max)
    return np.clip(d, params.d_min, params.d_max)


def haze_amount(depth, params: SceneParams) -> np.ndarray:
    """Blend weight toward the haze color; linear in log depth, so a fixed
    relative change of depth shifts the color by the same amount everywhere."""
    return params.haze_strength * np.log(depth / params.d_min) / np.log(params.d_max / params.d_min)


def _sample_objects(rng: np.random.Generator, params: SceneParams) -> list[dict]:
    n = int(rng.integers(params.min_objects, params.max_objects + 1))
    objs = []
    for _ in range(n):
        cat = OBJECT_CATEGORIES[int(rng.integers(len(OBJECT_CATEGORIES)))]
        (h_lo, h_hi), (w_lo, w_hi) = OBJECT_SIZES[cat]
        z = float(rng.uniform(*params.object_depth))
        h_m, w_m = rng.uniform(h_lo, h_hi), rng.uniform(w_lo, w_hi)
        bottom = params.horizon_row + params.focal * params.cam_height / z
        h_px = max(1, int(round(params.focal * h_m / z)))
        w_px = max(1, int(round(params.focal * w_m / z)))
        bottom = min(int(round(bottom)), params.height - 1)
        col = int(rng.integers(-w_px // 2, params.width - w_px // 2))
        objs.append(dict(category=cat, depth=z, top=bottom - h_px + 1, bottom=bottom,
                         left=col, right=col + w_px - 1,
                         tint=rng.normal(0.0, params.tint_std, size=3),
                         period=int(rng.integers(2, 6))))
    return objs


def render(params: SceneParams, objects: list[dict], rng: np.random.Generator, seed: int = 0) -> Scene:
    """Composite sky, road and objects; nearer objects win overlapping pixels."""
    H, W = params.height, params.width
    road = ground_depth(params)
    depth = np.repeat(road[:, None], W, axis=1)
    semantic = np.where(np.arange(H)[:, None] > params.horizon_row, Category.FLAT, Category.SKY)
    semantic = np.repeat(semantic, W, axis=1).astype(np.uint8)
    instance = np.zeros((H, W), dtype=np.uint8)
    color = np.empty((H, W, 3))
    color[:] = BASE_COLORS[Category.FLAT]
    sky_rows = semantic == Category.SKY
    # faint vertical gradient in the sky, stays constant in depth
    sky_grad = (np.arange(H)[:, None, None] / H) * np.array([0.15, 0.10, 0.04])
    sky = np.asarray(BASE_COLORS[Category.SKY]) + sky_grad
    color = np.where(sky_rows[..., None], np.broadcast_to(sky, (H, W, 3)), color)
    # lane marking down the middle of the road
    cols = np.arange(W)
    center = W / 2
    for r in range(params.horizon_row + 1, H):
        half = max(0.5, 0.15 * (r - params.horizon_row) / 4)
        lane = np.abs(cols - center) <= half
        if (r // 3) % 2 == 0:
            color[r, lane] = (0.85, 0.85, 0.85)

    next_id = 1
    zbuf = depth.copy()
    zbuf[sky_rows] = np.inf
    order = np.argsort([-o["depth"] for o in objects], kind="stable")
    for idx in order:
        o = objects[idx]
        if o["category"] in INSTANCE_CATEGORIES:
            o["instance_id"] = next_id
            next_id += 1
        else:
            o["instance_id"] = 0
    for o in objects:
        t, b = max(o["top"], 0), min(o["bottom"], H - 1)
        l, r = max(o["left"], 0), min(o["right"], W - 1)
        if t > b or l > r:
            continue
        region = (slice(t, b + 1), slice(l, r + 1))
        z = o["depth"]
        win = zbuf[region] > z
        if not win.any():
            continue
        yy, xx = np.mgrid[t:b + 1, l:r + 1]
        stripes = ((xx // o["period"] + yy // o["period"]) % 2) * params.texture_amp
        obj_color = np.asarray(BASE_COLORS[o["category"]]) + o["tint"] + stripes[..., None]
        zbuf[region] = np.where(win, z, zbuf[region])
        depth[region] = np.where(win, z, depth[region])
        semantic[region] = np.where(win, int(o["category"]), semantic[region])
        instance[region] = np.where(win, o["instance_id"], instance[region])
        color[region] = np.where(win[..., None], obj_color, color[region])

    depth = np.clip(depth, params.d_min, params.d_max)
    depth[semantic == Category.SKY] = params.d_max
    h = haze_amount(depth, params)[..., None]
    hazed = color * (1 - h) + HAZE_COLOR * h
    hazed = hazed + rng.normal(0.0, params.noise_std, size=hazed.shape)
    img = np.clip(hazed, 0.0, 1.0).transpose(2, 0, 1)
    img = pnm.to_bytes(img).astype(np.float32) / np.float32(255.0)
    return Scene(image=img, depth_gt=depth[None].astype(np.float32), semantic=semantic,
                 instance=instance, seed=seed, objects=objects)


def generate(seed: int, params: SceneParams | None = None) -> Scene:
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)
    objects = _sample_objects(rng, params)
    return render(params, objects, rng, seed)


TEST_SEED_OFFSET = 500_000


def scene_seeds(seed: int, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must both be >= 1")
    if max(n_train, n_test) > TEST_SEED_OFFSET:
        raise ConfigError("dataset too large for the seed layout")
    base = seed * 1_000_000
    train = [base + i for i in range(n_train)]
    test = [base + TEST_SEED_OFFSET + i for i in range(n_test)]
    return train, test


def make_dataset(seed: int, n_train: int = 200, n_test: int = 20,
                 params: SceneParams | None = None) -> tuple[list[Scene], list[Scene]]:
    train_seeds, test_seeds = scene_seeds(seed, n_train, n_test)
    return ([generate(s, params) for s in train_seeds],
            [generate(s, params) for s in test_seeds])


# ---------------------------------------------------------------- disk format


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pnm.write_ppm(d / "image.ppm", scene.image)
    save_dtns(d / "depth.dtns", scene.depth_gt)
    pnm.write_pgm(d / "semantic.pgm", scene.semantic)
    pnm.write_pgm(d / "instance.pgm", scene.instance)


def load_scene(directory, seed: int = 0) -> Scene:
    d = Path(directory)
    return Scene(image=pnm.read_ppm(d / "image.ppm"), depth_gt=load_dtns(d / "depth.dtns"),
                 semantic=pnm.read_pgm(d / "semantic.pgm"), instance=pnm.read_pgm(d / "instance.pgm"),
                 seed=seed)


def save_dataset(train: list[Scene], test: list[Scene], directory, params: SceneParams,
                 seed: int) -> Path:
    root = Path(directory)
    lines = [f"# synthetic road scenes, seed={seed}",
             f"params {params!r}",
             "split name seed checksum"]
    for split, scenes in (("train", train), ("test", test)):
        for i, sc in enumerate(scenes):
            name = f"{split}/{i:04d}"
            save_scene(sc, root / name)
            lines.append(f"{split} {name} {sc.seed} {sc.checksum()}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(directory) -> tuple[list[Scene], list[Scene]]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    train, test = [], []
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if len(parts) != 4 or parts[0] not in ("train", "test"):
            continue
        split, name, seed, _ = parts
        (train if split == "train" else test).append(load_scene(os.path.join(root, name), int(seed)))
    if not train or not test:
        raise DataError(f"{manifest}: dataset has an empty split")
    return train, test

"""Two defenses: Gaussian blur at test time and adversarial fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor_graph as tg
from .attack import AttackConfig, craft
from .depth_net import DepthModel, TrainConfig, fit, forward_depth, predict
from .errors import ConfigError, DataError
from .eval_metrics import are_per_sample, perturbed
from .targets import SCALE_ALPHAS, scale_target
from .tensor_graph import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlurConfig:
    sigma: float = 1.0
    radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"blur sigma must be positive, got {self.sigma}")
        if self.radius is not None and self.radius < 0:
            raise ConfigError("blur radius must be >= 0")

    @property
    def kernel_radius(self) -> int:
        return int(math.ceil(3 * self.sigma)) if self.radius is None else self.radius


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    if r == 0:
        return a * k[0]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad, mode="reflect")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for i, w in enumerate(k):
        out += w * np.take(ap, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(image, cfg: BlurConfig = BlurConfig()) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, reflect-padded."""
    img = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel(cfg.sigma, cfg.kernel_radius)
    out = _blur_axis(_blur_axis(img, k, img.ndim - 1), k, img.ndim - 2)
    return out.astype(np.float32)


def eval_under_blur(model: DepthModel, x, v, d_t, cfg: BlurConfig = BlurConfig()) -> np.ndarray:
    """Per-sample ARE of f(blur(clamp(x + v))) against d_t."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = gaussian_blur(perturbed(x, v), cfg)
    pred = predict(model, xb)
    if single:
        pred, d_t = pred[None], np.asarray(d_t)[None]
    return are_per_sample(pred, d_t)


# ---------------------------------------------------------------- adversarial training


@dataclass(frozen=True)
class AdvTrainConfig:
    alphas: tuple = SCALE_ALPHAS
    epochs: int = 5
    lr: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    craft_steps: int = 100

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not self.alphas:
            raise ConfigError("need at least one scale factor")

    def lr_schedule(self) -> list[float]:
        """Halve the rate every epoch."""
        return [self.lr * 0.5 ** e for e in range(self.epochs)]

    def train_config(self) -> TrainConfig:
        # halving every epoch, expressed with TrainConfig's step decay
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_decay_epochs=tuple(range(1, self.epochs)), lr_decay=0.5, seed=self.seed)


def craft_pool(model: DepthModel, images: np.ndarray, attack_cfgs: Sequence[AttackConfig],
               cfg: AdvTrainConfig, batch_size: int = 20) -> np.ndarray:
    """One perturbation per image for scale targets, against the frozen model.

    Sample i uses alpha ``cfg.alphas[i % len]`` and attack config
    ``attack_cfgs[i % len]``; images sharing both are crafted as one batch.
    """
    images = np.asarray(images, dtype=np.float32)
    if not attack_cfgs:
        raise ConfigError("need at least one attack config to build the pool")
    pool = np.zeros_like(images)
    clean = predict(model, images)
    keys = [(i % len(cfg.alphas), i % len(attack_cfgs)) for i in range(len(images))]
    for key in sorted(set(keys)):
        idx = np.array([i for i, k in enumerate(keys) if k == key])
        alpha, acfg = cfg.alphas[key[0]], attack_cfgs[key[1]]
        for j in range(0, len(idx), batch_size):
            sl = idx[j:j + batch_size]
            d_t = scale_target(clean[sl], alpha, model.d_min, model.d_max)
            p = craft(model, images[sl], d_t, AttackConfig(xi=acfg.xi, eta=acfg.eta,
                                                           steps=cfg.craft_steps))
            pool[sl] = p.v
        log.info("pool: alpha %+.2f xi %.0e done (%d images)", alpha, acfg.xi, len(idx))
    return pool


def consistency_loss(clean: tg.Tensor, attacked: tg.Tensor) -> tg.Tensor:
    """mean |f(x) - f(x+v)| / f(x)"""
    return tg.mean_all(tg.div_elementwise(tg.abs_(tg.sub(clean, attacked)), clean))


def adversarial_train(model: DepthModel, dataset, attack_cfgs: Sequence[AttackConfig],
                      cfg: AdvTrainConfig = AdvTrainConfig(), pool: np.ndarray | None = None,
                      on_epoch=None) -> DepthModel:
    """Fine-tune so that predictions on x + v match predictions on x.

    The perturbation pool is crafted once against the starting model and
    then held fixed.  Gradients flow through both the clean and the
    perturbed branch.
    """
    if len(dataset) == 0:
        raise DataError("cannot fine-tune on an empty dataset")
    images = np.stack([s.image for s in dataset]).astype(np.float32)
    if cfg.epochs == 0:
        return model.copy()
    if pool is None:
        pool = craft_pool(model, images, attack_cfgs, cfg)
    attacked = perturbed(images, pool)

    def loss_fn(params, idx):
        n = len(idx)
        both = forward_depth(model, Tensor(np.concatenate([images[idx], attacked[idx]])), params)
        clean = tg.take_batch(both, slice(0, n))
        adv = tg.take_batch(both, slice(n, 2 * n))
        return consistency_loss(clean, adv)

    return fit(model, loss_fn, len(images), cfg.train_config(), on_epoch)


"""Targeted perturbations against a frozen depth network.

The core routine is a clipped gradient descent on the perturbation ``v``:

    v <- clip(v, -xi, xi)
    v <- v - eta * grad_v  mean(|f(x + v) - d_t| / d_t)

starting from ``v = 0`` and clipping once more at the end.  Plain gradient
steps are used (no sign, no momentum).  Everything here accepts either a
single image [3,H,W] or a batch [N,3,H,W]; in the batched case each sample
gets its own loss and the gradients stay independent because the total
objective is the sum of per-sample losses.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_graph as tg
from .depth_net import DepthModel, forward_depth
from .errors import ConfigError, NumericsError, ShapeError
from .tensor_graph import Tensor

log = logging.getLogger(__name__)

XI_GRID = (2e-3, 5e-3, 1e-2, 2e-2)
# learning rate per L-inf budget; the two larger budgets oscillate around the
# target with bigger steps on these models
ETA_BY_XI = {2e-3: 0.1, 5e-3: 1.0, 1e-2: 0.6, 2e-2: 1.0}
DEFAULT_STEPS = 500


class Constraint(enum.Enum):
    NONE = "none"
    INSIDE = "inside"     # v may be non-zero only where mask == 1
    OUTSIDE = "outside"   # v may be non-zero only where mask == 0


@dataclass(frozen=True)
class AttackConfig:
    xi: float
    eta: float | None = None
    steps: int = DEFAULT_STEPS
    constraint: Constraint = Constraint.NONE
    mask: np.ndarray | None = field(default=None, compare=False)
    seed: int = 0

    def __post_init__(self):
        if self.xi < 0:
            raise ConfigError(f"xi must be non-negative, got {self.xi}")
        if self.eta is not None and self.eta < 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.constraint is not Constraint.NONE and self.mask is None:
            raise ConfigError(f"constraint {self.constraint.value} needs a mask")

    @property
    def step_size(self) -> float:
        if self.eta is not None:
            return self.eta
        return default_eta(self.xi)


def default_eta(xi: float) -> float:
    for k, v in ETA_BY_XI.items():
        if np.isclose(k, xi, rtol=1e-9, atol=0):
            return v
    raise ConfigError(f"no default learning rate for xi={xi}; pass eta explicitly")


@dataclass
class Perturbation:
    v: np.ndarray                 # [3,H,W] or [N,3,H,W]
    xi: float
    steps: int
    final_loss: np.ndarray        # per sample
    loss_curve: np.ndarray        # [N, steps]; loss before each update

    @property
    def linf(self) -> np.ndarray:
        return _per_sample(np.abs(self.v), np.max)

    @property
    def l1(self) -> np.ndarray:
        """Mean |v| per element, one value per sample."""
        return _per_sample(np.abs(self.v.astype(np.float64)), np.mean)


def _per_sample(a, fn):
    if a.ndim == 3:
        return np.asarray([fn(a)])
    return np.asarray([fn(s) for s in a])


def _batched(x, d_t):
    x = np.asarray(x, dtype=np.float32)
    d_t = np.asarray(d_t, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x, d_t = x[None], d_t[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"image must be [3,H,W] or [N,3,H,W], got {x.shape}")
    if d_t.shape != (x.shape[0], 1, *x.shape[2:]):
        raise ShapeError(f"target shape {d_t.shape} does not match image {x.shape}")
    if np.any(d_t <= 0):
        raise NumericsError("target depth must be strictly positive")
    return x, d_t, single


def allowed_region(cfg: AttackConfig, shape: tuple) -> np.ndarray | None:
    """Boolean [N,1,H,W] map of where v may be non-zero (None = everywhere)."""
    if cfg.constraint is Constraint.NONE:
        return None
    m = np.asarray(cfg.mask).astype(bool)
    n, _, h, w = shape
    if m.shape == (h, w):
        m = np.broadcast_to(m, (n, h, w))
    if m.shape != (n, h, w):
        raise ShapeError(f"mask shape {m.shape} does not match image {shape}")
    allow = m if cfg.constraint is Constraint.INSIDE else ~m
    return allow[:, None]


def project(v: np.ndarray, xi: float, allow: np.ndarray | None) -> np.ndarray:
    v = tg.clip_inf(Tensor(v), xi).data
    if allow is not None:
        v = np.where(allow, v, np.float32(0))
    return v


def _relative_error(model: DepthModel, x: np.ndarray, v: Tensor, d_t: np.ndarray) -> Tensor:
    """Per-pixel |f(clamp(x+v)) - d_t| / d_t as a [N,1,H,W] tensor."""
    xin = tg.clamp(tg.add(Tensor(x), v), 0.0, 1.0)
    pred = forward_depth(model, xin)
    return tg.div_elementwise(tg.abs_(tg.sub(pred, Tensor(d_t))), Tensor(d_t))


def _sum_of_means(r: Tensor) -> tuple[Tensor, np.ndarray]:
    n = r.shape[0]
    per_sample = r.data.reshape(n, -1).mean(axis=1, dtype=np.float64)
    return tg.mul_scalar(tg.mean_all(r), n), per_sample


def target_loss(model: DepthModel, x, v, d_t) -> float | np.ndarray:
    """mean(|f(clamp(x+v)) - d_t| / d_t); scalar for one image, vector for a batch."""
    x, d_t, single = _batched(x, d_t)
    v = np.broadcast_to(np.asarray(v, dtype=np.float32), x.shape)
    with tg.no_grad():
        _, per = _sum_of_means(_relative_error(model, x, Tensor(v), d_t))
    return float(per[0]) if single else per


def _descend(objective, x: np.ndarray, cfg: AttackConfig, allow) -> Perturbation:
    """Shared clip/mask/update loop; ``objective(v_tensor)`` -> (scalar, per-sample)."""
    eta = cfg.step_size
    n = x.shape[0]
    v = np.zeros_like(x)
    curve = np.zeros((n, cfg.steps))
    for step in range(cfg.steps):
        v = project(v, cfg.xi, allow)
        vt = Tensor(v, requires_grad=True)
        try:
            loss, per = objective(vt)
        except NumericsError as exc:
            raise NumericsError(f"loss became non-finite at step {step}: {exc}") from exc
        if not np.all(np.isfinite(per)):
            raise NumericsError(f"loss became non-finite at step {step}")
        curve[:, step] = per
        if eta == 0:
            continue
        tg.backward(loss)
        v = (v - np.float32(eta) * vt.grad).astype(np.float32)
    v = project(v, cfg.xi, allow)
    return Perturbation(v=v, xi=cfg.xi, steps=cfg.steps, final_loss=np.zeros(n), loss_curve=curve)


def _finish(p: Perturbation, model_losses, single: bool) -> Perturbation:
    p.final_loss = model_losses
    if single:
        p.v = p.v[0]
    return p


def craft(model: DepthModel, x, d_t, cfg: AttackConfig) -> Perturbation:
    """Clipped gradient descent toward target depth ``d_t``.

    Under an InsideMask / OutsideMask constraint the forbidden region of v
    is re-zeroed after every update, so it holds exact zeros throughout.
    """
    x, d_t, single = _batched(x, d_t)
    allow = allowed_region(cfg, x.shape)

    def objective(vt):
        return _sum_of_means(_relative_error(model, x, vt, d_t))

    p = _descend(objective, x, cfg, allow)
    return _finish(p, target_loss(model, x, p.v, d_t), single)


craft_constrained = craft


def craft_joint(models: Sequence[DepthModel], x, d_t, cfg: AttackConfig) -> Perturbation:
    """One shared v minimizing the unweighted mean of per-model target losses.

    ``d_t`` is either one target for all models or a list with one target per
    model (targets are usually built from each model's own prediction).
    """
    models = list(models)
    if not models:
        raise ConfigError("craft_joint needs at least one model")
    targets = list(d_t) if isinstance(d_t, (list, tuple)) else [d_t] * len(models)
    if len(targets) != len(models):
        raise ConfigError("need one target per model")
    prepared = [_batched(x, t) for t in targets]
    xb, single = prepared[0][0], prepared[0][2]
    for m in models:
        if m.weights.keys() and not _same_io(m, models[0]):
            raise ShapeError("models in craft_joint must share the same depth range")
    allow = allowed_region(cfg, xb.shape)
    k = len(models)

    def objective(vt):
        total, per_total = None, 0.0
        for m, (_, dt, _) in zip(models, prepared):
            loss, per = _sum_of_means(_relative_error(m, xb, vt, dt))
            total = loss if total is None else tg.add(total, loss)
            per_total = per_total + per
        return tg.mul_scalar(total, 1.0 / k), per_total / k

    p = _descend(objective, xb, cfg, allow)
    final = np.mean([target_loss(m, xb, p.v, dt) for m, (_, dt, _) in zip(models, prepared)], axis=0)
    return _finish(p, final, single)


def _same_io(a: DepthModel, b: DepthModel) -> bool:
    return a.d_min == b.d_min and a.d_max == b.d_max


def dag_baseline(model: DepthModel, x, d_t, cfg: AttackConfig) -> Perturbation:
    """Descent toward the target plus ascent away from the clean prediction.

    Objective per step: loss(v, d_t) - loss(v, f(x)).  The ascent term has
    no natural stopping point for a regression output, so the prediction
    tends to overshoot the target.
    """
    x, d_t, single = _batched(x, d_t)
    allow = allowed_region(cfg, x.shape)
    with tg.no_grad():
        clean = forward_depth(model, Tensor(x)).data

    def objective(vt):
        toward, per_t = _sum_of_means(_relative_error(model, x, vt, d_t))
        away, per_a = _sum_of_means(_relative_error(model, x, vt, clean))
        return tg.sub(toward, away), per_t - per_a

    p = _descend(objective, x, cfg, allow)
    return _finish(p, target_loss(model, x, p.v, d_t), single)

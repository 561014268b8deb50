"""Toy encoder-decoder depth networks and a supervised trainer.

Both architectures map an RGB image in [0,1] to metric depth through a
sigmoid disparity head:

    depth = 1 / (s * (1/d_min - 1/d_max) + 1/d_max),   s = sigmoid(logit)

so every output lies inside [d_min, d_max] by construction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor_graph as tg
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .tensor_graph import Tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("ModelA", "ModelB")


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str                 # conv | upsample | concat
    inputs: tuple[str, ...]
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    act: str | None = None    # elu | relu | None


def architecture_spec(arch: str) -> list[Layer]:
    """Layer list for ``arch``; the final layer produces the disparity logit.

    ModelA is a small U-Net: ELU encoder with 8/16/32 channels and skip
    concatenations in the decoder.  ModelB has a wider ReLU encoder
    (12/24/48) and a plain decoder with no skips.
    """
    if arch == "ModelA":
        return [
            Layer("enc1", "conv", ("image",), 8, 3, 2, "elu"),
            Layer("enc2", "conv", ("enc1",), 16, 3, 2, "elu"),
            Layer("enc3", "conv", ("enc2",), 32, 3, 2, "elu"),
            Layer("dec3", "conv", ("enc3",), 16, 3, 1, "elu"),
            Layer("up3", "upsample", ("dec3",)),
            Layer("cat2", "concat", ("up3", "enc2")),
            Layer("dec2", "conv", ("cat2",), 8, 3, 1, "elu"),
            Layer("up2", "upsample", ("dec2",)),
            Layer("cat1", "concat", ("up2", "enc1")),
            Layer("dec1", "conv", ("cat1",), 4, 3, 1, "elu"),
            Layer("head", "conv", ("dec1",), 1, 1, 1, None),
            Layer("logit", "upsample", ("head",)),
        ]
    if arch == "ModelB":
        return [
            Layer("enc1", "conv", ("image",), 12, 3, 2, "relu"),
            Layer("enc2", "conv", ("enc1",), 24, 3, 2, "relu"),
            Layer("enc3", "conv", ("enc2",), 48, 3, 2, "relu"),
            Layer("dec3", "conv", ("enc3",), 16, 3, 1, "relu"),
            Layer("up3", "upsample", ("dec3",)),
            Layer("dec2", "conv", ("up3",), 8, 3, 1, "relu"),
            Layer("up2", "upsample", ("dec2",)),
            Layer("dec1", "conv", ("up2",), 4, 3, 1, "relu"),
            Layer("head", "conv", ("dec1",), 1, 1, 1, None),
            Layer("logit", "upsample", ("head",)),
        ]
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def _channels(layers: Sequence[Layer], in_ch: int = 3) -> dict[str, int]:
    ch = {"image": in_ch}
    for layer in layers:
        if layer.kind == "conv":
            ch[layer.name] = layer.out_ch
        elif layer.kind == "upsample":
            ch[layer.name] = ch[layer.inputs[0]]
        else:
            ch[layer.name] = sum(ch[i] for i in layer.inputs)
    return ch


@dataclass
class DepthModel:
    arch: str
    weights: dict[str, np.ndarray]
    d_min: float = 1.0
    d_max: float = 80.0
    seed: int = 0
    layers: list[Layer] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.layers:
            self.layers = architecture_spec(self.arch)
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("depth range must satisfy 0 < d_min < d_max")

    @property
    def n_params(self) -> int:
        return sum(int(w.size) for w in self.weights.values())

    def copy(self) -> "DepthModel":
        return DepthModel(self.arch, {k: v.copy() for k, v in self.weights.items()},
                          self.d_min, self.d_max, self.seed)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.weights.items()}


def init_model(arch: str = "ModelA", seed: int = 0, d_min: float = 1.0, d_max: float = 80.0) -> DepthModel:
    """He-normal conv weights, zero biases; head bias starts at mid disparity."""
    layers = architecture_spec(arch)
    ch = _channels(layers)
    rng = np.random.default_rng(seed)
    weights = {}
    for layer in layers:
        if layer.kind != "conv":
            continue
        cin = ch[layer.inputs[0]]
        fan_in = cin * layer.kernel ** 2
        std = math.sqrt(2.0 / fan_in) if layer.act else math.sqrt(1.0 / fan_in)
        weights[f"{layer.name}.w"] = rng.normal(0, std, (layer.out_ch, cin, layer.kernel, layer.kernel)).astype(np.float32)
        weights[f"{layer.name}.b"] = np.zeros(layer.out_ch, dtype=np.float32)
    # 1/depth = 0.1 (10 m) as a starting point
    s0 = (0.1 - 1 / d_max) / (1 / d_min - 1 / d_max)
    weights["head.b"][:] = math.log(s0 / (1 - s0))
    return DepthModel(arch, weights, d_min, d_max, seed, layers)


def disparity_to_depth(s: Tensor, d_min: float, d_max: float) -> Tensor:
    inv = tg.add_scalar(tg.mul_scalar(s, 1.0 / d_min - 1.0 / d_max), 1.0 / d_max)
    return tg.div_elementwise(Tensor(np.ones((), dtype=inv.data.dtype)), inv)


def forward_depth(model: DepthModel, image, params: dict[str, Tensor] | None = None) -> Tensor:
    """Predict depth for a [3,H,W] or [N,3,H,W] image tensor.

    ``params`` overrides the model weights with (possibly trainable)
    tensors; attacks leave it unset so the weights stay frozen constants.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    single = x.data.ndim == 3
    if single:
        x = _unsqueeze(x)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected image [3,H,W] or [N,3,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if h % 8 or w % 8:
        raise ShapeError(f"image size {h}x{w} must be a multiple of 8")
    p = params if params is not None else model.tensors()
    acts = {"image": x}
    for layer in model.layers:
        src = [acts[i] for i in layer.inputs]
        if layer.kind == "conv":
            y = tg.conv2d(src[0], p[f"{layer.name}.w"], p[f"{layer.name}.b"], stride=layer.stride)
            if layer.act == "elu":
                y = tg.elu(y)
            elif layer.act == "relu":
                y = tg.relu(y)
        elif layer.kind == "upsample":
            y = tg.nearest_upsample2x(src[0])
        else:
            y = tg.concat_channels(src)
        acts[layer.name] = y
    depth = disparity_to_depth(tg.sigmoid(acts[model.layers[-1].name]), model.d_min, model.d_max)
    return _squeeze(depth) if single else depth


def intermediate_shapes(model: DepthModel, image_shape=(3, 64, 128)) -> dict[str, tuple]:
    with tg.no_grad():
        x = Tensor(np.zeros((1, *image_shape)))
        shapes = {}
        acts = {"image": x}
        p = model.tensors()
        for layer in model.layers:
            src = [acts[i] for i in layer.inputs]
            if layer.kind == "conv":
                y = tg.conv2d(src[0], p[f"{layer.name}.w"], p[f"{layer.name}.b"], stride=layer.stride)
            elif layer.kind == "upsample":
                y = tg.nearest_upsample2x(src[0])
            else:
                y = tg.concat_channels(src)
            acts[layer.name] = y
            shapes[layer.name] = y.shape[1:]
    return shapes


def _unsqueeze(x: Tensor) -> Tensor:
    return tg.reshape(x, (1, *x.shape))


def _squeeze(x: Tensor) -> Tensor:
    return tg.reshape(x, x.shape[1:])


def predict(model: DepthModel, images: np.ndarray, batch_size: int = 20) -> np.ndarray:
    """Gradient-free depth for [N,3,H,W] (or [3,H,W]) arrays."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    with tg.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward_depth(model, images[i:i + batch_size]).data)
    res = np.concatenate(out, axis=0)
    return res[0] if single else res


def relative_error_loss(pred: Tensor, target: Tensor) -> Tensor:
    """mean |pred - target| / target, differentiable in both arguments."""
    return tg.mean_all(tg.div_elementwise(tg.abs_(tg.sub(pred, target)), target))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-3
    lr_decay_epochs: tuple = (15, 25)
    lr_decay: float = 0.3
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(epoch >= e for e in self.lr_decay_epochs)


class Adam:
    def __init__(self, shapes: dict[str, tuple], b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros(s, dtype=np.float64) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=np.float64) for k, s in shapes.items()}
        self.t = 0

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if lr == 0:
                continue
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            weights[k] = (weights[k] - upd).astype(np.float32)


def fit(model: DepthModel, loss_fn, n_samples: int, cfg: TrainConfig, on_epoch=None) -> DepthModel:
    """Generic minibatch Adam loop shared by supervised and adversarial training.

    ``loss_fn(params, idx)`` builds a scalar loss for sample indices ``idx``.
    Returns a new model; the input model is left untouched.
    """
    cfg.validate()
    out = model.copy()
    opt = Adam({k: v.shape for k, v in out.weights.items()})
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n_samples)
        total, count = 0.0, 0
        for i in range(0, n_samples, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            params = out.tensors(requires_grad=True)
            loss = loss_fn(params, idx)
            val = loss.item()
            if not math.isfinite(val):
                raise NumericsError(f"training diverged at epoch {epoch} (loss={val})")
            tg.backward(loss)
            opt.step(out.weights, {k: t.grad for k, t in params.items() if t.grad is not None}, lr)
            total += val * len(idx)
            count += len(idx)
        log.info("epoch %d lr %.2e loss %.5f", epoch, lr, total / count)
        if on_epoch is not None:
            on_epoch(epoch, total / count)
    return out


def train(model: DepthModel, dataset: Sequence, cfg: TrainConfig = TrainConfig(), on_epoch=None) -> DepthModel:
    """Supervised training on scenes with ground-truth depth."""
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    images = np.stack([s.image for s in dataset]).astype(np.float32)
    depths = np.stack([s.depth_gt for s in dataset]).astype(np.float32)

    def loss_fn(params, idx):
        pred = forward_depth(model, Tensor(images[idx]), params)
        return relative_error_loss(pred, Tensor(depths[idx]))

    return fit(model, loss_fn, len(dataset), cfg, on_epoch)


def evaluate_are(model: DepthModel, dataset: Iterable) -> float:
    """Mean over scenes of per-scene ARE against ground truth."""
    dataset = list(dataset)
    pred = predict(model, np.stack([s.image for s in dataset]))
    gt = np.stack([s.depth_gt for s in dataset])
    per_scene = (np.abs(pred.astype(np.float64) - gt) / gt).reshape(len(dataset), -1).mean(axis=1)
    return float(per_scene.mean())


# ---------------------------------------------------------------- disk format


def save_model(model: DepthModel, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"architecture {model.arch}", f"depth_range {model.d_min!r} {model.d_max!r}",
             f"seed {model.seed}"]
    for name in sorted(model.weights):
        arr = model.weights[name]
        tg.save_dtns(d / f"{name}.dtns", arr)
        lines.append(f"tensor {name} {'x'.join(str(s) for s in arr.shape)}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d


def load_model(directory) -> DepthModel:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no model manifest at {manifest}")
    arch, d_min, d_max, seed = None, 1.0, 80.0, 0
    weights = {}
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "architecture":
            arch = parts[1]
        elif parts[0] == "depth_range":
            d_min, d_max = float(parts[1]), float(parts[2])
        elif parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "tensor":
            arr = tg.load_dtns(d / f"{parts[1]}.dtns")
            expected = tuple(int(s) for s in parts[2].split("x"))
            if arr.shape != expected:
                raise ShapeError(f"{parts[1]}: file shape {arr.shape} != manifest {expected}")
            weights[parts[1]] = arr
    if arch is None:
        raise DataError(f"{manifest}: missing architecture line")
    return DepthModel(arch, weights, d_min, d_max, seed)

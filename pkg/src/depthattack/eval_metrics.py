"""ARE and friends: per-scene reports, depth-binned errors, transfer cells and
linear-operation probes on perturbations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attack import Perturbation
from .depth_net import DepthModel, predict
from .errors import ConfigError, NumericsError, ShapeError


def are(pred, target) -> float:
    """Mean over pixels of |pred - target| / target."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if np.any(target <= 0):
        raise NumericsError("ARE needs a strictly positive target")
    return float(np.mean(np.abs(pred - target) / target))


def are_per_sample(pred, target) -> np.ndarray:
    """ARE for each leading-axis sample of [N,...] arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if np.any(target <= 0):
        raise NumericsError("ARE needs a strictly positive target")
    return (np.abs(pred - target) / target).reshape(len(pred), -1).mean(axis=1)


@dataclass(frozen=True)
class DepthBin:
    start: float
    end: float
    are: float          # nan when empty
    pixel_count: int

    @property
    def empty(self) -> bool:
        return self.pixel_count == 0


def binned_are(pred, target, bin_width: float = 5.0, d_min: float = 1.0,
               d_max: float = 80.0) -> list[DepthBin]:
    """ARE restricted to pixels whose *target* depth falls in each bin.

    Bins are [k*w, (k+1)*w) starting at the multiple of w at or below d_min;
    the last bin is closed so that d_max itself is counted.
    """
    if not bin_width > 0:
        raise ConfigError(f"bin width must be positive, got {bin_width}")
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeError("prediction and target differ in size")
    if np.any(target <= 0):
        raise NumericsError("ARE needs a strictly positive target")
    lo = math.floor(d_min / bin_width) * bin_width
    n_bins = max(1, math.ceil((max(d_max, target.max()) - lo) / bin_width))
    idx = np.clip(np.floor((target - lo) / bin_width).astype(int), 0, n_bins - 1)
    rel = np.abs(pred - target) / target
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=rel, minlength=n_bins)
    bins = []
    for k in range(n_bins):
        c = int(counts[k])
        bins.append(DepthBin(lo + k * bin_width, lo + (k + 1) * bin_width,
                             float(sums[k] / c) if c else float("nan"), c))
    return bins


def recombine_bins(bins: Sequence[DepthBin]) -> float:
    total = sum(b.pixel_count for b in bins)
    return sum(b.are * b.pixel_count for b in bins if not b.empty) / total


# ---------------------------------------------------------------- reports


@dataclass
class SceneResult:
    scene_id: int
    xi: float
    target_kind: str
    baseline_are: float
    final_are: float
    linf: float
    l1: float
    steps: int
    loss_curve: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def summarize(values: Iterable[float]) -> dict[str, float]:
    a = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(a.mean()), "median": float(np.median(a)), "std": float(a.std())}


@dataclass
class AttackReport:
    rows: list[SceneResult]
    bins: dict[int, list[DepthBin]] = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return np.array([r.final_are for r in self.rows])

    @property
    def baseline(self) -> np.ndarray:
        return np.array([r.baseline_are for r in self.rows])

    def aggregate(self) -> dict[str, float]:
        return summarize(self.final)

    @property
    def median(self) -> float:
        return float(np.median(self.final))


def attack_report(model: DepthModel, x: np.ndarray, d_t: np.ndarray, pert: Perturbation,
                  target_kind: str, scene_ids: Sequence[int] | None = None,
                  with_bins: bool = True) -> AttackReport:
    """Evaluate a batched perturbation against its targets."""
    x = np.asarray(x, dtype=np.float32)
    v = pert.v if pert.v.ndim == 4 else pert.v[None]
    if x.ndim == 3:
        x, d_t = x[None], np.asarray(d_t)[None]
    ids = list(scene_ids) if scene_ids is not None else list(range(len(x)))
    clean = predict(model, x)
    attacked = predict(model, perturbed(x, v))
    base = are_per_sample(clean, d_t)
    final = are_per_sample(attacked, d_t)
    linf, l1 = pert.linf, pert.l1
    rows = [SceneResult(ids[i], pert.xi, target_kind, float(base[i]), float(final[i]),
                        float(linf[i]), float(l1[i]), pert.steps, pert.loss_curve[i])
            for i in range(len(x))]
    bins = {}
    if with_bins:
        for i in range(len(x)):
            bins[ids[i]] = binned_are(attacked[i], d_t[i], d_min=model.d_min, d_max=model.d_max)
    return AttackReport(rows, bins)


def perturbed(x, v) -> np.ndarray:
    """clamp(x + v) to the valid image range, as seen by the network."""
    return np.clip(np.asarray(x, dtype=np.float32) + np.asarray(v, dtype=np.float32), 0.0, 1.0)


# ---------------------------------------------------------------- transfer


@dataclass
class TransferCell:
    source: str
    evaluation: str
    mode: str            # Self | Cross | Sum | Both
    xi: float
    per_scene: np.ndarray

    def __post_init__(self):
        if self.mode not in ("Self", "Cross", "Sum", "Both"):
            raise ConfigError(f"unknown transfer mode {self.mode!r}")
        if self.mode == "Self" and self.source != self.evaluation:
            raise ConfigError("Self cells must evaluate on the source model")

    @property
    def stats(self) -> dict[str, float]:
        return summarize(self.per_scene)

    @property
    def median(self) -> float:
        return float(np.median(self.per_scene))


def transfer_eval(v, x, eval_model: DepthModel, d_t_eval, source: str, evaluation: str,
                  mode: str, xi: float) -> TransferCell:
    """ARE of the evaluation model on x+v against that model's own target."""
    x = np.asarray(x, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if x.shape != v.shape:
        raise ShapeError(f"perturbation {v.shape} does not match images {x.shape}")
    d_t_eval = np.asarray(d_t_eval)
    if x.ndim == 3:
        x, v, d_t_eval = x[None], v[None], d_t_eval[None]
    pred = predict(eval_model, perturbed(x, v))
    return TransferCell(source, evaluation, mode, xi, are_per_sample(pred, d_t_eval))


def sum_perturbations(v1, v2) -> Perturbation:
    """Elementwise sum, deliberately not re-clipped."""
    a = v1.v if isinstance(v1, Perturbation) else np.asarray(v1, dtype=np.float32)
    b = v2.v if isinstance(v2, Perturbation) else np.asarray(v2, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeError(f"cannot sum perturbations of shapes {a.shape} and {b.shape}")
    s = (a + b).astype(np.float32)
    n = 1 if s.ndim == 3 else len(s)
    xi = float(np.max(np.abs(s))) if s.size else 0.0
    return Perturbation(v=s, xi=xi, steps=0, final_loss=np.full(n, np.nan),
                        loss_curve=np.zeros((n, 0)))


def gamma_sweep(model: DepthModel, x, v, gammas: Sequence[float]) -> list[np.ndarray]:
    """Predictions for clamp(x + gamma * v), one per gamma, in order."""
    out = []
    for g in gammas:
        if not math.isfinite(g):
            raise ConfigError(f"gamma must be finite, got {g}")
        out.append(predict(model, perturbed(x, np.float32(g) * np.asarray(v, dtype=np.float32))))
    return out


# ---------------------------------------------------------------- CSV


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(c) for c in r])
    return path


REPORT_HEADER = ("scene_id", "xi", "target_kind", "baseline_are", "final_are", "linf", "l1", "steps")
BINS_HEADER = ("scene_id", "bin_start", "bin_end", "are", "pixel_count")
TRANSFER_HEADER = ("source", "eval", "mode", "xi", "mean", "median", "std")


def write_report_csv(path, reports: Iterable[AttackReport]) -> Path:
    rows = [(r.scene_id, r.xi, r.target_kind, r.baseline_are, r.final_are, r.linf, r.l1, r.steps)
            for rep in reports for r in rep.rows]
    return write_csv(path, REPORT_HEADER, rows)


def write_bins_csv(path, reports: Iterable[AttackReport]) -> Path:
    rows = [(sid, b.start, b.end, b.are, b.pixel_count)
            for rep in reports for sid, bins in rep.bins.items() for b in bins]
    return write_csv(path, BINS_HEADER, rows)


def write_transfer_csv(path, cells: Iterable[TransferCell]) -> Path:
    rows = []
    for c in cells:
        s = c.stats
        rows.append((c.source, c.evaluation, c.mode, c.xi, s["mean"], s["median"], s["std"]))
    return write_csv(path, TRANSFER_HEADER, rows)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

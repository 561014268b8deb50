"""Command-line experiment runner.

Every command reads a plain ``key=value`` config (``#`` starts a comment),
writes into ``--out DIR`` and echoes the resolved config there as
``config.txt``.  Failures print one JSON line ``{"error": ..., "message": ...}``
on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as at
from . import defenses as df
from . import depth_net as dn
from . import eval_metrics as em
from . import pnm
from . import scenegen as sg
from . import targets as tgt
from .errors import ConfigError, DataError
from .tensor_graph import save_dtns

log = logging.getLogger("depthattack")

VIS_GAIN = 10.0

# every accepted key with its default, kept as text so the echo is uniform
DEFAULTS: dict[str, str] = {
    "seed": "0",
    "n_train": "200",
    "n_test": "20",
    "data": "",
    "model": "",
    "models": "",
    "arch": "ModelA",
    "model_seed": "1",
    "epochs": str(dn.TrainConfig.epochs),
    "batch_size": str(dn.TrainConfig.batch_size),
    "lr": str(dn.TrainConfig.lr),
    "xi": ",".join(repr(x) for x in at.XI_GRID),
    "eta": ",".join(f"{k!r}:{v!r}" for k, v in at.ETA_BY_XI.items()),
    "steps": str(at.DEFAULT_STEPS),
    "targets": "scale:+0.10",
    "constraint": "none",
    "mask_category": "",
    "scenes": "",
    "save_perturbations": "1",
    "defenses": "none,blur,advtrain",
    "blur_sigma": "1.0",
    "adv_epochs": str(df.AdvTrainConfig.epochs),
    "adv_lr": str(df.AdvTrainConfig.lr),
    "adv_craft_steps": str(df.AdvTrainConfig.craft_steps),
    "adv_xi": "",
    "gammas": "0.0,0.25,0.5,0.75,1.0",
}
SCENE_PREFIX = "scene."
SCENE_FIELDS = {f.name: f for f in dataclasses.fields(sg.SceneParams)}


# ---------------------------------------------------------------- config


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        known = key in DEFAULTS or (key.startswith(SCENE_PREFIX) and key[len(SCENE_PREFIX):] in SCENE_FIELDS)
        if not known:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        out[key] = value
    return out


class RunConfig:
    """Resolved configuration with typed accessors."""

    def __init__(self, values: dict[str, str] | None = None):
        self.raw = dict(DEFAULTS)
        self.raw.update(values or {})

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        return cls(parse_config_text(p.read_text()))

    def echo(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in sorted(self.raw))

    def _get(self, key, conv):
        try:
            return conv(self.raw[key])
        except ValueError:
            raise ConfigError(f"bad value for {key}: {self.raw[key]!r}") from None

    def int(self, key) -> int:
        return self._get(key, int)

    def float(self, key) -> float:
        return self._get(key, float)

    def str(self, key) -> str:
        return self.raw[key]

    def floats(self, key) -> list[float]:
        s = self.raw[key].strip()
        return [] if not s else self._get(key, lambda t: [float(x) for x in t.split(",")])

    def names(self, key) -> list[str]:
        return [s.strip() for s in self.raw[key].split(",") if s.strip()]

    def path(self, key, what: str) -> Path:
        s = self.raw[key].strip()
        if not s:
            raise ConfigError(f"{what} path ({key}=) is required")
        p = Path(s)
        if not p.exists():
            raise FileNotFoundError(f"{what} not found at {p}")
        return p

    # derived views

    def scene_params(self) -> sg.SceneParams:
        kw = {}
        for key, value in self.raw.items():
            if not key.startswith(SCENE_PREFIX):
                continue
            name = key[len(SCENE_PREFIX):]
            default = getattr(sg.SceneParams, name)
            try:
                if isinstance(default, bool):
                    kw[name] = value.lower() in ("1", "true", "yes")
                elif isinstance(default, tuple):
                    kw[name] = tuple(float(x) for x in value.split(","))
                else:
                    kw[name] = type(default)(value)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {value!r}") from None
        return sg.SceneParams(**kw)

    def xis(self) -> list[float]:
        xs = self.floats("xi")
        if not xs or any(not x > 0 for x in xs):
            raise ConfigError(f"xi values must be positive, got {self.raw['xi']!r}")
        return xs

    def eta_for(self, xi: float) -> float:
        for item in self.names("eta"):
            try:
                k, v = (float(s) for s in item.split(":"))
            except ValueError:
                raise ConfigError(f"eta entries are xi:eta pairs, got {item!r}") from None
            if np.isclose(k, xi, rtol=1e-9, atol=0):
                return v
        return at.default_eta(xi)

    def target_specs(self) -> list[tgt.TargetSpec]:
        specs = [tgt.TargetSpec.parse(s) for s in self.raw["targets"].split(";") if s.strip()]
        if not specs:
            raise ConfigError("no targets configured")
        return specs

    def constraint(self) -> at.Constraint:
        try:
            return at.Constraint(self.raw["constraint"].lower())
        except ValueError:
            raise ConfigError(f"unknown constraint {self.raw['constraint']!r}") from None


# ---------------------------------------------------------------- helpers


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.echo())


def _load_data(cfg: RunConfig):
    train, test = sg.load_dataset(cfg.path("data", "dataset"))
    if cfg.str("scenes").strip():
        test = test[: cfg.int("scenes")]
    return train, test


def _load_model(cfg: RunConfig, key: str = "model") -> dn.DepthModel:
    return dn.load_model(cfg.path(key, "model"))


def _load_models(cfg: RunConfig) -> list[tuple[str, dn.DepthModel]]:
    paths = cfg.names("models") or [cfg.str("model")]
    out = []
    for p in paths:
        if not p or not Path(p).exists():
            raise FileNotFoundError(f"model not found at {p!r}")
        m = dn.load_model(p)
        name = m.arch
        if any(name == n for n, _ in out):
            name = f"{m.arch}@{Path(p).name}"
        out.append((name, m))
    return out


def perturbation_image(v: np.ndarray) -> np.ndarray:
    return np.clip(0.5 + VIS_GAIN * np.asarray(v, dtype=np.float64), 0.0, 1.0)


def disparity_image(d: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Inverse depth scaled to 0..255."""
    d = np.asarray(d, dtype=np.float64).reshape(np.shape(d)[-2:])
    s = (1.0 / d - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max)
    return np.clip(np.rint(s * 255.0), 0, 255).astype(np.uint8)


def _targets_for(spec: tgt.TargetSpec, model, test, pred) -> np.ndarray:
    # preset:k draws partner scenes with seed k
    partners = tgt.preset_partners(len(test), spec.preset_index) if spec.kind == "preset" else None
    out = []
    for i, sc in enumerate(test):
        partner = test[partners[i]] if partners is not None else None
        out.append(tgt.build_target(spec, model, sc, pred[i], partner))
    return np.stack(out).astype(np.float32)


def _mask_for(cfg: RunConfig, test) -> np.ndarray | None:
    if cfg.constraint() is at.Constraint.NONE:
        return None
    cat = cfg.str("mask_category").strip()
    if not cat:
        raise ConfigError("a constrained attack needs mask_category")
    return np.stack([tgt.mask_from(s.semantic, cat) for s in test]).astype(bool)


def _craft(model, x, d_t, cfg: RunConfig, xi: float, mask=None) -> at.Perturbation:
    acfg = at.AttackConfig(xi=xi, eta=cfg.eta_for(xi), steps=cfg.int("steps"),
                           constraint=cfg.constraint() if mask is not None else at.Constraint.NONE,
                           mask=mask)
    return at.craft(model, x, d_t, acfg)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    params = cfg.scene_params()
    train, test = sg.make_dataset(cfg.int("seed"), cfg.int("n_train"), cfg.int("n_test"), params)
    sg.save_dataset(train, test, out / "data", params, cfg.int("seed"))
    log.info("wrote %d train / %d test scenes to %s", len(train), len(test), out / "data")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    train, test = _load_data(cfg)
    tcfg = dn.TrainConfig(epochs=cfg.int("epochs"), batch_size=cfg.int("batch_size"),
                          lr=cfg.float("lr"), seed=cfg.int("seed"))
    model = dn.init_model(cfg.str("arch"), seed=cfg.int("model_seed"))
    model = dn.train(model, train, tcfg,
                     on_epoch=lambda e, loss: log.info("epoch %d loss %.5f", e, loss))
    dn.save_model(model, out / "model")
    log.info("held-out ARE %.4f", dn.evaluate_are(model, test))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    _, test = _load_data(cfg)
    model = _load_model(cfg)
    pred = dn.predict(model, np.stack([s.image for s in test]))
    gt = np.stack([s.depth_gt for s in test])
    per = em.are_per_sample(pred, gt)
    em.write_csv(out / "eval.csv", ("scene_id", "are"), list(enumerate(per.tolist())))
    bins = [em.AttackReport([], {i: em.binned_are(pred[i], gt[i], d_min=model.d_min, d_max=model.d_max)
                                 for i in range(len(test))})]
    em.write_bins_csv(out / "bins.csv", bins)
    for i in range(len(test)):
        pnm.write_pgm(out / f"pred_{i:04d}.pgm", disparity_image(pred[i], model.d_min, model.d_max),
                      comment="predicted disparity, 255 = d_min")


def cmd_attack(cfg: RunConfig, out: Path) -> None:
    _, test = _load_data(cfg)
    model = _load_model(cfg)
    x = np.stack([s.image for s in test])
    pred = dn.predict(model, x)
    mask = _mask_for(cfg, test)
    reports = []
    for spec in cfg.target_specs():
        d_t = _targets_for(spec, model, test, pred)
        for xi in cfg.xis():
            p = _craft(model, x, d_t, cfg, xi, mask)
            rep = em.attack_report(model, x, d_t, p, spec.label, scene_ids=range(len(test)))
            reports.append(rep)
            log.info("%s xi=%g median ARE %.4f", spec.label, xi, rep.median)
            if cfg.int("save_perturbations"):
                d = out / "perturbations" / f"{spec.label}_xi{xi:g}"
                d.mkdir(parents=True, exist_ok=True)
                for i in range(len(test)):
                    save_dtns(d / f"v_{i:04d}.dtns", p.v[i])
                    save_dtns(d / f"target_{i:04d}.dtns", d_t[i])
                    pnm.write_ppm(d / f"v_{i:04d}.ppm", perturbation_image(p.v[i]),
                                  comment=f"perturbation x{VIS_GAIN:g} gain, centered at 0.5")
                    pnm.write_pgm(d / f"target_{i:04d}.pgm",
                                  disparity_image(d_t[i], model.d_min, model.d_max),
                                  comment="target disparity, 255 = d_min")
    em.write_report_csv(out / "report.csv", reports)
    em.write_bins_csv(out / "bins.csv", reports)


def cmd_transfer(cfg: RunConfig, out: Path) -> None:
    _, test = _load_data(cfg)
    models = _load_models(cfg)
    spec = cfg.target_specs()[0]
    if spec.kind != "scale":
        raise ConfigError("transfer uses a scale target, rebuilt for each evaluation model")
    x = np.stack([s.image for s in test])
    targets = {n: tgt.scale_target(dn.predict(m, x), spec.alpha, m.d_min, m.d_max) for n, m in models}
    cells = []
    for xi in cfg.xis():
        single = {n: _craft(m, x, targets[n], cfg, xi).v for n, m in models}
        for src, v in single.items():
            for ev, m in models:
                mode = "Self" if src == ev else "Cross"
                cells.append(em.transfer_eval(v, x, m, targets[ev], src, ev, mode, xi))
        if len(models) > 1:
            names = [n for n, _ in models]
            both = at.craft_joint([m for _, m in models], x, [targets[n] for n in names],
                                  at.AttackConfig(xi=xi, eta=cfg.eta_for(xi), steps=cfg.int("steps")))
            summed = np.sum([single[n] for n in names], axis=0)
            for ev, m in models:
                cells.append(em.transfer_eval(both.v, x, m, targets[ev], "+".join(names), ev, "Both", xi))
                cells.append(em.transfer_eval(summed, x, m, targets[ev], "+".join(names), ev, "Sum", xi))
    em.write_transfer_csv(out / "transfer.csv", cells)


DEFENSE_HEADER = ("defense", "xi", "target_kind", "mean", "median", "std", "clean_are")


def cmd_defend(cfg: RunConfig, out: Path) -> None:
    train, test = _load_data(cfg)
    model = _load_model(cfg)
    chosen = cfg.names("defenses")
    bad = set(chosen) - {"none", "blur", "advtrain"}
    if bad:
        raise ConfigError(f"unknown defenses {sorted(bad)}")
    specs = [s for s in cfg.target_specs() if s.kind == "scale"]
    if not specs:
        raise ConfigError("defense evaluation uses scale targets")
    x = np.stack([s.image for s in test])
    gt = np.stack([s.depth_gt for s in test])
    blur = df.BlurConfig(sigma=cfg.float("blur_sigma"))
    hardened = None
    if "advtrain" in chosen:
        adv_xis = cfg.floats("adv_xi") or cfg.xis()
        acfgs = [at.AttackConfig(xi=xi, eta=cfg.eta_for(xi)) for xi in adv_xis]
        acfg = df.AdvTrainConfig(epochs=cfg.int("adv_epochs"), lr=cfg.float("adv_lr"),
                                 seed=cfg.int("seed"), craft_steps=cfg.int("adv_craft_steps"))
        hardened = df.adversarial_train(model, train, acfgs, acfg)
        dn.save_model(hardened, out / "advtrain_model")
    clean = {"none": em.are(dn.predict(model, x), gt),
             "blur": em.are(dn.predict(model, df.gaussian_blur(x, blur)), gt)}
    if hardened is not None:
        clean["advtrain"] = em.are(dn.predict(hardened, x), gt)
    rows = []
    for spec in specs:
        for xi in cfg.xis():
            pred = dn.predict(model, x)
            d_t = tgt.scale_target(pred, spec.alpha, model.d_min, model.d_max)
            p = _craft(model, x, d_t, cfg, xi)
            results = {}
            if "none" in chosen:
                results["none"] = em.are_per_sample(dn.predict(model, em.perturbed(x, p.v)), d_t)
            if "blur" in chosen:
                results["blur"] = df.eval_under_blur(model, x, p.v, d_t, blur)
            if hardened is not None:
                d_h = tgt.scale_target(dn.predict(hardened, x), spec.alpha, hardened.d_min, hardened.d_max)
                ph = _craft(hardened, x, d_h, cfg, xi)
                results["advtrain"] = em.are_per_sample(dn.predict(hardened, em.perturbed(x, ph.v)), d_h)
            for name in chosen:
                s = em.summarize(results[name])
                rows.append((name, xi, spec.label, s["mean"], s["median"], s["std"], clean[name]))
    em.write_csv(out / "defense.csv", DEFENSE_HEADER, rows)


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    _, test = _load_data(cfg)
    model = _load_model(cfg)
    gammas = cfg.floats("gammas")
    if not gammas:
        raise ConfigError("gammas must not be empty")
    spec = cfg.target_specs()[0]
    xi = cfg.xis()[0]
    x = np.stack([s.image for s in test])
    pred = dn.predict(model, x)
    d_t = _targets_for(spec, model, test, pred)
    p = _craft(model, x, d_t, cfg, xi)
    maps = em.gamma_sweep(model, x, p.v, gammas)
    rows = []
    for i in range(len(test)):
        d = out / "sweep" / f"scene_{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        save_dtns(d / "v.dtns", p.v[i])
        for g, m in zip(gammas, maps):
            save_dtns(d / f"depth_gamma{g:g}.dtns", m[i])
            rows.append((i, g, em.are(m[i], pred[i]), em.are(m[i], d_t[i])))
    em.write_csv(out / "sweep.csv", ("scene_id", "gamma", "are_vs_clean", "are_vs_target"), rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "defend": cmd_defend,
    "sweep": cmd_sweep,
}


def _check_counts(cfg: RunConfig, command: str) -> None:
    if command == "gen-data" and (cfg.int("n_train") < 1 or cfg.int("n_test") < 1):
        raise ConfigError("n_train and n_test must both be >= 1")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="depthattack", description="Targeted attacks on toy depth networks")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--out", required=True, help="run directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        _check_counts(cfg, args.command)
        out = Path(args.out)
        _write_config(cfg, out)
        COMMANDS[args.command](cfg, out)
    except (ConfigError, DataError, OSError, ValueError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

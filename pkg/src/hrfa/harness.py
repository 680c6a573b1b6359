"""Experiment orchestration: configs, the attack x defense grid, and artefact export.

An experiment config is a YAML file::

    name: cls-grid
    task: classification          # or verification
    mode: synthesis               # synthesis: x_ori = g(z); real: render, then encode
    fixtures: fixtures/
    samples: 100
    seed: 0
    chunk_size: 50                # examples per attack batch
    workers: 1                    # process pool size; never changes results
    output: runs/cls-grid
    export_images: true
    attacks:
      - {name: hrfa, kind: hrfa, lambda: 50, max_iters: 100, lr: 0.05}
      - {name: pgd, kind: pgd, alpha: 0.003, eps: 0.03, max_iters: 100}
      - {name: cw, kind: cw}
    defenses:
      - {kind: mean_filter, window: 5}
      - {kind: pixel_deflection, deflections: 64, radius: 4, strength: 0.04}
      - {kind: jpeg, quality: 75}

For verification, ``tau_attack: auto`` (the default) takes the calibrated
attack distance from the fixture record. Baselines always start from the
same originals as HRFA.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from hrfa import attack as atk
from hrfa import metrics
from hrfa.defenses import DefenseConfig
from hrfa.metrics import DefenseOutcome, EvalReport, ExampleRecord
from hrfa.models import datasets
from hrfa.models.fixtures import FixtureSet, load_fixtures
from hrfa.models.networks import face_distance

log = logging.getLogger(__name__)

ATTACK_KINDS = ("hrfa", "pgd", "cw")
ROLES = ("original", "perturbation", "adversarial")
STOP_CLEAN_ERROR = metrics.CLEAN_ERROR


class ConfigError(ValueError):
    pass


@dataclass
class AttackSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    task: str
    fixtures: str
    attacks: list
    defenses: list
    samples: int = 100
    seed: int = 0
    output: str = "runs/experiment"
    name: str = "run"
    mode: str = ""
    chunk_size: int = 50
    workers: int = 1
    export_images: bool = True
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if self.task not in atk.TASKS:
            raise ConfigError(f"task must be one of {atk.TASKS}, got {self.task!r}")
        if not self.mode:
            self.mode = "synthesis" if self.task == "classification" else "real"
        if self.mode not in ("synthesis", "real"):
            raise ConfigError(f"mode must be synthesis or real, got {self.mode!r}")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.chunk_size < 1 or self.workers < 1:
            raise ConfigError("chunk_size and workers must be positive")
        if not self.attacks:
            raise ConfigError("at least one attack is required")
        for kind, names in (("attack", [a.name for a in self.attacks]),
                            ("defense", [d.name for d in self.defenses])):
            if len(set(names)) != len(names):
                raise ConfigError(f"{kind} names must be unique, got {names}")
        for a in self.attacks:
            if a.kind not in ATTACK_KINDS:
                raise ConfigError(f"attack {a.name!r}: kind must be one of {ATTACK_KINDS}")
            if a.kind == "cw" and self.task != "classification":
                raise ConfigError("cw applies to classification only")
            # build once against placeholder calibration to surface bad parameters early
            probe = {"tau": 1.0, "tau_attack": 1.0}
            if a.kind == "hrfa":
                hrfa_config(a, self.task, probe)
            elif a.kind == "pgd":
                pgd_config(a, self.task, probe)
            else:
                cw_config(a)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("task", "fixtures", "attacks"):
            if key not in raw:
                raise ConfigError(f"missing required config key {key!r}")
        attacks = []
        for item in raw.pop("attacks") or []:
            item = dict(item)
            kind = item.pop("kind", None)
            name = item.pop("name", kind)
            attacks.append(AttackSpec(name=name, kind=kind, params=item))
        defenses = []
        for item in raw.pop("defenses", None) or []:
            try:
                defenses.append(DefenseConfig(**item))
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad defense entry {item}: {err}") from None
        return cls(attacks=attacks, defenses=defenses, **raw)

    @classmethod
    def load(cls, path):
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        cfg = cls.from_dict(raw)
        # relative paths resolve against the config file
        base = Path(path).resolve().parent
        cfg.fixtures = str((base / cfg.fixtures).resolve())
        cfg.output = str((base / cfg.output).resolve())
        return cfg


# attack construction

_HRFA_KEYS = {"lambda": "lam", "lam": "lam", "max_iters": "max_iters", "lr": "lr",
              "tau_encode": "tau_encode", "tau_attack": "tau_attack",
              "encode_restarts": "encode_restarts", "encode_iters": "encode_iters",
              "encode_lr": "encode_lr"}


def hrfa_config(spec, task, calibration):
    params = dict(spec.params)
    base = (atk.AttackConfig.classification_preset() if task == "classification"
            else atk.AttackConfig.verification_preset())
    kwargs = {}
    for k, v in params.items():
        if k not in _HRFA_KEYS:
            raise ConfigError(f"attack {spec.name!r}: unknown hrfa parameter {k!r}")
        kwargs[_HRFA_KEYS[k]] = v
    if task == "verification":
        if kwargs.get("tau_attack", "auto") == "auto":
            kwargs["tau_attack"] = calibration["tau_attack"]
        if kwargs.get("tau_encode", "auto") == "auto":
            kwargs["tau_encode"] = calibration.get("tau_encode_faces", 1.0)
    elif kwargs.get("tau_encode", "auto") == "auto":
        kwargs["tau_encode"] = calibration.get("tau_encode_shapes", 1.0)
    try:
        from dataclasses import replace
        return replace(base, **kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"attack {spec.name!r}: {err}") from None


def pgd_config(spec, task, calibration):
    params = dict(spec.params)
    if task == "verification":
        tau_attack = params.pop("tau_attack", "auto")
        if tau_attack == "auto":
            tau_attack = calibration["tau_attack"]
        base = atk.PGDConfig.verification(tau_attack)
    else:
        base = atk.PGDConfig()
    try:
        from dataclasses import replace
        return replace(base, **params)
    except TypeError as err:
        raise ConfigError(f"attack {spec.name!r}: {err}") from None


def cw_config(spec):
    try:
        return atk.CWConfig(**spec.params)
    except TypeError as err:
        raise ConfigError(f"attack {spec.name!r}: {err}") from None


# per-example streams

def example_rng(seed, index, stream=0):
    """Counter-based split: example ``index`` always sees the same stream."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, stream)))


def _originals(cfg, fx, indices):
    """Sample the clean inputs (and truths) for a run of example indices."""
    dtype = np.float32
    rows = []
    classes = cfg.classes or list(range(len(fx.generators)))
    for i in indices:
        rng = example_rng(cfg.seed, i)
        if cfg.task == "classification":
            y = int(classes[rng.integers(len(classes))])
            z = rng.standard_normal((1, fx.generators[y].latent_dim)).astype(dtype)
            if cfg.mode == "synthesis":
                x = fx.generators[y](z).data[0]
            else:
                x = datasets.render_class(z, y).astype(dtype)[0]
        else:
            y = None
            z = rng.standard_normal((1, fx.face_generator.latent_dim)).astype(dtype)
            if cfg.mode == "synthesis":
                x = fx.face_generator(z).data[0]
            else:
                x = datasets.render_faces(z).astype(dtype)[0]
        rows.append({"index": i, "label": y, "z": z[0], "x": x})
    return rows


def _run_hrfa(cfg, fx, spec, rows):
    acfg = hrfa_config(spec, cfg.task, fx.calibration)
    results = {}
    if cfg.task == "classification":
        groups = {}
        for r in rows:
            groups.setdefault(r["label"], []).append(r)
        jobs = [(fx.generators[y], fx.classifier, grp) for y, grp in sorted(groups.items())]
    else:
        jobs = [(fx.face_generator, fx.embedder, rows)]
    for g, victim, grp in jobs:
        x_ori = np.stack([r["x"] for r in grp])
        labels = np.array([r["label"] for r in grp]) if cfg.task == "classification" else None
        if cfg.mode == "synthesis":
            z0 = np.stack([r["z"] for r in grp])
            ok = np.ones(len(grp), dtype=bool)
            enc_l = np.zeros(len(grp))
        else:
            starts = np.stack([
                example_rng(cfg.seed, r["index"], 1).standard_normal(
                    (acfg.encode_restarts, g.latent_dim)) for r in grp
            ])
            enc = atk.encode(g, x_ori, acfg, starts=starts)
            z0, ok, enc_l = enc.z, enc.success, enc.l_img
        attacked = np.flatnonzero(ok)
        out = atk.hrfa_attack(g, victim, z0[attacked], acfg, x_ori=x_ori[attacked],
                              labels=None if labels is None else labels[attacked])
        for k, res in zip(attacked, out):
            results[grp[k]["index"]] = res
        for k in np.flatnonzero(~ok):
            results[grp[k]["index"]] = atk.AttackResult(
                x_adv=g(z0[k][None]).data[0], iterations=0, l_img=float(enc_l[k]),
                l_net=float("nan"), l_total=float("nan"), success=False,
                stop_reason="encode_failed", z=z0[k])
    return results, acfg


def _run_pgd(cfg, fx, spec, rows):
    pcfg = pgd_config(spec, cfg.task, fx.calibration)
    x_ori = np.stack([r["x"] for r in rows])
    victim = fx.classifier if cfg.task == "classification" else fx.embedder
    x_start = None
    if pcfg.random_start:
        start = min(pcfg.alpha, pcfg.eps)
        noise = np.stack([example_rng(cfg.seed, r["index"], 2).uniform(-start, start, r["x"].shape)
                          for r in rows]).astype(x_ori.dtype)
        x_start = np.clip(x_ori + noise, np.clip(x_ori - pcfg.eps, 0, 1), np.clip(x_ori + pcfg.eps, 0, 1))
    labels = np.array([r["label"] for r in rows]) if cfg.task == "classification" else None
    out = atk.pgd_attack(victim, x_ori, pcfg, labels=labels, x_start=x_start)
    return {r["index"]: res for r, res in zip(rows, out)}, pcfg


def _run_cw(cfg, fx, spec, rows):
    ccfg = cw_config(spec)
    x_ori = np.stack([r["x"] for r in rows])
    labels = np.array([r["label"] for r in rows])
    out = atk.cw_attack(fx.classifier, x_ori, labels, ccfg)
    return {r["index"]: res for r, res in zip(rows, out)}, ccfg


_RUNNERS = {"hrfa": _run_hrfa, "pgd": _run_pgd, "cw": _run_cw}


def _defended_outcomes(cfg, fx, row, x_adv, tau):
    outcomes = {}
    for j, d in enumerate(cfg.defenses):
        seed = int(example_rng(cfg.seed, row["index"], 10 + j).integers(2**31))
        xd = d.apply(x_adv, seed=seed).astype(np.float32)
        if cfg.task == "classification":
            pred = int(fx.classifier.predict(xd[None])[0])
            outcomes[d.name] = DefenseOutcome(wrong=pred != row["label"], prediction=pred)
        else:
            dist = float(face_distance(fx.embedder, row["x"][None], xd[None]).data[0])
            outcomes[d.name] = DefenseOutcome(wrong=dist >= tau, distance=dist)
    return outcomes


def run_chunk(cfg, fx, indices):
    """Run every attack on one chunk of example indices; returns records and results."""
    rows = _originals(cfg, fx, indices)
    tau = fx.calibration.get("tau")
    clean_wrong = set()
    if cfg.task == "classification":
        # an original the victim already gets wrong is not attacked: any
        # "success" on it would owe nothing to the attack
        preds = fx.classifier.predict(np.stack([r["x"] for r in rows]))
        clean_wrong = {r["index"] for r, p in zip(rows, preds) if p != r["label"]}
    live = [r for r in rows if r["index"] not in clean_wrong]
    records, results = [], []
    for spec in cfg.attacks:
        res, _ = _RUNNERS[spec.kind](cfg, fx, spec, live) if live else ({}, None)
        for row in rows:
            if row["index"] in clean_wrong:
                records.append(ExampleRecord(
                    attack=spec.name, index=row["index"], success=False, iterations=0, l_img=0.0,
                    l2=0.0, linf=0.0, ssim=1.0, stop_reason=STOP_CLEAN_ERROR, label=row["label"],
                    prediction=int(fx.classifier.predict(row["x"][None])[0])))
                continue
            r = res[row["index"]]
            stats = metrics.perturbation_stats(row["x"], r.x_adv)
            rec = ExampleRecord(
                attack=spec.name, index=row["index"], success=bool(r.success),
                iterations=r.iterations, l_img=r.l_img, l2=stats["l2"], linf=stats["linf"],
                ssim=metrics.ssim(row["x"], r.x_adv), stop_reason=r.stop_reason,
                label=row["label"], prediction=r.prediction, distance=r.distance,
            )
            if r.success:
                rec.defended = _defended_outcomes(cfg, fx, row, r.x_adv, tau)
            records.append(rec)
            results.append((spec.name, row, r))
    return records, results


def _worker(args):
    cfg, indices = args
    fx = load_fixtures(cfg.fixtures)
    records, results = run_chunk(cfg, fx, indices)
    # ship back only what export needs
    slim = [(name, {"index": row["index"], "x": row["x"]}, r) for name, row, r in results]
    return records, slim


def run_experiment(cfg, fixtures=None):
    """Execute the configured grid and write report, traces and images.

    ``fixtures`` may pass an already-loaded :class:`FixtureSet`, in which case
    the run stays in-process.
    """
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".write-test").write_text("")
        (out / ".write-test").unlink()
    except OSError as err:
        raise ConfigError(f"output directory {out} is not writable: {err}") from None
    fx = fixtures if fixtures is not None else load_fixtures(cfg.fixtures)
    chunks = [list(range(lo, min(lo + cfg.chunk_size, cfg.samples)))
              for lo in range(0, cfg.samples, cfg.chunk_size)]
    if cfg.workers > 1 and fixtures is None:
        with ProcessPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(_worker, [(cfg, c) for c in chunks]))
    else:
        parts = [run_chunk(cfg, fx, c) for c in chunks]
    order = {a.name: k for k, a in enumerate(cfg.attacks)}
    records = sorted((r for recs, _ in parts for r in recs), key=lambda r: (order[r.attack], r.index))
    results = [x for _, res in parts for x in res]
    report = EvalReport(task=cfg.task, tau=fx.calibration.get("tau") if cfg.task == "verification" else None,
                        defenses=[d.name for d in cfg.defenses], records=records)
    write_report(report, out)
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for name, row, r in results:
        if r.trace and len(r.trace[0]) == 5:
            (traces / f"{cfg.name}-{name}_{row['index']:04d}.tsv").write_text(r.trace_lines())
        if cfg.export_images and r.success:
            export_images(row["x"], r.x_adv, out / "images", f"{cfg.name}-{name}", row["index"])
    return report


def write_report(report, out):
    out = Path(out)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary())
    (out / "report.json").write_text(report_to_json(report))


def report_to_json(report):
    def rec(r):
        d = {k: getattr(r, k) for k in ("attack", "index", "success", "iterations", "l_img", "l2",
                                         "linf", "ssim", "stop_reason", "label", "prediction",
                                         "distance")}
        d["defended"] = {k: {"wrong": bool(v.wrong), "prediction": v.prediction, "distance": v.distance}
                         for k, v in r.defended.items()}
        return d

    payload = {"task": report.task, "tau": report.tau, "defenses": report.defenses,
               "records": [rec(r) for r in report.records]}
    return json.dumps(_plain(payload), indent=1, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def load_report(path):
    raw = json.loads(Path(path).read_text())
    records = []
    for r in raw["records"]:
        defended = {k: DefenseOutcome(**v) for k, v in r.pop("defended").items()}
        records.append(ExampleRecord(defended=defended, **r))
    return EvalReport(task=raw["task"], tau=raw["tau"], defenses=raw["defenses"], records=records)


# image export

def quantize(x):
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def image_name(run, index, role):
    return f"{run}_{index:04d}_{role}.png"


def export_images(x_ori, x_adv, out_dir, run, index):
    """Write original, amplified perturbation and adversarial images as PNG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = metrics.perturbation_stats(x_ori, x_adv)
    paths = {}
    for role, img in zip(ROLES, (x_ori, stats["map"], x_adv)):
        p = out / image_name(run, index, role)
        Image.fromarray(quantize(np.transpose(img, (1, 2, 0)))).save(p, format="PNG")
        paths[role] = p
    return paths


def read_image(path):
    return np.asarray(Image.open(path), dtype=np.float64).transpose(2, 0, 1) / 255.0


def build_fixtures(seed, out_dir, spec=None):
    """Train and write fixtures plus ``calibration.json``; gate failures propagate."""
    from hrfa.models.fixtures import train_fixtures

    return train_fixtures(seed=seed, spec=spec, out_dir=out_dir)


__all__ = ["ExperimentConfig", "AttackSpec", "ConfigError", "FixtureSet", "run_experiment",
           "build_fixtures", "export_images", "load_report", "image_name"]

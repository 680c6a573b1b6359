"""Build, gate, save and load the full set of fixture models."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hrfa.models import datasets
from hrfa.models.networks import face_distance
from hrfa.models.training import (FixtureSpec, face_views, train_classifier, train_embedder,
                                  train_generator)
from hrfa.models.weights import load_network, save_network

log = logging.getLogger(__name__)

CALIBRATION_FILE = "calibration.json"
# full-scale reference settings: decision threshold, attack distance, and
# inversion budget for 3x1024x1024 images
REFERENCE_FACE_TAU = 1.1
REFERENCE_TAU_ATTACK = 1.6
REFERENCE_TAU_ENCODE = 10.0
REFERENCE_IMAGE_DIM = 3 * 1024 * 1024


class FixtureGateError(RuntimeError):
    """A fixture missed a quality gate; ``metrics`` holds what was measured."""

    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


def equal_error_threshold(same, different):
    """Threshold where false rejects of ``same`` pairs match false accepts of ``different``.

    Candidates are the observed distances; a pair is accepted when its
    distance is <= the threshold. Returns ``(threshold, eer)``.
    """
    same = np.sort(np.asarray(same, dtype=np.float64))
    different = np.sort(np.asarray(different, dtype=np.float64))
    cands = np.unique(np.concatenate([same, different]))
    frr = 1.0 - np.searchsorted(same, cands, side="right") / len(same)
    far = np.searchsorted(different, cands, side="right") / len(different)
    gap = np.abs(frr - far)
    i = int(np.argmin(gap))
    return float(cands[i]), float((frr[i] + far[i]) / 2)


def attack_threshold(tau):
    """Attack stop distance: the decision threshold scaled by the 1.6 / 1.1 overshoot."""
    return float(min(tau * REFERENCE_TAU_ATTACK / REFERENCE_FACE_TAU, 1.95))


def scaled_encode_threshold(image_dim):
    """The reference inversion budget (10 at 3x1024x1024) at equal per-pixel RMS error."""
    return float(REFERENCE_TAU_ENCODE * np.sqrt(image_dim / REFERENCE_IMAGE_DIM))


@dataclass
class FixtureSet:
    generators: list
    classifier: object
    face_generator: object
    embedder: object
    calibration: dict = field(default_factory=dict)

    @property
    def tau(self):
        return self.calibration["tau"]

    def astype(self, dtype):
        return FixtureSet([g.astype(dtype) for g in self.generators], self.classifier.astype(dtype),
                          self.face_generator.astype(dtype), self.embedder.astype(dtype),
                          dict(self.calibration))


def _file_names(classes):
    names = {f"generator_{k}": f"shapes_generator_{k}.hrfa" for k in range(classes)}
    names.update(classifier="shapes_classifier.hrfa", face_generator="faces_generator.hrfa",
                 embedder="faces_embedder.hrfa")
    return names


def evaluate_fixtures(fx, spec, rng):
    """Quality metrics: classifier accuracy, generator consistency, EER threshold."""
    n = spec.eval_samples
    z, y = datasets.sample_labelled_shapes(rng, n)
    x = datasets.render_shapes(z).astype(np.float32)
    acc = float(np.mean(fx.classifier.predict(x) == y))
    consistency = []
    for k, g in enumerate(fx.generators):
        zk = rng.standard_normal((n, g.latent_dim)).astype(np.float32)
        consistency.append(float(np.mean(fx.classifier.predict(g(zk).data) == k)))

    # calibration pairs come from the same view distribution the embedder saw
    pairs = spec.calibration_pairs
    dists = {}
    for same in (True, False):
        za, zb = datasets.sample_identity_pairs(rng, pairs, same)
        xa = face_views(fx.face_generator, za, rng)
        xb = face_views(fx.face_generator, zb, rng)
        dists[same] = np.concatenate([
            face_distance(fx.embedder, xa[i:i + 64], xb[i:i + 64]).data for i in range(0, pairs, 64)
        ]).astype(np.float64)
    tau, eer = equal_error_threshold(dists[True], dists[False])

    # real faces can only be inverted as well as the generator reproduces them
    zf = rng.standard_normal((min(n, 256), fx.face_generator.latent_dim)).astype(np.float32)
    residual = np.concatenate([
        np.linalg.norm((fx.face_generator(zf[i:i + 64]).data - datasets.render_faces(zf[i:i + 64]))
                       .reshape(len(zf[i:i + 64]), -1), axis=1) for i in range(0, len(zf), 64)])
    shapes_dim = int(np.prod(fx.generators[0].image_shape))
    faces_dim = int(np.prod(fx.face_generator.image_shape))
    return {
        "classifier_accuracy": acc,
        "generator_consistency": consistency,
        "tau": tau,
        "eer": eer,
        "tau_attack": attack_threshold(tau),
        "reference_tau": REFERENCE_FACE_TAU,
        "reference_tau_attack": REFERENCE_TAU_ATTACK,
        "mean_same_distance": float(dists[True].mean()),
        "mean_different_distance": float(dists[False].mean()),
        "tau_encode_shapes": scaled_encode_threshold(shapes_dim),
        "face_generator_residual_median": float(np.median(residual)),
        "tau_encode_faces": max(scaled_encode_threshold(faces_dim), 1.1 * float(np.median(residual))),
    }


def check_gates(metrics, spec):
    failures = []
    if metrics["classifier_accuracy"] < spec.gates["classifier_accuracy"]:
        failures.append(f"classifier accuracy {metrics['classifier_accuracy']:.3f}")
    for k, c in enumerate(metrics["generator_consistency"]):
        if c < spec.gates["generator_consistency"]:
            failures.append(f"generator {k} class consistency {c:.3f}")
    if spec.gates.get("embedder_separation", True) and not (
            metrics["mean_same_distance"] < metrics["tau"] < metrics["mean_different_distance"]):
        failures.append("embedder threshold does not separate same/different means")
    return failures


def train_fixtures(seed=0, spec=None, out_dir=None):
    """Train every fixture model from ``seed``; optionally write them to ``out_dir``.

    Raises :class:`FixtureGateError` (after writing, so the metrics file can
    be inspected) when a quality gate is missed.
    """
    spec = spec or FixtureSpec()
    root = np.random.SeedSequence(seed)
    s_gen, s_cls, s_face, s_emb, s_eval = (np.random.default_rng(s) for s in root.spawn(5))
    size = datasets.SHAPES_SIZE
    generators = []
    for k in range(spec.classes):
        g, _ = train_generator(
            lambda z, k=k: datasets.render_class(z, k),
            datasets.sample_generator_latents, spec.shapes_latent, (3, size, size),
            spec.generator_channels, spec.generator_steps, spec.batch, spec.lr, s_gen,
            label=f"generator_{k}")
        generators.append(g)
    classifier, _ = train_classifier(generators, spec, s_cls)
    fsize = datasets.FACES_SIZE
    face_g, _ = train_generator(
        datasets.render_faces, lambda rng, n: rng.standard_normal((n, spec.faces_latent)),
        spec.faces_latent, (3, fsize, fsize), spec.face_generator_channels,
        spec.face_generator_steps, spec.batch, spec.lr, s_face, label="face_generator")
    embedder, _ = train_embedder(face_g, spec, s_emb)

    for g in generators + [face_g]:
        assert g.latent_dim <= 64 and g.latent_dim * 48 <= int(np.prod(g.image_shape))
    fx = FixtureSet(generators, classifier, face_g, embedder)
    metrics = evaluate_fixtures(fx, spec, s_eval)
    failures = check_gates(metrics, spec)
    fx.calibration = {"seed": seed, "spec": _spec_record(spec), **metrics,
                      "gates_passed": not failures, "gate_failures": failures}
    if out_dir is not None:
        save_fixtures(fx, out_dir)
    if failures:
        raise FixtureGateError("fixture gates failed: " + "; ".join(failures), fx.calibration)
    return fx


def _spec_record(spec):
    rec = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in rec.items()}


def save_fixtures(fx, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _file_names(len(fx.generators))
    for k, g in enumerate(fx.generators):
        save_network(g, out / names[f"generator_{k}"], {"label": k})
    save_network(fx.classifier, out / names["classifier"])
    save_network(fx.face_generator, out / names["face_generator"])
    save_network(fx.embedder, out / names["embedder"])
    cal = dict(fx.calibration, files=names)
    (out / CALIBRATION_FILE).write_text(json.dumps(cal, indent=2, sort_keys=True) + "\n")


def load_fixtures(path, require_gates=True):
    path = Path(path)
    cal_file = path / CALIBRATION_FILE
    if not cal_file.exists():
        raise FileNotFoundError(f"no fixture calibration record at {cal_file}")
    cal = json.loads(cal_file.read_text())
    if require_gates and not cal.get("gates_passed", False):
        raise FixtureGateError(f"fixtures at {path} failed their quality gates: "
                               + "; ".join(cal.get("gate_failures", [])), cal)
    names = cal["files"]
    classes = len([k for k in names if k.startswith("generator_")])
    generators = [load_network(path / names[f"generator_{k}"])[0] for k in range(classes)]
    return FixtureSet(
        generators=generators,
        classifier=load_network(path / names["classifier"])[0],
        face_generator=load_network(path / names["face_generator"])[0],
        embedder=load_network(path / names["embedder"])[0],
        calibration=cal,
    )

"""Training loops that turn the procedural datasets into fixture models.

Every loop is driven by a single ``numpy.random.Generator`` so a seed fixes
the resulting weights exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from hrfa import autodiff as ad
from hrfa import defenses
from hrfa.models import datasets
from hrfa.autodiff import Tensor
from hrfa.models.networks import Classifier, Embedder, Generator

log = logging.getLogger(__name__)


@dataclass
class FixtureSpec:
    """Sizes and budgets for one fixture build.

    The defaults produce the fixtures the acceptance suite runs on;
    :meth:`tiny` and :meth:`small` are seconds-long variants for plumbing tests.
    """

    classes: int = datasets.SHAPES_CLASSES
    shapes_latent: int = datasets.SHAPES_LATENT
    faces_latent: int = datasets.FACES_LATENT
    generator_channels: tuple = (64, 32, 16)
    face_generator_channels: tuple = (64, 48, 32, 16)
    classifier_channels: tuple = (16, 32, 64)
    embedder_channels: tuple = (16, 32, 48, 64)
    embed_dim: int = 16
    embedder_adversarial_eps: float = 8 / 255
    generator_steps: int = 1500
    face_generator_steps: int = 2500
    classifier_steps: int = 1200
    embedder_steps: int = 1500
    batch: int = 32
    lr: float = 2e-3
    label_smoothing: float = 0.2
    eval_samples: int = 512
    calibration_pairs: int = 400
    gates: dict = field(default_factory=lambda: {
        "classifier_accuracy": 0.9,
        "generator_consistency": 0.9,
        "embedder_separation": True,
    })

    @classmethod
    def small(cls):
        """Half-minute fixtures that are right more often than not; gates off."""
        return cls(generator_channels=(16, 8, 8), face_generator_channels=(8, 8, 8, 8),
                   classifier_channels=(8, 8, 16), embedder_channels=(4, 4, 4, 4), embed_dim=4,
                   generator_steps=150, face_generator_steps=3, classifier_steps=200,
                   embedder_steps=3, batch=16, eval_samples=16, calibration_pairs=16,
                   gates={"classifier_accuracy": 0.0, "generator_consistency": 0.0,
                          "embedder_separation": False})

    @classmethod
    def tiny(cls):
        return cls(generator_channels=(8, 8, 8), face_generator_channels=(8, 8, 8, 8),
                   classifier_channels=(4, 4, 4), embedder_channels=(4, 4, 4, 4), embed_dim=4,
                   generator_steps=3, face_generator_steps=3, classifier_steps=3,
                   embedder_steps=3, batch=4, eval_samples=16, calibration_pairs=16,
                   gates={"classifier_accuracy": 0.0, "generator_consistency": 0.0,
                          "embedder_separation": False})


def _lr_at(step, total, lr):
    # constant, then linear decay over the last third
    tail = total // 3
    if step < total - tail:
        return lr
    return lr * max(0.05, (total - step) / max(tail, 1))


def _fit(params, loss_fn, steps, lr, rng, label):
    opt = ad.Adam(params, lr=lr)
    history = []
    for step in range(steps):
        opt.state.lr = _lr_at(step, steps, lr)
        opt.zero_grad()
        loss = loss_fn(rng)
        loss.backward()
        opt.step()
        history.append(float(loss.data))
        if step % 250 == 0:
            log.info("%s step %d loss %.5f", label, step, history[-1])
    return history


def train_generator(render, sample_latents, latent_dim, image_shape, channels, steps,
                    batch, lr, rng, label="generator"):
    """Regress ``render(z)`` from ``z``: a decoder standing in for a GAN generator."""
    g = Generator(latent_dim, image_shape, channels, seed=int(rng.integers(2**31))).astype(np.float32)
    g.requires_grad_(True)

    def loss_fn(rng):
        z = sample_latents(rng, batch).astype(np.float32)
        target = render(z).astype(np.float32)
        diff = ad.sub(g(z), target)
        return ad.mean(ad.square(diff))

    history = _fit(g.parameters(), loss_fn, steps, lr, rng, label)
    g.requires_grad_(False)
    return g, history


def _augment(x, rng):
    """Random purification so victims stay accurate on defended clean images."""
    x = np.array(x, dtype=np.float64)
    choice = rng.integers(0, 4, len(x))
    for kind in range(1, 4):
        idx = np.flatnonzero(choice == kind)
        if idx.size == 0:
            continue
        if kind == 1:
            x[idx] = defenses.mean_filter(x[idx], int(rng.choice([3, 5])))
        elif kind == 2:
            x[idx] = defenses.jpeg_compress(x[idx], int(rng.integers(50, 96)))
        else:
            x[idx] = defenses.pixel_deflection(x[idx], 64, 4, 0.04, int(rng.integers(2**31)))
    return x


def train_classifier(generators, spec, rng):
    """Cross-entropy on labelled renders, generator samples and defended copies."""
    f = Classifier((3, datasets.SHAPES_SIZE, datasets.SHAPES_SIZE), spec.classes,
                   spec.classifier_channels, seed=int(rng.integers(2**31))).astype(np.float32)
    f.requires_grad_(True)

    def loss_fn(rng):
        z, y = datasets.sample_labelled_shapes(rng, spec.batch)
        x = datasets.render_shapes(z)
        # a quarter of each batch comes from the generators
        k = spec.batch // 4
        if generators and k:
            cls = rng.integers(0, spec.classes, k)
            zg = rng.standard_normal((k, spec.shapes_latent)).astype(np.float32)
            gen = np.concatenate([generators[c](zg[i:i + 1]).data for i, c in enumerate(cls)])
            x[:k], y[:k] = gen, cls
        x = _augment(x, rng).astype(np.float32)
        logp = ad.log_softmax(f(x))
        # label smoothing keeps confidences off the saturated end of softmax
        target = np.full((len(y), spec.classes), spec.label_smoothing / spec.classes)
        target[np.arange(len(y)), y] += 1.0 - spec.label_smoothing
        return ad.mul(ad.sum(ad.mul(logp, target)), -1.0 / len(y))

    history = _fit(f.parameters(), loss_fn, spec.classifier_steps, spec.lr, rng, "classifier")
    f.requires_grad_(False)
    return f, history


def face_views(face_generator, z, rng):
    """Renders or generator images of ``z`` (even odds each), randomly purified."""
    x = datasets.render_faces(z)
    use_gen = rng.random(len(z)) < 0.5
    if face_generator is not None and use_gen.any():
        x[use_gen] = face_generator(z[use_gen].astype(np.float32)).data
    return _augment(x, rng).astype(np.float32)


def _fgsm_positives(e, xa, xb, eps, rng):
    """Push half the positive views one signed-gradient step away from their anchors.

    Step sizes are uniform in [0, eps]. Without this a desk-scale embedder
    flips under a single pixel step of a few 1/255, far below the budget
    any pixel attack is given.
    """
    ref = e(xa).data
    xt = Tensor(xb, requires_grad=True)
    ad.sum(ad.l2_norm(ad.sub(e(xt), ref), axis=1)).backward()
    for p in e.parameters():
        p.grad = None
    step = rng.uniform(0.0, eps, len(xb)) * (rng.random(len(xb)) < 0.5)
    out = xb + step[:, None, None, None].astype(xb.dtype) * np.sign(xt.grad)
    return np.clip(out, 0.0, 1.0).astype(xb.dtype)


def train_embedder(face_generator, spec, rng, margin=1.2):
    """Contrastive training on same/different identity face pairs.

    Positives share the identity coordinates; negatives are every other
    pairing inside the batch. Views are drawn from both the renderer and
    the face generator, with random purification, and half the positives
    get an adversarial nudge (see :func:`_fgsm_positives`).
    """
    size = datasets.FACES_SIZE
    e = Embedder((3, size, size), spec.embed_dim, spec.embedder_channels,
                 seed=int(rng.integers(2**31))).astype(np.float32)
    e.requires_grad_(True)
    P = spec.batch // 2
    pos_mask = np.eye(P)
    neg_mask = 1.0 - pos_mask

    def loss_fn(rng):
        za, zb = datasets.sample_identity_pairs(rng, P, same=True)
        xa = face_views(face_generator, za, rng)
        xb = face_views(face_generator, zb, rng)
        if spec.embedder_adversarial_eps > 0:
            xb = _fgsm_positives(e, xa, xb, spec.embedder_adversarial_eps, rng)
        ea = e(xa)
        eb = e(xb)
        # pairwise squared distances via 2 - 2 <a, b> on the unit sphere
        sim = ad.matmul(ea, ad.transpose(eb))
        d2 = ad.sub(2.0, ad.mul(sim, 2.0))
        pos = ad.mul(ad.sum(ad.mul(d2, pos_mask)), 1.0 / P)
        d = ad.sqrt(ad.add(ad.relu(d2), 1e-8))
        hinge = ad.relu(ad.sub(margin, d))
        neg = ad.mul(ad.sum(ad.mul(ad.square(hinge), neg_mask)), 1.0 / (P * (P - 1)))
        return ad.add(pos, neg)

    history = _fit(e.parameters(), loss_fn, spec.embedder_steps, spec.lr, rng, "embedder")
    e.requires_grad_(False)
    return e, history


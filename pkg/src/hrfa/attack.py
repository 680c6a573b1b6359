"""Latent-space (HRFA) attack, generator inversion, and pixel-space baselines.

Every attack works on a batch of independent instances at once: the loss
is a sum of per-instance terms with no coupling between rows, so the
gradient of the sum row ``i`` is exactly the gradient of instance ``i``'s
own loss. Instances leave the batch as soon as they stop; the remaining
rows have all taken the same number of Adam steps, so one optimiser state
can be narrowed with :meth:`AdamState.select`.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from hrfa import autodiff as ad
from hrfa.autodiff import AdamState, NonFiniteGradientError, ShapeError, Tensor
from hrfa.models.networks import Classifier, Embedder, face_distance

TASKS = ("classification", "verification")
STOP_MISCLASSIFIED = "misclassified"
STOP_THRESHOLD = "threshold"
STOP_CAP = "iteration_cap"


class AttackAborted(RuntimeError):
    """A loss or gradient went non-finite; ``traces`` holds what was logged."""

    def __init__(self, message, traces):
        super().__init__(message)
        self.traces = traces


class EncodeFailure(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of encode + attack optimisation.

    ``lam`` is the image/net loss trade-off. ``tau_attack`` is the loop
    guard on the net loss for classification (0 disables it) and the
    face-distance target for verification. ``encode_iters`` and
    ``encode_lr`` bound the inversion loop, which the attack itself does not
    specify.
    """

    task: str = "classification"
    lam: float = 50.0
    max_iters: int = 100
    lr: float = 0.05
    tau_encode: float = 1.0
    tau_attack: float = 0.0
    encode_restarts: int = 4
    encode_iters: int = 600
    encode_lr: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.max_iters < 1 or self.encode_restarts < 1 or self.encode_iters < 0:
            raise ValueError("iteration budgets and restarts must be positive")
        if self.lr <= 0 or not self.tau_encode > 0:
            raise ValueError("lr and tau_encode must be positive")

    @classmethod
    def classification_preset(cls, **overrides):
        return replace(cls(task="classification", lam=50.0, max_iters=100, lr=0.05), **overrides)

    @classmethod
    def verification_preset(cls, **overrides):
        return replace(cls(task="verification", lam=10.0, max_iters=1000, lr=0.05,
                           tau_encode=10.0, tau_attack=1.6), **overrides)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    iterations: int
    l_img: float
    l_net: float
    l_total: float
    success: bool
    stop_reason: str
    z: np.ndarray | None = None
    prediction: int | None = None
    distance: float | None = None
    trace: list = field(default_factory=list)

    def trace_lines(self):
        """Tab-separated trace: iteration, L_img, L_net, L_total, prediction or distance."""
        buf = io.StringIO()
        buf.write("iteration\tl_img\tl_net\tl_total\toutcome\n")
        for it, li, ln, lt, out in self.trace:
            buf.write(f"{it}\t{li!r}\t{ln!r}\t{lt!r}\t{out!r}\n")
        return buf.getvalue()


@dataclass
class EncodeResult:
    z: np.ndarray
    l_img: np.ndarray
    success: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return len(self.z)


# losses

def image_loss(x_adv, x_ori):
    """Euclidean distance between images; one value per row for batches."""
    x_adv = ad.as_tensor(x_adv)
    x_ori = ad.as_tensor(x_ori, dtype=x_adv.dtype) if not isinstance(x_ori, Tensor) else x_ori
    if x_adv.shape != x_ori.shape:
        raise ShapeError(f"image_loss: incompatible shapes {x_adv.shape} and {x_ori.shape}")
    diff = ad.sub(x_adv, x_ori)
    if diff.ndim == 4:
        return ad.l2_norm(diff, axis=(1, 2, 3))
    return ad.l2_norm(diff)


def net_loss_classification(f, x, y):
    """Softmax confidence on the true label ``y`` (row-wise for batches)."""
    probs = f.probabilities(x)
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (probs.shape[0],):
        raise ShapeError(f"net_loss_classification: {probs.shape[0]} images but labels {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= f.num_classes:
        raise ValueError(f"net_loss_classification: labels must be class indices < {f.num_classes}")
    return ad.gather(probs, y)


def net_loss_verification(e, x, x_adv):
    """Negative face distance, so minimising it pushes the two faces apart."""
    return ad.mul(face_distance(e, x, x_adv), -1.0)


# victim adapters: net loss + stop test for a shrinking set of rows

class _ClassificationTask:
    task = "classification"

    def __init__(self, f, labels, tau_attack=0.0):
        if not isinstance(f, Classifier):
            raise TypeError("classification attacks need a Classifier victim")
        self.f = f
        self.labels = np.asarray(labels, dtype=np.int64)
        self.tau_attack = tau_attack

    def net_loss(self, x, rows):
        return net_loss_classification(self.f, x, self.labels[rows])

    def outcome(self, x, rows, l_net):
        pred = np.argmax(self.f(x).data, axis=1)
        wrong = pred != self.labels[rows]
        below = l_net < self.tau_attack
        reason = np.where(wrong, STOP_MISCLASSIFIED, np.where(below, STOP_THRESHOLD, ""))
        return pred, wrong | below, wrong, reason


class _VerificationTask:
    task = "verification"

    def __init__(self, e, references, tau_attack):
        if not isinstance(e, Embedder):
            raise TypeError("verification attacks need an Embedder victim")
        self.e = e
        self.references = np.asarray(references, dtype=e.dtype)
        self.tau_attack = tau_attack

    def net_loss(self, x, rows):
        return net_loss_verification(self.e, self.references[rows], x)

    def outcome(self, x, rows, l_net):
        d = -np.asarray(l_net, dtype=np.float64)
        hit = d >= self.tau_attack
        return d, hit, hit, np.where(hit, STOP_THRESHOLD, "")


def _task_for(victim, cfg, labels, references):
    if cfg.task == "classification":
        if labels is None:
            raise ValueError("classification attack needs labels")
        return _ClassificationTask(victim, labels, cfg.tau_attack)
    return _VerificationTask(victim, references, cfg.tau_attack)


def _as_batch(x, dtype):
    x = np.asarray(x, dtype=dtype)
    return x[None] if x.ndim in (1, 3) else x


# encode optimisation

def encode(g, x_ori, cfg, rng=None, starts=None):
    """Invert ``g`` by Adam descent on ||g(z) - x_ori||, from random normal starts.

    Each target gets ``cfg.encode_restarts`` independent starts; a target
    stops as soon as any of its starts drops below ``cfg.tau_encode``, and
    otherwise keeps its best start after ``cfg.encode_iters`` steps.
    ``starts`` (B, R, n) overrides the random draw.
    """
    x_ori = _as_batch(x_ori, g.dtype)
    if x_ori.shape[1:] != g.image_shape:
        raise ShapeError(f"encode: image shape {x_ori.shape[1:]} does not match generator "
                         f"output {g.image_shape}")
    B, R = len(x_ori), cfg.encode_restarts
    if starts is None:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        z = rng.standard_normal((B * R, g.latent_dim)).astype(g.dtype)
    else:
        starts = np.asarray(starts)
        if starts.shape != (B, R, g.latent_dim):
            raise ShapeError(f"encode: starts {starts.shape}, expected {(B, R, g.latent_dim)}")
        z = starts.reshape(B * R, g.latent_dim).astype(g.dtype)
    owner = np.repeat(np.arange(B), R)
    best_z = np.zeros((B, g.latent_dim), dtype=g.dtype)
    best_l = np.full(B, np.inf)
    iters = np.zeros(B, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    state = AdamState(lr=cfg.encode_lr or cfg.lr)
    active = np.arange(B * R)

    for it in range(cfg.encode_iters + 1):
        zt = Tensor(z[active], requires_grad=True)
        loss = image_loss(g(zt), x_ori[owner[active]])
        vals = loss.data.astype(np.float64)
        if not np.all(np.isfinite(vals)):
            raise AttackAborted(f"encode: non-finite image loss at iteration {it}", [])
        for k, row in enumerate(active):
            b = owner[row]
            if vals[k] < best_l[b]:
                best_l[b], best_z[b] = vals[k], z[row]
                iters[b] = it
        reached = best_l < cfg.tau_encode
        done |= reached
        keep = ~done[owner[active]]
        if it == cfg.encode_iters or not keep.any():
            break
        ad.sum(loss).backward()
        grad = zt.grad
        if keep.all():
            sel = slice(None)
        else:
            sel = np.flatnonzero(keep)
            state.select(sel)
            active, grad = active[sel], grad[sel]
        zs = z[active]
        adam_step_rows(zs, grad, state, it)
        z[active] = zs
    return EncodeResult(z=best_z, l_img=best_l, success=best_l < cfg.tau_encode, iterations=iters)


def adam_step_rows(z, grad, state, iteration):
    try:
        ad.adam_step([z], [grad], state)
    except NonFiniteGradientError:
        raise NonFiniteGradientError(iteration) from None


# attack optimisation

def hrfa_attack(g, victim, z_init, cfg, x_ori=None, labels=None):
    """Optimise latent codes so g(z) misleads ``victim`` while staying near ``x_ori``.

    ``z_init`` is a (B, n) array or the :class:`EncodeResult` of
    :func:`encode`. Without ``x_ori`` the originals are synthesised as
    ``g(z_init)``. For classification ``labels`` default to the victim's
    prediction on the originals; for verification the originals are the
    reference faces. Returns one :class:`AttackResult` per row.
    """
    if isinstance(z_init, EncodeResult):
        if not np.all(z_init.success):
            bad = np.flatnonzero(~z_init.success).tolist()
            raise EncodeFailure(f"hrfa_attack: encode did not reach tau_encode for rows {bad}")
        z_init = z_init.z
    z = _as_batch(z_init, g.dtype).copy()
    if z.ndim != 2 or z.shape[1] != g.latent_dim:
        raise ShapeError(f"hrfa_attack: latent shape {z.shape} does not match generator")
    x_ori = g(z).data.copy() if x_ori is None else _as_batch(x_ori, g.dtype)
    if x_ori.shape != (len(z),) + g.image_shape:
        raise ShapeError(f"hrfa_attack: originals {x_ori.shape} do not match latents {z.shape}")
    if cfg.task == "classification" and labels is None:
        labels = victim.predict(x_ori)
    task = _task_for(victim, cfg, labels, x_ori)
    lam = cfg.lam
    B = len(z)
    traces = [[] for _ in range(B)]
    results = [None] * B
    state = AdamState(lr=cfg.lr)
    active = np.arange(B)

    for it in range(cfg.max_iters + 1):
        zt = Tensor(z[active], requires_grad=True)
        x = g(zt)
        l_img = image_loss(x, x_ori[active])
        l_net = task.net_loss(x, active)
        total = ad.add(l_img, ad.mul(l_net, lam))
        li, ln, lt = l_img.data, l_net.data, total.data
        measure, stop, _, reason = task.outcome(x, active, ln)
        for k, row in enumerate(active):
            traces[row].append((it, float(li[k]), float(ln[k]), float(lt[k]), measure[k].item()))
        if not (np.all(np.isfinite(lt))):
            raise AttackAborted(f"hrfa_attack: non-finite loss at iteration {it}", traces)
        if it == cfg.max_iters:
            reason = np.where(stop, reason, STOP_CAP)
            stop = np.ones_like(stop)
        for k in np.flatnonzero(stop):
            row = active[k]
            results[row] = _finish_hrfa(g, task, z[row], x_ori[row], row, it, reason[k],
                                        lam, traces[row])
        keep = ~stop
        if not keep.any():
            break
        total_sum = ad.sum(total)
        total_sum.backward()
        grad = zt.grad
        if not keep.all():
            sel = np.flatnonzero(keep)
            state.select(sel)
            active, grad = active[sel], grad[sel]
        zs = z[active]
        try:
            adam_step_rows(zs, grad, state, it)
        except NonFiniteGradientError as err:
            raise AttackAborted(str(err), traces) from None
        z[active] = zs
    return results


def _finish_hrfa(g, task, z_row, x_ori_row, row, iterations, reason, lam, trace):
    x_adv = g(z_row[None]).data
    rows = np.array([row])
    l_img = image_loss(x_adv, x_ori_row[None]).data
    l_net = task.net_loss(Tensor(x_adv), rows).data
    measure, _, success, _ = task.outcome(Tensor(x_adv), rows, l_net)
    out = dict(prediction=int(measure[0])) if task.task == "classification" else \
        dict(distance=float(measure[0]))
    return AttackResult(
        x_adv=x_adv[0], z=z_row.copy(), iterations=int(iterations),
        l_img=float(l_img[0]), l_net=float(l_net[0]),
        l_total=float((l_img + l_net * np.asarray(lam, dtype=l_img.dtype))[0]),
        success=bool(success[0]), stop_reason=str(reason), trace=trace, **out,
    )


# pixel-space baselines

@dataclass(frozen=True)
class PGDConfig:
    """Sign-gradient steps of size ``alpha`` inside an L-inf ball of radius ``eps``.

    Pixel scale is [0, 1]. The verification preset reads the baseline's
    step of 2 as 2/255 and uses the common 8/255 budget.
    """

    alpha: float = 0.003
    eps: float = 0.03
    max_iters: int = 100
    tau_attack: float = 0.0
    random_start: bool = False
    seed: int = 0

    @classmethod
    def verification(cls, tau_attack, **overrides):
        return replace(cls(alpha=2 / 255, eps=8 / 255, max_iters=100, tau_attack=tau_attack,
                           random_start=True), **overrides)


def pgd_attack(victim, x_ori, cfg, labels=None, x_start=None):
    """Projected sign-gradient ascent on the victim loss in image space.

    Classification ascends cross-entropy on ``labels`` and stops a row once
    it is misclassified; verification (``victim`` an :class:`Embedder`)
    ascends the face distance to ``x_ori`` and stops once it reaches
    ``cfg.tau_attack``. The distance has zero gradient at the original, so
    verification normally uses ``random_start``. ``x_start`` replaces the
    starting point (projected into the ball).
    """
    verification = isinstance(victim, Embedder)
    dtype = victim.dtype
    x_ori = _as_batch(x_ori, dtype)
    if x_ori.shape[1:] != victim.image_shape:
        raise ShapeError(f"pgd_attack: image shape {x_ori.shape[1:]} does not match victim")
    if not verification and labels is None:
        raise ValueError("pgd_attack: classification needs labels")
    labels = None if verification else np.asarray(labels, dtype=np.int64).reshape(-1)
    B = len(x_ori)
    lo = np.clip(x_ori - cfg.eps, 0.0, 1.0).astype(dtype)
    hi = np.clip(x_ori + cfg.eps, 0.0, 1.0).astype(dtype)
    x = x_ori.copy()
    if x_start is not None:
        x = np.clip(_as_batch(x_start, dtype), lo, hi)
    elif cfg.random_start and cfg.eps > 0:
        rng = np.random.default_rng(cfg.seed)
        start = min(cfg.alpha, cfg.eps)
        x = np.clip(x + rng.uniform(-start, start, x.shape).astype(dtype), lo, hi)
    results = [None] * B
    traces = [[] for _ in range(B)]
    active = np.arange(B)
    for it in range(cfg.max_iters + 1):
        xt = Tensor(x[active], requires_grad=True)
        if verification:
            d = face_distance(victim, x_ori[active], xt)
            loss, measure = d, d.data
            stop = measure >= cfg.tau_attack
        else:
            logits = victim(xt)
            loss = ad.mul(ad.gather(ad.log_softmax(logits), labels[active]), -1.0)
            measure = np.argmax(logits.data, axis=1)
            stop = measure != labels[active]
        for k, row in enumerate(active):
            traces[row].append((it, measure[k].item()))
        if it == cfg.max_iters:
            stop = np.ones_like(stop)
        for k in np.flatnonzero(stop):
            row = active[k]
            results[row] = _finish_pixel(victim, x[row], x_ori[row], it, cfg.max_iters,
                                         labels[row] if labels is not None else None,
                                         cfg.tau_attack, traces[row])
        keep = ~stop
        if not keep.any():
            break
        ad.sum(loss).backward()
        grad = xt.grad
        active, grad = active[keep], grad[keep]
        step = x[active] + cfg.alpha * np.sign(grad).astype(dtype)
        x[active] = np.clip(step, lo[active], hi[active])
    return results


def _finish_pixel(victim, x_adv, x_ori, iterations, cap, label, tau_attack, trace):
    l_img = float(np.sqrt(np.sum((x_adv.astype(np.float64) - x_ori) ** 2)))
    if isinstance(victim, Embedder):
        d = float(face_distance(victim, x_ori[None], x_adv[None]).data[0])
        success = d >= tau_attack
        reason = STOP_THRESHOLD if success else STOP_CAP
        return AttackResult(x_adv=x_adv.copy(), iterations=int(iterations), l_img=l_img,
                            l_net=-d, l_total=float("nan"), success=success, stop_reason=reason,
                            distance=d, trace=trace)
    pred = int(victim.predict(x_adv[None])[0])
    success = pred != label
    reason = STOP_MISCLASSIFIED if success else STOP_CAP
    probs = victim.probabilities(x_adv[None]).data[0]
    return AttackResult(x_adv=x_adv.copy(), iterations=int(iterations), l_img=l_img,
                        l_net=float(probs[label]), l_total=float("nan"), success=success,
                        stop_reason=reason, prediction=pred, trace=trace)


@dataclass(frozen=True)
class CWConfig:
    """Carlini-Wagner L2: ``search_steps`` binary-search rounds over the constant."""

    confidence: float = 0.0
    search_steps: int = 5
    max_iters: int = 200
    lr: float = 0.01
    initial_const: float = 1.0


def cw_attack(f, x_ori, labels, cfg=CWConfig(), task="classification"):
    """Carlini-Wagner L2 attack in tanh space; keeps the least-distorted success.

    Rows already misclassified by margin ``confidence`` are returned
    untouched with zero distortion.
    """
    if task != "classification" or not isinstance(f, Classifier):
        raise ValueError("cw_attack only applies to classification")
    dtype = f.dtype
    x_ori = _as_batch(x_ori, dtype)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, K = len(x_ori), f.num_classes
    onehot = np.eye(K, dtype=dtype)[labels]
    kappa = cfg.confidence
    w0 = np.arctanh(np.clip(2 * x_ori.astype(np.float64) - 1, -1 + 1e-6, 1 - 1e-6)).astype(dtype)

    def margins(logits):
        true = (logits * onehot).sum(axis=1)
        other = np.max(logits - 1e9 * onehot, axis=1)
        return true - other

    start_margin = margins(f(x_ori).data)
    best_l2 = np.full(B, np.inf)
    best_x = x_ori.copy()
    # already adversarial: zero distortion is optimal
    pre = start_margin <= -kappa
    best_l2[pre] = 0.0
    lower = np.zeros(B)
    upper = np.full(B, np.inf)
    const = np.full(B, cfg.initial_const)
    iters_used = np.zeros(B, dtype=np.int64)
    todo = np.flatnonzero(~pre)

    for _ in range(cfg.search_steps):
        if todo.size == 0:
            break
        w = w0[todo].copy()
        state = AdamState(lr=cfg.lr)
        found = np.zeros(todo.size, dtype=bool)
        c = const[todo].astype(dtype)
        for it in range(cfg.max_iters):
            wt = Tensor(w, requires_grad=True)
            x = ad.mul(ad.add(ad.tanh(wt), 1.0), 0.5)
            l2sq = ad.sum(ad.square(ad.sub(x, x_ori[todo])), axis=(1, 2, 3))
            logits = f(x)
            true = ad.sum(ad.mul(logits, onehot[todo]), axis=1)
            other = ad.max(ad.sub(logits, 1e9 * onehot[todo]), axis=1)
            hinge = ad.relu(ad.add(ad.sub(true, other), kappa))
            loss = ad.sum(ad.add(l2sq, ad.mul(hinge, c)))
            m = true.data - other.data
            l2 = np.sqrt(l2sq.data.astype(np.float64))
            improved = (m <= -kappa) & (l2 < best_l2[todo])
            for k in np.flatnonzero(improved):
                best_l2[todo[k]] = l2[k]
                best_x[todo[k]] = x.data[k]
            found |= m <= -kappa
            loss.backward()
            ad.adam_step([w], [wt.grad], state)
        iters_used[todo] += cfg.max_iters
        # binary search on the constant
        for k, row in enumerate(todo):
            if found[k]:
                upper[row] = min(upper[row], const[row])
                const[row] = (lower[row] + upper[row]) / 2
            else:
                lower[row] = max(lower[row], const[row])
                const[row] = const[row] * 10 if math.isinf(upper[row]) else (lower[row] + upper[row]) / 2

    results = []
    for i in range(B):
        pred = int(f.predict(best_x[i][None])[0])
        success = pred != labels[i]
        l2 = float(np.sqrt(np.sum((best_x[i].astype(np.float64) - x_ori[i]) ** 2)))
        results.append(AttackResult(
            x_adv=best_x[i], iterations=int(iters_used[i]), l_img=l2,
            l_net=float(f.probabilities(best_x[i][None]).data[0, labels[i]]),
            l_total=float("nan"), success=success,
            stop_reason=STOP_MISCLASSIFIED if success else STOP_CAP, prediction=pred,
        ))
    return results

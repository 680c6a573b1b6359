"""Seeded random computation graphs for gradient checking.

Each case is ``(name, inputs, fn)`` where ``fn`` maps a list of tensors to a
scalar tensor. Inputs are float64 arrays; the suite differentiates with
respect to every one of them.
"""

import numpy as np

from hrfa import autodiff as ad
from hrfa.models.networks import Classifier, Embedder, Generator, face_distance

UNARY = [
    ("tanh", ad.tanh),
    ("sigmoid", ad.sigmoid),
    ("exp", lambda t: ad.exp(ad.mul(t, 0.3))),
    ("square", ad.square),
    ("leaky", lambda t: ad.leaky_relu(t, 0.2)),
    ("softplus-ish", lambda t: ad.log(ad.add(ad.exp(t), 1.0))),
    ("sqrt", lambda t: ad.sqrt(ad.add(ad.square(t), 1.0))),
]

REDUCE = [
    ("sum", ad.sum),
    ("mean", ad.mean),
    ("l2", ad.l2_norm),
    ("logsumexp", lambda t: ad.sum(ad.log_softmax(ad.reshape(t, (1, -1))) * -1.0)),
]


def _chain(rng, depth):
    ops = [UNARY[i] for i in rng.integers(len(UNARY), size=depth)]
    red = REDUCE[rng.integers(len(REDUCE))]

    def fn(ts):
        a, b = ts
        h = ad.add(ad.mul(a, b), ad.mul(a, 0.5))
        for _, op in ops:
            h = op(h)
        h = ad.matmul(h, ad.transpose(b))
        return red[1](h)

    name = "->".join(n for n, _ in ops) + "|" + red[0]
    return name, fn


def elementwise_cases(seed=0, count=12):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        name, fn = _chain(rng, depth=int(rng.integers(2, 5)))
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 6)))
        cases.append((f"chain{i}:{name}", [rng.standard_normal(shape), rng.standard_normal(shape)], fn))
    return cases


def conv_cases(seed=1, count=6):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = rng.standard_normal((2, cin, 6, 6))
        w = rng.standard_normal((cout, cin, 3, 3)) * 0.5
        wt = rng.standard_normal((cout, 2, 3, 3)) * 0.5
        b = rng.standard_normal(cout)

        def fn(ts, stride=stride, pad=pad):
            x, w, wt, b = ts
            h = ad.tanh(ad.conv2d(x, w, b, stride=stride, padding=pad))
            h = ad.conv_transpose2d(h, wt, None, stride=stride, padding=pad)
            return ad.sum(ad.square(ad.avg_pool2d(h, 1)))

        cases.append((f"conv{i}:s{stride}p{pad}", [x, w, wt, b], fn))
    return cases


def stack_cases(seed=2):
    """Full generator -> victim stacks at miniature size, differentiated in z and weights."""
    rng = np.random.default_rng(seed)
    g = Generator(latent_dim=6, image_shape=(3, 16, 16), channels=(4, 3), seed=3).astype(np.float64)
    f = Classifier(image_shape=(3, 16, 16), num_classes=3, channels=(3, 4, 4), seed=4).astype(np.float64)
    e = Embedder(image_shape=(3, 16, 16), embed_dim=4, channels=(3, 4, 4), seed=5).astype(np.float64)
    z = rng.standard_normal((2, 6))
    x_ref = rng.uniform(0.2, 0.8, (2, 3, 16, 16))
    labels = np.array([0, 2])
    wname = "up1.weight"

    def hrfa_cls(ts):
        z, w = ts
        g.params[wname] = w
        x = g(z)
        l_img = ad.l2_norm(ad.sub(x, x_ref), axis=(1, 2, 3))
        p = ad.gather(f.probabilities(x), labels)
        return ad.sum(ad.add(l_img, ad.mul(p, 50.0)))

    def hrfa_ver(ts):
        (z,) = ts
        x = g(z)
        l_img = ad.l2_norm(ad.sub(x, x_ref), axis=(1, 2, 3))
        d = face_distance(e, x_ref, x)
        return ad.sum(ad.sub(l_img, ad.mul(d, 10.0)))

    def pgd_ce(ts):
        (x,) = ts
        return ad.sum(ad.mul(ad.gather(ad.log_softmax(f(x)), labels), -1.0))

    w0 = g.params[wname].data.copy()
    x0 = rng.uniform(0.2, 0.8, (2, 3, 16, 16))
    return [
        ("stack:g-f-classification", [z, w0], hrfa_cls),
        ("stack:g-e-verification", [z.copy()], hrfa_ver),
        ("stack:f-cross-entropy", [x0], pgd_ce),
    ]


def all_cases():
    return elementwise_cases() + conv_cases() + stack_cases()


def gradient_error(fn, inputs, h=1e-4):
    """Max relative error between backprop and central differences over all inputs."""
    from oracles import central_difference, relative_error

    ts = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    fn(ts).backward()
    worst = 0.0
    for k, t in enumerate(ts):
        def scalar(v, k=k):
            args = [ad.Tensor(v) if j == k else ad.Tensor(inputs[j]) for j in range(len(inputs))]
            return float(fn(args).data)

        fd = central_difference(scalar, inputs[k], h)
        worst = max(worst, relative_error(t.grad, fd, floor=1e-6))
    return worst

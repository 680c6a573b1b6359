"""Small generator, classifier and embedding networks built on :mod:`hrfa.autodiff`.

All three are plain parameter dictionaries plus a forward function. They
take and return batched arrays; a single image is a batch of one.
"""

from __future__ import annotations

import numpy as np

from hrfa import autodiff as ad
from hrfa.autodiff import ShapeError, Tensor


class Network:
    """Named parameters plus a forward pass.

    ``kind`` and ``config`` are enough to rebuild an empty instance; the
    weights file stores both next to the parameter payloads.
    """

    kind = "network"

    def __init__(self, **config):
        self.config = dict(config)
        self.params: dict[str, Tensor] = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        clone = type(self)(**self.config)
        clone.params = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
        return clone

    def requires_grad_(self, flag=True):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def parameters(self):
        return list(self.params.values())

    def _init(self, rng, name, shape, fan_in, out_dim, gain=np.sqrt(2.0)):
        # He-style scaling; gain 1 for layers feeding a sigmoid/softmax/normalise
        self.params[name + ".weight"] = Tensor(rng.standard_normal(shape) * gain / np.sqrt(fan_in))
        self.params[name + ".bias"] = Tensor(np.zeros(out_dim))

    def _input(self, x, expected):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim == len(expected):
            x = ad.reshape(ad.as_tensor(x), (1,) + data.shape)
            data = x.data
        if data.shape[1:] != tuple(expected):
            raise ShapeError(f"{self.kind}: expected input (B, {expected}), got {data.shape}")
        x = ad.as_tensor(x)
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        return x

    def __call__(self, x):
        return self.forward(x)


class Generator(Network):
    """Latent code (B, n) -> image (B, C, H, W) in [0, 1].

    Dense layer to a 4x4 map, then stride-2 transposed convolutions that
    double the resolution, finishing in a sigmoid.
    """

    kind = "generator"

    def __init__(self, latent_dim=32, image_shape=(3, 32, 32), channels=(64, 32, 16), seed=0):
        super().__init__(latent_dim=latent_dim, image_shape=tuple(image_shape),
                         channels=tuple(channels), seed=seed)
        c, h, w = image_shape
        ups = int(np.log2(h // 4))
        if h != w or 4 * 2 ** ups != h or len(channels) != ups:
            raise ValueError(f"generator: need square power-of-two image and {ups} channel stages")
        if latent_dim >= c * h * w:
            raise ValueError("generator: latent dimension must be far below image dimension")
        self.latent_dim = latent_dim
        self.image_shape = tuple(image_shape)
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        self._init(rng, "fc", (latent_dim, channels[0] * 16), latent_dim, channels[0] * 16)
        chans = list(channels) + [c]
        for i in range(ups):
            cin, cout = chans[i], chans[i + 1]
            gain = 1.0 if i == ups - 1 else np.sqrt(2.0)
            self._init(rng, f"up{i}", (cin, cout, 4, 4), cin * 4, cout, gain)

    def forward(self, z):
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = ad.reshape(z, (1, z.shape[0]))
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"generator: expected latent (B, {self.latent_dim}), got {z.shape}")
        p = self.params
        h = ad.bias_add(ad.matmul(z, p["fc.weight"]), p["fc.bias"])
        h = ad.leaky_relu(ad.reshape(h, (z.shape[0], self.channels[0], 4, 4)), 0.2)
        n_up = len(self.channels)
        for i in range(n_up):
            h = ad.conv_transpose2d(h, p[f"up{i}.weight"], p[f"up{i}.bias"], stride=2, padding=1)
            h = ad.sigmoid(h) if i == n_up - 1 else ad.leaky_relu(h, 0.2)
        return h


class _ConvTrunk(Network):
    """Stride-2 4x4 convolutions with leaky ReLU, flattened at the end."""

    def _build_trunk(self, rng, image_shape, channels):
        c, h, w = image_shape
        chans = [c] + list(channels)
        for i in range(len(channels)):
            self._init(rng, f"conv{i}", (chans[i + 1], chans[i], 4, 4), chans[i] * 16, chans[i + 1])
        side_h, side_w = h >> len(channels), w >> len(channels)
        return channels[-1] * side_h * side_w

    def _trunk(self, x):
        h = self._input(x, self.image_shape)
        for i in range(len(self.channels)):
            h = ad.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"],
                          stride=2, padding=1)
            h = ad.leaky_relu(h, 0.2)
        return ad.reshape(h, (h.shape[0], -1))


class Classifier(_ConvTrunk):
    kind = "classifier"

    def __init__(self, image_shape=(3, 32, 32), num_classes=4, channels=(16, 32, 64), seed=0):
        super().__init__(image_shape=tuple(image_shape), num_classes=num_classes,
                         channels=tuple(channels), seed=seed)
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        flat = self._build_trunk(rng, image_shape, channels)
        self._init(rng, "fc", (flat, num_classes), flat, num_classes, gain=1.0)

    def forward(self, x):
        """Per-class logits, shape (B, K)."""
        h = self._trunk(x)
        return ad.bias_add(ad.matmul(h, self.params["fc.weight"]), self.params["fc.bias"])

    def probabilities(self, x):
        return ad.softmax(self.forward(x))

    def predict(self, x):
        return np.argmax(self.forward(x).data, axis=1)


class Embedder(_ConvTrunk):
    kind = "embedder"

    def __init__(self, image_shape=(3, 64, 64), embed_dim=16, channels=(16, 32, 64, 64), seed=0):
        super().__init__(image_shape=tuple(image_shape), embed_dim=embed_dim,
                         channels=tuple(channels), seed=seed)
        self.image_shape = tuple(image_shape)
        self.embed_dim = embed_dim
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        flat = self._build_trunk(rng, image_shape, channels)
        self._init(rng, "fc", (flat, embed_dim), flat, embed_dim, gain=1.0)

    def forward(self, x):
        """Unit-norm embeddings, shape (B, d)."""
        h = self._trunk(x)
        e = ad.bias_add(ad.matmul(h, self.params["fc.weight"]), self.params["fc.bias"])
        return ad.normalize(e)


NETWORKS = {cls.kind: cls for cls in (Generator, Classifier, Embedder)}


def generate(g, z):
    """Image batch g(z); ``z`` may be a single code or a (B, n) batch."""
    return g(z)


def classify(f, x):
    """Class probabilities (B, K)."""
    return f.probabilities(x)


def face_distance(e, x1, x2):
    """Euclidean distance between unit embeddings, one value per batch row."""
    a, b = e(x1), e(x2)
    if a.shape != b.shape:
        raise ShapeError(f"face_distance: incompatible shapes {a.shape} and {b.shape}")
    return ad.l2_norm(ad.sub(a, b), axis=1)

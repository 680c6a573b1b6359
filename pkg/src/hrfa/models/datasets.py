"""Procedural image families used to train and probe the fixture models.

Both renderers are deterministic functions of a standard-normal latent code,
so a "real" image is ``render(z)`` while the trained generator approximates
the same map. Everything is vectorised over a leading batch axis and
returns float arrays in [0, 1] with layout (B, C, H, W).
"""

import numpy as np

SHAPES_SIZE = 32
SHAPES_LATENT = 32
SHAPES_CLASSES = 4
FACES_SIZE = 64
FACES_LATENT = 64
FACE_IDENTITY_DIMS = 10

# class k -> (orientation sign, warmth sign)
_CLASS_SIGNS = {0: (1.0, 1.0), 1: (1.0, -1.0), 2: (-1.0, 1.0), 3: (-1.0, -1.0)}
_WARM = np.array([0.92, 0.38, 0.12])
_COOL = np.array([0.12, 0.40, 0.92])


def _grid(size):
    ax = np.arange(size) + 0.5
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return yy, xx


def _cosine_basis(size, count):
    """Low-frequency separable cosine images, lowest frequencies first."""
    yy, xx = _grid(size)
    freqs = sorted(
        ((u, v) for u in range(8) for v in range(8) if u + v > 0),
        key=lambda uv: (uv[0] + uv[1], uv),
    )[:count]
    basis = [np.cos(np.pi * u * xx / size) * np.cos(np.pi * v * yy / size) for u, v in freqs]
    return np.stack(basis)


def _soft_ellipse(yy, xx, cy, cx, ry, rx, sharpness):
    r = np.sqrt(((yy - cy[:, None, None]) / ry[:, None, None]) ** 2
                + ((xx - cx[:, None, None]) / rx[:, None, None]) ** 2)
    return 1.0 / (1.0 + np.exp(-sharpness * (1.0 - r)))


def _texture(z, size, amplitude):
    # z: (B, K) coefficients; each basis image drives one colour channel in turn
    basis = _cosine_basis(size, z.shape[1])
    out = np.zeros((z.shape[0], 3, size, size))
    for i in range(z.shape[1]):
        out[:, i % 3] += amplitude * z[:, i, None, None] * basis[i]
    return out


# shapes: 4-way classification

def shape_params(z):
    """Map latent codes (B, 32) to named render parameters."""
    z = np.asarray(z, dtype=np.float64)
    return {
        "cx": np.clip(16.0 + 3.0 * z[:, 0], 8.0, 24.0),
        "cy": np.clip(16.0 + 3.0 * z[:, 1], 8.0, 24.0),
        "aspect": z[:, 2],
        "size": np.clip(6.5 + 1.0 * z[:, 3], 4.0, 9.5),
        "warmth": z[:, 4],
        "gain": np.clip(0.85 + 0.08 * z[:, 5], 0.6, 1.0),
        "bg": 0.45 + 0.07 * z[:, 6:9],
        "texture": z[:, 9:],
    }


def render_shapes(z):
    """Render a soft coloured ellipse over a smooth background.

    ``aspect`` > 0 gives a wide ellipse, < 0 a tall one; ``warmth`` > 0 mixes
    toward orange, < 0 toward blue. :func:`shape_labels` reads the class off
    those two signs.
    """
    p = shape_params(z)
    B = len(p["cx"])
    yy, xx = _grid(SHAPES_SIZE)
    stretch = np.exp(0.5 * np.tanh(p["aspect"]) * 1.1)
    rx, ry = p["size"] * stretch, p["size"] / stretch
    mask = _soft_ellipse(yy, xx, p["cy"], p["cx"], ry, rx, sharpness=5.0)[:, None]
    t = 1.0 / (1.0 + np.exp(-2.0 * p["warmth"]))
    colour = (t[:, None] * _WARM + (1 - t[:, None]) * _COOL) * p["gain"][:, None]
    bg = p["bg"][:, :, None, None] + _texture(p["texture"], SHAPES_SIZE, 0.025)
    img = bg * (1 - mask) + colour[:, :, None, None] * mask
    assert img.shape == (B, 3, SHAPES_SIZE, SHAPES_SIZE)
    return np.clip(img, 0.0, 1.0)


def shape_labels(z):
    z = np.asarray(z)
    wide = z[:, 2] > 0
    warm = z[:, 4] > 0
    return np.where(wide, 0, 2) + np.where(warm, 0, 1)


def class_code(z, label):
    """Map a standard-normal generator latent to a render code of class ``label``.

    The two class coordinates become ``sign * (1.25 + 0.5 * z)``, so a code
    crosses into a neighbouring class once its coordinate drops below -2.5.
    """
    orient, warm = _CLASS_SIGNS[int(label)]
    code = np.array(z, dtype=np.float64, copy=True)
    code[:, 2] = orient * (1.25 + 0.5 * code[:, 2])
    code[:, 4] = warm * (1.25 + 0.5 * code[:, 4])
    return code


def render_class(z, label):
    return render_shapes(class_code(z, label))


def sample_generator_latents(rng, count, truncate=2.0):
    """Training latents for a class generator: class coordinates clipped to +-truncate."""
    z = rng.standard_normal((count, SHAPES_LATENT))
    z[:, [2, 4]] = np.clip(z[:, [2, 4]], -truncate, truncate)
    return z


def sample_labelled_shapes(rng, count):
    """Mixed-class latents whose class coordinates densely cover the boundary."""
    z = rng.standard_normal((count, SHAPES_LATENT))
    z[:, 2] = rng.uniform(-2.5, 2.5, count)
    z[:, 4] = rng.uniform(-2.5, 2.5, count)
    return z, shape_labels(z)


# faces: identity verification

_SKIN_A = np.array([0.95, 0.80, 0.68])
_SKIN_B = np.array([0.55, 0.38, 0.28])
_HAIR_A = np.array([0.12, 0.08, 0.05])
_HAIR_B = np.array([0.85, 0.65, 0.30])
_IRIS_A = np.array([0.10, 0.25, 0.55])
_IRIS_B = np.array([0.35, 0.20, 0.08])


def _mix(a, b, t):
    t = (1.0 / (1.0 + np.exp(-1.5 * t)))[:, None]
    return t * a + (1 - t) * b


def render_faces(z):
    """Render a cartoon face; the first ten latent coordinates are identity.

    Coordinates 10-15 move the face, tilt the lighting and tint the
    background; the rest drive a faint background texture.
    """
    z = np.asarray(z, dtype=np.float64)
    B = len(z)
    S = FACES_SIZE
    yy, xx = _grid(S)
    cx = 32.0 + 2.0 * np.tanh(z[:, 10] / 2)
    cy = 33.0 + 2.0 * np.tanh(z[:, 11] / 2)
    fw = 14.0 + 3.0 * np.tanh(z[:, 1] / 2)
    fh = 19.0 + 3.0 * np.tanh(z[:, 2] / 2)
    eye_dx = 6.5 + 1.5 * np.tanh(z[:, 3] / 2)
    eye_r = 2.4 + 0.6 * np.tanh(z[:, 4] / 2)
    eye_dy = -4.0 + 1.5 * np.tanh(z[:, 5] / 2)
    mouth_w = 6.0 + 2.0 * np.tanh(z[:, 6] / 2)
    hair_h = 7.0 + 3.0 * np.tanh(z[:, 8] / 2)

    skin = _mix(_SKIN_A, _SKIN_B, z[:, 0])
    hair = _mix(_HAIR_A, _HAIR_B, z[:, 7])
    iris = _mix(_IRIS_A, _IRIS_B, z[:, 9])
    bg = 0.5 + 0.12 * np.tanh(z[:, 13:16])

    img = bg[:, :, None, None] + _texture(z[:, 16:], S, 0.015)
    img = np.broadcast_to(img, (B, 3, S, S)).copy()

    def paint(mask, colour):
        nonlocal img
        m = mask[:, None]
        img = img * (1 - m) + colour[:, :, None, None] * m

    top = cy - fh
    hair_mask = _soft_ellipse(yy, xx, top + hair_h * 0.9, cx, np.full(B, 1.0) * hair_h + 4.0,
                              fw + 2.0, 4.0)
    hair_mask = hair_mask / (1.0 + np.exp(yy[None] - (top + 1.6 * hair_h)[:, None, None]))
    paint(hair_mask, hair)
    paint(_soft_ellipse(yy, xx, cy, cx, fh, fw, 6.0), skin)
    ey = cy + eye_dy
    white = np.full((B, 3), 0.95)
    for side in (-1.0, 1.0):
        ex = cx + side * eye_dx
        paint(_soft_ellipse(yy, xx, ey, ex, eye_r * 0.8, eye_r * 1.3, 4.0), white)
        paint(_soft_ellipse(yy, xx, ey, ex, eye_r * 0.6, eye_r * 0.6, 4.0), iris)
    lips = skin * np.array([0.75, 0.45, 0.45])
    paint(_soft_ellipse(yy, xx, cy + 0.55 * fh, cx, np.full(B, 1.6), mouth_w, 4.0), lips)

    light = 1.0 + 0.12 * (np.tanh(z[:, 12])[:, None, None] * (xx[None] - 32) / 32)
    img = img * light[:, None]
    return np.clip(img, 0.0, 1.0)


def sample_identity_pairs(rng, pairs, same):
    """Latent pairs sharing identity coordinates (``same``) or drawn independently."""
    za = rng.standard_normal((pairs, FACES_LATENT))
    zb = rng.standard_normal((pairs, FACES_LATENT))
    if same:
        zb[:, :FACE_IDENTITY_DIMS] = za[:, :FACE_IDENTITY_DIMS]
    return za, zb

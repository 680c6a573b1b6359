# %% [markdown]
# # Inverting a generator
#
# Before attacking a real image it must be found in the generator's latent
# space. Encode runs Adam on ||g(z) - x|| from several random starts and
# stops at the first one under the threshold.
#
# Set ``HRFA_FIXTURES`` to a directory built by ``hrfa fixtures build`` to
# use the full fixtures; otherwise a half-minute set is trained here.

# %%
import os

import numpy as np

from hrfa import attack
from hrfa.models import datasets
from hrfa.models.fixtures import load_fixtures, train_fixtures
from hrfa.models.training import FixtureSpec

if os.environ.get("HRFA_FIXTURES"):
    fx = load_fixtures(os.environ["HRFA_FIXTURES"])
else:
    fx = train_fixtures(seed=0, spec=FixtureSpec.small())
g = fx.generators[0]
print("latent", g.latent_dim, "image", g.image_shape)

# %% [markdown]
# Self inversion: the target really is in the range of g.

# %%
tau = fx.calibration.get("tau_encode_shapes", 1.0)
z_true = datasets.sample_generator_latents(np.random.default_rng(3), 8).astype(np.float32)
target = g(z_true).data
cfg = attack.AttackConfig(tau_encode=tau, encode_iters=600, lr=0.05)
res = attack.encode(g, target, cfg, rng=np.random.default_rng(4))
print(f"threshold {tau:.3f}")
for k in range(len(res)):
    print(f"trial {k}: L_img {res.l_img[k]:.3f} after {res.iterations[k]:3d} steps  "
          f"{'ok' if res.success[k] else 'missed'}")

# %% [markdown]
# A render from the procedural source is only approximately in range: the
# loss settles near the generator's own residual.

# %%
real = datasets.render_class(z_true[:4], 0).astype(np.float32)
res = attack.encode(g, real, cfg, rng=np.random.default_rng(5))
print("real renders, L_img:", np.round(res.l_img, 3))

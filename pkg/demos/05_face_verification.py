# %% [markdown]
# # Attacking face verification
#
# Two faces are the same person when the embedding distance is below tau.
# Starting from a real face, HRFA first encodes it, then pushes the
# generated face away from the original identity until the distance
# reaches the attack threshold. PGD does the same in pixel space.
#
# The half-minute fixtures trained when ``HRFA_FIXTURES`` is unset have a
# barely trained embedder, so the numbers only show the mechanics.

# %%
import os

import numpy as np

from hrfa import attack, metrics
from hrfa.defenses import mean_filter
from hrfa.models import datasets
from hrfa.models.fixtures import load_fixtures, train_fixtures
from hrfa.models.networks import face_distance
from hrfa.models.training import FixtureSpec

if os.environ.get("HRFA_FIXTURES"):
    fx = load_fixtures(os.environ["HRFA_FIXTURES"])
else:
    fx = train_fixtures(seed=0, spec=FixtureSpec.small())
cal = fx.calibration
g, e = fx.face_generator, fx.embedder
print(f"tau {cal['tau']:.3f}  attack threshold {cal['tau_attack']:.3f}  EER {cal['eer']:.3f}")

# %%
x_ori = datasets.render_faces(np.random.default_rng(11).standard_normal((6, g.latent_dim))).astype(np.float32)
cfg = attack.AttackConfig.verification_preset(tau_attack=cal["tau_attack"],
                                             tau_encode=cal.get("tau_encode_faces", 3.0),
                                             max_iters=300)
enc = attack.encode(g, x_ori, cfg, rng=np.random.default_rng(12))
print("encode L_img", np.round(enc.l_img, 2))

# %%
hrfa = attack.hrfa_attack(g, e, enc.z, cfg, x_ori=x_ori)
pgd = attack.pgd_attack(e, x_ori, attack.PGDConfig.verification(cal["tau_attack"]),
                        x_start=np.clip(x_ori + np.random.default_rng(13).uniform(-2 / 255, 2 / 255, x_ori.shape), 0, 1))
for name, out in (("hrfa", hrfa), ("pgd", pgd)):
    for k, r in enumerate(out):
        d_mf = float(face_distance(e, x_ori[k][None], mean_filter(r.x_adv[None], 5)).data[0])
        print(f"{name:<5} #{k}  {'ok ' if r.success else 'no '} d {r.distance:.3f}  "
              f"after mean filter {d_mf:.3f}  ssim {metrics.ssim(x_ori[k], r.x_adv):.3f}")

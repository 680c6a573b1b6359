# %% [markdown]
# # Feature-space attack against a classifier
#
# HRFA moves the latent z of a generated image until the classifier is
# wrong, keeping g(z) close to the original. PGD and C&W perturb pixels
# directly. We compare what survives the defenses.

# %%
import os

import numpy as np

from hrfa import attack, metrics
from hrfa.defenses import DefenseConfig
from hrfa.models.fixtures import load_fixtures, train_fixtures
from hrfa.models.training import FixtureSpec

if os.environ.get("HRFA_FIXTURES"):
    fx = load_fixtures(os.environ["HRFA_FIXTURES"])
else:
    fx = train_fixtures(seed=0, spec=FixtureSpec.small())

label = 1
g, f = fx.generators[label], fx.classifier
z = np.random.default_rng(7).standard_normal((16, g.latent_dim)).astype(np.float32)
x_ori = g(z).data
keep = f.predict(x_ori) == label
z, x_ori = z[keep], x_ori[keep]
labels = np.full(len(z), label)
print(len(z), "originals classified correctly")

# %%
hrfa = attack.hrfa_attack(g, f, z, attack.AttackConfig.classification_preset(), x_ori=x_ori, labels=labels)
pgd = attack.pgd_attack(f, x_ori, attack.PGDConfig(), labels=labels)
cw = attack.cw_attack(f, x_ori, labels)

defs = [DefenseConfig(kind="mean_filter"), DefenseConfig(kind="pixel_deflection"), DefenseConfig(kind="jpeg")]
for name, out in (("hrfa", hrfa), ("pgd", pgd), ("cw", cw)):
    ok = [k for k, r in enumerate(out) if r.success]
    line = f"{name:<5} success {len(ok)}/{len(out)}"
    if ok:
        xs = np.stack([out[k].x_adv for k in ok])
        ssim = np.mean([metrics.ssim(x_ori[k], out[k].x_adv) for k in ok])
        l2 = np.mean([metrics.perturbation_stats(x_ori[k], out[k].x_adv)["l2"] for k in ok])
        line += f"  l2 {l2:.2f}  ssim {ssim:.3f}"
        for d in defs:
            evaded = f.predict(d.apply(xs).astype(np.float32)) != label
            line += f"  {d.kind} {evaded.mean():.2f}"
    print(line)

# %% [markdown]
# An HRFA trace: image loss grows as the net loss (true-class
# probability) falls, until the prediction flips.

# %%
print(hrfa[0].trace_lines())

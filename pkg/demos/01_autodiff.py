# %% [markdown]
# # Reverse-mode gradients, checked by finite differences
#
# Every attack in this package is plain gradient descent, so the first thing
# to trust is the gradient. We build a small composed graph, run backward,
# and compare against a five-point central difference in float64.

# %%
import numpy as np

from hrfa import autodiff as ad
from hrfa.autodiff import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)


def f(x, w):
    h = ad.tanh(ad.conv2d(x, w, stride=2, padding=1))
    return ad.mean(ad.square(ad.l2_norm(ad.reshape(h, (2, -1)), axis=1)))


loss = f(x, w)
loss.backward()
print("loss", float(loss.data))

# %% [markdown]
# Central differences on a handful of weight entries.

# %%
def numeric(i, h=1e-4):
    def at(d):
        w2 = w.data.copy()
        w2.flat[i] += d
        return float(f(Tensor(x.data), Tensor(w2)).data)
    return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)


for i in rng.choice(w.data.size, 5, replace=False):
    a, n = w.grad.flat[i], numeric(i)
    print(f"w[{i:3d}]  analytic {a:+.8f}  numeric {n:+.8f}  rel {abs(a - n) / max(abs(n), 1e-6):.1e}")

# %% [markdown]
# Adam with bias correction drives the same loss down.

# %%
opt = ad.Adam([w], lr=0.05)
for step in range(60):
    opt.zero_grad()
    loss = f(x, w)
    loss.backward()
    opt.step()
print("after 60 Adam steps", float(loss.data))

"""Walk through the differentiable array engine.

Builds a few tensors, runs a conv -> norm -> relu chain, backpropagates a
scalar loss and verifies the gradients against finite differences.

Run:  python demos/01_autodiff_basics.py
"""
import numpy as np

from distinctnet import autodiff as ad
from distinctnet.autodiff import DTensor

rng = np.random.default_rng(0)

# a tiny convolution with a bias, all differentiable
x = DTensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True, name="x")
w = DTensor(rng.standard_normal((4, 2, 3, 3)) * 0.4, requires_grad=True, name="w")
b = DTensor(np.zeros(4), requires_grad=True, name="b")
gamma = DTensor(np.ones(4), requires_grad=True, name="gamma")
beta = DTensor(np.zeros(4), requires_grad=True, name="beta")


def network(ts):
    xx, ww, bb, g, be = ts
    y = ad.conv2d(xx, ww, bb, pad=1)
    y = ad.group_norm(y, groups=2, gamma=g, beta=be)
    y = ad.relu(y)
    return ad.mean(ad.mul(y, y))


loss = network([x, w, b, gamma, beta])
loss.backward()
print(f"loss = {loss.item():.6f}")
print(f"gradient shapes: x {x.grad.shape}, w {w.grad.shape}, b {b.grad.shape}")

# the engine's gradients vs central finite differences
report = ad.grad_check(network, [x, w, b, gamma, beta], tol=1e-4)
print(report)

# the two losses of the training pipeline
logits = DTensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
labels = rng.integers(0, 2, size=(1, 4, 4))
print(f"cross entropy  : {ad.cross_entropy_loss(logits, labels).item():.4f}")
targets = rng.integers(0, 2, size=(1, 2, 4, 4)).astype(float)
print(f"multilabel BCE : {ad.bce_multilabel_loss(logits, targets).item():.4f}")

# one AdamW step with decoupled decay
p = DTensor(np.array([1.0]), requires_grad=True)
p.grad = np.array([1.0])
state = ad.AdamWState(lr=0.1, weight_decay=0.0)
ad.adamw_step({"p": p}, state)
print(f"AdamW unit step: 1.0 -> {p.data[0]:.4f} (bias-corrected unit update)")

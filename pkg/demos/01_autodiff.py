"""
Reverse-mode differentiation on a tape
======================================

Build a small loss from taped ops, take first and second derivatives,
and compare against central differences with ``grad_check``.
"""

import numpy as np

from lst import autodiff as ad

# every operation is recorded on a tape; leaves are the inputs we differentiate
tape = ad.Tape()
x = tape.leaf(np.array([0.5, -1.0, 2.0]), name="x")
y = ad.sum_(ad.multiply(ad.exp(x), x))          # sum(x * e^x)
(gx,) = ad.grad(y, [x], create_graph=True)      # e^x (1 + x), itself taped
print("y        =", y.value)
print("dy/dx    =", gx.value)
print("analytic =", np.exp(x.value) * (1 + x.value))

# differentiate the gradient again: d2y/dx2 = e^x (2 + x) on the diagonal
(gxx,) = ad.grad(ad.sum_(gx), [x])
print("d2y/dx2  =", gxx)

# a two-layer softmax classifier checked coordinate by coordinate
rng = np.random.default_rng(0)
data, labels = rng.normal(size=(6, 4)), np.array([0, 1, 2, 0, 1, 2])


def loss(tape, p):
    h = ad.relu(ad.add(ad.matmul(data, p["W0"]), p["b0"]))
    return ad.cross_entropy(ad.add(ad.matmul(h, p["W1"]), p["b1"]), labels)


params = {"W0": rng.normal(size=(4, 5)), "b0": rng.normal(size=5) * 0.1,
          "W1": rng.normal(size=(5, 3)), "b1": np.zeros(3)}
print(ad.grad_check(loss, params, epsilon=1e-5, tolerance=1e-4))

"""
Reverse-mode differentiation on 4-D arrays
==========================================

Every model in this package is built from a small set of array
primitives that record what touched them, so that a single backward
sweep fills in gradients.  This walkthrough builds a toy computation,
differentiates it, and checks one gradient entry by finite differences.
"""

import numpy as np

from crowdflow import tensorcore as tc

rng = np.random.default_rng(0)

# All tensors are (batch, channels, height, width) float64.  Leaves that
# should receive gradients are created with requires_grad=True.
x = tc.Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
w = tc.Tensor(rng.normal(0.0, 0.3, size=(4, 3, 3, 3)), requires_grad=True)
b = tc.Tensor(np.zeros((1, 4, 1, 1)), requires_grad=True)

def objective():
    y = tc.relu(tc.conv2d(x, w, b, stride=1, padding=1))
    return tc.sum_all(tc.mul(y, y))


# A convolution followed by a nonlinearity, reduced to one number.
loss = objective()
print(f"loss value: {loss.item():.6f}")

# One call walks the recorded graph in reverse topological order.
loss.backward()
print(f"gradient shapes: x {x.grad.shape}, w {w.grad.shape}, b {b.grad.shape}")

# Verify a single weight entry against a central finite difference.
idx = (2, 1, 0, 2)
h = 1e-5
keep = w.data[idx]
w.data[idx] = keep + h
up = objective().item()
w.data[idx] = keep - h
down = objective().item()
w.data[idx] = keep

numeric = (up - down) / (2 * h)
analytic = w.grad[idx]
print(f"analytic dloss/dw{idx} = {analytic:.8f}")
print(f"numeric  dloss/dw{idx} = {numeric:.8f}")
print(f"relative error: {abs(analytic - numeric) / abs(numeric):.2e}")

# The deformable convolution degenerates to the plain one when its
# per-site offsets are all zero; this identity anchors its many tests.
off = tc.constant(np.zeros((1, 2 * 9, 8, 8)))
plain = tc.conv2d(x, w, b, padding=1)
bent = tc.deform_conv2d(x, w, off, b, padding=1)
gap = np.max(np.abs(plain.data - bent.data))
print(f"zero-offset deformable vs plain conv, max gap: {gap:.2e}")

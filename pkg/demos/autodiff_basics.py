"""
Reverse-mode gradients on numpy arrays
======================================

Tensors record the operation that produced them.  ``backward`` walks the
graph once in reverse and leaves ``.grad`` on every leaf that asked for it.
"""

import numpy as np

from lambdakws import tensor as T

# a tiny softmax regression on four points
x = T.Tensor(np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]))
w = T.Tensor(np.zeros((2, 3)), requires_grad=True)
b = T.Tensor(np.zeros(3), requires_grad=True)
labels = np.array([0, 1, 2, 0])

for step in range(200):
    w.zero_grad()
    b.zero_grad()
    loss = T.cross_entropy(T.affine(x, w, b), labels)
    T.backward(loss)
    w.data -= 0.5 * w.grad
    b.data -= 0.5 * b.grad
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.4f}")

# The graph is freed after backward, so a second call is an error.
try:
    T.backward(loss)
except Exception as exc:
    print(type(exc).__name__, "-", exc)

# Multiplies can be counted by scope while any forward pass runs.
with T.no_grad(), T.count_multiplies() as counter, T.scope("layer"):
    T.affine(x, w, b)
print("multiplies in the affine map:", dict(counter.counts))

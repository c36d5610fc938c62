"""
A short tour of the autodiff kernel
===================================

Every loss in the package is built from a handful of 2-D primitives.
This script builds a small graph by hand, runs backward, and then lets the
finite-difference checker confirm the gradient.
"""

import numpy as np

from fea_cncd import diffkernel as dk

rng = np.random.default_rng(0)

# leaves: a trainable weight and a constant batch
w = dk.parameter(rng.normal(size=(3, 4)))
x = dk.constant(rng.normal(size=(5, 4)))

# cosine logits, softmax, then the mean probability of class 0
logits = dk.scale(dk.cosine_matrix(x, w), 10.0)
probs = dk.softmax(logits)
pick = np.zeros((5, 3))
pick[:, 0] = 1.0
score = dk.mean(dk.mul(probs, dk.constant(pick)))
print("score:", score.item())

dk.backward(score)
print("gradient on w:\n", np.round(w.grad, 4))

# the same function as a builder, so the checker can perturb w
def f(weight):
    p = dk.softmax(dk.scale(dk.cosine_matrix(x, weight), 10.0))
    return dk.mean(dk.mul(p, dk.constant(pick)))

report = dk.finite_diff_check(f, w.data.copy(), step=1e-4, tol=1e-3)
print(report.line())

# logs of zero are clamped rather than producing -inf
print("clamped log of 0:", dk.clamped_log(dk.constant([[0.0]])).item())

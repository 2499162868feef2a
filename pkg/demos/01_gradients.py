"""Hand-written backward passes, checked against central differences.

Run: python demos/01_gradients.py
"""
import numpy as np

from nam import core_math as cm
from nam.diagnostics import pair_loss_grad_check, toy_problem

rng = np.random.default_rng(0)

# the primitives first
u, v = rng.standard_normal(4), rng.standard_normal(4)
rep = cm.grad_check(lambda z: float(cm.cosine_forward(z[:4], z[4:])),
                    lambda z: np.concatenate(cm.cosine_backward(z[:4], z[4:], 1.0)),
                    np.concatenate([u, v]))
print(f"cosine:          max rel err {rep.max_rel_error:.2e}")

logits = np.array([1000.0, 1001.0, -3.0])
mask = np.array([True, True, False])
print("masked softmax of [1000, 1001, -3] with the last entry masked:",
      cm.masked_softmax(logits, mask))

# then the full pair losses on small random 3-view models
for seed in range(3):
    model, registry, example = toy_problem(seed)
    for phase in (1, 2):
        rep = pair_loss_grad_check(model, registry, example, phase)
        print(f"model {seed} phase {phase}: {rep.analytic.size} params, "
              f"max rel err {rep.max_rel_error:.2e}")

# a deliberately wrong gradient is caught
rep = cm.grad_check(lambda z: float(z @ z), lambda z: 2.02 * z, rng.standard_normal(5))
print("wrong gradient flagged coordinates:", rep.flagged)

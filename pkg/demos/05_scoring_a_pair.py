"""What goes into one similarity score.

For a pair of items each view gives a cosine score s, an attention logit
gamma and a calibrated score mu = w*s + b. The attention weights a are a
softmax of gamma over the views both items have, and psi = sum a*mu.

Run: python demos/05_scoring_a_pair.py
"""
import numpy as np

from nam.diagnostics import toy_problem
from nam.model import pair_forward

model, registry, example = toy_problem(4, absent_prob=0.5)
for j in registry.catalog[1:5]:
    br = pair_forward(model, example.context, j, registry)
    print(f"\n{example.context} -> {j}: psi = {br.psi:+.4f}")
    for view, d in br.as_dict().items():
        if d["available"]:
            print(f"  {view:<5} s={d['s']:+.3f} gamma={d['gamma']:+.3f} a={d['a']:.3f} "
                  f"mu={d['mu']:+.3f}")
        else:
            print(f"  {view:<5} missing for one of the items, a = 0")
    assert abs(br.psi - np.sum(br.a * br.mu)) < 1e-12

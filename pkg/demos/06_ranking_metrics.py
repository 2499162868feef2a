"""HR@K and MRR@K on a catalog small enough to check by eye.

Run: python demos/06_ranking_metrics.py
"""
import numpy as np

from nam.evaluation import evaluate, rank_positions
from nam.model import NamModel
from nam.views import DirectViewTable, ViewId, ViewRegistry

psi = np.array([0.5, 0.9, 0.5, 0.9, 0.1])
valid = np.array([True, True, True, True, False])
print("scores     ", psi)
print("ranks from query 0:", rank_positions(psi, valid, query=0))
print("(ties broken by catalog position; items sharing no view go last)")

rng = np.random.default_rng(0)
items = [str(k) for k in range(1, 9)]
tags = DirectViewTable(ViewId("tags", "multihot"), 4,
                       {i: rng.integers(0, 2, 4).astype(float) + 0.1 for i in items})
registry = ViewRegistry([tags], items)
model = NamModel.for_registry(registry, z_t=3, seed=0)
report = evaluate(model, registry, [("1", "2"), ("3", "4"), ("5", "6")], K_list=[1, 3, 5])
print()
print(report.table())

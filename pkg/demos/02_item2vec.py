"""item2vec on baskets drawn from two item clusters.

Items that share baskets end up with similar target embeddings; those
embeddings become the collaborative-filtering view of the main model.

Run: python demos/02_item2vec.py
"""
import numpy as np

from nam.experiments import item2vec_separation
from nam.item2vec import export_cf_view

intra, inter, model = item2vec_separation(seed=0, epochs=10)
print("loss per epoch:", np.round(model.loss_trace, 4))
print(f"mean cosine within a cluster {intra:.3f}, across clusters {inter:.3f}")

view = export_cf_view(model)
print(f"CF view: {len(view.rows)} items, {view.dim} dims")

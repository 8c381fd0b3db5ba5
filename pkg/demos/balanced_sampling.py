"""Why anchors are sampled, and how the sampler keeps classes balanced.

A contrastive loss over every labeled position squares the position count:
a 2-image batch of 64x64 feature cells is 67 million pairs.  The sampler
caps that by drawing the same number of anchors per class, so frequent
classes cannot drown out rare ones, and a hard ceiling a_max bounds the
cost no matter how many classes show up.
"""

import numpy as np

from mscontrast import autodiff as ad
from mscontrast.sampling import build_pool, dense_anchor_set, sample_anchor_set, substream

rng = substream(7, 0)

# A lopsided label map: class 0 dominates, class 2 is rare.
labels = rng.choice(3, size=(2, 32, 32), p=[0.80, 0.17, 0.03])
projected = ad.Tensor(rng.normal(size=(2, 16, 32, 32)))

pool = build_pool(labels, scale=4)
print("positions per class:", np.bincount(pool.class_ids))

anchors = sample_anchor_set(pool, projected, a_max=2048, rng=substream(7, 1))
print("sampled per class:  ", np.bincount(anchors.class_ids))
print("anchor rows are unit length:",
      np.allclose(np.linalg.norm(anchors.embeddings.data, axis=1), 1.0))

# The per-class quota K is the smallest class count, so balance costs the
# rare class nothing.  With a tighter ceiling the quota shrinks to fit.
tight = sample_anchor_set(pool, projected, a_max=30, rng=substream(7, 2))
print(f"a_max=30 gives {len(tight)} anchors:", np.bincount(tight.class_ids))

# Same seed, same draw. Different step key, different draw.
a = sample_anchor_set(pool, projected, a_max=30, rng=substream(7, 2))
b = sample_anchor_set(pool, projected, a_max=30, rng=substream(7, 3))
print("replayed draw identical:", np.array_equal(tight.provenance, a.provenance))
print("next-step draw differs: ", not np.array_equal(tight.provenance, b.provenance))

dense = dense_anchor_set(pool, projected)
print(f"dense reference keeps all {len(dense)} positions "
      f"({len(dense) ** 2 / len(anchors) ** 2:.0f}x the pair count)")

"""The loss family, bottom to top, on synthetic anchor sets.

Within one scale: pull same-class embeddings together, push different
classes apart (info_nce).  Across the feature pyramid: a weighted sum over
scales (multi_scale_loss), plus terms that compare fine anchors against
coarse ones so the scales agree about what a class looks like
(cross_scale_loss).  The training objective adds both to cross-entropy with
small weights.
"""

import numpy as np

from mscontrast import autodiff as ad
from mscontrast.labels import downsample_labels
from mscontrast.losses import (
    LossConfig,
    cross_scale_loss,
    info_nce,
    multi_scale_loss,
    total_loss,
)
from mscontrast.sampling import build_pool, sample_anchor_set, substream

rng = substream(3, 0)
cfg = LossConfig()  # tau 0.1, scale weights 1/0.7/0.4/0.1, two cross pairs

# Fake a 4-level pyramid: labels at strides 4..32 plus an embedding map each.
# Block layout keeps all three classes alive even on the 2x2 map at stride 32.
labels4 = np.zeros((2, 16, 16), dtype=np.int64)
labels4[:, :, 8:] = 1
labels4[:, 8:, 8:] = 2
pyramid = {4: labels4, 8: downsample_labels(labels4, 2),
           16: downsample_labels(labels4, 4), 32: downsample_labels(labels4, 8)}
maps = {s: ad.Tensor(rng.normal(size=(2, 32) + pyramid[s].shape[1:]), requires_grad=True)
        for s in pyramid}
sets = {s: sample_anchor_set(build_pool(pyramid[s], s), maps[s], cfg.a_max,
                             substream(3, 1, s))
        for s in pyramid}

single = info_nce(sets[4], cfg.tau)
print(f"within-scale loss at stride 4: {float(single.data):.4f}")

cms = multi_scale_loss(sets, cfg)
print(f"multi-scale loss (weighted over 4 scales): {float(cms.data):.4f}")

ccs = cross_scale_loss(sets, cfg)
print(f"cross-scale loss (pairs 4-32 and 4-16): {float(ccs.data):.4f}")

ce = ad.Tensor(1.25)  # stand-in for the segmentation cross-entropy
parts = {}
total = total_loss(ce, sets, cfg, parts)
print(f"total = ce + 0.1*cms + 0.1*ccs = {float(total.data):.4f}  parts={ {k: round(v, 3) for k, v in parts.items()} }")

# One backward pass reaches every participating embedding map.
ad.backward(total)
for s in sorted(maps):
    g = maps[s].grad
    print(f"stride {s:>2}: grad nonzero at {int((np.abs(g) > 0).sum())} of {g.size} coords")

# Random embeddings sit near the uniform-similarity plateau. Plain descent
# on the raw maps walks the unscaled objective downhill, slowly but
# monotonically: embeddings live on the unit sphere after normalization, so
# raw-space steps translate into small angular moves.
lr = 2.0
trace = []
for it in range(121):
    for s in maps:
        maps[s].zero_grad()
    sets_it = {s: sample_anchor_set(build_pool(pyramid[s], s), maps[s], cfg.a_max,
                                    substream(3, 1, s)) for s in pyramid}
    loss = ad.add(multi_scale_loss(sets_it, cfg), cross_scale_loss(sets_it, cfg))
    trace.append(float(loss.data))
    if it < 120:
        ad.backward(loss)
        for s in maps:
            maps[s].data -= lr * maps[s].grad
print("descent on cms+ccs:",
      "  ".join(f"it{it}={trace[it]:.2f}" for it in (0, 30, 60, 90, 120)))

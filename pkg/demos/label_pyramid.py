"""Label maps at every scale the network produces features at.

Feature maps come out at strides 4, 8, 16, 32 of the input resolution.  To
supervise embeddings there, the full-resolution annotation is downsampled by
picking the label at each output cell's center, never interpolating: class
ids are categories, and averaging them would invent classes that are not in
the image.  The unlabeled marker (255) survives downsampling the same way.
"""

import numpy as np

from mscontrast.labels import IGNORE_INDEX, build_pyramid, downsample_labels

labels = np.zeros((1, 64, 64), dtype=np.int64)
labels[0, :32, :] = 1          # top half: class 1
labels[0, 40:, 40:] = 2        # bottom-right block: class 2
labels[0, 10:14, 10:14] = IGNORE_INDEX

pyramid = build_pyramid(labels, [4, 8, 16, 32])
for stride, m in pyramid.items():
    vals, counts = np.unique(m, return_counts=True)
    hist = ", ".join(f"{v}:{c}" for v, c in zip(vals, counts))
    print(f"stride {stride:>2}: shape {m.shape[1:]}, cells {{{hist}}}")

print()
print("stride-16 map:")
print(pyramid[16][0])

# Centers, not corners: a cell at output index i reads the source pixel at
# i * stride + stride // 2, so thin structures survive where a corner pick
# would miss them half the time.
wide = np.arange(13).reshape(1, 1, 13).repeat(5, axis=1)
print()
print("stride 4 over 13 columns picks source columns:",
      downsample_labels(wide, 4)[0, 0])

"""Label pyramids: downsampled per-pixel label maps matched to each feature scale.

Downsampling is nearest-neighbor at cell centers, so every low-resolution
label keeps single-pixel provenance and the ignore index passes through
unchanged.  Output cell (i, j) at stride s reads input pixel
(round((i+0.5)*s - 0.5), round((j+0.5)*s - 0.5)) with ties rounded up, which
for integer strides reduces to (i*s + s//2, j*s + s//2) clamped to bounds.
"""

import numpy as np

IGNORE_INDEX = 255


def _center_indices(n_in: int, n_out: int, stride: int) -> np.ndarray:
    return np.minimum(np.arange(n_out) * stride + stride // 2, n_in - 1)


def downsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Subsample a (B, H, W) integer label map by an integer stride.

    Returns a (B, ceil(H/stride), ceil(W/stride)) map of the same dtype.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"expected (B, H, W) labels, got shape {labels.shape}")
    H, W = labels.shape[1:]
    if H < stride or W < stride:
        raise ValueError(f"map {H}x{W} smaller than stride {stride}")
    if stride == 1:
        return labels.copy()
    rows = _center_indices(H, -(-H // stride), stride)
    cols = _center_indices(W, -(-W // stride), stride)
    return labels[:, rows, :][:, :, cols]


def build_pyramid(labels: np.ndarray, strides) -> dict:
    """Downsample once per stride; keys are the strides themselves."""
    strides = list(strides)
    if not strides:
        raise ValueError("strides must be non-empty")
    if any(b <= a for a, b in zip(strides, strides[1:])):
        raise ValueError(f"strides must be ascending, got {strides}")
    return {s: downsample_labels(labels, s) for s in strides}

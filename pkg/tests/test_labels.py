import numpy as np
import pytest

from mscontrast.labels import IGNORE_INDEX, build_pyramid, downsample_labels


def oracle_downsample(labels, stride):
    """Independent nearest-neighbor oracle: explicit per-cell index arithmetic
    with round-half-up on the continuous cell-center formula."""
    import math

    B, H, W = labels.shape
    ho, wo = math.ceil(H / stride), math.ceil(W / stride)
    out = np.empty((B, ho, wo), dtype=labels.dtype)
    for b in range(B):
        for i in range(ho):
            si = min(math.floor((i + 0.5) * stride - 0.5 + 0.5), H - 1)
            for j in range(wo):
                sj = min(math.floor((j + 0.5) * stride - 0.5 + 0.5), W - 1)
                out[b, i, j] = labels[b, si, sj]
    return out


def test_stride_one_is_identity():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=(2, 6, 7))
    out = downsample_labels(labels, 1)
    assert np.array_equal(out, labels)
    out[0, 0, 0] = 99  # must be a copy
    assert labels[0, 0, 0] != 99


def test_constant_map_collapses():
    labels = np.full((1, 4, 4), 7)
    assert np.array_equal(downsample_labels(labels, 4), [[[7]]])


def test_matches_index_arithmetic_oracle():
    rng = np.random.default_rng(1)
    for stride in (2, 3, 4, 8):
        for H, W in ((8, 8), (9, 13), (16, 10)):
            if H < stride or W < stride:
                continue
            labels = rng.integers(0, 6, size=(3, H, W))
            assert np.array_equal(downsample_labels(labels, stride), oracle_downsample(labels, stride)), (
                stride, H, W)


def test_ignore_propagates():
    labels = np.full((1, 8, 8), IGNORE_INDEX)
    labels[0, 3, 3] = 2
    out = downsample_labels(labels, 2)
    # stride 2 reads source (2i+1, 2j+1); (3,3) is read by output (1,1)
    assert out[0, 1, 1] == 2
    out[0, 1, 1] = IGNORE_INDEX
    assert np.all(out == IGNORE_INDEX)


def test_class_set_shrinkage():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 9, size=(2, 32, 32))
    full = set(np.unique(labels))
    for s in (2, 4, 8, 16):
        assert set(np.unique(downsample_labels(labels, s))) <= full


def test_invalid_inputs():
    labels = np.zeros((1, 4, 4), dtype=np.int64)
    with pytest.raises(ValueError, match="positive"):
        downsample_labels(labels, 0)
    with pytest.raises(ValueError, match="smaller than stride"):
        downsample_labels(labels, 8)
    with pytest.raises(ValueError, match="B, H, W"):
        downsample_labels(np.zeros((4, 4), dtype=np.int64), 2)


def test_pyramid_shapes():
    labels = np.zeros((2, 64, 64), dtype=np.int64)
    pyr = build_pyramid(labels, [4, 8, 16, 32])
    assert {s: m.shape for s, m in pyr.items()} == {
        4: (2, 16, 16), 8: (2, 8, 8), 16: (2, 4, 4), 32: (2, 2, 2)}


def test_pyramid_ceil_shapes_non_divisible():
    labels = np.zeros((1, 66, 70), dtype=np.int64)
    pyr = build_pyramid(labels, [4, 32])
    assert pyr[4].shape == (1, 17, 18)
    assert pyr[32].shape == (1, 3, 3)


def test_pyramid_stride_one_and_all_ignore():
    labels = np.full((1, 8, 8), IGNORE_INDEX)
    pyr = build_pyramid(labels, [1])
    assert np.array_equal(pyr[1], labels)
    pyr = build_pyramid(labels, [2, 4, 8])
    for m in pyr.values():
        assert np.all(m == IGNORE_INDEX)


def test_pyramid_requires_ascending_strides():
    labels = np.zeros((1, 32, 32), dtype=np.int64)
    with pytest.raises(ValueError, match="ascending"):
        build_pyramid(labels, [8, 4])
    with pytest.raises(ValueError, match="non-empty"):
        build_pyramid(labels, [])


def test_determinism():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, size=(2, 24, 24))
    a = build_pyramid(labels, [4, 8])
    b = build_pyramid(labels, [4, 8])
    for s in a:
        assert np.array_equal(a[s], b[s])

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shapewarp.limb_recon import (
    LimbAutoencoder,
    compose,
    extract_limb_map,
    histogram_distance,
    limb_region,
    luminance_histogram,
    occlude_person,
    occlusion_mask,
    random_mask,
    random_patch_mask,
    reconstruct,
    target_limb_region,
)


def test_extract_limb_map(small_dataset):
    s = small_dataset[0]
    l_s = extract_limb_map(s.person, s.layout)
    region = limb_region(s.layout) > 0
    assert np.array_equal(l_s[region], s.person[region])
    assert not l_s[~region].any()
    empty = s.layout.copy()
    empty[..., 6] += empty[..., 4] + empty[..., 5]
    empty[..., 4:6] = 0
    assert not extract_limb_map(s.person, empty).any()


def test_random_mask_deterministic(small_dataset):
    l_s = small_dataset[0].limb
    a, ra = random_mask(l_s, 7)
    b, rb = random_mask(l_s, 7)
    assert ra == rb and np.array_equal(a, b)


@given(st.integers(0, 2**31 - 1))
def test_ratio_bounds(seed):
    region = np.zeros((64, 48))
    region[10:40, 5:20] = 1
    keep, ratio = random_patch_mask(region, seed)
    assert 0.2 <= ratio <= 0.75
    touched = 8 * 4  # 30 rows starting at 10 touch 8 row-patches, 15 cols from 5 touch 4 col-patches
    dropped = (1 - keep).reshape(16, 4, 12, 4).max(axis=(1, 3)).sum()
    assert dropped == round(ratio * touched)


def test_ratio_spread_over_thousand_seeds():
    region = np.ones((8, 8))
    ratios = [random_patch_mask(region, s)[1] for s in range(1000)]
    assert min(ratios) < 0.25 and max(ratios) > 0.70


def test_masking_only_touches_limb_patches(small_dataset):
    s = small_dataset[2]
    region = limb_region(s.layout)
    keep, _ = random_patch_mask(region, 3)
    patch_touch = region.reshape(16, 4, 12, 4).max(axis=(1, 3))
    dropped = (1 - keep).reshape(16, 4, 12, 4).max(axis=(1, 3))
    assert not np.any(dropped * (1 - patch_touch))


def test_reconstruct_ranges(small_dataset):
    s = small_dataset[0]
    l_r, l_w = reconstruct(LimbAutoencoder(), s.limb, s.layout)
    assert l_r.shape == (64, 48, 3) and l_w.shape == (64, 48)
    assert 0 <= l_r.min() and l_r.max() <= 1 and 0 <= l_w.min() and l_w.max() <= 1


def test_occlude_person(small_dataset, rng):
    s = small_dataset[0]
    bg_only = np.zeros_like(s.layout)
    bg_only[..., 6] = 1
    assert np.array_equal(occlude_person(s.person, bg_only, np.zeros((64, 48))), s.person)
    m_w = (rng.random((64, 48)) > 0.8).astype(np.float32)
    occ = occlude_person(s.person, s.layout, m_w)
    union = occlusion_mask(s.layout, m_w) > 0
    assert not occ[union].any()
    assert np.array_equal(occ[~union], s.person[~union])


def _three_branch(i_occ, c_w, m_w, l_r, l_w, s_t):
    out = np.zeros_like(i_occ)
    h, w, _ = i_occ.shape
    for i in range(h):
        for j in range(w):
            if m_w[i, j] == 1:
                out[i, j] = c_w[i, j]
            elif np.argmax(s_t[i, j]) in (4, 5):
                out[i, j] = l_w[i, j] * l_r[i, j]
            else:
                out[i, j] = i_occ[i, j]
    return out


def test_compose_oracle_and_edge_cases(rng):
    h, w = 6, 5
    i_occ, c_w, l_r = rng.random((3, h, w, 3)).astype(np.float32)
    l_w = rng.random((h, w)).astype(np.float32)
    s_t = rng.random((h, w, 7)).astype(np.float32)
    m_w = (rng.random((h, w)) > 0.5).astype(np.float32)
    out = compose(i_occ, c_w, m_w, l_r, l_w, s_t)
    np.testing.assert_allclose(out, _three_branch(i_occ, c_w, m_w, l_r, l_w, s_t), atol=1e-6)
    np.testing.assert_array_equal(compose(i_occ, c_w, np.ones((h, w)), l_r, l_w, s_t), c_w)
    no_limb = np.zeros((h, w, 7), np.float32)
    no_limb[..., 6] = 1
    expected = c_w * m_w[..., None] + (1 - m_w[..., None]) * i_occ
    np.testing.assert_allclose(compose(i_occ, c_w, m_w, l_r, l_w, no_limb), expected, atol=1e-7)


@given(st.integers(0, 2**31 - 1))
def test_compose_branches_partition(seed):
    rng = np.random.default_rng(seed)
    s_t = rng.random((8, 8, 7))
    m_w = (rng.random((8, 8)) > 0.5).astype(np.float32)
    limb = target_limb_region(s_t)
    garment = m_w
    limbs = (1 - m_w) * limb
    rest = (1 - m_w) * (1 - limb)
    assert np.array_equal(garment + limbs + rest, np.ones((8, 8)))


def test_histogram_helpers(rng):
    img = rng.random((10, 10, 3))
    region = np.ones((10, 10))
    h = luminance_histogram(img, region)
    assert h.shape == (32,) and h.sum() == pytest.approx(1.0)
    assert histogram_distance(img, img, region) == 0.0
    assert not luminance_histogram(img, np.zeros((10, 10))).any()

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenessl.augment import (
    AugmentPolicy,
    BlurSpec,
    ColorJitterSpec,
    CropSpec,
    CutoutSpec,
    RotationSpec,
    apply_policy,
    make_views,
    resize,
    view_batch,
)
from scenessl.errors import ContractError
from scenessl.numerics import Rng


def image(seed=0, h=32, w=24):
    return Rng(seed).uniform(0, 1, (3, h, w)).astype(np.float32)


def test_identity_policy_returns_resized_input():
    img = image()
    views = make_views(img, AugmentPolicy.identity(output_size=(16, 16)), Rng(0), 2)
    for v in views:
        np.testing.assert_array_equal(v.data, resize(img, (16, 16)))


def test_identity_policy_with_identity_resize_is_identity():
    img = image(h=16, w=16)
    np.testing.assert_array_equal(apply_policy(img, AugmentPolicy.identity((16, 16)), Rng(0)), img)


def test_fixed_seed_is_bit_identical():
    img, pol = image(), AugmentPolicy(output_size=(16, 16))
    a = [v.data for v in make_views(img, pol, Rng(11), 2)]
    b = [v.data for v in make_views(img, pol, Rng(11), 2)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])


def test_flip_only_mirrors():
    img = image(h=16, w=16)
    pol = replace(AugmentPolicy.identity((16, 16)), flip_p=1.0)
    out = apply_policy(img, pol, Rng(0))
    np.testing.assert_array_equal(out, img[:, :, ::-1])


def test_flip_frequency():
    img = image(h=8, w=8)
    pol = replace(AugmentPolicy.identity((8, 8)), flip_p=0.5)
    rng = Rng(21)
    flipped = sum(np.array_equal(apply_policy(img, pol, rng), img[:, :, ::-1]) for _ in range(10_000))
    assert 0.48 <= flipped / 10_000 <= 0.52


@given(seed=st.integers(0, 2**32), size=st.sampled_from([(8, 8), (12, 16)]))
def test_views_stay_in_normalised_range(seed, size):
    pol = AugmentPolicy(output_size=size, cutout=CutoutSpec(size=4, p=0.5),
                        rotation=RotationSpec(degrees=30, p=0.5))
    lo, hi = pol.value_range()
    for v in make_views(image(seed % 1000), pol, Rng(seed), 3):
        assert v.shape == (3,) + size
        assert (v.data >= lo[:, None, None] - 1e-5).all() and (v.data <= hi[:, None, None] + 1e-5).all()


@given(flip=st.floats(0, 1), gray=st.floats(0, 1), lo=st.floats(0.05, 1.0), size=st.integers(4, 64))
def test_policy_json_round_trip(flip, gray, lo, size):
    pol = AugmentPolicy(output_size=(size, size), crop=CropSpec(scale=(lo, 1.0)), flip_p=flip, grayscale_p=gray,
                        color_jitter=ColorJitterSpec(hue=0.05), blur=BlurSpec(sigma=(0.2, 1.5)))
    assert AugmentPolicy.from_json(pol.to_json()) == pol


@pytest.mark.parametrize("kwargs", [{"flip_p": 1.5}, {"grayscale_p": -0.1}, {"crop": CropSpec(scale=(0.0, 1.0))},
                                    {"crop": CropSpec(scale=(0.5, 1.2))}])
def test_policy_rejects_bad_ranges(kwargs):
    with pytest.raises(ContractError):
        AugmentPolicy(**kwargs)


def test_view_batch_is_view_major_and_split_invariant():
    imgs = np.stack([image(i, 16, 16) for i in range(4)])
    pol = AugmentPolicy(output_size=(8, 8))
    whole = view_batch(imgs, pol, Rng(3), 2)
    assert whole.shape == (8, 3, 8, 8)
    # row i (view 1) and row B+i (view 2) come from the same image stream
    single = [v.data for v in make_views(imgs[2], pol, Rng(3).child(2), 2)]
    np.testing.assert_array_equal(whole[2], single[0])
    np.testing.assert_array_equal(whole[6], single[1])


def test_resize_constant_image_stays_constant():
    img = np.full((3, 10, 7), 0.3, dtype=np.float32)
    np.testing.assert_allclose(resize(img, (5, 9)), 0.3, rtol=1e-6)

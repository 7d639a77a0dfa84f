import numpy as np
import torch

from src.editor.augmentation import AffineAugmentor, AffineParams, affine_theta, augment_pair, warp
from src.editor.types import EditPair


def _image(seed, size=12):
    return torch.as_tensor(np.random.default_rng(seed).uniform(size=(size, size, 3)))


def test_zero_ranges_give_identity():
    augmentor = AffineAugmentor(rotation=0.0, translation=0.0, shear=0.0)
    params = augmentor.sample(np.random.default_rng(0))
    assert params.is_identity()
    pair = EditPair(_image(0), _image(1), (5,))
    out = augment_pair(pair, augmentor, seed=0)
    assert torch.equal(out.source, pair.source) and torch.equal(out.edited, pair.edited)


def test_one_pixel_translation_shifts_columns():
    image = _image(2, size=10)
    out = warp(image, AffineParams(rotation=0.0, translate_x=1.0 / 10, translate_y=0.0, shear=0.0))
    assert torch.allclose(out[:, 1:], image[:, :-1], atol=1e-10)


def test_theta_inverts_the_forward_transform():
    params = AffineParams(rotation=0.0, translate_x=0.25, translate_y=-0.1, shear=0.0)
    theta = affine_theta(params, 8, 8)
    assert torch.allclose(theta, torch.tensor([[1.0, 0.0, -0.5], [0.0, 1.0, 0.2]], dtype=torch.float64))


def test_warp_is_linear():
    params = AffineParams(rotation=12.0, translate_x=0.05, translate_y=-0.03, shear=4.0)
    a, b = _image(3), _image(4)
    assert torch.allclose(warp(2.0 * a - 0.5 * b, params), 2.0 * warp(a, params) - 0.5 * warp(b, params), atol=1e-12)


def test_same_transform_for_both_images():
    image = _image(5)
    pair = EditPair(image, image.clone(), (5,))
    out = augment_pair(pair, AffineAugmentor(), seed=3)
    assert torch.equal(out.source, out.edited)
    assert not torch.equal(out.source, image)
    again = augment_pair(pair, AffineAugmentor(), seed=3)
    assert torch.equal(again.source, out.source)


def test_batched_matches_channels_last():
    params = AffineParams(rotation=-8.0, translate_x=0.0, translate_y=0.1, shear=2.0)
    images = [_image(6), _image(7)]
    batch = torch.stack([img.permute(2, 0, 1) for img in images])
    out = warp(batch, params)
    for i, img in enumerate(images):
        assert torch.allclose(out[i].permute(1, 2, 0), warp(img, params), atol=1e-12)


def test_sample_within_ranges():
    augmentor = AffineAugmentor(rotation=5.0, translation=0.2, shear=1.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = augmentor.sample(rng)
        assert abs(p.rotation) <= 5.0 and abs(p.shear) <= 1.0
        assert abs(p.translate_x) <= 0.2 and abs(p.translate_y) <= 0.2

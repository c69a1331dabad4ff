import numpy as np
import pytest

from regdesk.synthdata import sample_batch
from regdesk.teacher import encode, make_teacher


def test_codebook_is_well_separated(desk_world):
    _, teacher = desk_world
    cb = teacher.codebook
    np.testing.assert_allclose(np.linalg.norm(cb, axis=1), 1.0, atol=1e-12)
    gram = cb @ cb.T
    np.fill_diagonal(gram, 0)
    assert gram.max() <= 0.2


def test_encode_is_deterministic(desk_world, rng):
    mix, teacher = desk_world
    b = sample_batch(mix, 4, rng)
    f1 = encode(b.z0[0], b.label[0], teacher)
    f2 = encode(b.z0[0].copy(), int(b.label[0]), teacher)
    np.testing.assert_array_equal(f1.F0, f2.F0)
    assert f1.F0.shape == (17, 32)


def test_F0_row_order(desk_world, rng):
    mix, teacher = desk_world
    b = sample_batch(mix, 3, rng)
    f = encode(b.z0, b.label, teacher)
    np.testing.assert_array_equal(f.F0[:, :16], f.f0)
    np.testing.assert_array_equal(f.F0[:, 16], f.cls0)


def test_gamma_zero_gives_codebook_row(desk_world, rng):
    mix, _ = desk_world
    t0 = make_teacher(32, 16, 2, 8, gamma=0.0)
    b = sample_batch(mix, 5, rng)
    f = encode(b.z0, b.label, t0)
    np.testing.assert_allclose(f.cls0, t0.codebook[b.label], rtol=0, atol=1e-15)


def test_cls_token_is_unit_norm_and_class_anchored(desk_world):
    mix, teacher = desk_world
    b = sample_batch(mix, 1000, np.random.default_rng(2))
    f = encode(b.z0, b.label, teacher)
    np.testing.assert_allclose(np.linalg.norm(f.cls0, axis=1), 1.0, atol=1e-12)
    cos = f.cls0 @ teacher.codebook.T  # [1000, classes]
    own = cos[np.arange(1000), b.label]
    others = cos.copy()
    others[np.arange(1000), b.label] = -np.inf
    assert np.all(own > others.max(axis=1))


def test_label_out_of_range(desk_world):
    mix, teacher = desk_world
    with pytest.raises(ValueError):
        encode(np.zeros(mix.grid_shape), 8, teacher)
    with pytest.raises(ValueError):
        encode(np.zeros((3, 3, 2)), 0, teacher)


def test_weights_are_read_only(desk_world):
    _, teacher = desk_world
    with pytest.raises(ValueError):
        teacher.codebook[0, 0] = 1.0

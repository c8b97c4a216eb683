import numpy as np
import pytest

from mfuser.data import (CLASS_NAMES, DOMAINS, SHIFTED, SOURCE, ClassHistogram, SegBatch, augment, collate,
                         generate_dataset, get_domain)


def test_same_seed_same_labels_across_domains():
    ref = generate_dataset(SOURCE, 6, seed=3, batch_size=3)
    for spec in SHIFTED:
        other = generate_dataset(spec, 6, seed=3, batch_size=3)
        for a, b in zip(ref, other):
            assert np.array_equal(a.labels, b.labels)
            assert not np.allclose(a.images, b.images)


def test_deterministic_and_seed_dependent():
    a = generate_dataset(SOURCE, 4, seed=0)
    b = generate_dataset(SOURCE, 4, seed=0)
    c = generate_dataset(SOURCE, 4, seed=1)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))
    assert not all(np.array_equal(x.labels, y.labels) for x, y in zip(a, c))


def test_every_class_present_over_32_images():
    hist = ClassHistogram()
    for b in generate_dataset(SOURCE, 32, seed=0, batch_size=8):
        hist.update(b.labels)
    assert len(hist.counts) == len(CLASS_NAMES) == 4
    assert (hist.counts > 0).all()


def test_images_and_labels_are_well_formed():
    for name in DOMAINS:
        b = generate_dataset(get_domain(name), 2, seed=0, batch_size=2, size=32)[0]
        assert b.images.shape == (2, 32, 32, 3) and b.labels.shape == (2, 32, 32)
        assert b.images.min() >= 0 and b.images.max() <= 1
        b.check_classes(4)


def test_n_zero_is_an_error():
    with pytest.raises(ValueError):
        generate_dataset(SOURCE, 0, seed=0)
    with pytest.raises(ValueError):
        get_domain("nowhere")


def test_augment_keeps_labels_aligned():
    b = collate(generate_dataset(SOURCE, 4, seed=0))
    out = augment(b, np.random.default_rng(0))
    for i in range(4):
        same = np.array_equal(out.labels[i], b.labels[i])
        flipped = np.array_equal(out.labels[i], b.labels[i, :, ::-1])
        assert same or flipped
    assert out.images.min() >= 0 and out.images.max() <= 1


def test_segbatch_shape_check():
    with pytest.raises(ValueError):
        SegBatch(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 5), dtype=int))
    with pytest.raises(ValueError):
        SegBatch(np.zeros((1, 2, 2, 3)), np.full((1, 2, 2), 7)).check_classes(4)

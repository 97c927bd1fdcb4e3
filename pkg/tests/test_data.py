import warnings

import numpy as np
import pytest

from casl.data import (
    ATTRIBUTE_NAMES,
    AttributeClassifier,
    Corpus,
    classify,
    generate_corpus,
    heldout_accuracy,
    split_indices,
    train_classifier,
)
from casl.errors import ContractError, DimensionError, TrainingError
from casl.numerics import grad_check


def test_corpus_rejects_empty():
    with pytest.raises(ContractError):
        generate_corpus(0, 7)


def test_corpus_is_bit_exact():
    a, b = generate_corpus(1000, 7), generate_corpus(1000, 7)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_corpus_positive_rates():
    rates = generate_corpus(1000, 7).labels.mean(axis=0)
    assert len(rates) == len(ATTRIBUTE_NAMES)
    assert np.all((rates >= 0.35) & (rates <= 0.65))


def test_corpus_prefix_stable():
    # image i depends only on (seed, i)
    np.testing.assert_array_equal(generate_corpus(10, 3).images, generate_corpus(20, 3).images[:10])


def test_pixels_in_range():
    c = generate_corpus(50, 1)
    assert c.images.min() >= -1 and c.images.max() <= 1


def test_split_is_80_20():
    tr, te = split_indices(100)
    assert len(tr) == 80 and len(te) == 20 and not set(tr) & set(te)


def test_identical_images_trivially_perfect():
    c = generate_corpus(1, 0)
    n = 40
    corpus = Corpus(np.repeat(c.images, n, axis=0), np.repeat(c.labels, n, axis=0), np.repeat(c.factors, n, axis=0))
    clf = train_classifier(corpus, epochs=5, lr=1e-2, min_accuracy=None)
    pred = (classify(clf, corpus.images) > 0).astype(int)
    assert np.all(pred == corpus.labels)


def test_random_labels_near_chance():
    c = generate_corpus(500, 2)
    shuffled = Corpus(c.images, np.random.default_rng(0).integers(0, 2, c.labels.shape).astype(np.int8), c.factors)
    clf = train_classifier(shuffled, epochs=3, min_accuracy=None)
    acc = heldout_accuracy(clf, shuffled)
    assert np.all(np.abs(acc - 0.5) < 0.15)


def test_training_quality_error_names_attributes():
    c = generate_corpus(100, 2)
    with pytest.raises(TrainingError, match="big="):
        train_classifier(c, epochs=1, min_accuracy=0.999)


def test_classify_determinism_and_continuity():
    clf = AttributeClassifier(seed=1)
    img = generate_corpus(1, 0).images[0]
    np.testing.assert_array_equal(classify(clf, img), classify(clf, img))
    bumped = img.copy()
    bumped[5, 5] += 1e-9 if bumped[5, 5] < 1 else -1e-9
    assert np.max(np.abs(classify(clf, bumped) - classify(clf, img))) < 1e-6


def test_classify_shape_and_clamp():
    clf = AttributeClassifier(seed=1)
    with pytest.raises(DimensionError):
        classify(clf, np.zeros((16, 16)))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = classify(clf, np.full((32, 32), 3.0))
    assert any("clamped" in str(x.message) for x in w)
    np.testing.assert_array_equal(out, classify(clf, np.ones((32, 32))))


@pytest.mark.parametrize("seed", [0, 1])
def test_classifier_gradient(seed):
    rng = np.random.default_rng(seed)
    clf = AttributeClassifier(16, 4, seed=seed, widths=(4, 4))
    x = rng.uniform(-1, 1, (3, 16, 16))
    y = rng.integers(0, 2, (3, 4)).astype(float)

    def loss(P):
        P.zero_grad()
        return clf.loss_and_grad(x, y)

    assert grad_check(loss, clf.params, max_entries=20, seed=seed) < 1e-4


@pytest.mark.slow
def test_default_classifier_reaches_accuracy():
    c = generate_corpus(2000, 0)
    clf = train_classifier(c, epochs=20)
    acc = heldout_accuracy(clf, c)
    assert np.all(acc >= 0.9)
    # construction-time positives score positive on average
    for j in range(4):
        assert np.median(classify(clf, c.images[c.labels[:, j] == 1][:50])[:, j]) > 0

import math

import numpy as np
import pytest

import diadesk.tensor as T
from diadesk.classifier import PLAIN_CE, CosineClassifier, MarginLossConfig, align_classifier, cosine_logits, margin_ce_loss
from diadesk.errors import DegenerateInputError, UsageError
from diadesk.tensor import Tensor
from oracles import central_diff, rel_err


def _margin_oracle(xi, y, s, m):
    total = 0.0
    for row, t in zip(xi, y):
        num = math.exp(s * (row[t] - m))
        den = num + sum(math.exp(s * row[c]) for c in range(len(row)) if c != t)
        total += -math.log(num / den)
    return total / len(y)


def test_defaults_and_sentinel():
    cfg = MarginLossConfig()
    assert (cfg.s, cfg.m) == (16.0, 0.1)
    assert PLAIN_CE.scale == 1.0 and MarginLossConfig(0.0, 0.2).scale == 1.0
    with pytest.raises(UsageError):
        MarginLossConfig(-1.0, 0.1)


@pytest.mark.parametrize("s,m", [(16.0, 0.1), (0.0, 0.0), (4.0, 0.5), (30.0, 0.0)])
def test_margin_loss_matches_oracle(s, m):
    rng = np.random.default_rng(0)
    xi = rng.uniform(-1, 1, size=(5, 4))
    y = rng.integers(0, 4, size=5)
    cfg = MarginLossConfig(s, m)
    got = margin_ce_loss(xi, y, cfg).item()
    assert abs(got - _margin_oracle(xi, y, cfg.scale, m)) < 1e-12


def test_plain_ce_is_softmax_cross_entropy():
    xi = np.array([[0.2, -0.1, 0.5]])
    expected = -math.log(math.exp(0.2) / sum(math.exp(v) for v in xi[0]))
    assert abs(margin_ce_loss(xi, [0], PLAIN_CE).item() - expected) < 1e-14


def test_margin_loss_gradient():
    rng = np.random.default_rng(1)
    xi = Tensor(rng.uniform(-1, 1, size=(4, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 1])
    T.backward(margin_ce_loss(xi, y, MarginLossConfig()))
    fd = central_diff(lambda: margin_ce_loss(xi.data, y, MarginLossConfig()).item(), xi.data)
    assert rel_err(xi.grad, fd) < 1e-7


def test_single_class_loss_is_zero():
    assert margin_ce_loss(np.array([[0.3]]), [0], MarginLossConfig()).item() == 0.0


def test_target_validation():
    with pytest.raises(UsageError):
        margin_ce_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(UsageError):
        margin_ce_loss(np.zeros((2, 3)), [0])


def test_cosine_logits_are_scale_invariant():
    rng = np.random.default_rng(2)
    f, w = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    a = cosine_logits(f, w).data
    np.testing.assert_allclose(cosine_logits(7 * f, 0.1 * w).data, a, atol=1e-14)
    assert np.all(np.abs(a) <= 1 + 1e-12)
    with pytest.raises(DegenerateInputError):
        cosine_logits(f, np.zeros((2, 5)))


def test_blocks_and_trainability():
    clf = CosineClassifier(4, seed=0)
    clf.add_classes([3, 7])
    clf.add_classes([1])
    assert clf.class_ids == [3, 7, 1] and clf.new_block_slice() == slice(2, 3)
    clf.set_trainable(old=False, new=True)
    assert clf.parameters() == [clf.blocks[1]]
    with pytest.raises(UsageError):
        clf.add_classes([7])


def test_prototype_rows_classify_separable_set_perfectly():
    protos = np.eye(4) * 3
    clf = CosineClassifier(4)
    clf.add_classes([10, 11, 12, 13])
    for c, row in zip([10, 11, 12, 13], protos):
        clf.set_rows(c, row)
    rng = np.random.default_rng(3)
    x = np.repeat(protos, 20, axis=0) + rng.normal(scale=0.3, size=(80, 4))
    assert np.all(clf.predict(x) == np.repeat([10, 11, 12, 13], 20))


def test_random_classifier_is_at_chance():
    rng = np.random.default_rng(4)
    accs = []
    for seed in range(200):
        clf = CosineClassifier(8, seed=seed)
        clf.add_classes(list(range(5)))
        x = rng.normal(size=(50, 8))
        accs.append(np.mean(clf.predict(x) == rng.integers(0, 5, size=50)))
    assert abs(np.mean(accs) - 0.2) < 0.02


def test_alignment_needs_old_prototypes():
    clf = CosineClassifier(3)
    clf.add_classes([0])
    clf.add_classes([1])
    with pytest.raises(UsageError):
        align_classifier(clf, {1: np.ones(3)}, lambda e: [], 1, 0.1)


def test_alignment_fits_features_and_refreezes():
    clf = CosineClassifier(2, seed=1)
    clf.add_classes([0])
    clf.add_classes([1])
    feats = np.array([[1.0, 0.1], [0.1, 1.0]] * 8)
    labels = np.array([0, 1] * 8)
    hist = align_classifier(clf, {0: feats[0], 1: feats[1]}, lambda e: [(feats, labels)], 30, 0.5)
    assert hist[-1] < hist[0]
    assert np.all(clf.predict(feats) == labels)
    assert clf.parameters() == []

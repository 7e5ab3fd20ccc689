import numpy as np

from covfeat import protocol
from covfeat.extractor import random_keypoints


def small():
    return protocol.SyntheticProtocol(train_images=2, tuples=32, pairs=2, pair_size=160)


def test_with_variant_changes_only_variant_and_seed():
    p = small().with_variant("trip", 3)
    assert p.train.loss.variant == "trip" and p.train.seed == 3
    assert p.train.epochs == 10 and p.train.batch_size == 32 and p.pair_size == 160


def test_training_and_evaluation_data_are_seeded():
    p = small()
    a, b = protocol.training_data(p), protocol.training_data(p)
    assert len(a) == 32 and np.array_equal(a.patches, b.patches)
    pairs = protocol.evaluation_pairs(p)
    assert len(pairs) == 2 and pairs[0][0].shape == (160, 160)
    assert np.array_equal(pairs[1][2], protocol.evaluation_pairs(p)[1][2])


def test_random_baseline_is_deterministic_and_bounded():
    pairs = protocol.evaluation_pairs(small())
    a = protocol.random_baseline(pairs, 30, draws=3, seed=1)
    assert a == protocol.random_baseline(pairs, 30, draws=3, seed=1)
    assert a != protocol.random_baseline(pairs, 30, draws=3, seed=2)
    assert all(0 <= v <= 1 for v in a)


def test_undefined_pairs_count_as_zero():
    img = np.zeros((100, 100))
    far = np.eye(3)
    far[0, 2] = 1000
    detect = lambda im, k: random_keypoints(im.shape, k, np.random.default_rng(0))
    assert protocol.pair_repeatability(detect, [(img, img, far)], 10) == [0.0]
    assert protocol.pair_repeatability(detect, [(img, img, np.eye(3))], 10) == [1.0]


def test_report_lists_each_variant():
    res = [protocol.ProtocolResult("trip-aff", s, [0.5, 0.7], [0.1], []) for s in range(2)]
    res.append(protocol.ProtocolResult("trip", 0, [0.4], [0.1], []))
    text = protocol.report(res, 50)
    assert "synthetic k=50" in text and "60.00 +- 0.00" in text and "40.00" in text
    assert res[0].repeatability == 0.6 and res[0].baseline == 0.1

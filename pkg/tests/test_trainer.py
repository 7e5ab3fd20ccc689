import math

import numpy as np
import pytest

from covfeat.dataset import AugmentationConfig, InMemoryTuples, iter_tuples, synthetic_images
from covfeat.losses import LossConfig
from covfeat.nn import Network, load_checkpoint
from covfeat.trainer import (
    ResumeError, TrainConfig, TrainingDiverged, epoch_permutation, read_log, resume, run,
    steps_per_epoch, train, train_step,
)


@pytest.fixture(scope="module")
def data():
    imgs = synthetic_images(2, 128, seed=3)
    return InMemoryTuples(list(iter_tuples(imgs, AugmentationConfig(tuple_count=24, seed=1))))


def small(**kw):
    base = dict(epochs=2, batch_size=8, lr_scale=1.0, init_gain=1.0)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, cfg.decay) == (10, 128, 0.1, 0.9, 0.96)
    assert cfg.loss.variant == "trip-aff" and cfg.loss.affine_enabled_epoch == 5


def test_one_epoch_two_tuples_is_one_step(data):
    sub = InMemoryTuples.__new__(InMemoryTuples)
    sub.patches, sub.translations, sub.affine = (data.patches[:2], data.translations[:2],
                                                 data.affine[:2])
    sub.header = {"count": 2}
    res = train(sub, small(epochs=1, batch_size=2))
    assert len(res.records) == 1
    assert steps_per_epoch(24, 8) == 3


def test_microbatching_does_not_change_the_gradient(data):
    cfg = small()
    grads = []
    for mb in (1, 3, 8):
        net = Network.create(0, dtype=np.float64)
        p, t, a = data.batch(np.arange(8))
        train_step(net, p, t, a, cfg.loss, 5, microbatch=mb)
        grads.append([q.grad.copy() for q in net.params()])
    for other in grads[1:]:
        for g, h in zip(grads[0], other):
            assert np.allclose(g, h, rtol=1e-9, atol=1e-12)


def test_schedule_in_log(data, tmp_path):
    cfg = small(epochs=7)
    train(data, cfg, checkpoint=tmp_path / "c.ckpt", log_path=tmp_path / "log.jsonl")
    recs = read_log(tmp_path / "log.jsonl")
    assert len(recs) == 7 * 3
    keys = [(r["epoch"], r["step"]) for r in recs]
    assert keys == sorted(keys)
    for r in recs:
        assert r["lr"] == 0.1 * 0.96 ** r["epoch"]
        assert math.isfinite(r["loss"])
        if r["epoch"] < 5:
            assert r["cov_aff"] == 0.0
        else:
            assert r["cov_aff"] > 0.0
        assert r["loss"] == pytest.approx(r["cov_tran"] + r["cov_aff"])


def test_trip_variant_never_logs_affine(data):
    res = train(data, small(epochs=6, loss=LossConfig(variant="trip")))
    assert all(r["cov_aff"] == 0.0 for r in res.records)


def test_same_seed_same_weights(data, tmp_path):
    a = train(data, small(), checkpoint=tmp_path / "a.ckpt")
    b = train(data, small(), checkpoint=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a.net.digest() == b.net.digest()
    c = train(data, small(seed=1))
    assert c.net.digest() != a.net.digest()


def test_permutation_depends_on_seed_and_epoch():
    assert np.array_equal(epoch_permutation(0, 1, 50), epoch_permutation(0, 1, 50))
    assert not np.array_equal(epoch_permutation(0, 1, 50), epoch_permutation(0, 2, 50))


@pytest.mark.parametrize("stop", [2, 3, 4])
def test_resume_matches_uninterrupted(data, tmp_path, stop):
    # 3 steps per epoch: stop=3 resumes exactly at an epoch boundary
    cfg = small(epochs=2, loss=LossConfig(affine_enabled_epoch=1))
    full = train(data, cfg)
    ck = tmp_path / "mid.ckpt"
    run(data, cfg, checkpoint=ck, stop_after=stop)
    _, _, meta = load_checkpoint(ck)
    assert meta["global_step"] == stop
    res = resume(ck, data, cfg, out_checkpoint=tmp_path / "end.ckpt")
    assert res.net.digest() == full.net.digest()
    if stop == 3:
        # affine term active from the first resumed step
        assert res.records[0]["epoch"] == 1 and res.records[0]["cov_aff"] > 0


def test_resume_rejects_changed_batch(data, tmp_path):
    ck = tmp_path / "c.ckpt"
    run(data, small(), checkpoint=ck, stop_after=1)
    with pytest.raises(ResumeError, match="batch_size"):
        resume(ck, data, small(batch_size=4))


def test_batch_larger_than_archive_rejected(data):
    with pytest.raises(ValueError):
        train(data, small(batch_size=100))


def test_nan_guard_aborts_with_last_good_checkpoint(data, tmp_path):
    # a huge step with a large alpha, beta blows the weights up within a few steps
    cfg = small(epochs=50, lr=1e4, lr_scale=0.0, loss=LossConfig(alpha=50, beta=49))
    ck = tmp_path / "nan.ckpt"
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(data, cfg, checkpoint=ck)
    net, _, _ = load_checkpoint(ck)
    assert all(np.isfinite(p.data).all() for p in net.params())

"""Desk-scale synthetic protocol: train on procedural images, test on held-out affine pairs.

Training images and evaluation pairs come from disjoint seed streams, so
the pairs are never seen during training.  The random-keypoint baseline is
measured on the same pairs with the same k.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import AugmentationConfig, InMemoryTuples, iter_tuples, synthetic_images, synthetic_pair
from .evaluation import (
    OVERLAP_THRESHOLD, aggregate_report, format_report, matching_score, repeatability,
)
from .extractor import extract, random_keypoints
from .losses import LossConfig
from .trainer import TrainConfig, train


def desk_train_config(variant: str = "trip-aff", seed: int = 0, **kw) -> TrainConfig:
    """Training settings used for the synthetic protocol (default lr schedule, smaller batch)."""
    base = dict(epochs=10, batch_size=32, loss=LossConfig(variant=variant), seed=seed)
    base.update(kw)
    return TrainConfig(**base)


@dataclass(frozen=True)
class SyntheticProtocol:
    train_images: int = 16
    image_size: int = 256
    image_seed: int = 1000
    tuples: int = 4096
    tuple_seed: int = 7
    pairs: int = 20
    pair_size: int = 768
    pair_seed: int = 50_000
    k: int = 50
    threshold: float = OVERLAP_THRESHOLD
    baseline_draws: int = 10
    train: TrainConfig = field(default_factory=desk_train_config)

    def with_variant(self, variant: str, seed: int) -> "SyntheticProtocol":
        loss = replace(self.train.loss, variant=variant)
        return replace(self, train=replace(self.train, loss=loss, seed=seed))


@dataclass
class ProtocolResult:
    variant: str
    seed: int
    per_pair: list
    baseline_per_pair: list
    records: list
    net: object = None

    @property
    def repeatability(self) -> float:
        return float(np.mean(self.per_pair))

    @property
    def baseline(self) -> float:
        return float(np.mean(self.baseline_per_pair))


def training_data(p: SyntheticProtocol) -> InMemoryTuples:
    images = synthetic_images(p.train_images, p.image_size, p.image_seed)
    cfg = AugmentationConfig(tuple_count=p.tuples, seed=p.tuple_seed)
    return InMemoryTuples(list(iter_tuples(images, cfg)))


def evaluation_pairs(p: SyntheticProtocol) -> list:
    """``(image_a, image_b, H)`` for each held-out pair."""
    return [synthetic_pair(p.pair_seed + i, p.pair_size) for i in range(p.pairs)]


def pair_repeatability(detect, pairs, k: int, threshold: float = OVERLAP_THRESHOLD) -> list:
    """Repeatability per pair for ``detect(image, k) -> keypoints``; undefined pairs count as 0."""
    out = []
    for a, b, h in pairs:
        r = repeatability(detect(a, k), detect(b, k), h, a.shape, b.shape, threshold)
        out.append(r.repeatability if r.repeatability is not None else 0.0)
    return out


def random_baseline(pairs, k: int, threshold: float = OVERLAP_THRESHOLD, draws: int = 10,
                    seed: int = 0) -> list:
    """Per-pair repeatability of uniform random keypoints, averaged over ``draws``."""
    rng = np.random.default_rng([seed, 0xBA5E])
    per = np.zeros(len(pairs))
    for _ in range(draws):
        per += pair_repeatability(lambda im, n: random_keypoints(im.shape, n, rng), pairs, k,
                                  threshold)
    return list(per / draws)


def network_detector(net):
    return lambda image, k: extract(image, net, k=k)


def pair_matching(detect, pairs, k: int, threshold: float = OVERLAP_THRESHOLD) -> list:
    """``(repeatability, matching score)`` per pair with the same keypoints."""
    out = []
    for a, b, h in pairs:
        ka, kb = detect(a, k), detect(b, k)
        rep = repeatability(ka, kb, h, a.shape, b.shape, threshold).repeatability
        ms = matching_score(a, b, ka, kb, h, threshold).score
        out.append((rep, ms))
    return out


def run(p: SyntheticProtocol, data=None, pairs=None, checkpoint=None, log_path=None
        ) -> ProtocolResult:
    """Train one model under the protocol and score it on the held-out pairs."""
    data = data if data is not None else training_data(p)
    pairs = pairs if pairs is not None else evaluation_pairs(p)
    res = train(data, p.train, checkpoint=checkpoint, log_path=log_path)
    per = pair_repeatability(network_detector(res.net), pairs, p.k, p.threshold)
    base = random_baseline(pairs, p.k, p.threshold, p.baseline_draws)
    return ProtocolResult(p.train.loss.variant, p.train.seed, per, base, res.records, res.net)


def report(results, k: int) -> str:
    """Repeatability table (mean +- std over seeds) for a list of ``ProtocolResult``."""
    rows = [{"method": r.variant, "dataset": "synthetic", "k": k, "run": r.seed,
             "repeatability": v} for r in results for v in r.per_pair]
    return format_report(aggregate_report(rows), ks=(k,))

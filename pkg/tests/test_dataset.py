import numpy as np
import pytest
from scipy.stats import chisquare

from covfeat.dataset import (
    AugmentationConfig, GenerationError, InMemoryTuples, SequenceError, TupleArchive,
    build_training_set, footprints_inside, generate_tuple, iter_tuples, load_sequence,
    PatchTuple, minimum_image_size, normalize_patch, sample_transforms, parse_homography, required_margin, sample_tuple,
    save_sequence, synthetic_images, synthetic_pair, verify_tuple,
)
from covfeat.geometry import (
    AffineTransform, apply_homography, bilinear_sample, patch_footprint, warp_patch,
)


@pytest.fixture(scope="module")
def images():
    return synthetic_images(3, 160, seed=11)


def test_degenerate_config_gives_identical_patches(images):
    cfg = AugmentationConfig.degenerate(tuple_count=4)
    for tup in iter_tuples(images, cfg):
        for p in tup.patches[1:]:
            assert np.array_equal(p, tup.x)
        assert not tup.translations.any()
        assert np.array_equal(tup.affine.linear, np.eye(2))


def test_seeded_tuples_repeat(images):
    cfg = AugmentationConfig(tuple_count=5, seed=3)
    a = list(iter_tuples(images, cfg))
    b = list(iter_tuples(images, cfg))
    for s, t in zip(a, b):
        assert np.array_equal(s.patches, t.patches)
        assert np.array_equal(s.translations, t.translations)
    # tuple i does not depend on where the stream starts
    assert np.array_equal(generate_tuple(images, cfg, 3).patches, a[3].patches)


def test_translation_statistics(images):
    cfg = AugmentationConfig(seed=1)
    rng = np.random.default_rng(0)
    ts = np.concatenate([sample_tuple(images[0], cfg, rng).translations.ravel()
                         for _ in range(1700)])[:10_000]
    assert ts.min() >= -6 and ts.max() <= 6
    counts, _ = np.histogram(ts, bins=12, range=(-6, 6))
    assert chisquare(counts).pvalue > 1e-3


def test_provenance_every_patch_rebuilds_from_source(images):
    cfg = AugmentationConfig(tuple_count=40, seed=5)
    for tup in iter_tuples(images, cfg):
        assert verify_tuple(images[tup.image_index], tup) < 1e-6


def test_integer_translation_is_exact_shift():
    # with no affine jitter, x_i is x shifted by an integer t_i: compare raw crops
    img = np.random.default_rng(0).random((120, 120))
    center = np.array([60.0, 60.0])
    x = warp_patch(img, center, AffineTransform.identity())
    t = np.array([3.0, -2.0])
    xi = warp_patch(img, center, AffineTransform.from_translation(t))
    # content at offset p in x appears at p + t in xi: xi[r, c] == x[r + 2, c - 3]
    assert np.abs(xi[0:30, 3:32] - x[2:32, 0:29]).max() < 1e-12


def test_margin_fuzz():
    # worst case: centers on the margin boundary, 10,000 random transform draws
    cfg = AugmentationConfig()
    m = required_margin(cfg)
    size = 2 * m + 1
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        center = rng.choice([m, size - 1 - m], size=2).astype(float)
        reference, translations, a = sample_transforms(cfg, rng)
        tup = PatchTuple(np.zeros((5, 32, 32)), translations, a, 0, center, reference)
        assert footprints_inside((size, size), tup)


def test_sampled_tuples_stay_inside(images):
    rng = np.random.default_rng(2)
    for _ in range(200):
        tup = sample_tuple(images[0], AugmentationConfig(), rng)
        assert footprints_inside(images[0].shape, tup)
        for t in tup.transforms():
            fp = patch_footprint(tup.center, t)
            assert fp.min() >= 0 and fp.max() <= 159


def test_small_image_rejected_with_size():
    cfg = AugmentationConfig()
    need = minimum_image_size(cfg)
    assert need == 2 * required_margin(cfg) + 1
    with pytest.raises(GenerationError, match=f"{need}x{need}"):
        sample_tuple(np.zeros((need - 1, 200)), cfg, np.random.default_rng(0))
    sample_tuple(np.random.default_rng(0).random((need, need)), cfg, np.random.default_rng(0))


def test_normalize_patch_examples():
    assert not normalize_patch(np.full((32, 32), 0.4)).any()
    half = np.zeros((32, 32))
    half[:16] = 1
    n = normalize_patch(half)
    assert n.mean() == pytest.approx(0, abs=1e-12) and n.var() == pytest.approx(1)
    r = normalize_patch(np.random.default_rng(0).random((32, 32, 3)))
    assert abs(r.mean()) < 1e-6 and abs(r.var() - 1) < 1e-5


def test_archive_count_and_byte_identity(images, tmp_path):
    cfg = AugmentationConfig(tuple_count=8, seed=2)
    a = build_training_set(images, cfg, tmp_path / "a.bin")
    b = build_training_set(images, cfg, tmp_path / "b.bin")
    assert a.read_bytes() == b.read_bytes()
    arc = TupleArchive(a)
    assert len(arc) == 8
    assert AugmentationConfig().tuple_count == 256_000
    patches, trans, aff = arc.batch([0, 5])
    mem = InMemoryTuples(list(iter_tuples(images, cfg)))
    mp, mt, ma = mem.batch([0, 5])
    assert np.array_equal(patches, mp)
    assert np.allclose(trans, mt, atol=1e-5) and np.allclose(aff, ma, atol=1e-6)


def test_truncated_archive_rejected(images, tmp_path):
    path = build_training_set(images, AugmentationConfig(tuple_count=2), tmp_path / "a.bin")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValueError, match="truncated"):
        TupleArchive(path)


def test_synthetic_pair_homography_relates_views():
    a, b, h = synthetic_pair(4, size=128)
    rng = np.random.default_rng(0)
    pts = rng.uniform(40, 88, size=(200, 2))
    q = apply_homography(h, pts)
    ok = (q >= 1).all(axis=1) & (q <= 126).all(axis=1)
    va = bilinear_sample(a, pts[ok, 0], pts[ok, 1])
    vb = bilinear_sample(b, q[ok, 0], q[ok, 1])
    assert ok.sum() > 100
    assert np.median(np.abs(va - vb)) < 0.02


def test_sequence_round_trip(tmp_path):
    imgs = synthetic_images(6, 64, seed=1)
    homs = {k: np.diag([1.0 + 0.01 * k, 1.0, 1.0]) for k in range(1, 6)}
    seq = load_sequence(save_sequence(tmp_path / "seq", imgs, homs))
    assert len(seq) == 6 and len(seq.homographies) == 5
    assert not seq.illumination_only
    assert np.allclose(seq.homographies[3], homs[3])


def test_sequence_identity_files_and_missing(tmp_path):
    imgs = synthetic_images(3, 48, seed=2)
    seq = load_sequence(save_sequence(tmp_path / "s", imgs, {1: np.eye(3), 2: np.eye(3)}))
    assert not seq.illumination_only
    assert all(np.array_equal(h, np.eye(3)) for _, _, h in seq.pairs())
    (tmp_path / "s" / "H1to3p").unlink()
    with pytest.raises(SequenceError, match="H1to3p"):
        load_sequence(tmp_path / "s")
    (tmp_path / "s" / "H1to3p").write_text("0 0 0\n0 0 0\n0 0 1\n")
    with pytest.raises(SequenceError, match="singular"):
        load_sequence(tmp_path / "s")


def test_homography_parse_errors():
    assert np.array_equal(parse_homography("1 0 0\n0 1 0\n0 0 1"), np.eye(3))
    with pytest.raises(SequenceError, match="byte offset 15"):
        parse_homography("1 0 0 0 1 0 0 0")
    with pytest.raises(SequenceError, match="byte offset 4"):
        parse_homography("1 0 x 0 1 0 0 0 1")

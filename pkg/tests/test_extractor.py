import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covfeat.dataset import normalize_patch, standardize_image, synthetic_image
from covfeat.extractor import (
    Keypoint, dense_regress, extract, extract_with_votemap, grid_centers, local_maxima,
    nms_select, random_keypoints, read_keypoints, splat_votes, write_keypoints,
)
from covfeat.nn import Network
from oracles import nms_oracle, splat_oracle


def test_splat_examples():
    vm = splat_votes([[2.0, 3.0]], (6, 6))
    assert vm.values[3, 2] == 1.0 and vm.mass == 1.0
    vm = splat_votes([[2.5, 3.5]], (6, 6))
    for y, x in ((3, 2), (3, 3), (4, 2), (4, 3)):
        assert vm.values[y, x] == 0.25


def test_splat_mass_and_drops():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-5, 45, size=(1000, 2))
    vm = splat_votes(pts, (40, 30))
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= 29) & (pts[:, 1] >= 0) & (pts[:, 1] <= 39)).sum()
    assert vm.in_bounds == inside and vm.dropped == 1000 - inside
    assert abs(vm.mass - inside) < 1e-9
    assert np.allclose(vm.values, splat_oracle(pts, (40, 30)), atol=1e-12)


def test_nms_single_impulse_and_tie():
    v = np.zeros((20, 20))
    v[7, 11] = 3.0
    kps = nms_select(v, 10)
    assert len(kps) == 1 and (kps[0].x, kps[0].y, kps[0].score) == (11.0, 7.0, 3.0)
    v = np.zeros((20, 20))
    v[5, 9] = v[5, 12] = 2.0
    kps = nms_select(v, 10, radius=5)
    assert len(kps) == 1 and (kps[0].x, kps[0].y) == (9.0, 5.0)
    with pytest.raises(ValueError):
        nms_select(v, 0)


def test_nms_returns_all_when_fewer_than_k():
    v = np.zeros((30, 30))
    v[3, 3], v[20, 20] = 1.0, 2.0
    kps = nms_select(v, 50)
    assert [(k.x, k.y) for k in kps] == [(20.0, 20.0), (3.0, 3.0)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 40))
def test_nms_matches_exhaustive_oracle(seed, radius, k):
    rng = np.random.default_rng(seed)
    # few distinct levels so ties are common
    v = rng.integers(0, 5, size=(25, 31)).astype(np.float64)
    got = nms_select(v, k, radius=radius, refine=False)
    assert [(int(p.y), int(p.x)) for p in got] == nms_oracle(v, radius, k)
    assert sorted(map(tuple, local_maxima(v, radius))) == sorted(nms_oracle(v, radius, 10**6))


def test_refinement_recovers_parabola_peak():
    ys, xs = np.mgrid[0:15, 0:15]
    v = 10 - (xs - 7.3) ** 2 - (ys - 6.8) ** 2
    kp = nms_select(v, 1)[0]
    assert kp.x == pytest.approx(7.3) and kp.y == pytest.approx(6.8)


def test_grid_geometry():
    net = Network.create(0)
    reg = dense_regress(np.random.default_rng(0).random((64, 64)), net)
    # (64 - 32) / 4 + 1 cells per side
    assert reg.offsets.shape == (9, 9, 2)
    assert grid_centers(2, 3)[1, 2].tolist() == [24.0, 20.0]
    with pytest.raises(ValueError):
        dense_regress(np.zeros((31, 64)), net)


def test_zero_network_votes_on_grid_centers():
    net = Network.create(0).zero()
    img = np.random.default_rng(1).random((48, 56))
    reg = dense_regress(img, net)
    assert np.array_equal(reg.positions, reg.centers)
    kps, vm = extract_with_votemap(img, net, k=100, nms_radius=1)
    assert vm.mass == reg.centers.shape[0] * reg.centers.shape[1]
    assert all(k.x % 4 == 0 and k.y % 4 == 0 for k in kps)


def test_single_patch_image_matches_forward():
    net = Network.create(2, dtype=np.float64)
    img = np.random.default_rng(2).random((32, 32))
    reg = dense_regress(img, net)
    expected = net.predict(standardize_image(img))[0]
    assert reg.offsets.shape == (1, 1, 2)
    assert np.allclose(reg.offsets[0, 0], expected)


def test_dense_matches_patchwise_on_standardized_image():
    net = Network.create(3, dtype=np.float64)
    img = standardize_image(synthetic_image(72, np.random.default_rng(3)))
    reg = dense_regress(img, net, normalize=False)
    for i, j in ((0, 0), (3, 5), (10, 10)):
        patch = img[4 * i:4 * i + 32, 4 * j:4 * j + 32]
        assert np.allclose(net.predict(patch)[0], reg.offsets[i, j], atol=1e-10)


@pytest.mark.parametrize("mode", ["window", "pre-standardized"])
def test_shift_equivariance(mode):
    net = Network.create(4, dtype=np.float64)
    big = synthetic_image(140, np.random.default_rng(4))
    if mode == "window":
        norm = "window"
    else:
        # global statistics of a crop depend on the crop, so standardize once up front
        big, norm = standardize_image(big), False
    a = extract(big[4:, 4:], net, k=30, normalize=norm)
    b = extract(big[8:, 8:], net, k=30, normalize=norm)
    pa = {(k.x - 4, k.y - 4) for k in a if 20 < k.x < 110 and 20 < k.y < 110}
    # same content, so each interior point of a reappears in b shifted by 4 px
    pb = np.array([[k.x, k.y] for k in b])
    hits = sum(np.min(np.hypot(*(pb - [x, y]).T)) < 0.5 for x, y in pa)
    assert hits >= 0.8 * len(pa) > 0


def test_window_normalization_matches_patchwise():
    net = Network.create(5, dtype=np.float64)
    img = synthetic_image(72, np.random.default_rng(5))
    reg = dense_regress(img, net, normalize="window")
    for i, j in ((0, 0), (2, 7), (10, 10)):
        patch = normalize_patch(img[4 * i:4 * i + 32, 4 * j:4 * j + 32])
        assert np.allclose(net.predict(patch)[0], reg.offsets[i, j], atol=1e-9)
    with pytest.raises(ValueError, match="normalization"):
        dense_regress(img, net, normalize="median")


def test_random_keypoints_in_valid_area():
    kps = random_keypoints((100, 80), 50, np.random.default_rng(0))
    assert len(kps) == 50
    assert all(16 <= k.x <= 64 and 16 <= k.y <= 84 for k in kps)


def test_keypoint_file_round_trip(tmp_path):
    kps = [Keypoint(1.25, 2.5, 0.75), Keypoint(3.0, 4.0, 1.0 / 3.0, 16.0)]
    write_keypoints(tmp_path / "k.txt", kps, image_id="img1", checkpoint_hash="abc", k=200)
    back, header = read_keypoints(tmp_path / "k.txt")
    assert back == kps
    assert header == {"image": "img1", "checkpoint": "abc", "k": "200", "nms_radius": "5"}

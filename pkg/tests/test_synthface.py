import dataclasses

import numpy as np
import pytest

from lsr import dataio, synthface as sf

# Mirror partners of the 68-point layout: left/right swaps under x -> 1-x.
MIRROR_PARTNER = list(range(68))


def _swap(aa, bb):
    for i, j in zip(aa, bb):
        MIRROR_PARTNER[i], MIRROR_PARTNER[j] = j, i


_swap(range(0, 8), range(16, 8, -1))
_swap(range(17, 22), range(26, 21, -1))
_swap([31, 32], [35, 34])
_swap([36, 37, 38, 40, 41], [45, 44, 43, 47, 46])
_swap([39], [42])
_swap(list(range(48, 54)), [54, 53, 52, 51, 50, 49])
_swap([55, 56], [59, 58])
_swap(list(range(60, 65)), [64, 63, 62, 61, 60])
_swap([65], [67])


def test_sample_identity_deterministic():
    assert sf.sample_identity(7) == sf.sample_identity(7)


def test_sample_identity_all_distinct():
    specs = [sf.sample_identity(s) for s in range(100)]
    tuples = {dataclasses.astuple(s) for s in specs}
    assert len(tuples) == 100


def test_sample_identity_ranges():
    s = sf.sample_identity(0)
    a, b = s.head_axes
    assert 0 < a < 0.5 and 0 < b < 0.5
    assert 0 < s.hair_extent <= 1
    for color in (s.skin_color, s.hair_color, s.clothes_color, s.background_color):
        assert all(0 <= c <= 1 for c in color)
    for v in (s.eye_spacing, s.nose_length, s.mouth_width):
        assert v > 0


def test_identity_validation():
    good = sf.sample_identity(1)
    with pytest.raises(ValueError):
        dataclasses.replace(good, hair_extent=0.0)
    with pytest.raises(ValueError):
        dataclasses.replace(good, skin_color=(1.2, 0.0, 0.0))


def test_pose_validation():
    with pytest.raises(ValueError):
        sf.PoseSpec(yaw=0.7)
    with pytest.raises(ValueError):
        sf.PoseSpec(mouth_open=1.5)
    with pytest.raises(ValueError):
        sf.PoseSpec(translation=(0.2, 0.0))


def test_render_deterministic():
    ident = sf.sample_identity(3)
    pose = sf.PoseSpec(yaw=0.2, pitch=-0.1, mouth_open=0.5, eyes_open=0.7)
    a = sf.render(ident, pose, (64, 64))
    b = sf.render(ident, pose, (64, 64))
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.segmentation, b.segmentation)
    assert np.array_equal(a.landmarks, b.landmarks)


def test_render_rejects_small_resolution():
    with pytest.raises(ValueError):
        sf.render(sf.sample_identity(0), sf.PoseSpec(), (16, 64))


def test_yaw_mirror_symmetry():
    ident = sf.sample_identity(11)
    kwargs = dict(pitch=0.12, mouth_open=0.4, eyes_open=0.6, translation=(0.0, 0.0))
    pos = sf.render(ident, sf.PoseSpec(yaw=0.3, **kwargs), (64, 64)).landmarks
    neg = sf.render(ident, sf.PoseSpec(yaw=-0.3, **kwargs), (64, 64)).landmarks
    assert np.abs((1.0 - neg[MIRROR_PARTNER, 0]) - pos[:, 0]).max() < 1e-6
    assert np.abs(neg[MIRROR_PARTNER, 1] - pos[:, 1]).max() < 1e-6


def test_mouth_open_grows_mouth_class():
    ident = sf.sample_identity(5)
    closed = sf.render(ident, sf.PoseSpec(mouth_open=0.0), (64, 64))
    opened = sf.render(ident, sf.PoseSpec(mouth_open=1.0), (64, 64))
    area = lambda s: int((s.segmentation == sf.CLS_MOUTH).sum())
    assert 0 < area(closed) < area(opened)


def test_segmentation_partitions_pixels():
    s = sf.render(sf.sample_identity(2), sf.PoseSpec(yaw=0.4), (64, 64))
    assert s.segmentation.shape == (64, 64)
    assert set(np.unique(s.segmentation)) <= set(range(sf.NUM_CLASSES))


def test_nose_tip_moves_monotonically_with_yaw():
    ident = sf.sample_identity(9)
    xs = [sf.render(ident, sf.PoseSpec(yaw=y), (64, 64)).landmarks[30, 0]
          for y in np.linspace(-0.6, 0.6, 9)]
    assert np.all(np.diff(xs) > 0)


@pytest.mark.parametrize("res", [64, 96])
def test_oracle_consistency(res):
    """Eye/nose/mouth landmarks sit within one pixel (lookup in the 3x3
    neighborhood) of their segmentation class; all landmarks on non-background."""
    part_classes = {sf.CLS_EYES: range(36, 48), sf.CLS_NOSE: range(27, 36),
                    sf.CLS_MOUTH: range(48, 68)}
    rng = np.random.default_rng(0)
    for t in range(12):
        sample = sf.render(sf.sample_identity(t), sf.sample_pose(rng), (res, res))
        seg = sample.segmentation
        for cls, idx in part_classes.items():
            for i in idx:
                x, y = sample.landmarks[i]
                col = int(np.clip(x * res, 0, res - 1))
                row = int(np.clip(y * res, 0, res - 1))
                window = seg[max(0, row - 1):row + 2, max(0, col - 1):col + 2]
                assert (window == cls).any(), (t, i, cls)
        for x, y in sample.landmarks:
            col = int(np.clip(x * res, 0, res - 1))
            row = int(np.clip(y * res, 0, res - 1))
            window = seg[max(0, row - 1):row + 2, max(0, col - 1):col + 2]
            assert (window != sf.CLS_BACKGROUND).any()


def test_inject_occluder_contract():
    sample = sf.render(sf.sample_identity(4), sf.PoseSpec(), (64, 64))
    occ1, mask1 = sf.inject_occluder(sample, seed=42)
    occ2, mask2 = sf.inject_occluder(sample, seed=42)
    assert np.array_equal(mask1, mask2)
    assert np.array_equal(occ1.image, occ2.image)
    frac = mask1.mean()
    assert 0.05 <= frac <= 0.15
    assert np.array_equal(occ1.image[~mask1], sample.image[~mask1])
    assert np.array_equal(occ1.landmarks, sample.landmarks)
    assert np.array_equal(occ1.segmentation, sample.segmentation)


def test_inject_occluder_fraction_over_seeds():
    sample = sf.render(sf.sample_identity(1), sf.PoseSpec(), (48, 80))
    for seed in range(25):
        _, mask = sf.inject_occluder(sample, seed)
        assert 0.05 <= mask.mean() <= 0.15


def test_make_dataset_roundtrip(tmp_path):
    index = sf.make_dataset(5, 3, (32, 32), tmp_path / "d", seed=2)
    assert sum(len(v) for v in index.frames.values()) == 15
    checksum = dataio.index_checksum(index)
    index2 = sf.make_dataset(5, 3, (32, 32), tmp_path / "d", seed=2)
    assert dataio.index_checksum(index2) == checksum


def test_make_dataset_single_frame_identities(tmp_path):
    index = sf.make_dataset(3, 1, (32, 32), tmp_path / "d1", seed=0)
    assert all(len(v) == 1 for v in index.frames.values())

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from lsr import dataio, synthface as sf


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "d"
    index = sf.make_dataset(4, 6, (64, 64), root, seed=3)
    return index


def test_rasterize_degenerate_cluster():
    lmk = np.full((68, 2), 0.5)
    img = dataio.rasterize_landmarks(lmk, (64, 64))
    nonzero = np.argwhere(img.max(axis=-1) > 0)
    assert len(nonzero) > 0
    spread = nonzero.max(axis=0) - nonzero.min(axis=0)
    assert (spread <= 4).all()


def test_rasterize_mirror_equivariance():
    lmk = sf.render(sf.sample_identity(6), sf.PoseSpec(yaw=0.25), (64, 64)).landmarks
    mirrored = lmk.copy()
    mirrored[:, 0] = 1.0 - mirrored[:, 0]
    a = dataio.rasterize_landmarks(lmk, (64, 64))
    b = dataio.rasterize_landmarks(mirrored, (64, 64))
    assert np.abs(a - b[:, ::-1]).max() < 1e-5


def test_rasterize_oracle_nonzero_count():
    lmk = sf.render(sf.sample_identity(0), sf.PoseSpec(), (64, 64)).landmarks
    img = dataio.rasterize_landmarks(lmk, (64, 64))
    assert (img.max(axis=-1) > 0).sum() > 50


def test_rasterize_clips_out_of_range():
    lmk = sf.render(sf.sample_identity(0), sf.PoseSpec(), (64, 64)).landmarks.copy()
    lmk[0] = (-0.5, 0.3)
    lmk[16] = (1.5, 2.0)
    img = dataio.rasterize_landmarks(lmk, (64, 64))
    assert np.isfinite(img).all()


@given(st.integers(min_value=-6, max_value=6))
@settings(max_examples=12, deadline=None)
def test_rasterize_translation_equivariance(shift):
    base = sf.render(sf.sample_identity(8), sf.PoseSpec(), (64, 64)).landmarks
    delta = shift / 64.0
    inner = np.clip(base, 0.15, 0.85)  # keep both versions clear of the border
    moved = inner.copy()
    moved[:, 0] += delta
    a = dataio.rasterize_landmarks(inner, (64, 64))
    b = dataio.rasterize_landmarks(moved, (64, 64))
    rolled = np.roll(a, shift, axis=1)
    lo, hi = max(0, shift) + 1, 64 + min(0, shift) - 1
    assert np.abs(b[:, lo:hi] - rolled[:, lo:hi]).max() < 1e-6


def test_merge_identity_case():
    seg = sf.render(sf.sample_identity(1), sf.PoseSpec(), (64, 64)).segmentation
    assert np.array_equal(dataio.merge_segmentations(seg, seg), seg)


def test_merge_fine_classes_win():
    coarse = np.full((8, 8), sf.CLS_HAIR, dtype=np.uint8)
    fine = np.full((8, 8), sf.CLS_NOSE, dtype=np.uint8)
    assert (dataio.merge_segmentations(coarse, fine) == sf.CLS_NOSE).all()


def test_merge_recovers_eyes_mislabeled_as_skin():
    fine = sf.render(sf.sample_identity(2), sf.PoseSpec(), (64, 64)).segmentation
    coarse = fine.copy()
    coarse[coarse == sf.CLS_EYES] = sf.CLS_SKIN  # coarse pass loses the eyes
    merged = dataio.merge_segmentations(coarse, fine)
    assert np.array_equal(merged, fine)


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        dataio.merge_segmentations(np.zeros((4, 4), np.uint8), np.zeros((5, 5), np.uint8))


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_merge_idempotent(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, sf.NUM_CLASSES, size=(12, 12)).astype(np.uint8)
    once = dataio.merge_segmentations(m, m)
    assert np.array_equal(dataio.merge_segmentations(once, once), once)


def test_sample_episode_forced_split(small_dataset):
    ident = sorted(small_dataset.frames)[0]
    k = len(small_dataset.frames[ident]) - 1
    ep = dataio.sample_episode(small_dataset, ident, k, np.random.default_rng(0))
    assert ep.k == k and len(ep.sources) == k


def test_sample_episode_k1(small_dataset):
    ident = sorted(small_dataset.frames)[0]
    ep = dataio.sample_episode(small_dataset, ident, 1, np.random.default_rng(1))
    assert len(ep.sources) == 1


def test_sample_episode_too_few_frames(small_dataset):
    ident = sorted(small_dataset.frames)[0]
    with pytest.raises(ValueError, match=str(ident)):
        dataio.sample_episode(small_dataset, ident, len(small_dataset.frames[ident]), np.random.default_rng(0))


def test_episode_target_never_among_sources(tmp_path):
    index = sf.make_dataset(1, 10, (32, 32), tmp_path / "d10", seed=4)
    store = dataio.FrameStore(index)
    ident = sorted(index.frames)[0]
    for seed in range(1000):
        ep = dataio.sample_episode(index, ident, 4, np.random.default_rng(seed), store)
        target = ep.target_image
        assert not any(np.array_equal(target, img) for img, _ in ep.sources)


def test_load_dataset_empty_dir(tmp_path):
    index = dataio.load_dataset(tmp_path / "nothing")
    assert index.frames == {}


def test_load_dataset_split_disjoint(tmp_path):
    root = tmp_path / "d"
    sf.make_dataset(20, 1, (32, 32), root, seed=0)
    split = {"train": list(range(15)), "test": list(range(15, 20))}
    index = dataio.load_dataset(root, split)
    assert len(index.splits["train"]) == 15 and len(index.splits["test"]) == 5
    assert not set(index.splits["train"]) & set(index.splits["test"])
    with pytest.raises(ValueError):
        dataio.load_dataset(root, {"train": [0], "test": [0]})


def test_load_dataset_missing_sibling(tmp_path):
    root = tmp_path / "d"
    sf.make_dataset(1, 1, (32, 32), root, seed=0)
    lmk = root / "0" / "0000.lmk.json"
    lmk.unlink()
    with pytest.raises(FileNotFoundError, match="lmk.json"):
        dataio.load_dataset(root)


def test_load_segmentation_rejects_unknown_class(tmp_path):
    bad = np.full((8, 8), 9, dtype=np.uint8)
    path = tmp_path / "bad.seg.png"
    Image.fromarray(bad, mode="L").save(path)
    with pytest.raises(ValueError, match="class"):
        dataio.load_segmentation(path)


def test_batch_shapes(small_dataset):
    store = dataio.FrameStore(small_dataset)
    ids = sorted(small_dataset.frames)[:2]
    eps = [dataio.sample_episode(small_dataset, i, 4, np.random.default_rng(i), store) for i in ids]
    batch = dataio.batch_episodes(eps)
    assert batch["sources"].shape == (2, 4, 6, 64, 64)
    assert batch["target_contour"].shape == (2, 3, 64, 64)
    assert batch["target_image"].shape == (2, 3, 64, 64)
    assert batch["target_seg"].shape == (2, 64, 64)
    assert batch["target_seg"].dtype.is_floating_point is False


def test_split_identities_deterministic_and_disjoint(small_dataset):
    a = dataio.split_identities(small_dataset, 0.75, seed=0)
    b = dataio.split_identities(small_dataset, 0.75, seed=0)
    assert a == b
    assert not set(a["train"]) & set(a["test"])
    assert len(a["train"]) + len(a["test"]) == len(small_dataset.frames)

"""Dataset indexing, landmark-contour rasterization, segmentation merging, episodes.

The on-disk format is the one synthface writes (``root/ids.json`` plus
``root/<identity_id>/<frame_idx>.{png,lmk.json,seg.png}``); any data
preprocessed into that format loads the same way.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .synthface import NUM_CLASSES, CLS_BACKGROUND, CLS_HAIR, CLS_SKIN, CLS_EYES, CLS_NOSE, CLS_MOUTH, CLS_CLOTHES

NUM_LANDMARKS = 68

# Part-to-polyline mapping over the standard 68-point layout. Each part is
# drawn as one polyline (closed where noted) in a fixed color; the palette is
# arbitrary but fixed, one color per part.
CONTOUR_PARTS: tuple[tuple[str, list[int], bool, tuple[float, float, float]], ...] = (
    ("jaw",        list(range(0, 17)),  False, (0.90, 0.90, 0.90)),
    ("brow_left",  list(range(17, 22)), False, (0.20, 0.90, 0.20)),
    ("brow_right", list(range(22, 27)), False, (0.25, 0.55, 1.00)),
    ("nose",       list(range(27, 31)) + list(range(31, 36)), False, (1.00, 0.85, 0.10)),
    ("eye_left",   list(range(36, 42)), True,  (1.00, 0.30, 0.30)),
    ("eye_right",  list(range(42, 48)), True,  (0.55, 0.25, 1.00)),
    ("lip_outer",  list(range(48, 60)), True,  (1.00, 0.25, 0.80)),
    ("lip_inner",  list(range(60, 68)), True,  (0.15, 1.00, 1.00)),
)

_COARSE_CLASSES = (CLS_BACKGROUND, CLS_HAIR, CLS_CLOTHES)
_FINE_CLASSES = (CLS_EYES, CLS_NOSE, CLS_MOUTH)


def _segment_distances(px: np.ndarray, py: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Distance from every grid point to the segment p0-p1 (pixel units)."""
    d = p1 - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        return np.hypot(px - p0[0], py - p0[1])
    t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / len2, 0.0, 1.0)
    return np.hypot(px - (p0[0] + t * d[0]), py - (p0[1] + t * d[1]))


def rasterize_landmarks(landmarks: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    """Draw the landmark contours as an anti-aliased (H, W, 3) float image.

    Coordinates outside [0, 1] are clipped to the border. Line width is one
    pixel at 64x64 and scales proportionally with resolution. Background is
    exactly zero. Distance-field rendering keeps the output exactly
    equivariant to whole-pixel translations and horizontal mirroring.
    """
    lmk = np.asarray(landmarks, dtype=np.float64)
    if lmk.shape != (NUM_LANDMARKS, 2):
        raise ValueError(f"expected ({NUM_LANDMARKS}, 2) landmarks, got {lmk.shape}")
    if not np.isfinite(lmk).all():
        raise ValueError("landmarks must be finite")
    H, W = resolution
    lmk = np.clip(lmk, 0.0, 1.0)
    # Pixel-space coordinates: pixel (i, j) has center (j, i).
    pts = np.stack([lmk[:, 0] * W - 0.5, lmk[:, 1] * H - 0.5], axis=1)
    px, py = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))

    half_width = 0.5 * max(1.0, min(H, W) / 64.0)
    out = np.zeros((H, W, 3), dtype=np.float32)
    for _, indices, closed, color in CONTOUR_PARTS:
        chain = indices + [indices[0]] if closed else indices
        dist = np.full((H, W), np.inf)
        for a, b in zip(chain[:-1], chain[1:]):
            dist = np.minimum(dist, _segment_distances(px, py, pts[a], pts[b]))
        intensity = np.clip(half_width + 0.5 - dist, 0.0, 1.0).astype(np.float32)
        out = np.maximum(out, intensity[..., None] * np.asarray(color, dtype=np.float32))
    return out


def merge_segmentations(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Combine two segmentations of the same frame.

    Hair/clothes/background come from ``coarse``, eyes/nose/mouth from
    ``fine`` (fine wins where both claim a pixel), and skin fills the rest.
    """
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    if coarse.shape != fine.shape:
        raise ValueError(f"shape mismatch: coarse {coarse.shape} vs fine {fine.shape}")
    if coarse.max(initial=0) >= NUM_CLASSES or fine.max(initial=0) >= NUM_CLASSES:
        raise ValueError("class index outside the shared vocabulary")
    out = np.full(coarse.shape, CLS_SKIN, dtype=coarse.dtype)
    coarse_mask = np.isin(coarse, _COARSE_CLASSES)
    out[coarse_mask] = coarse[coarse_mask]
    fine_mask = np.isin(fine, _FINE_CLASSES)
    out[fine_mask] = fine[fine_mask]
    return out


# ---------------------------------------------------------------------------
# dataset index and loading


@dataclass
class DatasetIndex:
    root: Path
    frames: dict[int, list[Path]]            # identity -> image paths, frame order
    splits: dict[str, list[int]] = field(default_factory=dict)
    resolution: tuple[int, int] | None = None

    def identities(self, split: str | None = None) -> list[int]:
        if split is None:
            return sorted(self.frames)
        if split not in self.splits:
            raise ValueError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])


def load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"failed to read image {path}: {exc}") from exc
    return arr


def load_landmarks(path: Path) -> np.ndarray:
    lmk = np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)
    if lmk.shape != (NUM_LANDMARKS, 2):
        raise ValueError(f"{path}: expected ({NUM_LANDMARKS}, 2) landmarks, got {lmk.shape}")
    return lmk


def load_segmentation(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            seg = np.asarray(img.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"failed to read segmentation {path}: {exc}") from exc
    if seg.max(initial=0) >= NUM_CLASSES:
        raise ValueError(f"{path}: unknown class index {int(seg.max())} (vocabulary 0..{NUM_CLASSES - 1})")
    return seg


def load_dataset(root: str | Path, split_spec: str | Path | dict | None = None) -> DatasetIndex:
    """Index a dataset directory; empty directories yield an empty index.

    ``split_spec`` is a JSON file (or dict) listing identity ids per split,
    e.g. ``{"train": [0, 1], "test": [2]}``. Identities may not appear in
    more than one split.
    """
    root = Path(root)
    frames: dict[int, list[Path]] = {}
    if root.exists():
        for sub in sorted(root.iterdir(), key=lambda p: p.name):
            if not sub.is_dir() or not sub.name.isdigit():
                continue
            ident = int(sub.name)
            images = sorted(p for p in sub.glob("*.png") if not p.name.endswith(".seg.png"))
            for img in images:
                for sibling in (img.with_suffix(".lmk.json"), img.with_suffix(".seg.png")):
                    if not sibling.exists():
                        raise FileNotFoundError(f"missing {sibling} for frame {img}")
            if images:
                frames[ident] = images

    resolution = None
    meta_path = root / "ids.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if "resolution" in meta:
            resolution = tuple(meta["resolution"])

    splits: dict[str, list[int]] = {}
    if split_spec is not None:
        spec = split_spec if isinstance(split_spec, dict) else json.loads(Path(split_spec).read_text())
        seen: dict[int, str] = {}
        for name, ids in spec.items():
            for i in ids:
                if i in seen:
                    raise ValueError(f"identity {i} appears in both {seen[i]!r} and {name!r} splits")
                if i not in frames:
                    raise ValueError(f"split {name!r} lists unknown identity {i}")
                seen[int(i)] = name
            splits[name] = [int(i) for i in ids]
    return DatasetIndex(root=root, frames=frames, splits=splits, resolution=resolution)


def split_identities(index: DatasetIndex, train_frac: float, seed: int) -> dict[str, list[int]]:
    """Deterministic disjoint train/test split over identities."""
    ids = sorted(index.frames)
    rng = np.random.default_rng([seed, len(ids)])
    perm = rng.permutation(len(ids))
    n_train = max(1, int(round(train_frac * len(ids)))) if ids else 0
    train = sorted(int(ids[i]) for i in perm[:n_train])
    test = sorted(int(ids[i]) for i in perm[n_train:])
    return {"train": train, "test": test}


def index_checksum(index: DatasetIndex) -> str:
    """Content hash over every indexed file; stable across re-runs."""
    digest = hashlib.sha256()
    for ident in sorted(index.frames):
        for img in index.frames[ident]:
            for path in (img, img.with_suffix(".lmk.json"), img.with_suffix(".seg.png")):
                digest.update(str(path.relative_to(index.root)).encode())
                digest.update(path.read_bytes())
    meta = index.root / "ids.json"
    if meta.exists():
        digest.update(meta.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    sources: list[tuple[np.ndarray, np.ndarray]]  # K x (image HxWx3, contour HxWx3)
    target_contour: np.ndarray
    target_image: np.ndarray
    target_segmentation: np.ndarray
    identity_id: int
    k: int


class FrameStore:
    """In-memory cache of frames and their rasterized contours."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._cache: dict[Path, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}

    def frame(self, path: Path):
        if path not in self._cache:
            image = load_image(path)
            lmk = load_landmarks(path.with_suffix(".lmk.json"))
            seg = load_segmentation(path.with_suffix(".seg.png"))
            contour = rasterize_landmarks(lmk, image.shape[:2])
            self._cache[path] = (image, contour, seg, lmk)
        return self._cache[path]


def sample_episode(index: DatasetIndex, identity_id: int, k: int,
                   rng: np.random.Generator, store: FrameStore | None = None) -> Episode:
    """Draw K source frames plus one disjoint target frame for one identity."""
    if identity_id not in index.frames:
        raise ValueError(f"unknown identity {identity_id}")
    paths = index.frames[identity_id]
    if len(paths) < k + 1:
        raise ValueError(
            f"identity {identity_id} has {len(paths)} frames; episode needs K+1={k + 1}")
    store = store or FrameStore(index)
    chosen = rng.choice(len(paths), size=k + 1, replace=False)
    frames = [store.frame(paths[i]) for i in chosen]
    sources = [(img, contour) for img, contour, _, _ in frames[:k]]
    t_img, t_contour, t_seg, _ = frames[k]
    return Episode(
        sources=sources,
        target_contour=t_contour,
        target_image=t_img,
        target_segmentation=t_seg,
        identity_id=identity_id,
        k=k,
    )


def batch_episodes(episodes: list[Episode]) -> dict[str, torch.Tensor]:
    """Stack episodes into training tensors.

    Source images and contours are concatenated channelwise, giving a
    (N, K, 6, H, W) source block; all image tensors stay in [0, 1].
    """
    if not episodes:
        raise ValueError("empty episode list")
    k = episodes[0].k
    if any(ep.k != k for ep in episodes):
        raise ValueError("episodes in one batch must share K")

    def chw(arr: np.ndarray) -> np.ndarray:
        return np.moveaxis(arr, -1, 0)

    sources = np.stack([
        np.stack([np.concatenate([chw(img), chw(con)], axis=0) for img, con in ep.sources])
        for ep in episodes
    ])
    return {
        "sources": torch.from_numpy(sources.astype(np.float32)),
        "target_contour": torch.from_numpy(
            np.stack([chw(ep.target_contour) for ep in episodes]).astype(np.float32)),
        "target_image": torch.from_numpy(
            np.stack([chw(ep.target_image) for ep in episodes]).astype(np.float32)),
        "target_seg": torch.from_numpy(
            np.stack([ep.target_segmentation for ep in episodes]).astype(np.int64)),
        "identity_ids": torch.tensor([ep.identity_id for ep in episodes], dtype=torch.int64),
    }

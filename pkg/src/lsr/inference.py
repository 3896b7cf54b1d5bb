"""Few-shot embedding, landmark-driven reenactment, and qualitative grids.

All paths are read-only over a loaded checkpoint and byte-deterministic for
fixed inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import dataio
from .nets import LatentPair, aggregate_latents
from .trainer import Pipeline, load_pipeline, to_signed


@dataclass
class AvatarEmbedding:
    latents: LatentPair
    identity_id: int
    k: int
    checkpoint_hash: str


@dataclass
class ReenactmentRequest:
    embedding: AvatarEmbedding
    driving: list[np.ndarray]   # sequence of (68, 2) landmark sets
    mode: str = "self"          # "self" | "cross"

    def __post_init__(self):
        if not self.driving:
            raise ValueError("driving sequence must be nonempty")
        if self.mode not in ("self", "cross"):
            raise ValueError(f"mode must be 'self' or 'cross', got {self.mode!r}")


def checkpoint_hash(ckpt_dir: str | Path) -> str:
    manifest = Path(ckpt_dir) / "manifest.json"
    return hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]


def _shot_tensor(frames) -> torch.Tensor:
    """frames: K dicts/tuples of (image, contour) in [0,1] -> (1, K, 6, H, W)."""
    stacks = []
    for frame in frames:
        img, con = (frame["image"], frame["contour"]) if isinstance(frame, dict) else frame
        stacks.append(np.concatenate([np.moveaxis(img, -1, 0), np.moveaxis(con, -1, 0)]))
    return torch.from_numpy(np.stack(stacks).astype(np.float32))[None]


def embed(checkpoint: str | Path, k_shot_frames, identity_id: int = -1,
          pipeline: Pipeline | None = None) -> AvatarEmbedding:
    """Encode K frames and average the per-shot latents.

    The average is computed in a canonical order, so the embedding is exactly
    invariant to permutations of the input frames.
    """
    frames = list(k_shot_frames)
    if not frames:
        raise ValueError("embed needs at least one frame")
    if pipeline is None:
        pipeline, _ = load_pipeline(checkpoint)
    sources = _shot_tensor(frames)
    with torch.no_grad():
        shots = pipeline.encoder.encode_shots(to_signed(sources))
    k = sources.shape[1]
    pairs = [
        LatentPair(
            z_layout=shots["layout"][0, i].numpy() if "layout" in shots else None,
            z_style=shots["style"][0, i].numpy(),
        )
        for i in range(k)
    ]
    return AvatarEmbedding(latents=aggregate_latents(pairs), identity_id=identity_id,
                           k=k, checkpoint_hash=checkpoint_hash(checkpoint))


def save_avatar(embedding: AvatarEmbedding, path: str | Path) -> None:
    torch.save({
        "z_layout": embedding.latents.z_layout,
        "z_style": embedding.latents.z_style,
        "identity_id": embedding.identity_id,
        "k": embedding.k,
        "checkpoint_hash": embedding.checkpoint_hash,
    }, path)


def load_avatar(path: str | Path) -> AvatarEmbedding:
    blob = torch.load(path, weights_only=False)
    return AvatarEmbedding(
        latents=LatentPair(z_layout=blob["z_layout"], z_style=blob["z_style"]),
        identity_id=blob["identity_id"], k=blob["k"],
        checkpoint_hash=blob["checkpoint_hash"])


def normalize_driving(driving: list[np.ndarray], reference: np.ndarray) -> list[np.ndarray]:
    """Optional cross-subject retargeting: match driver landmark clouds to the
    reference mean shape by a per-frame similarity transform (translation and
    isotropic scale). Off by default; probes driver-shape sensitivity."""
    def center_and_radius(lmk):
        c = lmk.mean(axis=0)
        return c, np.sqrt(np.mean(np.sum((lmk - c) ** 2, axis=1)))

    ref = np.asarray(reference, dtype=np.float64)
    ref_c, ref_s = center_and_radius(ref)
    out = []
    for lmk in driving:
        lmk = np.asarray(lmk, dtype=np.float64)
        c, s = center_and_radius(lmk)
        out.append((lmk - c) * (ref_s / max(s, 1e-9)) + ref_c)
    return out


def reenact(checkpoint: str | Path, request: ReenactmentRequest,
            return_layouts: bool = False,
            pipeline: Pipeline | None = None) -> dict:
    """Synthesize one frame per driving landmark set; frame-independent.

    Returns {"images": [(H, W, 3) float in [0,1]], "layouts": [...] | None}.
    """
    if pipeline is None:
        pipeline, _ = load_pipeline(checkpoint)
    if request.embedding.checkpoint_hash != checkpoint_hash(checkpoint):
        raise ValueError("embedding/checkpoint mismatch: avatar was built from a different checkpoint")
    if pipeline.variant == "upper_bound":
        raise ValueError("upper_bound consumes oracle target segmentations; it cannot reenact "
                         "from landmarks alone")
    res = pipeline.config.data.resolution
    z_layout = (torch.from_numpy(request.embedding.latents.z_layout)[None]
                if request.embedding.latents.z_layout is not None else None)
    z_style = torch.from_numpy(request.embedding.latents.z_style)[None]

    images, layouts = [], []
    for lmk in request.driving:
        contour = dataio.rasterize_landmarks(lmk, (res, res))
        batch = {
            "sources": None,
            "target_contour": torch.from_numpy(np.moveaxis(contour, -1, 0))[None].float(),
        }
        with torch.no_grad():
            out = pipeline.synthesize(batch, latents=(z_layout, z_style))
        images.append(np.moveaxis(((out["fake"][0] + 1) / 2).clamp(0, 1).numpy(), 0, -1))
        if return_layouts and out["layout"] is not None:
            layouts.append(out["layout"].map[0].numpy())
    return {"images": images, "layouts": layouts if return_layouts else None}


# ---------------------------------------------------------------------------
# visualization


def _layout_palette(channels: int) -> np.ndarray:
    hues = np.linspace(0.0, 1.0, channels, endpoint=False)
    palette = []
    for h in hues:
        i = int(h * 6) % 6
        f = h * 6 - int(h * 6)
        p, q, t = 0.2, 1.0 - 0.8 * f, 0.2 + 0.8 * f
        rgb = [(1.0, t, p), (q, 1.0, p), (p, 1.0, t), (p, q, 1.0), (t, p, 1.0), (1.0, p, q)][i]
        palette.append(rgb)
    return np.asarray(palette, dtype=np.float32)


def colorize_layout(layout_map: np.ndarray) -> np.ndarray:
    """Channel-argmax visualization of a (C, H, W) layout map."""
    palette = _layout_palette(layout_map.shape[0])
    return palette[layout_map.argmax(axis=0)]


def _to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def emit_grid(rows: list[tuple[str, list[np.ndarray]]], out_path: str | Path,
              gutter: int = 2, label_height: int = 12) -> Path:
    """Compose labeled rows of equal-length image sequences into one PNG.

    Width is n_frames * frame_width + (n_frames + 1) * gutter; each row gets a
    text strip above it. Deterministic: re-runs are byte-identical.
    """
    if not rows:
        raise ValueError("emit_grid needs at least one row")
    lengths = {len(images) for _, images in rows}
    if len(lengths) != 1 or 0 in lengths:
        raise ValueError(f"rows must have equal nonzero lengths, got {sorted(lengths)}")
    n = lengths.pop()
    tiles = [[_to_uint8(img) for img in images] for _, images in rows]
    h, w = tiles[0][0].shape[:2]
    if any(t.shape[:2] != (h, w) for row in tiles for t in row):
        raise ValueError("all frames must share one resolution")

    width = n * w + (n + 1) * gutter
    row_height = label_height + h + gutter
    height = gutter + row_height * len(rows)
    canvas = Image.new("RGB", (width, height), (16, 16, 16))
    draw = ImageDraw.Draw(canvas)
    for r, ((label, _), row_tiles) in enumerate(zip(rows, tiles)):
        y0 = gutter + r * row_height
        draw.text((gutter, y0), label, fill=(230, 230, 230))
        for c, tile in enumerate(row_tiles):
            x0 = gutter + c * (w + gutter)
            canvas.paste(Image.fromarray(tile), (x0, y0 + label_height))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path

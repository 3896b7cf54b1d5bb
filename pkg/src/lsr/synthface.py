"""Procedural 2D face generator with exact landmark and segmentation oracles.

Faces are layered anti-aliased ellipses/polygons over a flat background. All
geometry is analytic in normalized image coordinates (x right, y down, both in
[0, 1]), so landmarks, segmentation and pixels are mutually consistent by
construction. Rendering is a pure function of (IdentitySpec, PoseSpec, H, W).

Segmentation classes:
    0 background, 1 hair, 2 skin, 3 eyes, 4 nose, 5 mouth, 6 clothes
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

NUM_CLASSES = 7
CLS_BACKGROUND, CLS_HAIR, CLS_SKIN, CLS_EYES, CLS_NOSE, CLS_MOUTH, CLS_CLOTHES = range(7)
CLASS_NAMES = ("background", "hair", "skin", "eyes", "nose", "mouth", "clothes")

NUM_LANDMARKS = 68

# Fixed feature colors (identity variation comes from IdentitySpec fields only).
_EYE_COLOR = np.array([0.09, 0.09, 0.12])
_MOUTH_COLOR = np.array([0.58, 0.17, 0.20])

# Pose-to-geometry couplings. Lateral feature shift is odd in yaw and the
# foreshortening factor even in |yaw|, which makes landmark x-coordinates
# mirror exactly under yaw -> -yaw.
_YAW_SHIFT = 0.35       # feature shift = yaw * _YAW_SHIFT * head_a
_YAW_SQUASH = 0.25      # lateral offsets scale by (1 - _YAW_SQUASH * |yaw|)
_PITCH_SHIFT = 0.35     # feature shift = pitch * _PITCH_SHIFT * head_b


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    head_axes: tuple[float, float]        # ellipse semi-axes (a, b), normalized units
    hair_extent: float                    # 0..1, margin of the hair ellipse around the head
    skin_color: tuple[float, float, float]
    hair_color: tuple[float, float, float]
    clothes_color: tuple[float, float, float]
    background_color: tuple[float, float, float]
    eye_spacing: float                    # eye lateral offset as a fraction of head_a
    nose_length: float                    # nose length as a fraction of head_b
    mouth_width: float                    # mouth half-width as a fraction of head_a

    def __post_init__(self):
        for name in ("hair_extent", "eye_spacing", "nose_length", "mouth_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.head_axes[0] <= 0 or self.head_axes[1] <= 0:
            raise ValueError("head_axes must be strictly positive")
        for name in ("skin_color", "hair_color", "clothes_color", "background_color"):
            c = getattr(self, name)
            if len(c) != 3 or any(v < 0 or v > 1 for v in c):
                raise ValueError(f"{name} must be an RGB triple in [0,1]")


@dataclass(frozen=True)
class PoseSpec:
    yaw: float = 0.0          # radians, [-0.6, 0.6]
    pitch: float = 0.0        # radians, [-0.3, 0.3]
    mouth_open: float = 0.0   # [0, 1]
    eyes_open: float = 1.0    # [0, 1]
    translation: tuple[float, float] = (0.0, 0.0)  # (dx, dy), each [-0.1, 0.1]

    def __post_init__(self):
        bounds = {
            "yaw": (self.yaw, 0.6),
            "pitch": (self.pitch, 0.3),
        }
        for name, (val, lim) in bounds.items():
            if abs(val) > lim:
                raise ValueError(f"{name}={val} outside [-{lim}, {lim}]")
        for name, val in (("mouth_open", self.mouth_open), ("eyes_open", self.eyes_open)):
            if val < 0 or val > 1:
                raise ValueError(f"{name}={val} outside [0, 1]")
        if any(abs(t) > 0.1 for t in self.translation):
            raise ValueError(f"translation={self.translation} outside [-0.1, 0.1]")


@dataclass
class RenderedSample:
    image: np.ndarray         # (H, W, 3) float32 in [0, 1]
    landmarks: np.ndarray     # (68, 2) float64, normalized (x, y)
    segmentation: np.ndarray  # (H, W) uint8, classes 0..6
    identity_id: int
    pose: PoseSpec


def sample_identity(seed: int, identity_id: int | None = None) -> IdentitySpec:
    """Deterministically draw an identity. Two different seeds differ a.s. in every float field."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.17, 0.23)
    b = rng.uniform(0.22, 0.30)
    hair_extent = rng.uniform(0.15, 0.55)
    skin_r = rng.uniform(0.55, 0.95)
    skin = (skin_r, skin_r * rng.uniform(0.72, 0.88), skin_r * rng.uniform(0.52, 0.72))
    hair = tuple(rng.uniform(0.02, 0.98, size=3))
    clothes = tuple(rng.uniform(0.02, 0.98, size=3))
    background = tuple(rng.uniform(0.02, 0.98, size=3))
    return IdentitySpec(
        identity_id=seed if identity_id is None else identity_id,
        head_axes=(a, b),
        hair_extent=hair_extent,
        skin_color=skin,
        hair_color=hair,
        clothes_color=clothes,
        background_color=background,
        eye_spacing=rng.uniform(0.36, 0.52),
        nose_length=rng.uniform(0.22, 0.38),
        mouth_width=rng.uniform(0.28, 0.45),
    )


def sample_pose(rng: np.random.Generator) -> PoseSpec:
    """Draw a pose uniformly over the valid ranges."""
    return PoseSpec(
        yaw=rng.uniform(-0.6, 0.6),
        pitch=rng.uniform(-0.3, 0.3),
        mouth_open=rng.uniform(0.0, 1.0),
        eyes_open=rng.uniform(0.0, 1.0),
        translation=(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)),
    )


# ---------------------------------------------------------------------------
# analytic shapes


class _Ellipse:
    def __init__(self, cx, cy, ax, ay):
        self.cx, self.cy, self.ax, self.ay = cx, cy, ax, ay

    def contains(self, x, y):
        return ((x - self.cx) / self.ax) ** 2 + ((y - self.cy) / self.ay) ** 2 <= 1.0


class _HalfPlaneBelow:
    def __init__(self, y0):
        self.y0 = y0

    def contains(self, x, y):
        return y >= self.y0


class _ConvexPolygon:
    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        # Normalize winding so the interior satisfies cross >= 0 on every edge.
        v = self.vertices
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 < 0:
            self.vertices = self.vertices[::-1]

    def contains(self, x, y):
        inside = np.ones_like(x, dtype=bool)
        n = len(self.vertices)
        for i in range(n):
            x0, y0 = self.vertices[i]
            x1, y1 = self.vertices[(i + 1) % n]
            cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
            inside &= cross >= 0
        return inside


class _FaceGeometry:
    """All shape parameters and the 68 landmarks for one (identity, pose)."""

    def __init__(self, ident: IdentitySpec, pose: PoseSpec):
        a, b = ident.head_axes
        dx, dy = pose.translation
        cx, cy = 0.5 + dx, 0.5 + dy
        s = pose.yaw * _YAW_SHIFT * a                  # lateral feature shift, odd in yaw
        comp = 1.0 - _YAW_SQUASH * abs(pose.yaw)       # foreshortening, even in yaw
        p = pose.pitch * _PITCH_SHIFT * b              # vertical feature shift

        def feat(u, v):
            return np.array([cx + s + u * comp, cy + p + v])

        eye_u = ident.eye_spacing * a
        eye_v = -0.22 * b
        eye_w = 0.20 * a
        eye_h = eye_w * (0.45 + 0.35 * pose.eyes_open)
        brow_v = eye_v - eye_h - 0.06 * b

        bridge_v = -0.18 * b
        base_v = bridge_v + ident.nose_length * b
        nose_hw = 0.16 * a

        mouth_v = 0.42 * b
        mouth_w = ident.mouth_width * a
        mouth_h = (0.075 + 0.115 * pose.mouth_open) * b
        inner_w, inner_h = 0.62 * mouth_w, 0.40 * mouth_h
        # Landmarks on eye/lip rings sit slightly inside the drawn boundary so
        # each one stays within a pixel of its class region at low resolutions.
        ring = 0.85

        self.head = _Ellipse(cx, cy, a, b)
        self.hair = _Ellipse(
            cx, cy - 0.05 * b,
            a * (1.0 + 0.25 * ident.hair_extent),
            b * (1.0 + 0.30 * ident.hair_extent),
        )
        self.clothes = _HalfPlaneBelow(cy + 0.80 * b)
        eye_l_c = feat(-eye_u, eye_v)
        eye_r_c = feat(+eye_u, eye_v)
        self.eye_l = _Ellipse(eye_l_c[0], eye_l_c[1], eye_w * comp, eye_h)
        self.eye_r = _Ellipse(eye_r_c[0], eye_r_c[1], eye_w * comp, eye_h)
        # Trapezoid, wider at the base; CCW with y pointing down.
        self.nose = _ConvexPolygon([
            feat(-0.35 * nose_hw, bridge_v),
            feat(-nose_hw, base_v),
            feat(+nose_hw, base_v),
            feat(+0.35 * nose_hw, bridge_v),
        ])
        mouth_c = feat(0.0, mouth_v)
        self.mouth = _Ellipse(mouth_c[0], mouth_c[1], mouth_w * comp, mouth_h)

        lmk = np.zeros((NUM_LANDMARKS, 2), dtype=np.float64)
        # 0-16 jaw: lower half of the head outline, image-left to image-right.
        theta = np.pi - np.arange(17) * (np.pi / 16.0)
        lmk[0:17, 0] = cx + a * np.cos(theta)
        lmk[0:17, 1] = cy + b * np.sin(theta)
        # 17-26 brows: 5-point arcs above each eye.
        arc_u = np.array([-1.15, -0.575, 0.0, 0.575, 1.15]) * eye_w
        arc_v = brow_v - np.array([0.0, 0.012, 0.018, 0.012, 0.0]) * b
        for k in range(5):
            lmk[17 + k] = feat(-eye_u + arc_u[k], arc_v[k])
            lmk[22 + k] = feat(eye_u + arc_u[k], arc_v[k])
        # 27-30 nose bridge, 30 = tip.
        for k in range(4):
            lmk[27 + k] = feat(0.0, bridge_v + (k / 4.0) * (base_v - bridge_v))
        # 31-35 nose base just above the trapezoid bottom edge.
        base_lmk_v = base_v - 0.12 * (base_v - bridge_v)
        for k, frac in enumerate((-0.8, -0.4, 0.0, 0.4, 0.8)):
            lmk[31 + k] = feat(frac * nose_hw, base_lmk_v)
        # 36-47 eyes: 6 points on each eye ring.
        eye_phi = np.deg2rad([180.0, 125.0, 55.0, 0.0, -55.0, -125.0])
        for k, phi in enumerate(eye_phi):
            du, dv = ring * eye_w * np.cos(phi), -ring * eye_h * np.sin(phi)
            lmk[36 + k] = feat(-eye_u + du, eye_v + dv)
            lmk[42 + k] = feat(eye_u + du, eye_v + dv)
        # 48-59 outer lip, 60-67 inner lip: closed loops.
        outer_phi = np.deg2rad(180.0 - 30.0 * np.arange(12))
        for k, phi in enumerate(outer_phi):
            lmk[48 + k] = feat(ring * mouth_w * np.cos(phi), mouth_v - ring * mouth_h * np.sin(phi))
        inner_phi = np.deg2rad(180.0 - 45.0 * np.arange(8))
        for k, phi in enumerate(inner_phi):
            lmk[60 + k] = feat(ring * inner_w * np.cos(phi), mouth_v - ring * inner_h * np.sin(phi))
        self.landmarks = lmk

    def layers(self, ident: IdentitySpec):
        """Paint order: later layers overwrite earlier ones."""
        skin = np.asarray(ident.skin_color)
        return [
            (CLS_HAIR, np.asarray(ident.hair_color), self.hair),
            (CLS_CLOTHES, np.asarray(ident.clothes_color), self.clothes),
            (CLS_SKIN, skin, self.head),
            (CLS_EYES, _EYE_COLOR, self.eye_l),
            (CLS_EYES, _EYE_COLOR, self.eye_r),
            (CLS_NOSE, skin * 0.82, self.nose),
            (CLS_MOUTH, _MOUTH_COLOR, self.mouth),
        ]


def render(ident: IdentitySpec, pose: PoseSpec, resolution: tuple[int, int]) -> RenderedSample:
    """Render one frame. Deterministic; image anti-aliased by 3x3 supersampling."""
    H, W = resolution
    if H < 32 or W < 32:
        raise ValueError(f"resolution {resolution} below minimum 32x32")
    geo = _FaceGeometry(ident, pose)

    # Subpixel grid; the (1,1) subsample of each pixel is its exact center.
    xs = (np.arange(W * 3) + 0.5) / (W * 3)
    ys = (np.arange(H * 3) + 0.5) / (H * 3)
    gx, gy = np.meshgrid(xs, ys)

    image = np.empty((H, W, 3), dtype=np.float64)
    image[:] = np.asarray(ident.background_color)
    seg = np.zeros((H, W), dtype=np.uint8)

    for cls, color, shape in geo.layers(ident):
        sub = shape.contains(gx, gy)
        coverage = sub.reshape(H, 3, W, 3).mean(axis=(1, 3))
        image = image * (1.0 - coverage[..., None]) + color * coverage[..., None]
        seg[sub[1::3, 1::3]] = cls

    return RenderedSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        landmarks=geo.landmarks,
        segmentation=seg,
        identity_id=ident.identity_id,
        pose=pose,
    )


def inject_occluder(sample: RenderedSample, seed: int) -> tuple[RenderedSample, np.ndarray]:
    """Overwrite a random opaque rectangle covering 5-15% of pixels.

    Returns the occluded sample (landmarks and segmentation untouched) and a
    boolean mask marking exactly the overwritten pixels.
    """
    H, W = sample.image.shape[:2]
    rng = np.random.default_rng([seed, H, W])
    while True:
        frac = rng.uniform(0.06, 0.14)
        aspect = np.exp(rng.uniform(np.log(0.35), np.log(2.8)))
        h = int(np.clip(round(np.sqrt(frac * H * W / aspect)), 1, H))
        w = int(np.clip(round(frac * H * W / h), 1, W))
        if 0.05 <= (h * w) / (H * W) <= 0.15:
            break
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)

    image = sample.image.copy()
    image[y0:y0 + h, x0:x0 + w] = color
    mask = np.zeros((H, W), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = True
    occluded = RenderedSample(
        image=image,
        landmarks=sample.landmarks,
        segmentation=sample.segmentation,
        identity_id=sample.identity_id,
        pose=sample.pose,
    )
    return occluded, mask


# ---------------------------------------------------------------------------
# on-disk dataset


def write_sample(sample: RenderedSample, directory: Path, frame_idx: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    img8 = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(directory / f"{frame_idx:04d}.png")
    Image.fromarray(sample.segmentation, mode="L").save(directory / f"{frame_idx:04d}.seg.png")
    lmk = [[float(x), float(y)] for x, y in sample.landmarks]
    (directory / f"{frame_idx:04d}.lmk.json").write_text(json.dumps(lmk))


def make_dataset(num_identities: int, frames_per_identity: int,
                 resolution: tuple[int, int], out_dir: str | Path, seed: int):
    """Write a dataset in the on-disk layout and return its index.

    Layout: ``root/ids.json``, ``root/<identity_id>/<frame_idx>.png`` plus
    ``.lmk.json`` and ``.seg.png`` siblings. Re-running with the same
    arguments reproduces identical files.
    """
    from . import dataio

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    identities = []
    for i in range(num_identities):
        ident = sample_identity(seed * 1_000_003 + i, identity_id=i)
        identities.append(ident)
        for j in range(frames_per_identity):
            pose = sample_pose(np.random.default_rng([seed, i, j]))
            sample = render(ident, pose, resolution)
            write_sample(sample, out / str(i), j)
    meta = {
        "seed": seed,
        "resolution": list(resolution),
        "frames_per_identity": frames_per_identity,
        "identities": [dataclasses.asdict(s) for s in identities],
    }
    (out / "ids.json").write_text(json.dumps(meta, indent=1))
    return dataio.load_dataset(out)

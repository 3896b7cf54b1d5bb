"""Evaluation metrics and the directory-level evaluation protocol.

Per-sample metrics (PSNR, SSIM, LPIPS-like, ID-SIM, NMKE) plus set-level FID,
with pose-variance bucketing of samples into low/medium/high by the keypoint
difference between source and target.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from . import dataio

PSNR_INF = float("inf")


def psnr(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max^2 / MSE); identical inputs report +inf."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use valid-mode windowing; inputs must be at least 11
    pixels on each side. Multi-channel inputs average the per-channel scores.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        return float(np.mean([ssim(x[..., c], y[..., c], data_range) for c in range(x.shape[-1])]))
    if min(x.shape) < 11:
        raise ValueError(f"image {x.shape} smaller than the 11x11 SSIM window")
    w = _gaussian_kernel()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid") - mu_x ** 2
    yy = convolve2d(y * y, w, mode="valid") - mu_y ** 2
    xy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def lpips_like(backbone, x: torch.Tensor, y: torch.Tensor) -> float:
    """Perceptual distance: unit-normalized feature differences, squared,
    spatially averaged, summed over layers."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x[None], y[None]
    total = 0.0
    with torch.no_grad():
        for fx, fy in zip(backbone.features(x), backbone.features(y)):
            nx = fx / fx.norm(dim=1, keepdim=True).clamp_min(1e-10)
            ny = fy / fy.norm(dim=1, keepdim=True).clamp_min(1e-10)
            total += float((nx - ny).pow(2).sum(dim=1).mean())
    return total


def id_sim(embedder, x: torch.Tensor, y: torch.Tensor) -> float:
    """Cosine similarity between face embeddings of the two images."""
    if x.dim() == 3:
        x, y = x[None], y[None]
    with torch.no_grad():
        ex = embedder(x).flatten()
        ey = embedder(y).flatten()
    nx, ny = float(ex.norm()), float(ey.norm())
    if nx == 0.0 or ny == 0.0:
        raise ValueError("zero-norm embedding")
    return float((ex @ ey) / (nx * ny))


def nmke(pred_landmarks: np.ndarray, gt_landmarks: np.ndarray,
         normalize: str = "side") -> float:
    """Mean Euclidean keypoint distance over the 68 landmarks.

    ``normalize="side"`` (default) keeps the side-normalized coordinates as
    they are; ``"interocular"`` divides by the gt eye-center distance instead.
    """
    p = np.asarray(pred_landmarks, dtype=np.float64)
    g = np.asarray(gt_landmarks, dtype=np.float64)
    if p.shape != (68, 2) or g.shape != (68, 2):
        raise ValueError("landmarks must be (68, 2)")
    err = float(np.mean(np.linalg.norm(p - g, axis=1)))
    if normalize == "side":
        return err
    if normalize == "interocular":
        dist = float(np.linalg.norm(g[36:42].mean(axis=0) - g[42:48].mean(axis=0)))
        if dist <= 0:
            raise ValueError("degenerate interocular distance")
        return err / dist
    raise ValueError(f"unknown normalization {normalize!r}")


def fid(features_real: np.ndarray, features_fake: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariance diagonals are regularized by eps; the matrix square root uses
    an eigendecomposition of the symmetrized product.
    """
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_fake, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (N, d)/(M, d): {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite features")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)

    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    value = float(mu_a @ mu_a - 2 * mu_a @ mu_b + mu_b @ mu_b
                  + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# directory evaluation


@dataclass
class MetricReport:
    per_sample: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    buckets: dict = field(default_factory=dict)
    fid: float | None = None

    METRIC_ORDER = ("psnr", "ssim", "lpips", "id_sim", "nmke", "fid")

    def table_row(self, label: str = "") -> str:
        header = "PSNR↑ SSIM↑ LPIPS↓ ID-SIM↑ NMKE↓ FID↓"
        vals = []
        for m in self.METRIC_ORDER:
            v = self.fid if m == "fid" else self.aggregate.get(m)
            vals.append("--" if v is None else f"{v:.3f}")
        return f"{header}\n{label + ' ' if label else ''}{' '.join(vals)}"

    def to_json(self, path: str | Path) -> None:
        payload = {
            "aggregate": self.aggregate,
            "fid": self.fid,
            "buckets": self.buckets,
            "per_sample": self.per_sample,
        }
        Path(path).write_text(json.dumps(payload, indent=1, default=_jsonable))

    def to_csv(self, path: str | Path) -> None:
        fields = ["name", "bucket"] + [m for m in self.METRIC_ORDER if m != "fid"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for row in self.per_sample:
                writer.writerow(row)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    raise TypeError(f"not JSON serializable: {type(v)}")


def _to_signed_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.moveaxis(img, -1, 0).astype(np.float32)) * 2.0 - 1.0


def pose_buckets(deltas: list[float]) -> list[str]:
    """Split samples into equal thirds (low/medium/high) by rank of delta."""
    order = np.argsort(np.asarray(deltas), kind="stable")
    labels = [""] * len(deltas)
    for name, chunk in zip(("low", "medium", "high"), np.array_split(order, 3)):
        for i in chunk:
            labels[int(i)] = name
    return labels


def evaluate_directory(outputs: str | Path, ground_truths: str | Path,
                       landmark_fn=None, embedder=None, backbone=None) -> MetricReport:
    """Compare filename-aligned PNG pairs from two directories.

    ``landmark_fn(name)`` may supply {"output", "gt", "source"} landmark sets
    per sample; NMKE uses output-vs-gt, pose buckets use source-vs-gt. The
    optional ``embedder`` enables ID-SIM and ``backbone`` enables the
    LPIPS-like metric and FID (over pooled backbone features).
    """
    out_dir, gt_dir = Path(outputs), Path(ground_truths)
    out_files = {p.name: p for p in sorted(out_dir.glob("*.png"))}
    gt_files = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    unmatched = sorted(set(out_files) ^ set(gt_files))
    if unmatched:
        raise ValueError(f"unmatched files between {out_dir} and {gt_dir}: {unmatched}")
    if not out_files:
        raise ValueError(f"no .png files under {out_dir}")

    rows, deltas, feats_real, feats_fake = [], [], [], []
    for name in sorted(out_files):
        out_img = dataio.load_image(out_files[name])
        gt_img = dataio.load_image(gt_files[name])
        row = {"name": name, "psnr": psnr(out_img, gt_img), "ssim": ssim(out_img, gt_img)}
        out_t, gt_t = _to_signed_tensor(out_img), _to_signed_tensor(gt_img)
        if backbone is not None:
            row["lpips"] = lpips_like(backbone, out_t, gt_t)
            with torch.no_grad():
                feats_fake.append(backbone.features(out_t[None])[-1].mean(dim=(2, 3))[0].numpy())
                feats_real.append(backbone.features(gt_t[None])[-1].mean(dim=(2, 3))[0].numpy())
        if embedder is not None:
            row["id_sim"] = id_sim(embedder, out_t, gt_t)
        delta = 0.0
        if landmark_fn is not None:
            lmks = landmark_fn(name)
            if lmks.get("output") is not None and lmks.get("gt") is not None:
                row["nmke"] = nmke(lmks["output"], lmks["gt"])
            if lmks.get("source") is not None and lmks.get("gt") is not None:
                delta = nmke(lmks["source"], lmks["gt"])
        deltas.append(delta)
        rows.append(row)

    for row, bucket in zip(rows, pose_buckets(deltas)):
        row["bucket"] = bucket

    metric_names = [m for m in MetricReport.METRIC_ORDER if m != "fid"]
    aggregate = {
        m: float(np.mean([r[m] for r in rows if m in r]))
        for m in metric_names if any(m in r for r in rows)
    }
    buckets = {}
    for name in ("low", "medium", "high"):
        sub = [r for r in rows if r["bucket"] == name]
        if sub:
            buckets[name] = {
                m: float(np.mean([r[m] for r in sub if m in r]))
                for m in metric_names if any(m in r for r in sub)
            }
            buckets[name]["count"] = len(sub)
    report = MetricReport(per_sample=rows, aggregate=aggregate, buckets=buckets)
    if feats_real:
        report.fid = fid(np.stack(feats_real), np.stack(feats_fake))
    return report

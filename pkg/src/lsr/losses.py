"""Training objectives: layout pre-training loss, full objective, adversarial + R1.

Perceptual terms run through pluggable frozen feature extractors. Two
desk-scale stand-ins are provided: a fixed random conv pyramid (generic role)
and a small classifier trained on dataset identities (identity role). Real
pretrained backbones can be dropped in behind the same interface.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossConfig
from .nets import DownBlock, EqualizedConv2d, EqualizedLinear, blur_pool, seeded_init


class RandomPyramidBackbone(nn.Module):
    """Frozen randomly-initialized 4-block conv pyramid (generic perceptual role)."""

    is_identity = False

    def __init__(self, seed: int = 0, base: int = 16):
        super().__init__()
        widths = [base, base * 2, base * 4, base * 8]
        convs, ch = [], 3
        for w in widths:
            convs.append(EqualizedConv2d(ch, w, 3))
            ch = w
        self.convs = nn.ModuleList(convs)
        seeded_init(self, seed)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
            if min(h.shape[-2:]) >= 8:
                h = blur_pool(h)
        return feats


class IdentityBackbone(nn.Module):
    """Small identity classifier; its features/embedding fill the identity-perceptual
    and face-embedding roles at desk scale."""

    is_identity = True

    def __init__(self, num_classes: int, base: int = 16, emb_dim: int = 64):
        super().__init__()
        self.stem = EqualizedConv2d(3, base, 3)
        self.blocks = nn.ModuleList([
            DownBlock(base, base * 2),
            DownBlock(base * 2, base * 4),
            DownBlock(base * 4, base * 8),
        ])
        self.fc_emb = EqualizedLinear(base * 8, emb_dim)
        self.fc_cls = EqualizedLinear(emb_dim, num_classes)

    def _trunk(self, x):
        feats = []
        h = F.leaky_relu(self.stem(x), 0.2)
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats, h.mean(dim=(2, 3))

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats, _ = self._trunk(x)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """L2-normalized penultimate embedding, (B, emb_dim)."""
        _, pooled = self._trunk(x)
        emb = self.fc_emb(pooled)
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        _, pooled = self._trunk(x)
        return self.fc_cls(F.leaky_relu(self.fc_emb(pooled), 0.2))


def train_identity_backbone(images: torch.Tensor, labels: torch.Tensor,
                            num_classes: int, steps: int = 300, batch_size: int = 32,
                            lr: float = 2e-3, seed: int = 0) -> IdentityBackbone:
    """Fit the identity stand-in on (N,3,H,W) images in [-1,1]; returns it frozen."""
    import numpy as np

    net = seeded_init(IdentityBackbone(num_classes), seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.5, 0.999))
    n = images.shape[0]
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        idx = torch.from_numpy(rng.integers(0, n, size=min(batch_size, n)))
        loss = F.cross_entropy(net.logits(images[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# ---------------------------------------------------------------------------
# losses


def perceptual_loss(backbone, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sum over backbone layers of the mean absolute feature difference."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    fx = backbone.features(x)
    fy = backbone.features(y)
    return sum((a - b).abs().mean() for a, b in zip(fx, fy))


class ReconstructionLoss:
    """Generic perceptual + identity perceptual + L1, with fixed internal weights."""

    def __init__(self, generic_backbone, identity_backbone=None,
                 w_perc: float = 1.0, w_id: float = 0.1, w_l1: float = 1.0):
        self.generic = generic_backbone
        self.identity = identity_backbone
        self.w_perc, self.w_id, self.w_l1 = w_perc, w_id, w_l1

    def terms(self, x: torch.Tensor, y: torch.Tensor) -> dict[str, torch.Tensor]:
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        out = {
            "rec_perc": perceptual_loss(self.generic, x, y),
            "rec_l1": (x - y).abs().mean(),
        }
        out["rec_id"] = (perceptual_loss(self.identity, x, y) if self.identity is not None
                         else torch.zeros((), dtype=x.dtype))
        return out

    def __call__(self, x: torch.Tensor, y: torch.Tensor):
        t = self.terms(x, y)
        total = self.w_perc * t["rec_perc"] + self.w_id * t["rec_id"] + self.w_l1 * t["rec_l1"]
        return total, t


def g_nonsaturating_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-d_fake).mean()


def d_logistic_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return (F.softplus(d_fake) + F.softplus(-d_real)).mean()


def r1_penalty(d_real: torch.Tensor, real: torch.Tensor, gamma: float) -> torch.Tensor:
    """(gamma/2) * E ||d D(x) / d x||^2 over real samples."""
    (grad,) = torch.autograd.grad(d_real.sum(), real, create_graph=True)
    return (gamma / 2.0) * grad.flatten(1).pow(2).sum(dim=1).mean()


def adversarial_losses(discriminator, real: torch.Tensor, fake: torch.Tensor,
                       gamma_r1: float = 10.0):
    """Non-saturating logistic losses plus R1 on real samples.

    Returns (g_loss, d_loss, r1); d_loss already includes the returned r1 term.
    """
    g_loss = g_nonsaturating_loss(discriminator(fake))
    real_req = real.detach().requires_grad_(True)
    d_real = discriminator(real_req)
    d_fake = discriminator(fake.detach())
    r1 = r1_penalty(d_real, real_req, gamma_r1) if gamma_r1 > 0 else torch.zeros(())
    d_loss = d_logistic_loss(d_real, d_fake) + r1
    return g_loss, d_loss, r1


def latent_regularizer(z_layout: torch.Tensor | None, z_style: torch.Tensor | None) -> torch.Tensor:
    """Sum of squared Euclidean norms of the latents (batch-averaged)."""
    total = torch.zeros(())
    for z in (z_layout, z_style):
        if z is None:
            continue
        sq = z.pow(2).sum(dim=-1)
        total = total + (sq.mean() if sq.dim() else sq)
    return total


def pretrain_objective(layout_logits: torch.Tensor, oracle_seg: torch.Tensor,
                       aux_rgb: torch.Tensor, target_image: torch.Tensor,
                       lambda_r: float, backbone):
    """Mean per-pixel cross-entropy plus a weighted perceptual reconstruction.

    ``target_image`` in [-1, 1] to match the tanh-bounded auxiliary head.
    """
    c = layout_logits.shape[1]
    if int(oracle_seg.max()) >= c:
        raise ValueError(f"segmentation class {int(oracle_seg.max())} >= layout channels {c}")
    xent = F.cross_entropy(layout_logits, oracle_seg)
    rec = perceptual_loss(backbone, aux_rgb, target_image)
    return xent + lambda_r * rec, {"xent": xent, "rec_perc": rec}


def full_objective(output: torch.Tensor, target: torch.Tensor,
                   z_layout: torch.Tensor | None, z_style: torch.Tensor | None,
                   d_score_on_output: torch.Tensor | None,
                   weights: LossConfig, rec_loss: ReconstructionLoss):
    """Reconstruction + weighted adversarial + weighted latent L2; returns
    (total, breakdown) with raw per-term values for logging."""
    rec_total, terms = rec_loss(output, target)
    g_adv = (g_nonsaturating_loss(d_score_on_output) if d_score_on_output is not None
             else torch.zeros((), dtype=output.dtype))
    lat = latent_regularizer(z_layout, z_style).to(output.dtype)
    total = rec_total + weights.lambda_adv * g_adv + weights.lambda_l2 * lat
    breakdown = dict(terms)
    breakdown.update({"g_adv": g_adv, "latent_l2": lat, "rec_total": rec_total})
    return total, breakdown

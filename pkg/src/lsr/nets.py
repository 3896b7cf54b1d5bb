"""Network building blocks and the four networks of the pipeline.

All layers use runtime weight scaling by sqrt(2 / fan_in) over standard-normal
initialized weights, so every layer trains at a comparable effective rate.
Downsampling is blur-pool (binomial [1,2,1] filter, then stride 2), upsampling
bilinear. Residual blocks are conv-norm-act x2 with a learnable 1x1 skip on
channel change.

Networks:
    Encoder        shared trunk + per-latent heads ("layout" / "style"), 512-d each
    AdaInUNet      UNet with AdaIN modulation in every block; heads for layout
                   logits and/or an RGB image (the layout predictor and the
                   no-SPADE baseline generator are the two head configurations)
    SpadeGenerator style-seeded stack of SPADE residual upsampling blocks
    Discriminator  unconditional resnet discriminator, single logit
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig


@dataclass
class LatentPair:
    z_layout: np.ndarray | None  # (512,) float32; None for style-only variants
    z_style: np.ndarray


@dataclass
class LatentLayout:
    map: torch.Tensor       # (B, C, H, W) probability simplex per pixel
    aux_rgb: torch.Tensor   # (B, 3, H, W) in [-1, 1]
    logits: torch.Tensor    # (B, C, H, W) raw layout head output


# ---------------------------------------------------------------------------
# primitive layers


class EqualizedLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.scale = math.sqrt(2.0 / in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 padding: int | None = None, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.scale = math.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


_BLUR_KERNEL = (torch.tensor([1.0, 2.0, 1.0])[:, None] @ torch.tensor([1.0, 2.0, 1.0])[None, :]) / 16.0


def blur_pool(x: torch.Tensor) -> torch.Tensor:
    """Anti-aliased 2x downsampling: depthwise binomial filter, then stride 2.

    Reflection padding keeps the filter weights summing to one everywhere, so
    constant inputs stay constant.
    """
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"blur_pool needs even spatial dims, got {tuple(x.shape[-2:])}")
    c = x.shape[1]
    kernel = _BLUR_KERNEL.to(dtype=x.dtype, device=x.device).expand(c, 1, 3, 3)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), kernel, stride=2, groups=c)


def adain(features: torch.Tensor, mean: torch.Tensor, std: torch.Tensor,
          eps: float = 1e-8) -> torch.Tensor:
    """Instance-normalize features, then impose per-channel target mean/std.

    ``mean``/``std`` are (B, C) or (C,); std must be positive (module callers
    guarantee this through a softplus map). Constant channels normalize to
    zero and come out at the target mean.
    """
    if mean.dim() == 1:
        mean, std = mean[None], std[None]
    mu = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), unbiased=False, keepdim=True)
    normalized = (features - mu) / torch.sqrt(var + eps)
    return normalized * std[..., None, None] + mean[..., None, None]


_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(x + this) == 1 at x == 0


class AdaIN(nn.Module):
    """Per-channel style modulation driven by a latent vector."""

    def __init__(self, channels: int, latent_dim: int):
        super().__init__()
        self.fc = EqualizedLinear(latent_dim, 2 * channels)

    def forward(self, x, z):
        raw_mean, raw_std = self.fc(z).chunk(2, dim=-1)
        return adain(x, raw_mean, F.softplus(raw_std + _SOFTPLUS_ONE))


class SpadeNorm(nn.Module):
    """Spatially-adaptive denormalization: per-pixel scale/shift from a dense map."""

    def __init__(self, channels: int, spatial_channels: int, hidden: int = 64):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = EqualizedConv2d(spatial_channels, hidden, 3)
        self.gamma = EqualizedConv2d(hidden, channels, 3)
        self.beta = EqualizedConv2d(hidden, channels, 3)

    def forward(self, x, spatial):
        if spatial.shape[-2:] != x.shape[-2:]:
            spatial = F.interpolate(spatial, size=x.shape[-2:], mode="nearest")
        h = F.relu(self.shared(spatial))
        return self.norm(x) * (1.0 + self.gamma(h)) + self.beta(h)


# ---------------------------------------------------------------------------
# residual blocks


class DownBlock(nn.Module):
    """Plain residual downsampling block (encoder / discriminator)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        s = x if self.skip is None else self.skip(x)
        return (blur_pool(h) + blur_pool(s)) / math.sqrt(2.0)


class AdaInResBlock(nn.Module):
    """conv-AdaIN-act x2 with learnable skip; optional 2x resize."""

    def __init__(self, in_ch: int, out_ch: int, latent_dim: int, resample: str = "none"):
        super().__init__()
        assert resample in ("none", "down", "up")
        self.resample = resample
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3)
        self.norm1 = AdaIN(out_ch, latent_dim)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3)
        self.norm2 = AdaIN(out_ch, latent_dim)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x, z):
        if self.resample == "up":
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.relu(self.norm1(self.conv1(x), z))
        h = F.relu(self.norm2(self.conv2(h), z))
        s = x if self.skip is None else self.skip(x)
        out = (h + s) / math.sqrt(2.0)
        if self.resample == "down":
            out = blur_pool(out)
        return out


class SpadeResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, spatial_ch: int, hidden: int,
                 latent_dim: int | None = None):
        super().__init__()
        self.spade1 = SpadeNorm(in_ch, spatial_ch, hidden)
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3)
        self.spade2 = SpadeNorm(out_ch, spatial_ch, hidden)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3)
        self.spade_s = SpadeNorm(in_ch, spatial_ch, hidden) if in_ch != out_ch else None
        self.skip = EqualizedConv2d(in_ch, out_ch, 1) if in_ch != out_ch else None
        self.style = AdaIN(out_ch, latent_dim) if latent_dim else None

    def forward(self, x, spatial, z=None):
        h = self.conv1(F.leaky_relu(self.spade1(x, spatial), 0.2))
        h = self.conv2(F.leaky_relu(self.spade2(h, spatial), 0.2))
        s = x if self.skip is None else self.skip(F.leaky_relu(self.spade_s(x, spatial), 0.2))
        out = (h + s) / math.sqrt(2.0)
        if self.style is not None:
            out = self.style(out, z)
        return out


# ---------------------------------------------------------------------------
# networks


class Encoder(nn.Module):
    """Resnet encoder with a shared trunk and one 512-d head per latent.

    Feature maps start at ``base`` and double per downsampling block, capped
    at ``cmax``. Heads read a globally pooled vector, so their parameter
    counts are independent of the input resolution.
    """

    def __init__(self, base: int = 32, cmax: int = 512, blocks: int = 5,
                 latent_dim: int = 512, heads: tuple[str, ...] = ("layout", "style"),
                 in_channels: int = 6, separate_trunks: bool = False):
        super().__init__()
        for h in heads:
            if h not in ("layout", "style"):
                raise ValueError(f"unknown encoder head {h!r}")
        self.heads = tuple(heads)
        self.separate_trunks = separate_trunks and len(heads) > 1
        n_trunks = len(heads) if self.separate_trunks else 1

        def make_trunk():
            layers = [EqualizedConv2d(in_channels, base, 3)]
            ch = base
            body = []
            for _ in range(blocks):
                nxt = min(ch * 2, cmax)
                body.append(DownBlock(ch, nxt))
                ch = nxt
            return nn.ModuleDict({"stem": layers[0], "body": nn.ModuleList(body)}), ch

        trunks, out_ch = [], None
        for _ in range(n_trunks):
            trunk, out_ch = make_trunk()
            trunks.append(trunk)
        self.trunks = nn.ModuleList(trunks)
        self.out_channels = out_ch
        self.head_fcs = nn.ModuleDict({h: EqualizedLinear(out_ch, latent_dim) for h in heads})

    def _run_trunk(self, trunk, x):
        h = F.leaky_relu(trunk["stem"](x), 0.2)
        for block in trunk["body"]:
            h = block(h)
        return F.leaky_relu(h, 0.2).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """x: (B, in_channels, H, W) -> {head: (B, latent_dim)}."""
        if self.separate_trunks:
            pooled = {h: self._run_trunk(t, x) for h, t in zip(self.heads, self.trunks)}
        else:
            shared = self._run_trunk(self.trunks[0], x)
            pooled = {h: shared for h in self.heads}
        return {h: self.head_fcs[h](pooled[h]) for h in self.heads}

    def encode_shots(self, sources: torch.Tensor) -> dict[str, torch.Tensor]:
        """sources: (N, K, C, H, W) -> {head: (N, K, latent_dim)} per-shot latents."""
        n, k = sources.shape[:2]
        flat = self.forward(sources.reshape(n * k, *sources.shape[2:]))
        return {h: v.reshape(n, k, -1) for h, v in flat.items()}


def aggregate_latents(pairs) -> LatentPair:
    """Arithmetic mean of per-shot latent pairs.

    Rows are summed in a canonical (lexicographically sorted) order in float64
    so the result is exactly permutation-invariant.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("aggregate_latents needs K >= 1 latent pairs")

    def canonical_mean(rows):
        arr = np.stack([np.asarray(r, dtype=np.float64) for r in rows])
        order = np.lexsort(arr.T[::-1])
        return arr[order].mean(axis=0).astype(np.float32)

    z_style = canonical_mean([p.z_style for p in pairs])
    if all(p.z_layout is not None for p in pairs):
        z_layout = canonical_mean([p.z_layout for p in pairs])
    else:
        z_layout = None
    return LatentPair(z_layout=z_layout, z_style=z_style)


class AdaInUNet(nn.Module):
    """UNet with residual blocks, AdaIN modulation in every block.

    ``heads`` selects the outputs: "layout" (C-channel logits, softmax map)
    and/or "rgb" (3-channel tanh image). The layout predictor uses both; the
    direct-synthesis baseline uses only "rgb".
    """

    def __init__(self, base: int = 32, cmax: int = 512, depth: int = 4,
                 latent_dim: int = 512, layout_channels: int = 8,
                 heads: tuple[str, ...] = ("layout", "rgb"), in_channels: int = 3):
        super().__init__()
        self.heads = tuple(heads)
        self.stem = EqualizedConv2d(in_channels, base, 3)
        downs, widths = [], [base]
        ch = base
        for _ in range(depth):
            nxt = min(ch * 2, cmax)
            downs.append(AdaInResBlock(ch, nxt, latent_dim, resample="down"))
            widths.append(nxt)
            ch = nxt
        self.downs = nn.ModuleList(downs)
        self.bottleneck = AdaInResBlock(ch, ch, latent_dim)
        ups = []
        for i in range(depth):
            skip_ch = widths[depth - 1 - i]
            ups.append(AdaInResBlock(ch + skip_ch, skip_ch, latent_dim))
            ch = skip_ch
        self.ups = nn.ModuleList(ups)
        self.head_layout = EqualizedConv2d(base, layout_channels, 3) if "layout" in heads else None
        self.head_rgb = EqualizedConv2d(base, 3, 3) if "rgb" in heads else None

    def forward(self, contour: torch.Tensor, z: torch.Tensor) -> dict[str, torch.Tensor]:
        h = self.stem(contour)
        skips = []
        for block in self.downs:
            skips.append(h)
            h = block(h, z)
        h = self.bottleneck(h, z)
        for block, skip in zip(self.ups, reversed(skips)):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1), z)
        out = {}
        if self.head_layout is not None:
            out["layout_logits"] = self.head_layout(h)
        if self.head_rgb is not None:
            out["rgb"] = torch.tanh(self.head_rgb(h))
        return out


def predict_layout(unet: AdaInUNet, contour: torch.Tensor, z_layout: torch.Tensor) -> LatentLayout:
    """Run the layout predictor: softmax layout map plus auxiliary RGB."""
    out = unet(contour, z_layout)
    logits = out["layout_logits"]
    return LatentLayout(map=torch.softmax(logits, dim=1), aux_rgb=out["rgb"], logits=logits)


class SpadeGenerator(nn.Module):
    """Image generator: style latent seeds a low-res tensor, SPADE blocks upsample.

    The dense spatial input conditions every block (resized per block); widths
    halve per upsampling step from ``cmax`` down to ``base`` at the output
    resolution. Output is tanh-bounded RGB.
    """

    def __init__(self, resolution: int, spatial_channels: int, base: int = 32,
                 cmax: int = 512, start: int = 4, latent_dim: int = 512,
                 hidden: int = 64, style_in_spade: bool = False):
        super().__init__()
        if resolution < start or resolution & (resolution - 1):
            raise ValueError(f"resolution must be a power of two >= {start}, got {resolution}")
        self.start = start
        n_ups = int(math.log2(resolution // start))
        widths = [min(base * 2 ** (n_ups - i), cmax) for i in range(n_ups + 1)]
        self.fc = EqualizedLinear(latent_dim, widths[0] * start * start)
        z_dim = latent_dim if style_in_spade else None
        blocks = [SpadeResBlock(widths[0], widths[0], spatial_channels, hidden, z_dim)]
        for i in range(n_ups):
            blocks.append(SpadeResBlock(widths[i], widths[i + 1], spatial_channels, hidden, z_dim))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = EqualizedConv2d(widths[-1], 3, 3)

    def forward(self, spatial: torch.Tensor, z_style: torch.Tensor) -> torch.Tensor:
        x = self.fc(z_style).reshape(z_style.shape[0], -1, self.start, self.start)
        x = self.blocks[0](x, spatial, z_style)
        for block in self.blocks[1:]:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(x, spatial, z_style)
        return torch.tanh(self.to_rgb(F.leaky_relu(x, 0.2)))


class Discriminator(nn.Module):
    """Resnet discriminator over [-1, 1] images; one unnormalized logit per image."""

    def __init__(self, resolution: int, base: int = 32, cmax: int = 512):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
        self.from_rgb = EqualizedConv2d(3, base, 3)
        blocks = []
        ch, res = base, resolution
        while res > 4:
            nxt = min(ch * 2, cmax)
            blocks.append(DownBlock(ch, nxt))
            ch, res = nxt, res // 2
        self.blocks = nn.ModuleList(blocks)
        self.conv_final = EqualizedConv2d(ch, ch, 3)
        self.fc1 = EqualizedLinear(ch * 4 * 4, ch)
        self.fc2 = EqualizedLinear(ch, 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.from_rgb(image), 0.2)
        for block in self.blocks:
            h = block(h)
        h = F.leaky_relu(self.conv_final(h), 0.2)
        h = F.leaky_relu(self.fc1(h.flatten(1)), 0.2)
        return self.fc2(h).squeeze(1)


# ---------------------------------------------------------------------------
# init and checkpoint I/O


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize deterministically: weights standard-normal, biases zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith("bias"):
                param.zero_()
            else:
                param.copy_(torch.randn(param.shape, generator=gen))
    return module


NETWORK_NAMES = ("encoder", "layout_gen", "image_gen", "discriminator")


def save_checkpoint(directory: str | Path, networks: dict[str, nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer] | None,
                    step: int, epoch: int, config: RunConfig,
                    stage: str, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in networks.items():
        torch.save(net.state_dict(), directory / name)
    for name, opt in (optimizers or {}).items():
        torch.save(opt.state_dict(), directory / f"opt_{name}")
    manifest = {
        "step": step,
        "epoch": epoch,
        "stage": stage,
        "networks": sorted(networks),
        "optimizers": sorted(optimizers or {}),
        "config": config.to_dict(),
        "config_hash": config.config_hash,
        "rng": {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()},
    }
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory: str | Path, networks: dict[str, nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer] | None = None,
                    restore_rng: bool = False) -> dict:
    """Load weight/optimizer blobs into existing modules; returns the manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    for name, net in networks.items():
        blob = directory / name
        if not blob.exists():
            raise FileNotFoundError(f"checkpoint blob missing: {blob}")
        net.load_state_dict(torch.load(blob, weights_only=True))
    for name, opt in (optimizers or {}).items():
        blob = directory / f"opt_{name}"
        if blob.exists():
            opt.load_state_dict(torch.load(blob, weights_only=False))
    if restore_rng and "torch" in manifest.get("rng", {}):
        raw = base64.b64decode(manifest["rng"]["torch"])
        torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    return manifest

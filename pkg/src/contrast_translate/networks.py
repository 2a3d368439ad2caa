"""Discriminator, generator and style encoder.

All networks work on NCHW tensors with pixel values in [-1, 1]. The
discriminator has a shared residual trunk and two unshared heads: a
unit-norm contrastive representation and a scalar real/fake logit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

ADAIN_EPS = 1e-5
LRELU_SLOPE = 0.2


@dataclass
class NetworkSpec:
    resolution: int = 128
    img_channels: int = 3
    base_channels: int = 64
    max_channels: int = 512
    style_dim: int = 128
    rep_dim: int = 256
    # residual downsampling blocks in the D / E trunk; None derives it so the
    # trunk ends at 4x4
    num_blocks: int | None = None
    gen_down: int = 3
    gen_mid: int = 4

    def trunk_blocks(self) -> int:
        if self.num_blocks is not None:
            n = self.num_blocks
            if n < 1 or self.resolution % (2 ** n) != 0:
                raise ValueError(
                    f"resolution {self.resolution} is not divisible by 2**{n}")
            return n
        n = math.log2(self.resolution / 4) if self.resolution >= 4 else -1
        if n < 1 or not float(n).is_integer():
            raise ValueError(
                f"resolution {self.resolution} does not reach 4x4 after repeated "
                "2x downsampling; use 4 * 2**k (e.g. 64, 128, 256)")
        return int(n)

    def head_kernel(self) -> int:
        return self.resolution // 2 ** self.trunk_blocks()

    def validate(self) -> None:
        self.trunk_blocks()
        if self.gen_down < 0 or self.resolution % (2 ** self.gen_down) != 0:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by 2**gen_down={self.gen_down}")
        if self.gen_mid < 0:
            raise ValueError("gen_mid must be >= 0")
        for name in ("img_channels", "base_channels", "max_channels", "style_dim", "rep_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def channels(self, n_stages: int) -> list[int]:
        """Channel widths after the stem and each of `n_stages` blocks."""
        chs = [self.base_channels]
        for _ in range(n_stages):
            chs.append(min(chs[-1] * 2, self.max_channels))
        return chs


def he_init(module: nn.Module) -> None:
    # biases keep the default small uniform init so a constant-zero image does
    # not collapse the contrastive head to the zero vector
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")


def adain(features: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor,
          eps: float = ADAIN_EPS) -> torch.Tensor:
    """Per-instance, per-channel standardization followed by an affine map.

    features: (N, C, H, W); scale, bias: (N, C) or (C,).
    """
    mu = features.mean(dim=(2, 3), keepdim=True)
    sigma = features.var(dim=(2, 3), keepdim=True, unbiased=False).sqrt()
    normalized = (features - mu) / (sigma + eps)
    if scale.dim() == 1:
        scale, bias = scale.unsqueeze(0), bias.unsqueeze(0)
    return scale[:, :, None, None] * normalized + bias[:, :, None, None]


class AdaIN(nn.Module):
    def __init__(self, style_dim: int, num_features: int):
        super().__init__()
        self.num_features = num_features
        self.fc = nn.Linear(style_dim, num_features * 2)

    def forward(self, x, s):
        h = self.fc(s)
        gamma, beta = h.chunk(2, dim=1)
        return adain(x, 1 + gamma, beta)


class ResBlk(nn.Module):
    """Pre-activation residual block, optionally instance-normalized."""

    def __init__(self, dim_in, dim_out, normalize=False, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.normalize = normalize
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if normalize:
            self.norm1 = nn.InstanceNorm2d(dim_in, affine=True)
            self.norm2 = nn.InstanceNorm2d(dim_in, affine=True)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        # pooling and a bias-free 1x1 conv commute; pool first, it is cheaper
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.learned_sc:
            x = self.conv1x1(x)
        return x

    def _residual(self, x):
        if self.normalize:
            x = self.norm1(x)
        x = F.leaky_relu(x, LRELU_SLOPE)
        x = self.conv1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        x = F.leaky_relu(x, LRELU_SLOPE)
        return self.conv2(x)

    def forward(self, x):
        return (self._shortcut(x) + self._residual(x)) / math.sqrt(2)


class AdainResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.learned_sc:
            x = self.conv1x1(x)
        return x

    def _residual(self, x, s):
        x = F.leaky_relu(self.norm1(x, s), LRELU_SLOPE)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x, s), LRELU_SLOPE)
        return self.conv2(x)

    def forward(self, x, s):
        return (self._shortcut(x) + self._residual(x, s)) / math.sqrt(2)


def _head(dim: int, kernel: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.LeakyReLU(LRELU_SLOPE),
        nn.Conv2d(dim, dim, kernel, 1, 0),
        nn.LeakyReLU(LRELU_SLOPE),
        nn.Flatten(),
        nn.Linear(dim, out_dim),
    )


class _Trunk(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        n = spec.trunk_blocks()
        chs = spec.channels(n)
        self.stem = nn.Conv2d(spec.img_channels, chs[0], 1, 1, 0)
        self.blocks = nn.ModuleList(
            ResBlk(chs[i], chs[i + 1], downsample=True) for i in range(n))
        self.out_channels = chs[-1]

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return x


class Discriminator(nn.Module):
    """Shared trunk with a contrastive head and an adversarial head."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.trunk = _Trunk(spec)
        dim, k = self.trunk.out_channels, spec.head_kernel()
        self.ct_head = _head(dim, k, spec.rep_dim)
        self.adv_head = _head(dim, k, 1)
        self.apply(he_init)

    def contrastive(self, x):
        return F.normalize(self.ct_head(self.trunk(x)), dim=1)

    def adversarial(self, x):
        return self.adv_head(self.trunk(x))

    def forward(self, x):
        h = self.trunk(x)
        return F.normalize(self.ct_head(h), dim=1), self.adv_head(h)


class StyleEncoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.trunk = _Trunk(spec)
        dim = self.trunk.out_channels
        self.head = nn.Sequential(
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(dim, dim, spec.head_kernel(), 1, 0),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Flatten(),
            nn.Linear(dim, dim),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Linear(dim, spec.style_dim),
        )
        self.apply(he_init)

    def forward(self, x):
        return self.head(self.trunk(x))


class Generator(nn.Module):
    """Encoder-decoder with IN downsampling and AdaIN-conditioned decoding.

    The intermediate blocks are split in half: the first half is part of the
    IN-normalized encoder, the second half is AdaIN-conditioned.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        chs = spec.channels(spec.gen_down)
        bottleneck = chs[-1]
        n_in_mid = spec.gen_mid // 2
        self.stem = nn.Conv2d(spec.img_channels, chs[0], 1, 1, 0)
        self.encode = nn.ModuleList(
            ResBlk(chs[i], chs[i + 1], normalize=True, downsample=True)
            for i in range(spec.gen_down))
        for _ in range(n_in_mid):
            self.encode.append(ResBlk(bottleneck, bottleneck, normalize=True))
        self.decode = nn.ModuleList(
            AdainResBlk(bottleneck, bottleneck, spec.style_dim)
            for _ in range(spec.gen_mid - n_in_mid))
        for i in reversed(range(spec.gen_down)):
            self.decode.append(
                AdainResBlk(chs[i + 1], chs[i], spec.style_dim, upsample=True))
        self.to_rgb = nn.Sequential(
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(chs[0], spec.img_channels, 1, 1, 0),
        )
        self.apply(he_init)

    def forward(self, x, s):
        if s.dim() != 2 or s.shape[1] != self.spec.style_dim:
            raise ValueError(
                f"style code must have shape (N, {self.spec.style_dim}), got {tuple(s.shape)}")
        if s.shape[0] != x.shape[0]:
            raise ValueError("style code batch does not match image batch")
        x = self.stem(x)
        for block in self.encode:
            x = block(x)
        for block in self.decode:
            x = block(x, s)
        return torch.tanh(self.to_rgb(x))


def build_discriminator(spec: NetworkSpec) -> Discriminator:
    return Discriminator(spec)


def build_style_encoder(spec: NetworkSpec) -> StyleEncoder:
    return StyleEncoder(spec)


def build_generator(spec: NetworkSpec) -> Generator:
    return Generator(spec)


def layer_output_shapes(net: nn.Module, *inputs) -> list[tuple[str, tuple[int, ...]]]:
    """Run `net` and record the output shape of each table-level layer.

    Shapes are reported per sample in (H, W, C) order, or (C,) for vectors,
    matching how architectures are usually tabulated.
    """
    if isinstance(net, Generator):
        layers = [("stem", net.stem)]
        layers += [(f"encode.{i}", m) for i, m in enumerate(net.encode)]
        layers += [(f"decode.{i}", m) for i, m in enumerate(net.decode)]
        layers += [("to_rgb.conv", net.to_rgb[1])]
    elif isinstance(net, (Discriminator, StyleEncoder)):
        layers = [("stem", net.trunk.stem)]
        layers += [(f"block.{i}", m) for i, m in enumerate(net.trunk.blocks)]
        heads = [("ct", net.ct_head), ("adv", net.adv_head)] if isinstance(
            net, Discriminator) else [("style", net.head)]
        for prefix, head in heads:
            layers += [(f"{prefix}.{i}.{type(m).__name__}", m) for i, m in enumerate(head)]
    else:
        raise TypeError(f"unsupported network {type(net).__name__}")

    records: dict[str, tuple[int, ...]] = {}
    handles = []
    for name, module in layers:
        def hook(_m, _inp, out, name=name):
            shape = tuple(out.shape[1:])
            records[name] = (shape[1], shape[2], shape[0]) if len(shape) == 3 else shape
        handles.append(module.register_forward_hook(hook))
    try:
        with torch.no_grad():
            net(*inputs)
    finally:
        for h in handles:
            h.remove()
    return [(name, records[name]) for name, _ in layers]


def _named_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


@torch.no_grad()
def ema_update(shadow: nn.Module, live: nn.Module, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * live, parameter-wise, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    s_params, l_params = _named_tensors(shadow), _named_tensors(live)
    if s_params.keys() != l_params.keys():
        raise ValueError("shadow and live modules have different parameter structure")
    for name, p in s_params.items():
        q = l_params[name]
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch for parameter {name}: {p.shape} vs {q.shape}")
        if decay == 0.0:
            p.copy_(q)
        elif decay != 1.0:
            p.mul_(decay).add_(q, alpha=1.0 - decay)


def make_shadow(module: nn.Module) -> nn.Module:
    shadow = copy.deepcopy(module)
    for p in shadow.parameters():
        p.requires_grad_(False)
    return shadow.eval()


def set_requires_grad(modules: Iterable[nn.Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)

"""Positive-view augmentation and random patch sampling.

Every function takes an explicit ``torch.Generator`` so a pipeline is
bit-reproducible from its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

MIN_CROP = 8


@dataclass
class AugmentationPolicy:
    crop_scale_min: float = 0.125
    crop_scale_max: float = 1.0
    hflip_prob: float = 0.5
    use_color: bool = True
    use_affine: bool = True
    rotation_max_deg: float = 15.0
    shear_max_deg: float = 10.0
    shift_max_frac: float = 0.1
    color_jitter_strength: float = 1.0
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2

    def validate(self) -> None:
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise ValueError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        for name in ("hflip_prob", "color_jitter_prob", "grayscale_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        for name in ("rotation_max_deg", "shear_max_deg", "shift_max_frac",
                     "color_jitter_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class PatchSpec:
    count: int = 4
    scale_min: float = 0.125
    scale_max: float = 1.0

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("patch count must be at least 1")
        if not 0 < self.scale_min <= self.scale_max <= 1:
            raise ValueError("need 0 < scale_min <= scale_max <= 1")


def _uniform(gen, lo, hi):
    return lo + (hi - lo) * torch.rand((), generator=gen).item()


def _randint(gen, hi):
    # uniform integer in [0, hi]
    return int(torch.randint(0, hi + 1, (), generator=gen).item())


def _crop_resize(img: torch.Tensor, top: int, left: int, side: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    crop = img[..., top:top + side, left:left + side]
    if side == h and side == w:
        return crop
    squeeze = crop.dim() == 3
    if squeeze:
        crop = crop.unsqueeze(0)
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


def _clamp_side(side: int, size: int) -> int:
    return max(min(MIN_CROP, size), min(side, size))


def random_resized_crop(img: torch.Tensor, scale_min: float, scale_max: float,
                        gen: torch.Generator) -> torch.Tensor:
    """Square crop whose area fraction is uniform in [scale_min**2, scale_max**2]."""
    size = min(img.shape[-2:])
    area = _uniform(gen, scale_min ** 2, scale_max ** 2)
    side = _clamp_side(int(round(math.sqrt(area) * size)), size)
    top = _randint(gen, img.shape[-2] - side)
    left = _randint(gen, img.shape[-1] - side)
    return _crop_resize(img, top, left, side)


def _affine(img: torch.Tensor, policy: AugmentationPolicy, gen) -> torch.Tensor:
    angle = math.radians(_uniform(gen, -policy.rotation_max_deg, policy.rotation_max_deg))
    shear = math.radians(_uniform(gen, -policy.shear_max_deg, policy.shear_max_deg))
    tx = _uniform(gen, -policy.shift_max_frac, policy.shift_max_frac) * 2
    ty = _uniform(gen, -policy.shift_max_frac, policy.shift_max_frac) * 2
    cos, sin = math.cos(angle), math.sin(angle)
    kw = dict(dtype=img.dtype, device=img.device)
    rot = torch.tensor([[cos, -sin], [sin, cos]], **kw)
    shr = torch.tensor([[1.0, math.tan(shear)], [0.0, 1.0]], **kw)
    theta = torch.zeros(1, 2, 3, **kw)
    theta[0, :, :2] = rot @ shr
    theta[0, :, 2] = torch.tensor([tx, ty], **kw)
    grid = F.affine_grid(theta, [1, *img.shape], align_corners=False)
    out = F.grid_sample(img.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="reflection", align_corners=False)
    return out.squeeze(0)


def _color(img: torch.Tensor, policy: AugmentationPolicy, gen) -> torch.Tensor:
    s = policy.color_jitter_strength
    rgb = img.shape[0] == 3
    x = (img + 1) / 2
    if torch.rand((), generator=gen).item() < policy.color_jitter_prob:
        b = _uniform(gen, max(0.0, 1 - 0.4 * s), 1 + 0.4 * s)
        c = _uniform(gen, max(0.0, 1 - 0.4 * s), 1 + 0.4 * s)
        sat = _uniform(gen, max(0.0, 1 - 0.4 * s), 1 + 0.4 * s)
        hue = _uniform(gen, -min(0.5, 0.1 * s), min(0.5, 0.1 * s))
        x = TF.adjust_brightness(x, b).clamp(0, 1)
        if rgb:
            x = TF.adjust_contrast(x, c).clamp(0, 1)
            x = TF.adjust_saturation(x, sat).clamp(0, 1)
            x = TF.adjust_hue(x, hue).clamp(0, 1)
    if rgb and torch.rand((), generator=gen).item() < policy.grayscale_prob:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    return x * 2 - 1


def augment_one(img: torch.Tensor, policy: AugmentationPolicy,
                gen: torch.Generator) -> torch.Tensor:
    x = random_resized_crop(img, policy.crop_scale_min, policy.crop_scale_max, gen)
    if torch.rand((), generator=gen).item() < policy.hflip_prob:
        x = x.flip(-1)
    if policy.use_affine:
        x = _affine(x, policy, gen)
    if policy.use_color:
        x = _color(x, policy, gen)
    return x.clamp(-1, 1)


def augment(images: torch.Tensor, policy: AugmentationPolicy,
            gen: torch.Generator) -> torch.Tensor:
    """Augment a single (C, H, W) image or each image of an (N, C, H, W) batch."""
    if images.dim() == 3:
        return augment_one(images, policy, gen)
    return torch.stack([augment_one(img, policy, gen) for img in images])


def query_crop(images: torch.Tensor, policy: AugmentationPolicy,
               gen: torch.Generator) -> torch.Tensor:
    """Random resized crop only, with the augmentation's crop range."""
    return torch.stack([
        random_resized_crop(img, policy.crop_scale_min, policy.crop_scale_max, gen)
        for img in images])


def sample_patch_boxes(height: int, width: int, spec: PatchSpec,
                       gen: torch.Generator) -> list[tuple[int, int, int]]:
    """(top, left, side) for each square patch described by ``spec``.

    Side length is uniform over the linear fraction [scale_min, scale_max] of
    the shorter image side.
    """
    spec.validate()
    size = min(height, width)
    lo = max(min(MIN_CROP, size), math.ceil(spec.scale_min * size - 1e-9))
    hi = max(lo, math.floor(spec.scale_max * size + 1e-9))
    boxes = []
    for _ in range(spec.count):
        side = int(torch.randint(lo, hi + 1, (), generator=gen).item())
        top = _randint(gen, height - side)
        left = _randint(gen, width - side)
        boxes.append((top, left, side))
    return boxes


def sample_patches(image: torch.Tensor, spec: PatchSpec,
                   gen: torch.Generator) -> list[torch.Tensor]:
    """M random square patches of a (C, H, W) image, each resized to H x W."""
    boxes = sample_patch_boxes(image.shape[-2], image.shape[-1], spec, gen)
    return [_crop_resize(image, t, l, s) for t, l, s in boxes]


def batch_patches(images: torch.Tensor, spec: PatchSpec,
                  gen: torch.Generator) -> torch.Tensor:
    """(N, C, H, W) -> (N * M, C, H, W), patches of image i are contiguous."""
    out = []
    for img in images:
        out.extend(sample_patches(img, spec, gen))
    return torch.stack(out)

"""Image datasets: folder loading, a synthetic colour/shape set, batch order."""

from __future__ import annotations

import colorsys
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass
class DatasetSpec:
    root: str = ""
    resolution: int = 128
    center_crop: int | None = None
    label_file: str | None = None
    split: str = "train"

    def validate(self) -> None:
        if self.resolution % 32 != 0:
            raise ValueError(f"dataset resolution {self.resolution} must be divisible by 32")
        if self.center_crop is not None and self.center_crop < self.resolution:
            raise ValueError("center_crop must be >= resolution")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")


@dataclass
class SyntheticStyleSpec:
    num_images: int = 400
    resolution: int = 64
    num_styles: int = 2
    structure_generator: str = "shapes"
    style_generator: str = "solid"
    seed: int = 0

    def validate(self) -> None:
        if self.num_styles < 2:
            raise ValueError("num_styles must be >= 2")
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if self.structure_generator not in STRUCTURES:
            raise ValueError(f"unknown structure_generator {self.structure_generator!r}")
        if self.style_generator not in ("solid", "striped"):
            raise ValueError(f"unknown style_generator {self.style_generator!r}")


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, C, H, W) in [-1, 1]
    labels: torch.Tensor | None = None  # (N,) class ids or (N, A) binary attributes
    paths: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    attribute_names: list[str] = field(default_factory=list)
    masks: torch.Tensor | None = None  # synthetic only: (N, H, W) bool
    skipped: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def multilabel(self) -> bool:
        return self.labels is not None and self.labels.dim() == 2


def to_unit_range(img_uint8: torch.Tensor) -> torch.Tensor:
    return img_uint8.float() / 127.5 - 1.0


def preprocess(pil: Image.Image, resolution: int, center_crop: int | None = None) -> torch.Tensor:
    x = TF.pil_to_tensor(pil.convert("RGB"))
    if center_crop is not None:
        x = TF.center_crop(x, [center_crop, center_crop])
    if tuple(x.shape[-2:]) != (resolution, resolution):
        x = TF.resize(x.float(), [resolution, resolution],
                      interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
        x = x.clamp(0, 255)
    return to_unit_range(x)


def _split_dir(spec: DatasetSpec) -> Path:
    root = Path(spec.root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    return root / spec.split if (root / spec.split).is_dir() else root


def _read_label_file(path: Path, rel_paths: list[str]):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    table = {}
    for row in body:
        table[row[0]] = row[1:]
        table.setdefault(Path(row[0]).name, row[1:])
    if len(header) == 2:
        names = sorted({table[k][0] for k in table})
        lookup = {n: i for i, n in enumerate(names)}
        labels = [lookup[table.get(p, table.get(Path(p).name))[0]] for p in rel_paths]
        return torch.tensor(labels), names, []
    attrs = header[1:]
    labels = [[1 if float(v) > 0 else 0 for v in table.get(p, table.get(Path(p).name))]
              for p in rel_paths]
    return torch.tensor(labels), [], attrs


def load_dataset(spec: DatasetSpec) -> ImageDataset:
    """Decode every image under the split directory in sorted path order.

    Images in class subdirectories get the subdirectory name as an
    evaluation label unless a label file is given.
    """
    spec.validate()
    base = _split_dir(spec)
    files = sorted(p for p in base.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    images, rel_paths, skipped = [], [], 0
    for p in files:
        try:
            with Image.open(p) as pil:
                images.append(preprocess(pil, spec.resolution, spec.center_crop))
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", p, exc)
            skipped += 1
            continue
        rel_paths.append(p.relative_to(base).as_posix())
    if not images:
        raise ValueError(f"no decodable images found under {base}")
    ds = ImageDataset(images=torch.stack(images), paths=rel_paths, skipped=skipped)
    if spec.label_file:
        ds.labels, ds.class_names, ds.attribute_names = _read_label_file(
            Path(spec.label_file), rel_paths)
    else:
        dirs = [Path(r).parent.as_posix() for r in rel_paths]
        if all(d != "." for d in dirs):
            ds.class_names = sorted(set(dirs))
            lookup = {n: i for i, n in enumerate(ds.class_names)}
            ds.labels = torch.tensor([lookup[d] for d in dirs])
    return ds


# ---------------------------------------------------------------- synthetic

BACKGROUND = 0.0
FOREGROUND_THRESHOLD = 0.35


def _shape_mask(kind: int, cx, cy, radius, angle, res) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == 0:
        return dx ** 2 + dy ** 2 <= radius ** 2
    if kind == 1:
        half = radius / np.sqrt(2) * 1.2
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # triangle: intersection of three half-planes
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = angle + np.pi / 2 + k * 2 * np.pi / 3
        inside &= (dx * np.cos(a) + dy * np.sin(a)) <= radius * 0.5
    return inside


def _shapes(rng: np.random.Generator, res: int) -> np.ndarray:
    kind = int(rng.integers(0, 3))
    radius = rng.uniform(0.17, 0.3) * res
    cx = rng.uniform(radius, res - radius)
    cy = rng.uniform(radius, res - radius)
    angle = rng.uniform(0, 2 * np.pi)
    return _shape_mask(kind, cx, cy, radius, angle, res)


STRUCTURES = {"shapes": _shapes}


def style_palette(num_styles: int) -> torch.Tensor:
    """Reference foreground colour of each style class, in [-1, 1]."""
    cols = [colorsys.hsv_to_rgb(k / num_styles, 0.9, 0.95) for k in range(num_styles)]
    return torch.tensor(cols, dtype=torch.float32) * 2 - 1


def make_synthetic(spec: SyntheticStyleSpec) -> ImageDataset:
    """Images whose structure (shape, position, orientation) and style
    (foreground colour class, optionally a stripe texture) are sampled
    independently. Labels are the style classes.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    res, k = spec.resolution, spec.num_styles
    labels = rng.permutation(np.arange(spec.num_images) % k)
    images = np.empty((spec.num_images, 3, res, res), dtype=np.float32)
    masks = np.empty((spec.num_images, res, res), dtype=bool)
    yy, xx = np.mgrid[0:res, 0:res]
    for i, label in enumerate(labels):
        mask = STRUCTURES[spec.structure_generator](rng, res)
        hue = (label / k + rng.uniform(-0.25, 0.25) / k) % 1.0
        sat = rng.uniform(0.75, 1.0)
        val = rng.uniform(0.8, 1.0)
        color = np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 2 - 1
        fg = np.broadcast_to(color[:, None, None], (3, res, res)).copy()
        if spec.style_generator == "striped":
            period = 4 + 2 * label
            phase = rng.uniform(0, period)
            stripes = ((xx + yy * (label % 2) + phase) % period) < period / 2
            fg = fg * np.where(stripes, 1.0, 0.7)[None]
        img = np.full((3, res, res), BACKGROUND, dtype=np.float64)
        img[:, mask] = fg[:, mask]
        images[i] = img
        masks[i] = mask
    return ImageDataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        paths=[f"{i:05d}.png" for i in range(spec.num_images)],
        class_names=[f"style{j}" for j in range(k)],
        masks=torch.from_numpy(masks),
    )


def foreground_mask(images: torch.Tensor, background: float = BACKGROUND,
                    threshold: float = FOREGROUND_THRESHOLD) -> torch.Tensor:
    """(N, C, H, W) -> (N, H, W) bool, pixels that differ from the background."""
    return (images - background).abs().amax(dim=1) > threshold


def mask_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter = (a & b).flatten(1).sum(1).float()
    union = (a | b).flatten(1).sum(1).float()
    return torch.where(union > 0, inter / union.clamp_min(1), torch.ones_like(union))


class MeanColorOracle:
    """Classifies synthetic images by their mean foreground colour.

    Returns class scores (negative distance to each palette colour).
    """

    def __init__(self, num_styles: int):
        self.palette = style_palette(num_styles)
        self.num_classes = num_styles

    def mean_color(self, images: torch.Tensor) -> torch.Tensor:
        mask = foreground_mask(images).unsqueeze(1).float()
        count = mask.sum(dim=(2, 3))
        fg_mean = (images * mask).sum(dim=(2, 3)) / count.clamp_min(1)
        whole = images.mean(dim=(2, 3))
        return torch.where(count > 0, fg_mean, whole)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        mean = self.mean_color(images.float())
        # compare chromaticity so brightness jitter does not matter
        mean = mean - mean.mean(dim=1, keepdim=True)
        pal = self.palette - self.palette.mean(dim=1, keepdim=True)
        return -torch.cdist(mean, pal)


def save_dataset(ds: ImageDataset, out_dir: str | Path) -> None:
    """Write PNGs into one subdirectory per class plus a labels.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        cls = ds.class_names[int(ds.labels[i])] if ds.labels is not None else ""
        rel = Path(cls) / ds.paths[i] if cls else Path(ds.paths[i])
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        arr = ((ds.images[i].permute(1, 2, 0) + 1) * 127.5).round().clamp(0, 255)
        Image.fromarray(arr.to(torch.uint8).numpy()).save(out / rel)
        rows.append((rel.as_posix(), cls))
    with open(out / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label"])
        writer.writerows(rows)


# ---------------------------------------------------------------- batching

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def epoch_permutation(n: int, seed: int, epoch: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(derive_seed(seed, 0xDA7A, epoch))
    return torch.randperm(n, generator=gen)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> torch.Tensor:
    """Indices of the batch used at `step`; a function of (seed, step) only.

    Batches are consecutive windows over the concatenation of per-epoch
    permutations, so every index is served exactly once per epoch and a
    batch may straddle an epoch boundary.
    """
    if n < batch_size:
        raise ValueError(f"dataset of {n} images is smaller than batch size {batch_size}")
    epoch, offset = divmod(step * batch_size, n)
    out = epoch_permutation(n, seed, epoch)[offset:offset + batch_size]
    if out.numel() < batch_size:
        rest = epoch_permutation(n, seed, epoch + 1)[:batch_size - out.numel()]
        out = torch.cat([out, rest])
    return out

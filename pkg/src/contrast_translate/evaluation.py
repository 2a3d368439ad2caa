"""Translation metrics and latent style-space analyses."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.utils import make_grid, save_image

logger = logging.getLogger(__name__)

# Hair-colour attributes are additionally averaged into one group score.
CELEBA_ATTRIBUTES = (
    "Bangs", "Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair", "Eyeglasses",
    "Goatee", "Heavy_Makeup", "Male", "Mustache", "Wearing_Hat", "Young",
)
HAIR_COLOR_ATTRIBUTES = ("Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair")


# ------------------------------------------------------------------ FID

def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between N(mu1, sigma1) and N(mu2, sigma2).

    The trace of (sigma1 sigma2)^(1/2) is computed as the trace of the
    symmetric PSD matrix (S1 sigma2 S1)^(1/2) with S1 = sigma1^(1/2), which
    shares its eigenvalues; small negative eigenvalues from round-off are
    clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ValueError("mean and covariance dimensions do not match")
    s1 = (s1 + s1.T) / 2
    s2 = (s2 + s2.T) / 2
    w, v = np.linalg.eigh(s1)
    root1 = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = root1 @ s2 @ root1
    inner = (inner + inner.T) / 2
    tr_covmean = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_covmean
    return float(max(value, 0.0))


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, np.float64)
    if features.shape[0] < 2:
        raise ValueError("at least 2 samples are needed to estimate a covariance")
    return features.mean(axis=0), np.cov(features, rowvar=False, ddof=1).reshape(
        features.shape[1], features.shape[1])


def fid_from_features(a: np.ndarray, b: np.ndarray) -> float:
    return frechet_distance(*feature_statistics(a), *feature_statistics(b))


class RandomConvExtractor(nn.Module):
    """Small frozen random conv net standing in for a pretrained extractor.

    Weights are a deterministic function of ``seed``.
    """

    def __init__(self, in_channels: int = 3, dim: int = 64, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chs = [in_channels, 16, 32, dim]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, 2, 1) for a, b in zip(chs[:-1], chs[1:]))
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2 / fan_in) ** 0.5)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.dim = dim
        self.eval()

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x.float()), 0.2)
        return torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)


@torch.no_grad()
def extract_features(extractor: Callable, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    feats = [extractor(images[i:i + batch_size]).cpu().double() for i in range(0, len(images), batch_size)]
    return torch.cat(feats).numpy()


# ------------------------------------------------------------------ translation

@torch.no_grad()
def translate(generator, encoder, inputs: torch.Tensor, refs: torch.Tensor,
              batch_size: int = 32) -> torch.Tensor:
    """G(inputs[i], E(refs[i])) for paired inputs and references."""
    outs = []
    for i in range(0, len(inputs), batch_size):
        x, r = inputs[i:i + batch_size], refs[i:i + batch_size]
        outs.append(generator(x, encoder(r)))
    return torch.cat(outs)


def sample_reference_indices(n: int, per_input: int, seed: int) -> np.ndarray:
    """(n, per_input) reference indices; never the input itself when avoidable."""
    rng = np.random.default_rng(seed)
    refs = np.empty((n, per_input), dtype=np.int64)
    for i in range(n):
        pool = np.delete(np.arange(n), i) if n > 1 else np.arange(n)
        refs[i] = rng.choice(pool, size=per_input, replace=per_input > len(pool))
    return refs


def evaluate_translation(generator, encoder, images: torch.Tensor, labels: torch.Tensor | None = None,
                         references_per_input: int = 10, oracle: Callable | None = None,
                         extractor: Callable | None = None, seed: int = 0,
                         compute_accuracy: bool | None = None,
                         attribute_names: list[str] | None = None,
                         batch_size: int = 32) -> dict:
    """Translate every test image with randomly drawn test references.

    Reports FID over all outputs against all test images, class-wise mFID
    grouped by reference label, and oracle translation accuracy. For
    multi-label ``labels`` the accuracy is per attribute, averaged.
    """
    if compute_accuracy is None:
        compute_accuracy = labels is not None
    if compute_accuracy and oracle is None:
        raise ValueError("translation accuracy requested but no oracle classifier given")
    if compute_accuracy and labels is None:
        raise ValueError("translation accuracy needs reference labels")
    n = images.shape[0]
    ref_idx = sample_reference_indices(n, references_per_input, seed)
    in_idx = np.repeat(np.arange(n), references_per_input)
    flat_ref = ref_idx.reshape(-1)
    outputs = translate(generator, encoder, images[in_idx], images[flat_ref], batch_size)
    report: dict = {"num_inputs": n, "references_per_input": references_per_input,
                    "num_outputs": int(outputs.shape[0]), "seed": seed}

    if extractor is not None:
        fake = extract_features(extractor, outputs)
        real = extract_features(extractor, images)
        report["fid"] = fid_from_features(fake, real)
        if labels is not None and labels.dim() == 1:
            per_class = {}
            for c in sorted(set(labels.tolist())):
                sel = labels[flat_ref].numpy() == c
                real_sel = labels.numpy() == c
                if sel.sum() < 2 or real_sel.sum() < 2:
                    raise ValueError(f"class {c} has fewer than 2 samples for FID")
                per_class[str(c)] = fid_from_features(fake[sel], real[real_sel])
            report["fid_per_class"] = per_class
            report["mfid"] = float(np.mean(list(per_class.values())))

    if compute_accuracy:
        scores = torch.cat([oracle(outputs[i:i + batch_size]) for i in range(0, len(outputs), batch_size)])
        target = labels[flat_ref]
        if target.dim() == 1:
            pred = scores.argmax(dim=1).cpu()
            report["accuracy"] = float((pred == target).float().mean())
        else:
            pred = (scores.cpu() > 0.5).long()
            per_attr = (pred == target).float().mean(dim=0)
            names = attribute_names or [str(i) for i in range(per_attr.shape[0])]
            report["accuracy_per_attribute"] = {nm: float(a) for nm, a in zip(names, per_attr)}
            report["accuracy"] = float(per_attr.mean())
            hair = [report["accuracy_per_attribute"][h] for h in HAIR_COLOR_ATTRIBUTES
                    if h in report["accuracy_per_attribute"]]
            if hair:
                report["accuracy_hair_color"] = float(np.mean(hair))
    return report


def write_report(report: dict, out_dir: str | Path, name: str = "metrics") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = []
    for key, value in sorted(report.items()):
        if isinstance(value, dict):
            lines += [f"{key}.{k}: {v}" for k, v in sorted(value.items())]
        else:
            lines.append(f"{key}: {value}")
    (out / f"{name}.txt").write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ latent analyses

@torch.no_grad()
def encode_styles(encoder, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    return torch.cat([encoder(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def rank_by_cosine(query_code: torch.Tensor, corpus_codes: torch.Tensor, k: int) -> list[tuple[int, float]]:
    q = F.normalize(query_code.double().reshape(1, -1), dim=1)
    c = F.normalize(corpus_codes.double(), dim=1)
    sims = (c @ q.t()).squeeze(1).tolist()
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return [(i, sims[i]) for i in order[:min(k, len(sims))]]


def similarity_search(query: torch.Tensor, corpus: torch.Tensor, encoder, k: int = 5,
                      corpus_codes: torch.Tensor | None = None) -> list[tuple[int, float]]:
    """Top-k corpus indices by cosine similarity of style codes, descending.

    Ties go to the lower corpus index; ``k`` beyond the corpus size is truncated.
    """
    with torch.no_grad():
        q = encoder(query.unsqueeze(0) if query.dim() == 3 else query)
    if corpus_codes is None:
        corpus_codes = encode_styles(encoder, corpus)
    return rank_by_cosine(q[0], corpus_codes, k)


@torch.no_grad()
def interpolate_styles(x_o: torch.Tensor, x_r: torch.Tensor, steps: int, generator, encoder) -> torch.Tensor:
    """G(x_o, (1 - a) E(x_o) + a E(x_r)) for ``steps`` evenly spaced a in [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    x_o = x_o.unsqueeze(0) if x_o.dim() == 3 else x_o
    x_r = x_r.unsqueeze(0) if x_r.dim() == 3 else x_r
    t_o, t_r = encoder(x_o), encoder(x_r)
    frames = []
    for alpha in np.linspace(0.0, 1.0, steps):
        a = float(alpha)
        frames.append(generator(x_o, (1 - a) * t_o + a * t_r))
    return torch.cat(frames)


# ------------------------------------------------------------------ grids

def _to01(x: torch.Tensor) -> torch.Tensor:
    return ((x.detach().float().cpu() + 1) / 2).clamp(0, 1)


@torch.no_grad()
def translation_grid(generator, encoder, inputs: torch.Tensor, refs: torch.Tensor):
    """Grid with references along the top row and inputs down the first column.

    Returns (grid image, outputs of shape (n_inputs, n_refs, C, H, W)).
    """
    n, m = inputs.shape[0], refs.shape[0]
    codes = encoder(refs)
    outs = torch.stack([generator(inputs[i:i + 1].expand(m, -1, -1, -1), codes) for i in range(n)])
    blank = torch.ones_like(inputs[:1])
    cells = [blank, refs]
    for i in range(n):
        cells += [inputs[i:i + 1], outs[i]]
    grid = make_grid(_to01(torch.cat(cells)), nrow=m + 1, padding=2, pad_value=1.0)
    return grid, outs


def save_translation_grid(generator, encoder, inputs, refs, path) -> torch.Tensor:
    grid, outs = translation_grid(generator, encoder, inputs, refs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image(grid, str(path))
    return outs


def save_row_grid(rows: list[torch.Tensor], path) -> None:
    """Each entry of ``rows`` is an (k, C, H, W) tensor drawn as one row."""
    ncol = max(r.shape[0] for r in rows)
    padded = [torch.cat([r, torch.ones(ncol - r.shape[0], *r.shape[1:], dtype=r.dtype)])
              if r.shape[0] < ncol else r for r in rows]
    grid = make_grid(_to01(torch.cat(padded)), nrow=ncol, padding=2, pad_value=1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image(grid, str(path))


def save_image_tensor(x: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image(_to01(x), str(path))


# ------------------------------------------------------------------ oracle training

def train_oracle_classifier(images: torch.Tensor, labels: torch.Tensor, model: nn.Module | None = None,
                            epochs: int = 10, lr: float = 1e-3, batch_size: int = 64,
                            seed: int = 0) -> nn.Module:
    """Fit a classifier on a labeled training split for use as a translation oracle.

    Defaults to an untrained torchvision ResNet-50. Integer labels train a
    multi-class head; a (N, A) binary matrix trains A sigmoid attributes.
    """
    torch.manual_seed(seed)
    multilabel = labels.dim() == 2
    num_out = labels.shape[1] if multilabel else int(labels.max()) + 1
    if model is None:
        from torchvision.models import resnet50
        model = resnet50(weights=None, num_classes=num_out)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(images), generator=gen)
        for i in range(0, len(images), batch_size):
            idx = perm[i:i + batch_size]
            logits = model(images[idx])
            if multilabel:
                loss = F.binary_cross_entropy_with_logits(logits, labels[idx].float())
            else:
                loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    if multilabel:
        return nn.Sequential(model, nn.Sigmoid()).eval()
    return model

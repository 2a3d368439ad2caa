"""Contrastive losses, the negative-key queue and patch-mean representations."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .augment import AugmentationPolicy, PatchSpec, augment, batch_patches, query_crop

NORM_TOL = 1e-3
DEGENERATE_NORM = 1e-6


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    queue_capacity: int = 2048
    key_momentum: float = 0.999
    # "batch": one key per real image of the full batch; "inputs": input half only
    keys_from: str = "batch"
    patch: PatchSpec = field(default_factory=PatchSpec)

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be positive")
        if not 0 <= self.key_momentum <= 1:
            raise ValueError("key_momentum must lie in [0, 1]")
        if self.keys_from not in ("batch", "inputs"):
            raise ValueError("keys_from must be 'batch' or 'inputs'")
        self.patch.validate()


def _check_unit(name: str, v: torch.Tensor) -> None:
    norms = v.detach().norm(dim=-1)
    if not torch.all((norms - 1).abs() <= NORM_TOL):
        raise ValueError(f"{name} vectors must be unit-norm (got norms in "
                         f"[{norms.min().item():.6g}, {norms.max().item():.6g}])")


def info_nce(query: torch.Tensor, key: torch.Tensor, negatives: torch.Tensor,
             temperature: float, reduction: str = "mean") -> torch.Tensor:
    """(N+1)-way contrastive loss of each query against its key and shared negatives.

    query, key: (K,) or (B, K); negatives: (N, K). Returns the batch mean
    (``reduction="mean"``) or per-query losses (``"none"``).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if negatives.dim() != 2 or negatives.shape[0] == 0:
        raise ValueError("negatives must be a non-empty (N, K) array")
    single = query.dim() == 1
    if single:
        query, key = query.unsqueeze(0), key.unsqueeze(0)
    _check_unit("query", query)
    _check_unit("key", key)
    _check_unit("negative", negatives)
    key, negatives = key.to(query.dtype), negatives.to(query.dtype)
    pos = (query * key).sum(dim=1, keepdim=True)
    neg = query @ negatives.t()
    logits = torch.cat([pos, neg], dim=1) / temperature
    losses = torch.logsumexp(logits, dim=1) - logits[:, 0]
    if single or reduction == "none":
        return losses[0] if single else losses
    return losses.mean()


class NegativeDictionary:
    """Fixed-capacity FIFO queue of unit-norm keys."""

    def __init__(self, capacity: int, dim: int, gen: torch.Generator | None = None,
                 dtype=torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        # placeholder unit vectors so shapes are valid before the first fill
        self.entries = F.normalize(torch.randn(capacity, dim, generator=gen, dtype=dtype), dim=1)
        self.cursor = 0
        self.num_enqueued = 0

    @property
    def full(self) -> bool:
        """True once real keys have filled every slot at least once."""
        return self.num_enqueued >= self.capacity

    def __len__(self) -> int:
        return min(self.num_enqueued, self.capacity)

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> "NegativeDictionary":
        keys = keys.detach()
        if keys.dim() == 1:
            keys = keys.unsqueeze(0)
        _check_unit("key", keys)
        keys = keys.to(self.entries.dtype)
        if keys.shape[0] > self.capacity:
            # only the newest `capacity` keys survive
            skipped = keys.shape[0] - self.capacity
            self.cursor = (self.cursor + skipped) % self.capacity
            self.num_enqueued += skipped
            keys = keys[skipped:]
        n = keys.shape[0]
        idx = (self.cursor + torch.arange(n)) % self.capacity
        self.entries[idx] = keys
        self.cursor = (self.cursor + n) % self.capacity
        self.num_enqueued += n
        return self

    def ordered(self) -> torch.Tensor:
        """Stored keys from oldest to newest."""
        if self.num_enqueued < self.capacity:
            return self.entries[:self.num_enqueued].clone()
        return torch.roll(self.entries, -self.cursor, dims=0).clone()

    def negatives(self) -> torch.Tensor:
        return self.entries.detach()

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {
            "entries": self.entries.clone(),
            "cursor": torch.tensor(self.cursor, dtype=torch.int64),
            "num_enqueued": torch.tensor(self.num_enqueued, dtype=torch.int64),
        }

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        if state["entries"].shape != self.entries.shape:
            raise ValueError("dictionary shape mismatch")
        self.entries = state["entries"].clone().to(self.entries.dtype)
        self.cursor = int(state["cursor"])
        self.num_enqueued = int(state["num_enqueued"])


def enqueue(dictionary: NegativeDictionary, keys: torch.Tensor) -> NegativeDictionary:
    return dictionary.enqueue(keys)


def discriminator_contrastive_loss(images, policy: AugmentationPolicy,
                                   dictionary: NegativeDictionary, d_ct, key_ct,
                                   temperature: float, gen: torch.Generator):
    """Contrastive loss of the discriminator on real images.

    The query view is a random crop through ``d_ct``; the key view is fully
    augmented and encoded by ``key_ct`` without gradient. Returns the loss and
    the keys to enqueue after the update.
    """
    queries = d_ct(query_crop(images, policy, gen))
    with torch.no_grad():
        keys = key_ct(augment(images, policy, gen))
    loss = info_nce(queries, keys, dictionary.negatives(), temperature)
    return loss, keys.detach()


def aggregate_patch_rep(images: torch.Tensor, spec: PatchSpec, d_ct,
                        gen: torch.Generator) -> torch.Tensor:
    """Renormalized mean of the contrastive representations of M random patches."""
    n, m = images.shape[0], spec.count
    patches = batch_patches(images, spec, gen)
    reps = d_ct(patches).view(n, m, -1)
    if m == 1:
        return reps[:, 0]
    mean = reps.mean(dim=1)
    norms = mean.norm(dim=1, keepdim=True)
    degenerate = norms.squeeze(1) < DEGENERATE_NORM
    out = mean / norms.clamp_min(DEGENERATE_NORM)
    if degenerate.any():
        full = d_ct(images[degenerate])
        out = out.clone()
        out[degenerate] = full
    return out


def style_match_loss(x_g: torch.Tensor, x_r: torch.Tensor,
                     dictionary: NegativeDictionary, spec: PatchSpec, d_ct,
                     temperature: float, gen: torch.Generator) -> torch.Tensor:
    """Contrastive match pulling generated images toward their references' style.

    Gradient reaches ``x_g`` only; the reference branch and the dictionary are
    constants. The caller freezes the discriminator's parameters.
    """
    v_g = aggregate_patch_rep(x_g, spec, d_ct, gen)
    with torch.no_grad():
        v_r = aggregate_patch_rep(x_r, spec, d_ct, gen)
    return info_nce(v_g, v_r, dictionary.negatives(), temperature)

"""Training loop: alternating discriminator and generator/encoder updates."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load_file, safe_open, save

from .augment import AugmentationPolicy
from .contrastive import (ContrastiveConfig, NegativeDictionary,
                          discriminator_contrastive_loss, style_match_loss)
from .data import batch_indices, derive_seed
from .networks import (NetworkSpec, build_discriminator, build_generator,
                       build_style_encoder, ema_update, make_shadow, set_requires_grad)
from .objectives import (LossWeights, adv_loss_d, adv_loss_g, cycle_loss, r1_penalty,
                         total_d_loss, total_ge_loss)
from .structs import from_dict, to_dict

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
LOG_FIELDS = ("step", "adv_d", "adv_g", "ct_d", "ct_g", "cyc", "r1")

# stream ids for per-step random generators
_INIT, _DICT, _D_STEP, _G_STEP = 1, 2, 3, 4


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_iters: int = 100_000
    lr: float = 5e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    seed: int = 0
    ema_decay: float = 0.999
    checkpoint_every: int = 10_000
    log_every: int = 100
    sample_every: int = 5_000
    # adversarial real term on the input half only, or on the whole batch
    real_adv_full_batch: bool = False
    # hold both contrastive terms at zero weight until the queue is full once
    contrastive_warmup: bool = True
    device: str = "cpu"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        for name in ("checkpoint_every", "log_every", "sample_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        self.loss_weights.validate()
        self.contrastive.validate()
        self.augmentation.validate()


class Trainer:
    """Owns every piece of mutable training state.

    Randomness is derived from ``(seed, step)`` so that a run restored from a
    checkpoint continues exactly as the uninterrupted run would have.
    """

    def __init__(self, net_spec: NetworkSpec, cfg: TrainConfig,
                 dtype: torch.dtype = torch.float32, run_config: dict | None = None):
        net_spec.validate()
        cfg.validate()
        self.net_spec, self.cfg, self.dtype = net_spec, cfg, dtype
        self.run_config = run_config
        self.device = torch.device(cfg.device)
        torch.manual_seed(derive_seed(cfg.seed, _INIT))
        kw = dict(device=self.device, dtype=dtype)
        self.G = build_generator(net_spec).to(**kw)
        self.E = build_style_encoder(net_spec).to(**kw)
        self.D = build_discriminator(net_spec).to(**kw)
        # momentum copy of the discriminator that produces queue keys
        self.K = make_shadow(self.D)
        self.ema = {"G": make_shadow(self.G), "E": make_shadow(self.E), "D": make_shadow(self.D)}
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt = {name: torch.optim.Adam(getattr(self, name).parameters(), lr=cfg.lr, betas=betas)
                    for name in ("G", "E", "D")}
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, _DICT))
        self.dictionary = NegativeDictionary(cfg.contrastive.queue_capacity, net_spec.rep_dim,
                                             gen=gen, dtype=dtype)
        self.dictionary.entries = self.dictionary.entries.to(self.device)
        self.step = 0

    # ------------------------------------------------------------ internals

    def _gen(self, stream: int, step: int | None = None) -> torch.Generator:
        step = self.step if step is None else step
        return torch.Generator().manual_seed(derive_seed(self.cfg.seed, stream, step))

    @property
    def contrastive_active(self) -> bool:
        return self.dictionary.full or not self.cfg.contrastive_warmup

    def _split(self, batch):
        half = batch.shape[0] // 2
        return batch[:half], batch[half:]

    def d_objective(self, batch: torch.Tensor):
        """Discriminator loss terms for the current step.

        Returns (total loss, parts, keys to enqueue). G and E are run without
        gradient, so their parameters receive none.
        """
        cfg, w = self.cfg, self.cfg.loss_weights
        x_o, x_r = self._split(batch)
        with torch.no_grad():
            x_g = self.G(x_o, self.E(x_r))
        real = batch if cfg.real_adv_full_batch else x_o
        parts = {"adv": adv_loss_d(self.D.adversarial(real), self.D.adversarial(x_g))}
        ct_images = batch if cfg.contrastive.keys_from == "batch" else x_o
        key_ct = self.K.contrastive
        parts["ct"], keys = discriminator_contrastive_loss(
            ct_images, cfg.augmentation, self.dictionary, self.D.contrastive, key_ct,
            cfg.contrastive.temperature, self._gen(_D_STEP))
        parts["r1"] = None
        if w.r1_gamma > 0 and self.step % w.r1_interval == 0:
            parts["r1"] = r1_penalty(self.D.adversarial, real, w.r1_gamma) * w.r1_interval
        scaled = dict(parts)
        if not self.contrastive_active:
            scaled["ct"] = parts["ct"] * 0.0
        return total_d_loss(scaled, w), parts, keys

    def ge_objective(self, batch: torch.Tensor):
        """Generator/encoder loss terms; the discriminator must be frozen by the caller."""
        cfg, w = self.cfg, self.cfg.loss_weights
        x_o, x_r = self._split(batch)
        x_g = self.G(x_o, self.E(x_r))
        parts = {"adv": adv_loss_g(self.D.adversarial(x_g))}
        x_cyc = self.G(x_g, self.E(x_o))
        parts["cyc"] = cycle_loss(x_o, x_cyc)
        parts["ct"] = style_match_loss(
            x_g, x_r, self.dictionary, cfg.contrastive.patch, self.D.contrastive,
            cfg.contrastive.temperature, self._gen(_G_STEP))
        scaled = dict(parts)
        if not self.contrastive_active:
            scaled["ct"] = parts["ct"] * 0.0
        return total_ge_loss(scaled, w), parts

    def _check_finite(self, parts: dict, prefix: str) -> None:
        for name, value in parts.items():
            if value is not None and not torch.isfinite(value).all():
                raise FloatingPointError(
                    f"non-finite {prefix}{name} loss at step {self.step}")

    # ------------------------------------------------------------ public

    def train_step(self, batch: torch.Tensor) -> dict:
        if batch.shape[0] != self.cfg.batch_size:
            raise ValueError(f"expected a batch of {self.cfg.batch_size}, got {batch.shape[0]}")
        batch = batch.to(device=self.device, dtype=self.dtype)
        for m in (self.G, self.E, self.D):
            m.train()

        set_requires_grad([self.G, self.E], False)
        set_requires_grad([self.D], True)
        loss_d, d_parts, keys = self.d_objective(batch)
        self._check_finite(d_parts, "discriminator ")
        self.opt["D"].zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt["D"].step()

        set_requires_grad([self.G, self.E], True)
        set_requires_grad([self.D], False)
        loss_ge, g_parts = self.ge_objective(batch)
        self._check_finite(g_parts, "generator ")
        self.opt["G"].zero_grad(set_to_none=True)
        self.opt["E"].zero_grad(set_to_none=True)
        loss_ge.backward()
        self.opt["G"].step()
        self.opt["E"].step()
        set_requires_grad([self.D], True)

        ema_update(self.K, self.D, self.cfg.contrastive.key_momentum)
        self.dictionary.enqueue(keys)
        for name in ("G", "E", "D"):
            ema_update(self.ema[name], getattr(self, name), self.cfg.ema_decay)
        self.step += 1

        report = {
            "step": self.step,
            "adv_d": d_parts["adv"].item(),
            "adv_g": g_parts["adv"].item(),
            "ct_d": d_parts["ct"].item(),
            "ct_g": g_parts["ct"].item(),
            "cyc": g_parts["cyc"].item(),
            "r1": None if d_parts["r1"] is None else d_parts["r1"].item(),
        }
        return report

    def fit(self, images: torch.Tensor, out_dir: str | Path | None = None,
            callback=None) -> "Trainer":
        """Train on an (N, C, H, W) image tensor until ``total_iters``.

        Writes checkpoints, the loss CSV and sample grids under ``out_dir``.
        """
        cfg = self.cfg
        n = images.shape[0]
        if n == 0:
            raise ValueError("dataset is empty")
        if n < cfg.batch_size:
            raise ValueError(f"dataset of {n} images is smaller than batch size {cfg.batch_size}")
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            for sub in ("checkpoints", "samples", "logs"):
                (out / sub).mkdir(parents=True, exist_ok=True)
        log_path = out / "logs" / "losses.csv" if out is not None else None
        while self.step < cfg.total_iters:
            idx = batch_indices(n, cfg.batch_size, self.step, cfg.seed)
            report = self.train_step(images[idx])
            if log_path is not None:
                append_loss_row(log_path, report)
            if callback is not None:
                callback(self, report)
            if self.step % cfg.log_every == 0:
                logger.info("step %d %s", self.step, format_report(report))
            if out is not None and self.step % cfg.sample_every == 0:
                self.save_samples(images, out / "samples" / f"{self.step:07d}.png")
            if out is not None and self.step % cfg.checkpoint_every == 0:
                self.save_checkpoint(out / "checkpoints" / f"{self.step:07d}.safetensors")
        if out is not None:
            final = out / "checkpoints" / f"{self.step:07d}.safetensors"
            if not final.exists():
                self.save_checkpoint(final)
        return self

    @torch.no_grad()
    def save_samples(self, images: torch.Tensor, path: Path, n: int = 4) -> None:
        from .evaluation import save_translation_grid
        n = min(n, images.shape[0] // 2)
        inputs = images[:n].to(device=self.device, dtype=self.dtype)
        refs = images[n:2 * n].to(device=self.device, dtype=self.dtype)
        save_translation_grid(self.ema["G"], self.ema["E"], inputs, refs, path)

    # ------------------------------------------------------------ checkpoints

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {}
        for name in ("G", "E", "D", "K"):
            for k, v in getattr(self, name).state_dict().items():
                tensors[f"{name}.{k}"] = v
        for name, m in self.ema.items():
            for k, v in m.state_dict().items():
                tensors[f"ema.{name}.{k}"] = v
        for name, opt in self.opt.items():
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    tensors[f"opt.{name}.{idx}.{k}"] = torch.as_tensor(v)
        for k, v in self.dictionary.state_dict().items():
            tensors[f"dict.{k}"] = v
        tensors["step"] = torch.tensor(self.step, dtype=torch.int64)
        return {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        metadata = {
            "format_version": FORMAT_VERSION,
            "step": str(self.step),
            "dtype": str(self.dtype).replace("torch.", ""),
            "network": json.dumps(to_dict(self.net_spec), sort_keys=True),
            "train": json.dumps(to_dict(self.cfg), sort_keys=True),
        }
        if self.run_config is not None:
            metadata["run_config"] = json.dumps(self.run_config, sort_keys=True)
        path.write_bytes(_canonical_safetensors(save(self.state_tensors(), metadata=metadata)))
        return path

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        def sub(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        for name in ("G", "E", "D", "K"):
            getattr(self, name).load_state_dict(sub(f"{name}."))
        for name, m in self.ema.items():
            m.load_state_dict(sub(f"ema.{name}."))
        for name, opt in self.opt.items():
            flat = sub(f"opt.{name}.")
            state: dict[int, dict] = {}
            for k, v in flat.items():
                idx, key = k.split(".", 1)
                state.setdefault(int(idx), {})[key] = v.to(self.device)
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
        self.dictionary.load_state_dict(sub("dict."))
        self.dictionary.entries = self.dictionary.entries.to(self.device)
        self.step = int(tensors["step"])

    @classmethod
    def from_checkpoint(cls, path: str | Path, device: str | None = None) -> "Trainer":
        meta = read_checkpoint_metadata(path)
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        net_spec = from_dict(NetworkSpec, json.loads(meta["network"]))
        cfg = from_dict(TrainConfig, json.loads(meta["train"]))
        if device is not None:
            cfg.device = device
        run_config = json.loads(meta["run_config"]) if "run_config" in meta else None
        trainer = cls(net_spec, cfg, dtype=getattr(torch, meta.get("dtype", "float32")),
                      run_config=run_config)
        trainer.load_state_tensors(load_file(str(path)))
        return trainer


def _canonical_safetensors(blob: bytes) -> bytes:
    """Rewrite the header with sorted keys so equal states give equal bytes.

    The writer emits header entries in hash order, which varies between runs.
    """
    (size,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + size])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + blob[8 + size:]


def read_checkpoint_metadata(path: str | Path) -> dict[str, str]:
    with safe_open(str(path), framework="pt") as f:
        return dict(f.metadata() or {})


def format_report(report: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in report.items()
                    if k != "step" and v is not None)


def append_loss_row(path: Path, report: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(LOG_FIELDS)
        writer.writerow(["" if report.get(k) is None else repr(report[k]) for k in LOG_FIELDS])


def is_finite_report(report: dict) -> bool:
    return all(v is None or math.isfinite(v) for k, v in report.items() if k != "step")

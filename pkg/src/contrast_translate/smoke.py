"""Desk-scale smoke experiment on the synthetic colour/shape dataset.

Style is the foreground colour and structure is the shape, so a working
translator must take the reference's colour (scored by the mean-colour oracle)
while keeping the input's shape mask (scored by IoU).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import replace

import torch

from .config import RunConfig
from .data import MeanColorOracle, SyntheticStyleSpec, foreground_mask, make_synthetic, mask_iou
from .evaluation import translate
from .trainer import Trainer

logger = logging.getLogger(__name__)

ACCURACY_THRESHOLD = 0.8
IOU_THRESHOLD = 0.6
# offsets from the training seed for the held-out sets
_VALIDATION_OFFSET, _TEST_OFFSET = 2000, 1000


@torch.no_grad()
def score_translation(generator, encoder, dataset, num_pairs: int = 200, seed: int = 0,
                      batch_size: int = 50) -> dict:
    """Oracle accuracy and input/output mask IoU over random (input, reference) pairs."""
    g = torch.Generator().manual_seed(seed)
    n = len(dataset)
    inputs = torch.randint(0, n, (num_pairs,), generator=g)
    refs = torch.randint(0, n, (num_pairs,), generator=g)
    outs = translate(generator, encoder, dataset.images[inputs], dataset.images[refs], batch_size)
    oracle = MeanColorOracle(int(dataset.labels.max()) + 1)
    pred = oracle(outs.float()).argmax(dim=1)
    iou = mask_iou(foreground_mask(outs.float()), dataset.masks[inputs])
    return {"accuracy": (pred == dataset.labels[refs]).float().mean().item(),
            "iou": iou.mean().item()}


def _passes(scores: dict) -> bool:
    return scores["accuracy"] >= ACCURACY_THRESHOLD and scores["iou"] >= IOU_THRESHOLD


def run_desk_scale(cfg: RunConfig, seed: int, eval_every: int = 250) -> dict:
    """Train for at most ``cfg.train.total_iters`` steps and score the EMA weights.

    Every ``eval_every`` steps the EMA model is scored on a validation set; training
    stops once both thresholds hold there. The returned scores come from a separate
    test set, so the stopping rule does not select on them.
    """
    spec = cfg.synthetic or SyntheticStyleSpec(resolution=cfg.network.resolution)
    train_set = make_synthetic(replace(spec, seed=spec.seed + seed))
    val_set = make_synthetic(replace(spec, seed=spec.seed + seed + _VALIDATION_OFFSET, num_images=200))
    test_set = make_synthetic(replace(spec, seed=spec.seed + seed + _TEST_OFFSET, num_images=200))
    trainer = Trainer(cfg.network, replace(cfg.train, seed=seed))
    start = time.perf_counter()
    finite = True
    history = []

    class _Stop(Exception):
        pass

    def check(tr, report):
        nonlocal finite
        finite &= all(v is None or math.isfinite(v) for v in report.values())
        if tr.step % eval_every == 0:
            scores = score_translation(tr.ema["G"], tr.ema["E"], val_set, seed=seed)
            history.append({"step": tr.step, **scores})
            logger.info("seed %d step %d validation accuracy %.3f IoU %.3f",
                        seed, tr.step, scores["accuracy"], scores["iou"])
            if _passes(scores):
                raise _Stop

    try:
        trainer.fit(train_set.images, callback=check)
    except _Stop:
        pass
    except FloatingPointError:
        finite = False
    scores = score_translation(trainer.ema["G"], trainer.ema["E"], test_set, seed=seed)
    return {"seed": seed, "iters": trainer.step, "finite": finite, **scores,
            "passed": finite and _passes(scores), "validation": history,
            "seconds": time.perf_counter() - start}

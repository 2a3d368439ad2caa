import pytest
import torch

from contrast_translate.contrastive import ContrastiveConfig
from contrast_translate.networks import NetworkSpec
from contrast_translate.trainer import TrainConfig


def tiny_spec(**kw) -> NetworkSpec:
    """8x8 images, 2-block trunks, a handful of channels."""
    base = dict(resolution=8, base_channels=4, max_channels=8, style_dim=4, rep_dim=8,
                num_blocks=2, gen_down=1, gen_mid=2)
    base.update(kw)
    return NetworkSpec(**base)


def small_spec(**kw) -> NetworkSpec:
    base = dict(resolution=32, base_channels=4, max_channels=16, style_dim=8, rep_dim=16,
                gen_down=2, gen_mid=2)
    base.update(kw)
    return NetworkSpec(**base)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(batch_size=4, total_iters=10, seed=0, log_every=1,
                contrastive=ContrastiveConfig(queue_capacity=8))
    base.update(kw)
    return TrainConfig(**base)


def unit(*shape, gen=None, dtype=torch.float64):
    v = torch.randn(*shape, generator=gen, dtype=dtype)
    return v / v.norm(dim=-1, keepdim=True)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def central_difference(fn, tensors, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor (perturbed in place)."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def grad_rel_error(fn, tensors, eps=1e-6):
    """max |analytic - numeric| / max(|numeric|, |analytic|, tiny) over all entries."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = torch.cat([(t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1)
                          for t in tensors])
    numeric = torch.cat([g.reshape(-1) for g in central_difference(fn, tensors, eps)])
    scale = torch.maximum(analytic.abs().max(), numeric.abs().max()).clamp_min(1e-12)
    return ((analytic - numeric).abs().max() / scale).item()


def directional_check(loss_fn, params, gen, eps=1e-6):
    """Relative error between the analytic and central-difference directional derivative."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    analytic = sum((p.grad * d).sum() for p, d in zip(params, dirs) if p.grad is not None).item()
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d)
    hi = loss_fn().item()
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.sub_(2 * eps * d)
    lo = loss_fn().item()
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d)
    numeric = (hi - lo) / (2 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
